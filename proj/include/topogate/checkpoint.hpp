#pragma once

#include <string>

#include "topogate/model.hpp"
#include "topogate/quality.hpp"

namespace topogate {

/// Versioned model checkpoint: every parameter tensor, the batch-norm
/// running buffers, the model geometry, and the quality calibration the
/// model was trained with.
struct Checkpoint {
    ModelParams<double> params;
    ModelConfig model_cfg;
    QualityConfig quality_cfg;
    std::string config_hash;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Throws CheckpointMismatch when the stored ROI edge or feature width do
/// not match what the caller expects.
Checkpoint load_checkpoint(const std::string& path, int expected_roi_edge,
                           int expected_feature_width);

}  // namespace topogate
