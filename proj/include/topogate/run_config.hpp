#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "topogate/quality.hpp"
#include "topogate/synth_cohort.hpp"
#include "topogate/training.hpp"

namespace topogate {

struct StudiesConfig {
    std::vector<double> noise_levels_hu = {0, 10, 20, 40, 80};
    double q_reg_filter_threshold = 0.2;
    bool shuffle_labels = false;      // null-cohort mode for leakage checks
    std::uint64_t shuffle_seed = 1;
};

/// Full run configuration: cohort generation (or a directory to load),
/// quality calibration, training, and study knobs. Parsed from JSON with
/// unknown keys rejected.
struct RunConfig {
    CohortSpec cohort;
    std::string cohort_dir;  // when set, load instead of generating
    QualityConfig quality;
    bool kappa_auto = true;  // calibrate kappa_ct to the cohort median
    bool tau_auto = true;    // calibrate tau to ln2 / median W_inf
    TrainConfig train;
    StudiesConfig studies;
    std::string output_dir = "out";
    std::string hash;  // canonical config hash, filled on parse
};

RunConfig parse_run_config(const std::string& path);
RunConfig parse_run_config_text(const std::string& json_text);

/// Canonical serialization (defaults applied) and its FNV-1a hash.
std::string canonical_config_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

}  // namespace topogate
