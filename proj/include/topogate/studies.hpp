#pragma once

#include <string>
#include <vector>

#include "topogate/checkpoint.hpp"
#include "topogate/run_config.hpp"
#include "topogate/training.hpp"

namespace topogate {

// Library-level implementations of the CLI commands so tests can call them
// in-process. All tabular outputs are CSV with a header row after a
// "# config_hash=..." comment line; reports are also emitted as JSON. Every
// file is written atomically.

struct RunMainResult {
    std::vector<EvalReport> reports;  // one per variant, report row order
    double kappa_ct = 0.0, tau = 0.0;
    std::string report_csv_path;
};

/// Full cross-validated comparison of all five variants; writes report.csv,
/// report.json and predictions_<variant>.csv (the topogate file carries the
/// gate-vs-quality scatter data).
RunMainResult cmd_run_main(const RunConfig& cfg, const std::string& out_dir);

struct FilterStudyResult {
    EvalReport full, clean;
    std::vector<std::string> retained, removed;  // case ids, disjoint partition
};

/// Evaluates topogate on the full cohort, then recomputes the metrics on the
/// clean subset (measured q_reg >= threshold and no constant-slice flag); the
/// per-fold models are unchanged. The hidden manifest is never consulted.
FilterStudyResult cmd_filter_study(const RunConfig& cfg, const std::string& out_dir);

struct RobustnessRow {
    double noise_hu = 0.0;
    double mean_alpha = 0.0;
    double mean_q_ct = 0.0;
    double mean_q_reg = 0.0;
    double mean_q_topo = 0.0;
};

struct RobustnessResult {
    std::vector<RobustnessRow> rows;
    std::string model_path;  // checkpoint used (saved here when trained in-run)
};

/// Re-noises the FU ROIs at each sweep level and recomputes the quality
/// vector and gate weight with a frozen model (loaded from `model_path` or
/// trained in-run at noise level zero).
RobustnessResult cmd_robustness(const RunConfig& cfg, const std::string& out_dir,
                                const std::string& model_path = "");

/// Generates the synthetic cohort and persists it (NIfTI triples plus
/// manifest.csv) under <out_dir>/cohort.
std::string cmd_gen(const RunConfig& cfg, const std::string& out_dir);

struct QualityCmdResult {
    QualityConfig config;
    int n_cases = 0;
    int constant_slice_cases = 0;
};

/// Computes quality vectors for a persisted cohort directory and writes them
/// as CSV (case_id, q_ct, q_reg, q_topo, flags).
QualityCmdResult cmd_quality(const std::string& in_dir, const std::string& out_csv);

}  // namespace topogate
