#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "topogate/model.hpp"
#include "topogate/quality.hpp"
#include "topogate/volume.hpp"

namespace topogate {

enum class Variant { AppOnly, DeltaOnly, TopoOnly, TopoGate, GateAllFeatures };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);
const std::vector<Variant>& all_variants();  // report row order

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 8;
    int max_epochs = 200;
    int patience = 10;   // epochs without validation improvement
    int k_folds = 5;
    std::uint64_t seed = 42;
    double lambda_brier = 0.5;
    Variant variant = Variant::TopoGate;
    double val_fraction = 0.2;  // training patients held out for early stopping

    void validate() const;
};

// --- metrics -------------------------------------------------------------------

/// Rank-based AUROC (Mann-Whitney), ties counted one half. Throws SingleClass
/// unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Mean squared error between probabilities and binary outcomes.
double brier(const std::vector<double>& scores, const std::vector<int>& labels);

struct ReliabilityBin {
    double bin_center = 0.0;
    double mean_pred = 0.0;      // 0 for empty bins
    double frac_positive = 0.0;  // 0 for empty bins
    int count = 0;
};

/// Equal-width bins on [0,1]; empty bins are emitted with count 0.
std::vector<ReliabilityBin> reliability_bins(const std::vector<double>& scores,
                                             const std::vector<int>& labels, int n_bins);

// --- optimizer -----------------------------------------------------------------

template <typename Real>
struct AdamState {
    long step = 0;
    std::vector<Real> m, v;
    explicit AdamState(std::size_t n = 0) : m(n, Real(0)), v(n, Real(0)) {}
};

/// Standard Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8 and
/// bias-corrected moments.
template <typename Real>
void adam_step(std::vector<Real>& params, const std::vector<Real>& grads,
               AdamState<Real>& state, double lr);

// --- data plumbing ---------------------------------------------------------------

/// One case with everything training needs precomputed: normalized encoder
/// inputs, the quality vector, and the topology-only feature set
/// [q_topo, W_inf, diagram points, total persistence, max persistence].
struct PreparedCase {
    std::vector<float> app, delta;
    QualityVector q;
    std::array<double, 5> topo_features{};
    int label = 0;
    std::string patient_id, case_id;
};

struct PreparedCohort {
    std::vector<PreparedCase> cases;
    int roi_edge = 0;
};

PreparedCohort prepare_cohort(const std::vector<CasePair>& cases,
                              const std::vector<CaseQuality>& qualities);

/// Patient-level k-fold split: patients are shuffled deterministically and
/// dealt round-robin, so all cases of a patient share a fold and fold sizes
/// are balanced to within one patient. Returns case indices per fold.
std::vector<std::vector<int>> kfold_split(const std::vector<std::string>& patient_per_case,
                                          int k, std::uint64_t seed);
std::vector<std::vector<int>> kfold_split(const std::vector<CasePair>& cases, int k,
                                          std::uint64_t seed);

/// Patient-level train/validation split of `idx`, stratified so the
/// validation side contains patients with and without positive cases
/// whenever both kinds exist.
struct TrainValSplit {
    std::vector<int> train, val;
};
TrainValSplit split_train_val(const PreparedCohort& cohort, const std::vector<int>& idx,
                              double val_fraction, std::uint64_t seed);

// --- training ---------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_auroc = 0.0;
};

/// A trained variant: the CNN parameters (unused for the topology-only
/// logistic model) plus the logistic model and its feature standardization.
struct TrainedVariant {
    Variant variant = Variant::TopoGate;
    ModelConfig model_cfg;
    ModelParams<float> cnn;
    std::array<double, 5> topo_w{};
    double topo_b = 0.0;
    std::array<double, 5> topo_mean{};
    std::array<double, 5> topo_sd{};
    std::vector<EpochRecord> history;
    double best_val_auroc = 0.0;
    int best_epoch = 0;
    int epochs_run = 0;
};

/// Trains the configured variant with Adam and early stopping on validation
/// AUROC (best parameters restored). Train and validation must have disjoint
/// patient sets.
TrainedVariant train_variant(const PreparedCohort& cohort, const std::vector<int>& train_idx,
                             const std::vector<int>& val_idx, const TrainConfig& cfg);

/// Eval-mode prediction with diagnostics; alpha is NaN for variants without
/// a mixing weight.
Prediction predict_case(const TrainedVariant& model, const PreparedCase& c);

// --- cross-validation ----------------------------------------------------------------

struct PredictionRow {
    std::string case_id;
    int fold = 0;
    double prob = 0.5;
    double alpha = 0.5;
    QualityVector q;
    int label = 0;
};

struct EvalReport {
    std::string variant;
    std::vector<double> per_fold_auroc;
    double auroc_mean = 0.0;
    double auroc_sd = 0.0;  // population SD across folds
    double brier = 0.0;     // pooled over out-of-fold predictions
    std::vector<ReliabilityBin> reliability;
    std::string config_hash;
};

struct CvResult {
    EvalReport report;
    std::vector<PredictionRow> predictions;  // one per case, out-of-fold
    std::vector<TrainedVariant> fold_models;
};

/// Patient-level k-fold cross-validation: per fold, an inner validation
/// split drives early stopping and the held-out fold is scored with the
/// restored model. Pooled out-of-fold predictions feed Brier and the
/// reliability table.
CvResult evaluate_cv(const PreparedCohort& cohort, const TrainConfig& cfg);

}  // namespace topogate
