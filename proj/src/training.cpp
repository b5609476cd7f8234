#include "topogate/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "topogate/errors.hpp"
#include "topogate/rng.hpp"

namespace topogate {

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::AppOnly: return "app_only";
        case Variant::DeltaOnly: return "delta_only";
        case Variant::TopoOnly: return "topo_only";
        case Variant::TopoGate: return "topogate";
        case Variant::GateAllFeatures: return "gate_all_features";
    }
    return "unknown";
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : all_variants())
        if (variant_name(v) == name) return v;
    throw Error("unknown variant: " + name);
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> order = {Variant::AppOnly, Variant::DeltaOnly,
                                               Variant::TopoOnly, Variant::TopoGate,
                                               Variant::GateAllFeatures};
    return order;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be positive");
    if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
    if (k_folds < 2) throw Error("TrainConfig: k_folds must be >= 2");
    if (patience < 1) throw Error("TrainConfig: patience must be >= 1");
    if (max_epochs < 1) throw Error("TrainConfig: max_epochs must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw Error("TrainConfig: val_fraction must be in (0,1)");
}

// --- metrics -------------------------------------------------------------------

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("auroc: size mismatch");
    if (scores.empty()) throw EmptyInput("auroc: empty input");
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y == 1 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw SingleClass("auroc: need at least one positive and one negative");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks inside tie groups give the one-half tie convention.
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double brier(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw ShapeMismatch("brier: size mismatch");
    if (scores.empty()) throw EmptyInput("brier: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double d = scores[i] - static_cast<double>(labels[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(scores.size());
}

std::vector<ReliabilityBin> reliability_bins(const std::vector<double>& scores,
                                             const std::vector<int>& labels, int n_bins) {
    if (n_bins < 2) throw Error("reliability_bins: need at least 2 bins");
    if (scores.size() != labels.size()) throw ShapeMismatch("reliability_bins: size mismatch");
    std::vector<ReliabilityBin> bins(n_bins);
    for (int b = 0; b < n_bins; ++b) bins[b].bin_center = (b + 0.5) / n_bins;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        int b = static_cast<int>(scores[i] * n_bins);
        b = std::clamp(b, 0, n_bins - 1);
        bins[b].mean_pred += scores[i];
        bins[b].frac_positive += static_cast<double>(labels[i]);
        bins[b].count += 1;
    }
    for (auto& bin : bins) {
        if (bin.count > 0) {
            bin.mean_pred /= bin.count;
            bin.frac_positive /= bin.count;
        }
    }
    return bins;
}

// --- optimizer -----------------------------------------------------------------

template <typename Real>
void adam_step(std::vector<Real>& params, const std::vector<Real>& grads,
               AdamState<Real>& state, double lr) {
    if (params.size() != grads.size() || state.m.size() != params.size() ||
        state.v.size() != params.size())
        throw ShapeMismatch("adam_step: moment buffers not congruent to parameters");
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double m = beta1 * static_cast<double>(state.m[i]) + (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(state.v[i]) + (1.0 - beta2) * g * g;
        state.m[i] = static_cast<Real>(m);
        state.v[i] = static_cast<Real>(v);
        params[i] -= static_cast<Real>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
}

template void adam_step<float>(std::vector<float>&, const std::vector<float>&,
                               AdamState<float>&, double);
template void adam_step<double>(std::vector<double>&, const std::vector<double>&,
                                AdamState<double>&, double);

// --- data plumbing ---------------------------------------------------------------

PreparedCohort prepare_cohort(const std::vector<CasePair>& cases,
                              const std::vector<CaseQuality>& qualities) {
    if (cases.empty()) throw EmptyInput("prepare_cohort: empty cohort");
    if (cases.size() != qualities.size())
        throw ShapeMismatch("prepare_cohort: quality list not aligned with cases");
    PreparedCohort out;
    out.roi_edge = cases[0].fu_roi.dims[0];
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const CasePair& c = cases[i];
        if (c.fu_roi.dims[0] != out.roi_edge || c.fu_roi.dims[1] != out.roi_edge ||
            c.fu_roi.dims[2] != out.roi_edge)
            throw ShapeMismatch("prepare_cohort: ROIs must be cubes of one edge");
        PreparedCase p;
        p.app = appearance_input<float>(c.fu_roi);
        p.delta = difference_input<float>(c.delta);
        p.q = qualities[i].q;
        p.topo_features = {qualities[i].q.q_topo, qualities[i].w_inf,
                           static_cast<double>(qualities[i].diagram_points),
                           qualities[i].total_persistence, qualities[i].max_persistence};
        p.label = c.label;
        p.patient_id = c.patient_id;
        p.case_id = c.case_id;
        out.cases.push_back(std::move(p));
    }
    return out;
}

namespace {

std::vector<std::string> patients_in_first_appearance(
    const std::vector<std::string>& patient_per_case) {
    std::vector<std::string> order;
    for (const auto& p : patient_per_case)
        if (std::find(order.begin(), order.end(), p) == order.end()) order.push_back(p);
    return order;
}

}  // namespace

std::vector<std::vector<int>> kfold_split(const std::vector<std::string>& patient_per_case,
                                          int k, std::uint64_t seed) {
    if (k < 2) throw Error("kfold_split: k must be >= 2");
    std::vector<std::string> patients = patients_in_first_appearance(patient_per_case);
    if (static_cast<int>(patients.size()) < k)
        throw TooFewPatients("kfold_split: fewer distinct patients than folds");

    Prng rng(seed, 0, "kfold");
    rng.shuffle(patients);

    std::vector<std::vector<int>> folds(k);
    for (std::size_t p = 0; p < patients.size(); ++p) {
        const int fold = static_cast<int>(p % k);
        for (std::size_t i = 0; i < patient_per_case.size(); ++i)
            if (patient_per_case[i] == patients[p]) folds[fold].push_back(static_cast<int>(i));
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

std::vector<std::vector<int>> kfold_split(const std::vector<CasePair>& cases, int k,
                                          std::uint64_t seed) {
    std::vector<std::string> ids;
    ids.reserve(cases.size());
    for (const auto& c : cases) ids.push_back(c.patient_id);
    return kfold_split(ids, k, seed);
}

TrainValSplit split_train_val(const PreparedCohort& cohort, const std::vector<int>& idx,
                              double val_fraction, std::uint64_t seed) {
    std::vector<std::string> ids;
    ids.reserve(idx.size());
    for (int i : idx) ids.push_back(cohort.cases[i].patient_id);
    const std::vector<std::string> patients = patients_in_first_appearance(ids);
    if (patients.size() < 2) throw EmptySplit("split_train_val: need at least two patients");

    auto patient_has_positive = [&](const std::string& p) {
        for (int i : idx)
            if (cohort.cases[i].patient_id == p && cohort.cases[i].label == 1) return true;
        return false;
    };
    std::vector<std::string> with_pos, without_pos;
    for (const auto& p : patients)
        (patient_has_positive(p) ? with_pos : without_pos).push_back(p);

    Prng rng(seed, 0, "val-split");
    rng.shuffle(with_pos);
    rng.shuffle(without_pos);

    // Take ~val_fraction of each stratum, always leaving at least one patient
    // of the stratum in training.
    auto take = [&](const std::vector<std::string>& group) {
        std::vector<std::string> taken;
        if (group.size() < 2) return taken;
        std::size_t n = static_cast<std::size_t>(std::lround(val_fraction * group.size()));
        n = std::clamp<std::size_t>(n, 1, group.size() - 1);
        taken.assign(group.begin(), group.begin() + n);
        return taken;
    };
    std::vector<std::string> val_patients = take(with_pos);
    const std::vector<std::string> more = take(without_pos);
    val_patients.insert(val_patients.end(), more.begin(), more.end());
    if (val_patients.empty()) {
        // Two-patient corner: put the later-shuffled patient in validation.
        const std::vector<std::string>& bigger =
            with_pos.size() >= without_pos.size() ? with_pos : without_pos;
        val_patients.push_back(bigger.back());
    }

    TrainValSplit split;
    for (int i : idx) {
        const bool in_val = std::find(val_patients.begin(), val_patients.end(),
                                      cohort.cases[i].patient_id) != val_patients.end();
        (in_val ? split.val : split.train).push_back(i);
    }
    if (split.train.empty() || split.val.empty())
        throw EmptySplit("split_train_val: produced an empty side");
    return split;
}

// --- training ---------------------------------------------------------------------

namespace {

Fusion fusion_of(Variant v) {
    switch (v) {
        case Variant::AppOnly: return Fusion::AppOnly;
        case Variant::DeltaOnly: return Fusion::DeltaOnly;
        case Variant::GateAllFeatures: return Fusion::ConcatAll;
        default: return Fusion::QualityGate;
    }
}

std::array<double, 5> standardize(const TrainedVariant& m, const std::array<double, 5>& f) {
    std::array<double, 5> z;
    for (int j = 0; j < 5; ++j) z[j] = (f[j] - m.topo_mean[j]) / m.topo_sd[j];
    return z;
}

double topo_logit(const TrainedVariant& m, const PreparedCase& c) {
    const std::array<double, 5> z = standardize(m, c.topo_features);
    double s = m.topo_b;
    for (int j = 0; j < 5; ++j) s += m.topo_w[j] * z[j];
    return s;
}

double safe_val_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    bool has_pos = false, has_neg = false;
    for (int y : labels) (y == 1 ? has_pos : has_neg) = true;
    // A single-class validation set carries no ranking signal; 0.5 keeps the
    // early-stopping loop well defined.
    if (!has_pos || !has_neg) return 0.5;
    return auroc(scores, labels);
}

TrainedVariant train_topo_only(const PreparedCohort& cohort, const std::vector<int>& train_idx,
                               const std::vector<int>& val_idx, const TrainConfig& cfg) {
    TrainedVariant model;
    model.variant = Variant::TopoOnly;
    model.model_cfg.roi_edge = cohort.roi_edge;

    // Standardize features on the training split only.
    for (int j = 0; j < 5; ++j) {
        double mean = 0.0;
        for (int i : train_idx) mean += cohort.cases[i].topo_features[j];
        mean /= static_cast<double>(train_idx.size());
        double var = 0.0;
        for (int i : train_idx) {
            const double d = cohort.cases[i].topo_features[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(train_idx.size());
        model.topo_mean[j] = mean;
        model.topo_sd[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }

    std::vector<double> params(6, 0.0);  // w[0..5), b
    AdamState<double> adam(params.size());

    double best = -1.0;
    int since_best = 0;
    std::vector<double> best_params = params;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Prng shuffle_rng(cfg.seed, static_cast<std::uint64_t>(epoch), "epoch-shuffle");
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(stop - start);
            std::vector<double> grad(6, 0.0);
            double batch_loss_sum = 0.0;
            for (std::size_t k = start; k < stop; ++k) {
                const PreparedCase& c = cohort.cases[order[k]];
                for (int j = 0; j < 5; ++j) model.topo_w[j] = params[j];
                model.topo_b = params[5];
                const double s = topo_logit(model, c);
                const double p_raw = stable_sigmoid(s);
                batch_loss_sum += loss_value(p_raw, c.label, cfg.lambda_brier);
                const double clamp = 1e-7;
                const double p = std::min(std::max(p_raw, clamp), 1.0 - clamp);
                const double y = static_cast<double>(c.label);
                const double dLdp = -y / p + (1.0 - y) / (1.0 - p) +
                                    2.0 * cfg.lambda_brier * (p - y);
                const double dpds =
                    (p_raw > clamp && p_raw < 1.0 - clamp) ? p_raw * (1.0 - p_raw) : 0.0;
                const double ds = dLdp * dpds * inv;
                const std::array<double, 5> z = standardize(model, c.topo_features);
                for (int j = 0; j < 5; ++j) grad[j] += ds * z[j];
                grad[5] += ds;
            }
            adam_step(params, grad, adam, cfg.learning_rate);
            loss_sum += batch_loss_sum;
        }

        for (int j = 0; j < 5; ++j) model.topo_w[j] = params[j];
        model.topo_b = params[5];
        std::vector<double> scores;
        std::vector<int> labels;
        for (int i : val_idx) {
            scores.push_back(stable_sigmoid(topo_logit(model, cohort.cases[i])));
            labels.push_back(cohort.cases[i].label);
        }
        const double val = safe_val_auroc(scores, labels);
        model.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val});
        model.epochs_run = epoch;
        if (val > best) {
            best = val;
            best_params = params;
            model.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    for (int j = 0; j < 5; ++j) model.topo_w[j] = best_params[j];
    model.topo_b = best_params[5];
    model.best_val_auroc = best;
    return model;
}

}  // namespace

TrainedVariant train_variant(const PreparedCohort& cohort, const std::vector<int>& train_idx,
                             const std::vector<int>& val_idx, const TrainConfig& cfg) {
    cfg.validate();
    if (train_idx.empty() || val_idx.empty())
        throw EmptySplit("train_variant: empty train or validation split");
    for (int i : train_idx)
        for (int j : val_idx)
            if (cohort.cases[i].patient_id == cohort.cases[j].patient_id)
                throw Error("train_variant: train and validation share patient " +
                            cohort.cases[i].patient_id);

    if (cfg.variant == Variant::TopoOnly) return train_topo_only(cohort, train_idx, val_idx, cfg);

    const Fusion fusion = fusion_of(cfg.variant);
    TrainedVariant model;
    model.variant = cfg.variant;
    model.model_cfg.roi_edge = cohort.roi_edge;
    model.cnn = init_model<float>(model.model_cfg, cfg.seed);

    std::vector<float> params = flatten(model.cnn);
    AdamState<float> adam(params.size());

    double best = -1.0;
    int since_best = 0;
    ModelParams<float> best_model = model.cnn;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<int> order = train_idx;
        Prng shuffle_rng(cfg.seed, static_cast<std::uint64_t>(epoch), "epoch-shuffle");
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<BatchCaseRef<float>> batch;
            for (std::size_t k = start; k < stop; ++k) {
                const PreparedCase& c = cohort.cases[order[k]];
                BatchCaseRef<float> ref;
                ref.app = c.app.data();
                ref.delta = c.delta.data();
                ref.q = c.q;
                ref.label = c.label;
                batch.push_back(ref);
            }
            GradOptions opts;
            opts.update_running = true;
            const auto result = gradients(model.cnn, model.model_cfg, batch, fusion,
                                          cfg.lambda_brier, opts);
            adam_step(params, result.grad, adam, cfg.learning_rate);
            unflatten(model.cnn, params);
            loss_sum += result.mean_loss * static_cast<double>(batch.size());
        }

        std::vector<double> scores;
        std::vector<int> labels;
        for (int i : val_idx) {
            const PreparedCase& c = cohort.cases[i];
            scores.push_back(
                predict_prepared(model.cnn, model.model_cfg, c.app, c.delta, c.q, fusion).prob);
            labels.push_back(c.label);
        }
        const double val = safe_val_auroc(scores, labels);
        model.history.push_back({epoch, loss_sum / static_cast<double>(order.size()), val});
        model.epochs_run = epoch;
        if (val > best) {
            best = val;
            best_model = model.cnn;
            model.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.cnn = best_model;
    model.best_val_auroc = best;
    return model;
}

Prediction predict_case(const TrainedVariant& model, const PreparedCase& c) {
    if (model.variant == Variant::TopoOnly) {
        Prediction pred;
        pred.quality = c.q;
        pred.fused_logit = topo_logit(model, c);
        pred.prob = stable_sigmoid(pred.fused_logit);
        pred.alpha = std::numeric_limits<double>::quiet_NaN();
        pred.logit_app = 0.0;
        pred.logit_delta = 0.0;
        return pred;
    }
    return predict_prepared(model.cnn, model.model_cfg, c.app, c.delta, c.q,
                            fusion_of(model.variant));
}

CvResult evaluate_cv(const PreparedCohort& cohort, const TrainConfig& cfg) {
    cfg.validate();
    std::vector<std::string> patient_ids;
    for (const auto& c : cohort.cases) patient_ids.push_back(c.patient_id);
    const auto folds = kfold_split(patient_ids, cfg.k_folds, cfg.seed);

    CvResult result;
    result.report.variant = variant_name(cfg.variant);
    std::vector<double> pooled_scores;
    std::vector<int> pooled_labels;

    for (int f = 0; f < cfg.k_folds; ++f) {
        std::vector<int> rest;
        for (int g = 0; g < cfg.k_folds; ++g)
            if (g != f) rest.insert(rest.end(), folds[g].begin(), folds[g].end());

        const std::uint64_t fold_seed = splitmix64(cfg.seed ^ (0x9e3779b97f4a7c15ULL *
                                                               static_cast<std::uint64_t>(f + 1)));
        const TrainValSplit split = split_train_val(cohort, rest, cfg.val_fraction, fold_seed);

        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = fold_seed;
        TrainedVariant model = train_variant(cohort, split.train, split.val, fold_cfg);

        std::vector<double> fold_scores;
        std::vector<int> fold_labels;
        for (int i : folds[f]) {
            const Prediction pred = predict_case(model, cohort.cases[i]);
            PredictionRow row;
            row.case_id = cohort.cases[i].case_id;
            row.fold = f;
            row.prob = pred.prob;
            row.alpha = pred.alpha;
            row.q = cohort.cases[i].q;
            row.label = cohort.cases[i].label;
            result.predictions.push_back(row);
            fold_scores.push_back(pred.prob);
            fold_labels.push_back(cohort.cases[i].label);
            pooled_scores.push_back(pred.prob);
            pooled_labels.push_back(cohort.cases[i].label);
        }
        result.report.per_fold_auroc.push_back(auroc(fold_scores, fold_labels));
        result.fold_models.push_back(std::move(model));
    }

    const auto& fold_aurocs = result.report.per_fold_auroc;
    double mean = 0.0;
    for (double a : fold_aurocs) mean += a;
    mean /= static_cast<double>(fold_aurocs.size());
    double var = 0.0;
    for (double a : fold_aurocs) var += (a - mean) * (a - mean);
    var /= static_cast<double>(fold_aurocs.size());
    result.report.auroc_mean = mean;
    result.report.auroc_sd = std::sqrt(var);
    result.report.brier = brier(pooled_scores, pooled_labels);
    result.report.reliability = reliability_bins(pooled_scores, pooled_labels, 10);
    return result;
}

}  // namespace topogate
