#include "topogate/studies.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"
#include "topogate/rng.hpp"
#include "topogate/synth_cohort.hpp"

namespace topogate {
namespace {

using nlohmann::json;

struct LoadedCohort {
    std::vector<CasePair> cases;
    CohortQuality quality;
};

LoadedCohort load_and_measure(const RunConfig& cfg) {
    LoadedCohort out;
    if (!cfg.cohort_dir.empty()) {
        out.cases = load_cohort(cfg.cohort_dir).cases;
    } else {
        out.cases = generate_cohort(cfg.cohort).cases;
    }
    if (cfg.studies.shuffle_labels)
        out.cases = shuffle_labels(std::move(out.cases), cfg.studies.shuffle_seed);
    out.quality =
        compute_cohort_quality(out.cases, cfg.quality, cfg.kappa_auto, cfg.tau_auto);
    return out;
}

std::string hash_line(const std::string& hash) { return "# config_hash=" + hash + "\n"; }

json report_to_json(const EvalReport& r) {
    json bins = json::array();
    for (const auto& b : r.reliability)
        bins.push_back({{"bin_center", b.bin_center},
                        {"mean_pred", b.mean_pred},
                        {"frac_positive", b.frac_positive},
                        {"count", b.count}});
    return json{{"variant", r.variant},
                {"per_fold_auroc", r.per_fold_auroc},
                {"auroc_mean", r.auroc_mean},
                {"auroc_sd", r.auroc_sd},
                {"brier", r.brier},
                {"reliability", bins}};
}

void write_predictions_csv(const std::string& path, const std::string& hash,
                           const std::vector<PredictionRow>& rows) {
    std::string text = hash_line(hash);
    text += "case_id,fold,y_hat,alpha,q_ct,q_reg,q_topo,label\n";
    for (const auto& r : rows) {
        text += r.case_id + "," + std::to_string(r.fold) + "," + format_double(r.prob) + "," +
                format_double(r.alpha) + "," + format_double(r.q.q_ct) + "," +
                format_double(r.q.q_reg) + "," + format_double(r.q.q_topo) + "," +
                std::to_string(r.label) + "\n";
    }
    atomic_write_text(path, text);
}

EvalReport metrics_on_subset(const EvalReport& base, const std::vector<PredictionRow>& rows,
                             const std::vector<bool>& keep_by_row, int k_folds) {
    EvalReport out;
    out.variant = base.variant;
    out.config_hash = base.config_hash;
    std::vector<double> pooled_scores;
    std::vector<int> pooled_labels;
    for (int f = 0; f < k_folds; ++f) {
        std::vector<double> scores;
        std::vector<int> labels;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (!keep_by_row[i] || rows[i].fold != f) continue;
            scores.push_back(rows[i].prob);
            labels.push_back(rows[i].label);
            pooled_scores.push_back(rows[i].prob);
            pooled_labels.push_back(rows[i].label);
        }
        out.per_fold_auroc.push_back(auroc(scores, labels));
    }
    double mean = 0.0;
    for (double a : out.per_fold_auroc) mean += a;
    mean /= static_cast<double>(out.per_fold_auroc.size());
    double var = 0.0;
    for (double a : out.per_fold_auroc) var += (a - mean) * (a - mean);
    var /= static_cast<double>(out.per_fold_auroc.size());
    out.auroc_mean = mean;
    out.auroc_sd = std::sqrt(var);
    out.brier = brier(pooled_scores, pooled_labels);
    out.reliability = reliability_bins(pooled_scores, pooled_labels, 10);
    return out;
}

}  // namespace

RunMainResult cmd_run_main(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const LoadedCohort data = load_and_measure(cfg);
    const PreparedCohort prepared = prepare_cohort(data.cases, data.quality.cases);

    RunMainResult result;
    result.kappa_ct = data.quality.config.kappa_ct;
    result.tau = data.quality.config.tau;

    std::string csv = hash_line(cfg.hash);
    csv += "variant,auroc_mean,auroc_sd,brier\n";
    json variants = json::array();

    for (Variant v : all_variants()) {
        TrainConfig train_cfg = cfg.train;
        train_cfg.variant = v;
        CvResult cv = evaluate_cv(prepared, train_cfg);
        cv.report.config_hash = cfg.hash;
        csv += cv.report.variant + "," + format_double(cv.report.auroc_mean) + "," +
               format_double(cv.report.auroc_sd) + "," + format_double(cv.report.brier) + "\n";
        variants.push_back(report_to_json(cv.report));
        write_predictions_csv(out_dir + "/predictions_" + cv.report.variant + ".csv", cfg.hash,
                              cv.predictions);
        result.reports.push_back(std::move(cv.report));
    }

    result.report_csv_path = out_dir + "/report.csv";
    atomic_write_text(result.report_csv_path, csv);

    int constant_cases = 0;
    bool downsampled = false;
    for (const auto& q : data.quality.cases) {
        constant_cases += q.constant_slices ? 1 : 0;
        downsampled = downsampled || q.topo_downsampled;
    }
    json j;
    j["config_hash"] = cfg.hash;
    j["config"] = json::parse(canonical_config_json(cfg));
    j["quality_calibration"] = {{"kappa_ct", result.kappa_ct},
                                {"tau", result.tau},
                                {"median_variance_of_laplacian", data.quality.median_vol},
                                {"median_w_inf", data.quality.median_w_inf},
                                {"constant_slice_cases", constant_cases},
                                {"topo_downsampled", downsampled}};
    j["variants"] = variants;
    atomic_write_text(out_dir + "/report.json", j.dump(2) + "\n");
    return result;
}

FilterStudyResult cmd_filter_study(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const LoadedCohort data = load_and_measure(cfg);
    const PreparedCohort prepared = prepare_cohort(data.cases, data.quality.cases);

    TrainConfig train_cfg = cfg.train;
    train_cfg.variant = Variant::TopoGate;
    CvResult cv = evaluate_cv(prepared, train_cfg);
    cv.report.config_hash = cfg.hash;

    // Measured-quality filter: the hidden manifest plays no part here.
    const double threshold = cfg.studies.q_reg_filter_threshold;
    std::vector<bool> clean_by_case(data.cases.size(), false);
    for (std::size_t i = 0; i < data.cases.size(); ++i) {
        const CaseQuality& q = data.quality.cases[i];
        clean_by_case[i] = q.q.q_reg >= threshold && !q.constant_slices;
    }

    auto case_index = [&](const std::string& id) {
        for (std::size_t i = 0; i < data.cases.size(); ++i)
            if (data.cases[i].case_id == id) return i;
        throw Error("filter study: unknown case id " + id);
    };

    FilterStudyResult result;
    std::vector<bool> keep_by_row(cv.predictions.size(), false);
    for (std::size_t r = 0; r < cv.predictions.size(); ++r) {
        const std::size_t i = case_index(cv.predictions[r].case_id);
        keep_by_row[r] = clean_by_case[i];
        (clean_by_case[i] ? result.retained : result.removed)
            .push_back(cv.predictions[r].case_id);
    }
    if (result.retained.empty())
        throw EmptyCleanSubset("filter study: no case passes the quality filter");

    result.full = cv.report;
    result.clean = metrics_on_subset(cv.report, cv.predictions, keep_by_row, cfg.train.k_folds);
    result.clean.variant = "topogate_clean";

    std::string csv = hash_line(cfg.hash);
    csv += "subset,n_cases,auroc_mean,auroc_sd,brier\n";
    csv += "full," + std::to_string(cv.predictions.size()) + "," +
           format_double(result.full.auroc_mean) + "," + format_double(result.full.auroc_sd) +
           "," + format_double(result.full.brier) + "\n";
    csv += "clean," + std::to_string(result.retained.size()) + "," +
           format_double(result.clean.auroc_mean) + "," + format_double(result.clean.auroc_sd) +
           "," + format_double(result.clean.brier) + "\n";
    atomic_write_text(out_dir + "/filter_report.csv", csv);

    std::string cases_csv = hash_line(cfg.hash);
    cases_csv += "case_id,q_reg,constant_slices,retained\n";
    for (std::size_t r = 0; r < cv.predictions.size(); ++r) {
        const std::size_t i = case_index(cv.predictions[r].case_id);
        const CaseQuality& q = data.quality.cases[i];
        cases_csv += cv.predictions[r].case_id + "," + format_double(q.q.q_reg) + "," +
                     (q.constant_slices ? "1" : "0") + "," + (keep_by_row[r] ? "1" : "0") + "\n";
    }
    atomic_write_text(out_dir + "/filter_cases.csv", cases_csv);

    json j;
    j["config_hash"] = cfg.hash;
    j["q_reg_threshold"] = threshold;
    j["full"] = report_to_json(result.full);
    j["clean"] = report_to_json(result.clean);
    j["retained_cases"] = result.retained;
    j["removed_cases"] = result.removed;
    atomic_write_text(out_dir + "/filter_report.json", j.dump(2) + "\n");
    return result;
}

RobustnessResult cmd_robustness(const RunConfig& cfg, const std::string& out_dir,
                                const std::string& model_path) {
    std::filesystem::create_directories(out_dir);
    const LoadedCohort data = load_and_measure(cfg);

    ModelConfig model_cfg;
    model_cfg.roi_edge = data.cases.front().fu_roi.dims[0];

    Checkpoint ckpt;
    RobustnessResult result;
    if (!model_path.empty()) {
        ckpt = load_checkpoint(model_path, model_cfg.roi_edge, model_cfg.channels2);
        result.model_path = model_path;
    } else {
        // Train at noise level zero on the whole cohort; the sweep then
        // attributes any alpha shift to the quality vector alone.
        const PreparedCohort prepared = prepare_cohort(data.cases, data.quality.cases);
        std::vector<int> all_idx(prepared.cases.size());
        for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = static_cast<int>(i);
        const TrainValSplit split =
            split_train_val(prepared, all_idx, cfg.train.val_fraction, cfg.train.seed);
        TrainConfig train_cfg = cfg.train;
        train_cfg.variant = Variant::TopoGate;
        const TrainedVariant trained = train_variant(prepared, split.train, split.val, train_cfg);
        ckpt.params = cast_params<double>(trained.cnn);
        ckpt.model_cfg = trained.model_cfg;
        ckpt.quality_cfg = data.quality.config;  // freeze the calibration
        ckpt.config_hash = cfg.hash;
        result.model_path = out_dir + "/model.json";
        save_checkpoint(ckpt, result.model_path);
    }

    for (double level : cfg.studies.noise_levels_hu) {
        RobustnessRow row;
        row.noise_hu = level;
        char tag[48];
        std::snprintf(tag, sizeof(tag), "robust-noise-%g", level);
        for (std::size_t i = 0; i < data.cases.size(); ++i) {
            CasePair perturbed = data.cases[i];
            if (level > 0.0) {
                const std::uint64_t noise_seed =
                    splitmix64(cfg.cohort.seed ^ splitmix64(i)) ^ fnv1a(tag);
                perturbed.fu_roi =
                    clip_hu(add_gaussian_noise(perturbed.fu_roi, level, noise_seed),
                            -1000.0, 400.0);
            }
            const CaseQuality q = quality_vector(perturbed, ckpt.quality_cfg);
            row.mean_alpha += gate_alpha(ckpt.params.gate, q.q);
            row.mean_q_ct += q.q.q_ct;
            row.mean_q_reg += q.q.q_reg;
            row.mean_q_topo += q.q.q_topo;
        }
        const double n = static_cast<double>(data.cases.size());
        row.mean_alpha /= n;
        row.mean_q_ct /= n;
        row.mean_q_reg /= n;
        row.mean_q_topo /= n;
        result.rows.push_back(row);
    }

    std::string csv = hash_line(cfg.hash);
    csv += "noise_hu,mean_alpha,mean_q_ct,mean_q_reg,mean_q_topo\n";
    json rows = json::array();
    for (const auto& r : result.rows) {
        csv += format_double(r.noise_hu) + "," + format_double(r.mean_alpha) + "," +
               format_double(r.mean_q_ct) + "," + format_double(r.mean_q_reg) + "," +
               format_double(r.mean_q_topo) + "\n";
        rows.push_back({{"noise_hu", r.noise_hu},
                        {"mean_alpha", r.mean_alpha},
                        {"mean_q_ct", r.mean_q_ct},
                        {"mean_q_reg", r.mean_q_reg},
                        {"mean_q_topo", r.mean_q_topo}});
    }
    atomic_write_text(out_dir + "/robustness.csv", csv);
    json j;
    j["config_hash"] = cfg.hash;
    j["model"] = result.model_path;
    j["rows"] = rows;
    atomic_write_text(out_dir + "/robustness.json", j.dump(2) + "\n");
    return result;
}

std::string cmd_gen(const RunConfig& cfg, const std::string& out_dir) {
    const Cohort cohort = generate_cohort(cfg.cohort);
    const std::string dir = out_dir + "/cohort";
    write_cohort(cohort, dir);
    return dir;
}

QualityCmdResult cmd_quality(const std::string& in_dir, const std::string& out_csv) {
    const Cohort cohort = load_cohort(in_dir);
    const CohortQuality quality = compute_cohort_quality(cohort.cases, QualityConfig{});

    QualityCmdResult result;
    result.config = quality.config;
    result.n_cases = static_cast<int>(cohort.cases.size());

    RunConfig pseudo;  // hash over the input location for traceability
    pseudo.cohort_dir = in_dir;
    const std::string hash = config_hash(pseudo);

    std::string csv = hash_line(hash);
    csv += "case_id,q_ct,q_reg,q_topo,constant_slices,topo_downsampled\n";
    for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
        const CaseQuality& q = quality.cases[i];
        result.constant_slice_cases += q.constant_slices ? 1 : 0;
        csv += cohort.cases[i].case_id + "," + format_double(q.q.q_ct) + "," +
               format_double(q.q.q_reg) + "," + format_double(q.q.q_topo) + "," +
               (q.constant_slices ? "1" : "0") + "," + (q.topo_downsampled ? "1" : "0") + "\n";
    }
    atomic_write_text(out_csv, csv);

    json j;
    j["config_hash"] = hash;
    j["kappa_ct"] = quality.config.kappa_ct;
    j["tau"] = quality.config.tau;
    j["median_variance_of_laplacian"] = quality.median_vol;
    j["median_w_inf"] = quality.median_w_inf;
    j["n_cases"] = result.n_cases;
    j["constant_slice_cases"] = result.constant_slice_cases;
    atomic_write_text(out_csv + ".meta.json", j.dump(2) + "\n");
    return result;
}

}  // namespace topogate
