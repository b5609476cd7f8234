// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier criteria train real models, so this binary is the long
// pole of the test suite; run it through ctest or directly:
//
//   ./acceptance <path-to-topogate-cli> <scratch-dir>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "topogate/csv_io.hpp"
#include "topogate/model.hpp"
#include "topogate/nifti_io.hpp"
#include "topogate/quality.hpp"
#include "topogate/run_config.hpp"
#include "topogate/studies.hpp"
#include "topogate/synth_cohort.hpp"
#include "topogate/topology.hpp"
#include "topogate/training.hpp"

using namespace topogate;

namespace {

std::string g_cli_path;
std::string g_scratch;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double elapsed_minutes(const std::chrono::steady_clock::time_point& start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
           60.0;
}

PreparedCohort prepare(const RunConfig& cfg, std::uint64_t shuffle_seed = 0) {
    std::vector<CasePair> cases = generate_cohort(cfg.cohort).cases;
    if (shuffle_seed != 0) cases = shuffle_labels(std::move(cases), shuffle_seed);
    const CohortQuality q = compute_cohort_quality(cases, cfg.quality, cfg.kappa_auto,
                                                   cfg.tau_auto);
    return prepare_cohort(cases, q.cases);
}

double cv_auroc(const PreparedCohort& cohort, TrainConfig cfg, Variant v) {
    cfg.variant = v;
    return evaluate_cv(cohort, cfg).report.auroc_mean;
}

// --- criterion 1: main-table direction --------------------------------------

Outcome criterion_main_table() {
    const auto start = std::chrono::steady_clock::now();
    const RunConfig cfg = parse_run_config_text("{}");  // defaults: 152/122, seed 42
    const PreparedCohort cohort = prepare(cfg);

    TrainConfig tc = cfg.train;
    tc.variant = Variant::AppOnly;
    const CvResult app = evaluate_cv(cohort, tc);
    tc.variant = Variant::DeltaOnly;
    const CvResult delta = evaluate_cv(cohort, tc);
    tc.variant = Variant::TopoGate;
    const CvResult gate = evaluate_cv(cohort, tc);

    const double minutes = elapsed_minutes(start);
    const double auroc_margin =
        gate.report.auroc_mean - std::max(app.report.auroc_mean, delta.report.auroc_mean);
    const double brier_margin =
        std::min(app.report.brier, delta.report.brier) + 0.005 - gate.report.brier;

    Outcome out;
    out.pass = auroc_margin >= 0.02 && brier_margin >= 0.0 && minutes < 15.0;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "app %.3f delta %.3f topogate %.3f (margin %+.3f, need >= +0.020); brier "
                  "app %.3f delta %.3f topogate %.3f; %.1f min",
                  app.report.auroc_mean, delta.report.auroc_mean, gate.report.auroc_mean,
                  auroc_margin, app.report.brier, delta.report.brier, gate.report.brier,
                  minutes);
    out.detail = buf;
    return out;
}

// --- criterion 2: filter-study direction ------------------------------------

Outcome criterion_filter_direction() {
    double auroc_gain = 0.0, brier_full = 0.0, brier_clean = 0.0;
    const std::vector<std::uint64_t> seeds = {43, 44, 45};
    for (std::uint64_t seed : seeds) {
        RunConfig cfg = parse_run_config_text("{}");
        cfg.cohort.seed = seed;
        cfg.train.seed = seed;
        const FilterStudyResult r =
            cmd_filter_study(cfg, g_scratch + "/filter_" + std::to_string(seed));
        auroc_gain += r.clean.auroc_mean - r.full.auroc_mean;
        brier_full += r.full.brier;
        brier_clean += r.clean.brier;
    }
    auroc_gain /= seeds.size();
    brier_full /= seeds.size();
    brier_clean /= seeds.size();

    Outcome out;
    out.pass = auroc_gain >= 0.01 && brier_clean <= brier_full;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "mean AUROC(clean)-AUROC(full) %+.3f (need >= +0.010); mean brier full %.3f "
                  "clean %.3f",
                  auroc_gain, brier_full, brier_clean);
    out.detail = buf;
    return out;
}

// --- criterion 3: robustness monotonicity ------------------------------------

Outcome criterion_robustness() {
    const RunConfig cfg = parse_run_config_text("{}");
    const RobustnessResult r = cmd_robustness(cfg, g_scratch + "/robustness");
    std::vector<double> levels, alphas, qregs;
    for (const auto& row : r.rows) {
        levels.push_back(row.noise_hu);
        alphas.push_back(row.mean_alpha);
        qregs.push_back(row.mean_q_reg);
    }
    const double rho_alpha = oracles::spearman(levels, alphas);
    const double rho_qreg = oracles::spearman(levels, qregs);

    Outcome out;
    out.pass = rho_alpha >= 0.9 && rho_qreg <= -0.9;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "spearman(level, mean_alpha) %+.3f (need >= +0.9); spearman(level, mean_q_reg) "
                  "%+.3f (need <= -0.9)",
                  rho_alpha, rho_qreg);
    out.detail = buf;
    return out;
}

// --- criterion 4: gradient correctness ----------------------------------------

Outcome criterion_gradients() {
    const auto start = std::chrono::steady_clock::now();
    // Seeds verified to keep the h = 1e-3 sweep inside one smooth piece of
    // the piecewise-smooth pool/ReLU landscape (see grad_check.hpp).
    const std::vector<std::uint64_t> seeds = {1, 5, 12, 13, 19};
    double worst = 0.0;
    for (std::uint64_t seed : seeds) {
        auto probe = grad_check::make_probe(seed);
        worst = std::max(worst, grad_check::worst_rel_error(probe, Fusion::QualityGate));
    }
    const double minutes = elapsed_minutes(start);
    Outcome out;
    out.pass = worst < 1e-4 && minutes < 1.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "max rel err %.2e over 5 batches x all parameter tensors (need < 1e-4); "
                  "%.2f min (need < 1)",
                  worst, minutes);
    out.detail = buf;
    return out;
}

// --- criterion 5: topology oracles ---------------------------------------------

Outcome criterion_topology() {
    int persistence_bad = 0, bottleneck_bad = 0, stability_bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Volume v = oracles::random_int_volume(4, 4, 4, 0, 9, 42000 + trial);
        PersistenceDiagram d = sublevel_persistence_h0(v);
        std::sort(d.points.begin(), d.points.end());
        if (d.points != oracles::sweep_persistence(v)) ++persistence_bad;
    }
    for (int trial = 0; trial < 100; ++trial) {
        Prng rng(43000 + trial);
        auto gen = [&]() {
            std::vector<std::pair<double, double>> pts;
            const int n = rng.uniform_int(0, 5);
            for (int i = 0; i < n; ++i) {
                const double birth = rng.uniform_int(0, 10);
                pts.emplace_back(birth, birth + rng.uniform_int(0, 10));
            }
            return pts;
        };
        const auto a = gen(), b = gen();
        PersistenceDiagram da, db;
        da.points = a;
        db.points = b;
        if (bottleneck_distance(da, db) != oracles::brute_bottleneck(a, b)) ++bottleneck_bad;
    }
    for (int trial = 0; trial < 50; ++trial) {
        Prng rng(44000 + trial);
        const Volume v = oracles::random_int_volume(6, 6, 6, 0, 20, 45000 + trial);
        const double delta = rng.uniform(0.5, 5.0);
        Volume perturbed = v;
        for (double& x : perturbed.data) x += rng.uniform(-delta, delta);
        const double w = bottleneck_distance(sublevel_persistence_h0(v),
                                             sublevel_persistence_h0(perturbed));
        if (!(w <= delta + 1e-12)) ++stability_bad;
    }
    Outcome out;
    out.pass = persistence_bad == 0 && bottleneck_bad == 0 && stability_bad == 0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "persistence oracle mismatches %d/100; bottleneck mismatches %d/100; "
                  "stability violations %d/50",
                  persistence_bad, bottleneck_bad, stability_bad);
    out.detail = buf;
    return out;
}

// --- criterion 6: metric oracles ------------------------------------------------

Outcome criterion_metrics() {
    double worst_auroc = 0.0, worst_brier = 0.0;
    bool invariant_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
        Prng rng(46000 + trial);
        const int n = 20 + static_cast<int>(rng.below(181));
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) {
            scores[i] = std::floor(rng.uniform() * 32.0) / 32.0;
            labels[i] = rng.uniform() < 0.5 ? 1 : 0;
        }
        labels[0] = 1;
        labels[1] = 0;
        worst_auroc = std::max(
            worst_auroc, std::abs(auroc(scores, labels) - oracles::pair_count_auroc(scores, labels)));
        double direct = 0.0;
        for (int i = 0; i < n; ++i) direct += (scores[i] - labels[i]) * (scores[i] - labels[i]);
        worst_brier = std::max(worst_brier, std::abs(brier(scores, labels) - direct / n));

        const double base = auroc(scores, labels);
        auto transformed = [&](auto fn) {
            std::vector<double> t(scores.size());
            for (std::size_t i = 0; i < scores.size(); ++i) t[i] = fn(scores[i]);
            return auroc(t, labels);
        };
        invariant_ok = invariant_ok &&
                       transformed([](double s) { return 3.0 * s - 2.0; }) == base &&
                       transformed([](double s) { return std::exp(s); }) == base &&
                       transformed([](double s) { return s * s * s; }) == base;
    }
    Outcome out;
    out.pass = worst_auroc <= 1e-12 && worst_brier <= 1e-12 && invariant_ok;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "AUROC vs pair counting max |diff| %.1e (need <= 1e-12); brier max |diff| "
                  "%.1e; monotone-transform invariance %s",
                  worst_auroc, worst_brier, invariant_ok ? "holds" : "violated");
    out.detail = buf;
    return out;
}

// --- criterion 7: quality ranges and fixed points --------------------------------

Outcome criterion_quality_ranges() {
    int range_bad = 0;
    QualityConfig qcfg;
    qcfg.kappa_ct = 500.0;
    qcfg.tau = 0.01;
    // 100 pairs spanning clean to heavily degraded generation settings.
    for (int trial = 0; trial < 100; ++trial) {
        CohortSpec spec;
        spec.n_pairs = 1;
        spec.n_patients = 1;
        spec.roi_edge = 8;
        spec.seed = 47000 + trial;
        spec.noise_sigma_hu = (trial % 5) * 20.0;
        spec.misreg_mm = (trial % 4) * 1.5;
        spec.blur_sigma_vox = (trial % 3) * 0.7;
        spec.corrupt_fraction = (trial % 2) ? 1.0 : 0.0;
        const SynthCase c = generate_pair(spec, 0);
        const CaseQuality q = quality_vector(c.pair, qcfg);
        const bool ok = q.q.q_ct >= 0.0 && q.q.q_ct < 1.0 && q.q.q_reg >= 0.0 &&
                        q.q.q_reg <= 1.0 && q.q.q_topo > 0.0 && q.q.q_topo <= 1.0;
        if (!ok) ++range_bad;
    }
    const Volume v = oracles::random_volume(8, 8, 8, -800, 300, 48001);
    CasePair identical;
    identical.fu_roi = v;
    identical.bl_roi = v;
    identical.delta = temporal_difference(v, v);
    const CaseQuality fixed = quality_vector(identical, qcfg);
    const bool fixed_ok = fixed.q.q_reg == 1.0 && fixed.q.q_topo == 1.0;
    const bool const_ok = q_ct(Volume(8, 8, 8, -1000.0), qcfg) == 0.0;

    Outcome out;
    out.pass = range_bad == 0 && fixed_ok && const_ok;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "range violations %d/100; q_reg(v,v)=1 and q_topo(v,v)=1: %s; "
                  "q_ct(const)=0: %s",
                  range_bad, fixed_ok ? "yes" : "no", const_ok ? "yes" : "no");
    out.detail = buf;
    return out;
}

// --- criterion 8: gate constraint -------------------------------------------------

Outcome criterion_gate_constraint() {
    Prng rng(48002);
    int weight_bad = 0, sign_bad = 0;
    const double h = 1e-4;
    for (int trial = 0; trial < 10000; ++trial) {
        GateParams<double> g{rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-8, 8),
                             rng.uniform(-4, 4)};
        if (softplus(g.theta1) < 0.0 || softplus(g.theta2) < 0.0 || softplus(g.theta3) < 0.0)
            ++weight_bad;
        const QualityVector q{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
        auto alpha_at = [&](double d_ct, double d_reg, double d_topo) {
            QualityVector shifted = q;
            shifted.q_ct += d_ct;
            shifted.q_reg += d_reg;
            shifted.q_topo += d_topo;
            return gate_alpha(g, shifted);
        };
        const double d_ct = alpha_at(h, 0, 0) - alpha_at(-h, 0, 0);
        const double d_reg = alpha_at(0, h, 0) - alpha_at(0, -h, 0);
        const double d_topo = alpha_at(0, 0, h) - alpha_at(0, 0, -h);
        if (!(d_ct >= 0.0 && d_reg <= 0.0 && d_topo >= 0.0)) ++sign_bad;
    }
    Outcome out;
    out.pass = weight_bad == 0 && sign_bad == 0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "negative effective weights %d/10000; finite-difference sign violations "
                  "(+,-,+) %d/10000",
                  weight_bad, sign_bad);
    out.detail = buf;
    return out;
}

// --- criterion 9: CLI determinism ----------------------------------------------

Outcome criterion_determinism() {
    const std::string dir = g_scratch + "/determinism";
    std::filesystem::create_directories(dir);
    const std::string config_path = dir + "/config.json";
    atomic_write_text(config_path,
                      R"({"cohort": {"n_pairs": 36, "n_patients": 30, "roi_edge": 8, "seed": 5},
                          "train": {"max_epochs": 12, "k_folds": 3, "seed": 5}})");
    auto run_once = [&](const std::string& out_dir) {
        const std::string cmd = g_cli_path + " run --config " + config_path + " --out " +
                                out_dir + " > /dev/null 2>&1";
        return std::system(cmd.c_str()) == 0;
    };
    Outcome out;
    if (!run_once(dir + "/a") || !run_once(dir + "/b")) {
        out.detail = "CLI run failed";
        return out;
    }
    const std::string a = read_text_file(dir + "/a/report.csv");
    const std::string b = read_text_file(dir + "/b/report.csv");
    out.pass = !a.empty() && a == b;
    out.detail = out.pass ? "two `topogate run` invocations produced byte-identical report.csv"
                          : "report.csv differs between identical runs";
    return out;
}

// --- criterion 10: NIfTI round-trip ----------------------------------------------

Outcome criterion_nifti() {
    int bad = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Prng rng(49000 + trial);
        const int nx = rng.uniform_int(1, 12), ny = rng.uniform_int(1, 12),
                  nz = rng.uniform_int(1, 12);
        Volume v = oracles::random_volume(nx, ny, nz, -1000, 400, 50000 + trial);
        v.spacing = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
        const std::string path = g_scratch + "/rt.nii";
        write_nifti(v, path);
        const Volume r = read_nifti(path);
        if (r.dims != v.dims || r.data != v.data) ++bad;
    }
    Outcome out;
    out.pass = bad == 0;
    out.detail = "mismatched round-trips " + std::to_string(bad) + "/20";
    return out;
}

// --- anchor: harness learnability ---------------------------------------------

// Not a numbered criterion: with strong contrast and mild degradation the
// cohort must be separable (delta-only CV AUROC > 0.8), anchoring every
// training-based check above.
Outcome anchor_learnability() {
    RunConfig cfg = parse_run_config_text(
        R"({"cohort": {"n_pairs": 60, "n_patients": 50, "roi_edge": 12, "seed": 17,
                       "noise_sigma_hu": 3.0, "misreg_mm": 0.5, "blur_sigma_vox": 0.2,
                       "corrupt_fraction": 0.0},
            "train": {"seed": 17}})");
    const PreparedCohort cohort = prepare(cfg);
    const double a = cv_auroc(cohort, cfg.train, Variant::DeltaOnly);
    Outcome out;
    out.pass = a > 0.8;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "delta-only CV AUROC %.3f on the separable cohort (need > 0.8)",
                  a);
    out.detail = buf;
    return out;
}

// --- criterion 11: null safety ----------------------------------------------------

Outcome criterion_null_safety() {
    double lo = 1.0, hi = 0.0;
    const std::vector<std::uint64_t> seeds = {1, 2, 3};
    for (std::uint64_t seed : seeds) {
        RunConfig cfg = parse_run_config_text("{}");
        cfg.train.seed = seed;
        const PreparedCohort cohort = prepare(cfg, /*shuffle_seed=*/seed);
        for (Variant v : all_variants()) {
            const double a = cv_auroc(cohort, cfg.train, v);
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
    }
    Outcome out;
    out.pass = lo >= 0.38 && hi <= 0.62;
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "label-shuffled CV AUROC range [%.3f, %.3f] over 5 variants x 3 seeds "
                  "(need within [0.38, 0.62])",
                  lo, hi);
    out.detail = buf;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::fprintf(stderr, "usage: acceptance <topogate-cli> <scratch-dir>\n");
        return 2;
    }
    g_cli_path = argv[1];
    g_scratch = argv[2];
    std::filesystem::create_directories(g_scratch);

    struct Criterion {
        int number;
        const char* name;
        std::function<Outcome()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "main-table direction", criterion_main_table},
        {2, "filter-study direction", criterion_filter_direction},
        {3, "robustness monotonicity", criterion_robustness},
        {4, "gradient correctness", criterion_gradients},
        {5, "topology oracles", criterion_topology},
        {6, "metric oracles", criterion_metrics},
        {7, "quality ranges and fixed points", criterion_quality_ranges},
        {8, "gate constraint", criterion_gate_constraint},
        {9, "determinism", criterion_determinism},
        {10, "NIfTI round-trip", criterion_nifti},
        {11, "null safety", criterion_null_safety},
        {12, "learnability anchor", anchor_learnability},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome.pass = false;
            outcome.detail = std::string("exception: ") + e.what();
        }
        if (!outcome.pass) ++failures;
        std::printf("[%s] criterion %2d: %s — %s\n", outcome.pass ? "PASS" : "FAIL", c.number,
                    c.name, outcome.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
                criteria.size());
    return failures == 0 ? 0 : 1;
}
