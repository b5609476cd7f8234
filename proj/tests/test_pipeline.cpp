#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "topogate/checkpoint.hpp"
#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"
#include "topogate/run_config.hpp"
#include "topogate/studies.hpp"
#include "topogate/synth_cohort.hpp"

using namespace topogate;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string write_config(const std::filesystem::path& dir, const std::string& text) {
    const std::string path = (dir / "config.json").string();
    std::ofstream out(path);
    out << text;
    return path;
}

// Small fast configuration shared by the study smoke tests.
std::string small_config_text(std::uint64_t seed, const std::string& extra_studies = "") {
    return std::string("{\n") +
           "  \"cohort\": {\"n_pairs\": 24, \"n_patients\": 20, \"roi_edge\": 8, \"seed\": " +
           std::to_string(seed) + ", \"corrupt_fraction\": 0.2},\n" +
           "  \"train\": {\"max_epochs\": 3, \"k_folds\": 3, \"patience\": 2, \"seed\": " +
           std::to_string(seed) + "}" +
           (extra_studies.empty() ? "" : ",\n  \"studies\": " + extra_studies) + "\n}\n";
}

}  // namespace

TEST_CASE("run config: defaults, overrides, and rejection of unknown keys") {
    SUBCASE("empty object gives the documented defaults") {
        const RunConfig cfg = parse_run_config_text("{}");
        CHECK(cfg.cohort.n_pairs == 152);
        CHECK(cfg.cohort.n_patients == 122);
        CHECK(cfg.train.learning_rate == 1e-4);
        CHECK(cfg.train.batch_size == 8);
        CHECK(cfg.train.max_epochs == 200);
        CHECK(cfg.train.patience == 10);
        CHECK(cfg.train.k_folds == 5);
        CHECK(cfg.train.lambda_brier == 0.5);
        CHECK(cfg.kappa_auto);
        CHECK(cfg.tau_auto);
        CHECK(cfg.studies.noise_levels_hu == std::vector<double>{0, 10, 20, 40, 80});
        CHECK(cfg.studies.q_reg_filter_threshold == 0.2);
        CHECK_FALSE(cfg.hash.empty());
    }
    SUBCASE("explicit quality scales turn calibration off") {
        const RunConfig cfg = parse_run_config_text(
            R"({"quality": {"kappa_ct": 123.0, "tau": "auto", "ssim_eps": 1e-5}})");
        CHECK_FALSE(cfg.kappa_auto);
        CHECK(cfg.quality.kappa_ct == 123.0);
        CHECK(cfg.tau_auto);
        CHECK(cfg.quality.ssim_eps == 1e-5);
    }
    SUBCASE("unknown keys are rejected at every level") {
        CHECK_THROWS_AS(parse_run_config_text(R"({"cohorts": {}})"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"cohort": {"n_pair": 10}})"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"train": {"lr": 0.1}})"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"studies": {"noise": []}})"), ConfigError);
    }
    SUBCASE("invalid values are config errors") {
        CHECK_THROWS_AS(parse_run_config_text("not json"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"train": {"batch_size": 0}})"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"quality": {"tau": -1}})"), ConfigError);
        CHECK_THROWS_AS(parse_run_config_text(R"({"studies": {"noise_levels_hu": []}})"),
                        ConfigError);
    }
    SUBCASE("hash is stable and sensitive") {
        const RunConfig a = parse_run_config_text("{}");
        const RunConfig b = parse_run_config_text(R"({"train": {"seed": 42}})");
        const RunConfig c = parse_run_config_text(R"({"train": {"seed": 43}})");
        CHECK(a.hash == b.hash);  // 42 is the default seed
        CHECK(a.hash != c.hash);
    }
}

TEST_CASE("checkpoint round trip and mismatch rejection") {
    const auto dir = temp_dir("tg_ckpt");
    ModelConfig mcfg;
    mcfg.roi_edge = 8;
    Checkpoint ckpt;
    ckpt.params = init_model<double>(mcfg, 77);
    ckpt.params.gate.theta2 = 0.625;
    ckpt.model_cfg = mcfg;
    ckpt.quality_cfg.kappa_ct = 321.5;
    ckpt.quality_cfg.tau = 0.025;
    ckpt.config_hash = "deadbeef";
    const std::string path = (dir / "model.json").string();
    save_checkpoint(ckpt, path);

    const Checkpoint loaded = load_checkpoint(path, 8, 16);
    CHECK(flatten(loaded.params) == flatten(ckpt.params));
    CHECK(loaded.params.app_encoder.block1.bn_var == ckpt.params.app_encoder.block1.bn_var);
    CHECK(loaded.quality_cfg.kappa_ct == 321.5);
    CHECK(loaded.quality_cfg.tau == 0.025);
    CHECK(loaded.config_hash == "deadbeef");

    CHECK_THROWS_AS(load_checkpoint(path, 16, 16), CheckpointMismatch);
    CHECK_THROWS_AS(load_checkpoint(path, 8, 32), CheckpointMismatch);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.json").string(), 8, 16), IoFailure);
}

TEST_CASE("gen then quality command produce aligned tables") {
    const auto dir = temp_dir("tg_genq");
    const RunConfig cfg = parse_run_config_text(small_config_text(3));
    const std::string cohort_dir = cmd_gen(cfg, dir.string());
    CHECK(std::filesystem::exists(cohort_dir + "/manifest.csv"));

    const std::string q_csv = (dir / "q.csv").string();
    const QualityCmdResult result = cmd_quality(cohort_dir, q_csv);
    CHECK(result.n_cases == 24);

    const CsvTable table = read_csv(q_csv);
    REQUIRE(table.header.size() == 6);
    CHECK(table.header[0] == "case_id");
    CHECK(table.rows.size() == 24);
    for (const auto& row : table.rows) {
        const double q_ct = std::stod(row[1]);
        const double q_reg = std::stod(row[2]);
        const double q_topo = std::stod(row[3]);
        CHECK(q_ct >= 0.0);
        CHECK(q_ct < 1.0);
        CHECK(q_reg >= 0.0);
        CHECK(q_reg <= 1.0);
        CHECK(q_topo > 0.0);
        CHECK(q_topo <= 1.0);
    }
    CHECK(std::filesystem::exists(q_csv + ".meta.json"));
}

TEST_CASE("cmd_run_main writes the five-variant report") {
    const auto dir = temp_dir("tg_run");
    const RunConfig cfg = parse_run_config_text(small_config_text(4));
    const RunMainResult result = cmd_run_main(cfg, dir.string());
    REQUIRE(result.reports.size() == 5);

    const CsvTable report = read_csv((dir / "report.csv").string());
    REQUIRE(report.rows.size() == 5);
    CHECK(report.rows[0][0] == "app_only");
    CHECK(report.rows[1][0] == "delta_only");
    CHECK(report.rows[2][0] == "topo_only");
    CHECK(report.rows[3][0] == "topogate");
    CHECK(report.rows[4][0] == "gate_all_features");

    const std::string raw = read_text_file((dir / "report.csv").string());
    CHECK(raw.rfind("# config_hash=" + cfg.hash, 0) == 0);

    for (const auto& name :
         {"predictions_topogate.csv", "predictions_app_only.csv", "report.json"})
        CHECK(std::filesystem::exists(dir / name));

    const CsvTable preds = read_csv((dir / "predictions_topogate.csv").string());
    REQUIRE(preds.header ==
            std::vector<std::string>{"case_id", "fold", "y_hat", "alpha", "q_ct", "q_reg",
                                     "q_topo", "label"});
    CHECK(preds.rows.size() == 24);
}

TEST_CASE("filter study partitions the cohort and ignores the hidden flag") {
    const auto dir = temp_dir("tg_filter");
    RunConfig cfg = parse_run_config_text(small_config_text(5));

    // Persist the cohort, then run the study from the directory.
    const std::string cohort_dir = cmd_gen(cfg, dir.string());
    cfg.cohort_dir = cohort_dir;
    const FilterStudyResult a = cmd_filter_study(cfg, (dir / "a").string());
    CHECK(a.retained.size() + a.removed.size() == 24);
    CHECK(!a.retained.empty());

    // Ablate the hidden corrupt column; the retained list must not change.
    CsvTable manifest = read_csv(cohort_dir + "/manifest.csv");
    std::string ablated;
    for (std::size_t i = 0; i < manifest.header.size(); ++i)
        ablated += (i ? "," : "") + manifest.header[i];
    ablated += "\n";
    std::size_t corrupt_col = 0;
    for (std::size_t i = 0; i < manifest.header.size(); ++i)
        if (manifest.header[i] == "corrupt") corrupt_col = i;
    for (auto row : manifest.rows) {
        row[corrupt_col] = "0";
        for (std::size_t i = 0; i < row.size(); ++i) ablated += (i ? "," : "") + row[i];
        ablated += "\n";
    }
    atomic_write_text(cohort_dir + "/manifest.csv", ablated);

    const FilterStudyResult b = cmd_filter_study(cfg, (dir / "b").string());
    CHECK(a.retained == b.retained);
    CHECK(a.removed == b.removed);
}

TEST_CASE("filter study is a no-op on an uncorrupted high-quality cohort") {
    const auto dir = temp_dir("tg_filter_noop");
    const RunConfig cfg = parse_run_config_text(
        R"({"cohort": {"n_pairs": 20, "n_patients": 18, "roi_edge": 8, "seed": 8,
                       "corrupt_fraction": 0.0, "noise_sigma_hu": 3.0, "misreg_mm": 0.5},
            "train": {"max_epochs": 3, "k_folds": 3, "seed": 8}})");
    const FilterStudyResult r = cmd_filter_study(cfg, dir.string());
    REQUIRE(r.removed.empty());  // every case passes the q_reg/constant-slice filter
    CHECK(r.retained.size() == 20);
    CHECK(r.clean.auroc_mean == r.full.auroc_mean);
    CHECK(r.clean.auroc_sd == r.full.auroc_sd);
    CHECK(r.clean.brier == r.full.brier);
    CHECK(r.clean.per_fold_auroc == r.full.per_fold_auroc);
}

TEST_CASE("robustness sweep reuses a saved checkpoint and reproduces level zero") {
    const auto dir = temp_dir("tg_robust");
    const RunConfig cfg = parse_run_config_text(
        small_config_text(6, R"({"noise_levels_hu": [0, 25]})"));

    const RobustnessResult trained = cmd_robustness(cfg, dir.string());
    REQUIRE(trained.rows.size() == 2);
    CHECK(trained.rows[0].noise_hu == 0.0);
    CHECK(std::filesystem::exists(trained.model_path));

    // Reload through the checkpoint path: identical sweep.
    const RobustnessResult reloaded =
        cmd_robustness(cfg, (dir / "again").string(), trained.model_path);
    for (std::size_t i = 0; i < trained.rows.size(); ++i) {
        CHECK(reloaded.rows[i].mean_alpha == trained.rows[i].mean_alpha);
        CHECK(reloaded.rows[i].mean_q_reg == trained.rows[i].mean_q_reg);
    }

    // Level zero must reproduce the unperturbed quality means exactly.
    const Cohort cohort = generate_cohort(cfg.cohort);
    const Checkpoint ckpt = load_checkpoint(trained.model_path, 8, 16);
    double mean_alpha = 0.0;
    for (const auto& c : cohort.cases) {
        const CaseQuality q = quality_vector(c, ckpt.quality_cfg);
        mean_alpha += gate_alpha(ckpt.params.gate, q.q);
    }
    mean_alpha /= static_cast<double>(cohort.cases.size());
    CHECK(trained.rows[0].mean_alpha == mean_alpha);
}

#ifdef TOPOGATE_CLI_PATH
TEST_CASE("CLI exit codes") {
    const auto dir = temp_dir("tg_cli");
    const std::string cli = TOPOGATE_CLI_PATH;
    auto run = [&](const std::string& args) {
        const int status = std::system((cli + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(status);
    };
    CHECK(run("--help") == 0);
    CHECK(run("run") == 2);  // missing --config
    CHECK(run("run --config /nonexistent.json") == 2);

    const std::string bad = write_config(dir, R"({"train": {"bogus": 1}})");
    CHECK(run("run --config " + bad) == 2);

    const std::string bad_spec =
        write_config(dir, R"({"cohort": {"n_pairs": 2, "n_patients": 5, "roi_edge": 8}})");
    CHECK(run("gen --config " + bad_spec) == 2);

    const std::string good = write_config(dir, small_config_text(7));
    CHECK(run("gen --config " + good + " --out " + (dir / "out").string()) == 0);
    CHECK(std::filesystem::exists(dir / "out" / "cohort" / "manifest.csv"));

    CHECK(run("quality --in " + (dir / "out" / "cohort").string() + " --out " +
              (dir / "q.csv").string()) == 0);
    CHECK(run("quality --in /nonexistent_dir --out " + (dir / "q2.csv").string()) == 1);
}
#endif
