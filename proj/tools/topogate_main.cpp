// topogate: quality-aware gated fusion for longitudinal 3D volume pairs.
//
// Subcommands:
//   gen           generate the synthetic cohort and persist it
//   run           cross-validated comparison of all model variants
//   filter-study  full-vs-clean metrics under the measured-quality filter
//   robustness    noise sweep of the gate weight with a frozen model
//   quality       quality vectors for a persisted cohort directory

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>

#include "topogate/errors.hpp"
#include "topogate/run_config.hpp"
#include "topogate/studies.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;

std::string resolve_out_dir(const topogate::RunConfig& cfg, const std::string& flag) {
    return flag.empty() ? cfg.output_dir : flag;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quality-aware gated fusion for new-lesion prediction on longitudinal 3D pairs"};
    app.require_subcommand(1);

    std::string config_path, out_flag, model_path, in_dir, out_csv;

    CLI::App* gen = app.add_subcommand("gen", "Generate and persist the synthetic cohort");
    gen->add_option("--config", config_path, "JSON run configuration")->required();
    gen->add_option("--out", out_flag, "Output directory (overrides config output_dir)");

    CLI::App* run = app.add_subcommand("run", "Cross-validated comparison of all variants");
    run->add_option("--config", config_path, "JSON run configuration")->required();
    run->add_option("--out", out_flag, "Output directory (overrides config output_dir)");

    CLI::App* filter = app.add_subcommand("filter-study", "Full-vs-clean quality filter study");
    filter->add_option("--config", config_path, "JSON run configuration")->required();
    filter->add_option("--out", out_flag, "Output directory (overrides config output_dir)");

    CLI::App* robust = app.add_subcommand("robustness", "Noise sweep of the frozen gate");
    robust->add_option("--config", config_path, "JSON run configuration")->required();
    robust->add_option("--out", out_flag, "Output directory (overrides config output_dir)");
    robust->add_option("--model", model_path, "Model checkpoint (trains in-run when absent)");

    CLI::App* quality = app.add_subcommand("quality", "Quality vectors for a cohort directory");
    quality->add_option("--in", in_dir, "Cohort directory (NIfTI triples + manifest.csv)")
        ->required();
    quality->add_option("--out", out_csv, "Output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            const topogate::RunConfig cfg = topogate::parse_run_config(config_path);
            const std::string dir = topogate::cmd_gen(cfg, resolve_out_dir(cfg, out_flag));
            std::printf("cohort written to %s\n", dir.c_str());
        } else if (run->parsed()) {
            const topogate::RunConfig cfg = topogate::parse_run_config(config_path);
            const auto result = topogate::cmd_run_main(cfg, resolve_out_dir(cfg, out_flag));
            std::printf("kappa_ct=%g tau=%g\n", result.kappa_ct, result.tau);
            for (const auto& r : result.reports)
                std::printf("%-18s auroc %.3f +- %.3f  brier %.3f\n", r.variant.c_str(),
                            r.auroc_mean, r.auroc_sd, r.brier);
            std::printf("report: %s\n", result.report_csv_path.c_str());
        } else if (filter->parsed()) {
            const topogate::RunConfig cfg = topogate::parse_run_config(config_path);
            const auto result =
                topogate::cmd_filter_study(cfg, resolve_out_dir(cfg, out_flag));
            std::printf("full  auroc %.3f  brier %.3f  (n=%zu)\n", result.full.auroc_mean,
                        result.full.brier, result.retained.size() + result.removed.size());
            std::printf("clean auroc %.3f  brier %.3f  (n=%zu)\n", result.clean.auroc_mean,
                        result.clean.brier, result.retained.size());
        } else if (robust->parsed()) {
            const topogate::RunConfig cfg = topogate::parse_run_config(config_path);
            const auto result =
                topogate::cmd_robustness(cfg, resolve_out_dir(cfg, out_flag), model_path);
            for (const auto& row : result.rows)
                std::printf("noise %5.1f HU  mean_alpha %.4f  q_ct %.3f  q_reg %.3f  q_topo %.3f\n",
                            row.noise_hu, row.mean_alpha, row.mean_q_ct, row.mean_q_reg,
                            row.mean_q_topo);
        } else if (quality->parsed()) {
            const auto result = topogate::cmd_quality(in_dir, out_csv);
            std::printf("%d cases (%d flagged constant-slice); kappa_ct=%g tau=%g\n",
                        result.n_cases, result.constant_slice_cases, result.config.kappa_ct,
                        result.config.tau);
        }
    } catch (const topogate::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const topogate::BadSpec& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return kExitOk;
}
