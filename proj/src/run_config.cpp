#include "topogate/run_config.hpp"

#include <json.hpp>

#include <cstdio>

#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"
#include "topogate/rng.hpp"

namespace topogate {
namespace {

using nlohmann::json;

void reject_unknown(const json& j, const char* section,
                    std::initializer_list<const char*> known) {
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (item.key() == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw ConfigError(std::string("config: unknown key \"") + item.key() + "\" in " +
                              section);
    }
}

template <typename T>
void read_into(const json& j, const char* key, T& target) {
    if (j.contains(key)) {
        try {
            target = j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: bad value for \"") + key + "\": " + e.what());
        }
    }
}

// kappa_ct / tau accept a positive number or the string "auto".
void read_auto_scale(const json& j, const char* key, double& value, bool& is_auto) {
    if (!j.contains(key)) return;
    const json& v = j.at(key);
    if (v.is_string()) {
        if (v.get<std::string>() != "auto")
            throw ConfigError(std::string("config: \"") + key + "\" must be a number or \"auto\"");
        is_auto = true;
        return;
    }
    if (!v.is_number() || !(v.get<double>() > 0.0))
        throw ConfigError(std::string("config: \"") + key + "\" must be positive");
    value = v.get<double>();
    is_auto = false;
}

RunConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    reject_unknown(j, "top level",
                   {"cohort", "cohort_dir", "quality", "train", "studies", "output_dir"});

    RunConfig cfg;
    read_into(j, "cohort_dir", cfg.cohort_dir);
    read_into(j, "output_dir", cfg.output_dir);

    if (j.contains("cohort")) {
        const json& c = j.at("cohort");
        reject_unknown(c, "cohort",
                       {"n_pairs", "n_patients", "roi_edge", "noise_sigma_hu", "misreg_mm",
                        "blur_sigma_vox", "pseudo_fraction", "corrupt_fraction", "seed"});
        read_into(c, "n_pairs", cfg.cohort.n_pairs);
        read_into(c, "n_patients", cfg.cohort.n_patients);
        read_into(c, "roi_edge", cfg.cohort.roi_edge);
        read_into(c, "noise_sigma_hu", cfg.cohort.noise_sigma_hu);
        read_into(c, "misreg_mm", cfg.cohort.misreg_mm);
        read_into(c, "blur_sigma_vox", cfg.cohort.blur_sigma_vox);
        read_into(c, "pseudo_fraction", cfg.cohort.pseudo_fraction);
        read_into(c, "corrupt_fraction", cfg.cohort.corrupt_fraction);
        read_into(c, "seed", cfg.cohort.seed);
        cfg.cohort.validate();
    }

    if (j.contains("quality")) {
        const json& q = j.at("quality");
        reject_unknown(q, "quality", {"kappa_ct", "tau", "ssim_eps", "c1", "c2"});
        read_auto_scale(q, "kappa_ct", cfg.quality.kappa_ct, cfg.kappa_auto);
        read_auto_scale(q, "tau", cfg.quality.tau, cfg.tau_auto);
        read_into(q, "ssim_eps", cfg.quality.ssim_eps);
        read_into(q, "c1", cfg.quality.c1);
        read_into(q, "c2", cfg.quality.c2);
        cfg.quality.validate();
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, "train",
                       {"learning_rate", "batch_size", "max_epochs", "patience", "k_folds",
                        "seed", "lambda_brier", "val_fraction"});
        read_into(t, "learning_rate", cfg.train.learning_rate);
        read_into(t, "batch_size", cfg.train.batch_size);
        read_into(t, "max_epochs", cfg.train.max_epochs);
        read_into(t, "patience", cfg.train.patience);
        read_into(t, "k_folds", cfg.train.k_folds);
        read_into(t, "seed", cfg.train.seed);
        read_into(t, "lambda_brier", cfg.train.lambda_brier);
        read_into(t, "val_fraction", cfg.train.val_fraction);
        try {
            cfg.train.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
    }

    if (j.contains("studies")) {
        const json& s = j.at("studies");
        reject_unknown(s, "studies",
                       {"noise_levels_hu", "q_reg_filter_threshold", "shuffle_labels",
                        "shuffle_seed"});
        read_into(s, "noise_levels_hu", cfg.studies.noise_levels_hu);
        read_into(s, "q_reg_filter_threshold", cfg.studies.q_reg_filter_threshold);
        read_into(s, "shuffle_labels", cfg.studies.shuffle_labels);
        read_into(s, "shuffle_seed", cfg.studies.shuffle_seed);
        if (cfg.studies.noise_levels_hu.empty())
            throw ConfigError("config: noise_levels_hu must not be empty");
        for (double level : cfg.studies.noise_levels_hu)
            if (level < 0.0) throw ConfigError("config: noise levels must be >= 0");
    }
    cfg.hash = config_hash(cfg);
    return cfg;
}

}  // namespace

std::string canonical_config_json(const RunConfig& cfg) {
    json j;
    j["cohort"] = {{"n_pairs", cfg.cohort.n_pairs},
                   {"n_patients", cfg.cohort.n_patients},
                   {"roi_edge", cfg.cohort.roi_edge},
                   {"noise_sigma_hu", cfg.cohort.noise_sigma_hu},
                   {"misreg_mm", cfg.cohort.misreg_mm},
                   {"blur_sigma_vox", cfg.cohort.blur_sigma_vox},
                   {"pseudo_fraction", cfg.cohort.pseudo_fraction},
                   {"corrupt_fraction", cfg.cohort.corrupt_fraction},
                   {"seed", cfg.cohort.seed}};
    j["cohort_dir"] = cfg.cohort_dir;
    j["quality"] = {{"kappa_ct", cfg.kappa_auto ? json("auto") : json(cfg.quality.kappa_ct)},
                    {"tau", cfg.tau_auto ? json("auto") : json(cfg.quality.tau)},
                    {"ssim_eps", cfg.quality.ssim_eps},
                    {"c1", cfg.quality.c1},
                    {"c2", cfg.quality.c2}};
    j["train"] = {{"learning_rate", cfg.train.learning_rate},
                  {"batch_size", cfg.train.batch_size},
                  {"max_epochs", cfg.train.max_epochs},
                  {"patience", cfg.train.patience},
                  {"k_folds", cfg.train.k_folds},
                  {"seed", cfg.train.seed},
                  {"lambda_brier", cfg.train.lambda_brier},
                  {"val_fraction", cfg.train.val_fraction}};
    j["studies"] = {{"noise_levels_hu", cfg.studies.noise_levels_hu},
                    {"q_reg_filter_threshold", cfg.studies.q_reg_filter_threshold},
                    {"shuffle_labels", cfg.studies.shuffle_labels},
                    {"shuffle_seed", cfg.studies.shuffle_seed}};
    return j.dump();  // nlohmann objects serialize with sorted keys
}

std::string config_hash(const RunConfig& cfg) {
    const std::uint64_t h = fnv1a(canonical_config_json(cfg));
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunConfig parse_run_config_text(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return from_json(j);
}

RunConfig parse_run_config(const std::string& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoFailure& e) {
        throw ConfigError(e.what());
    }
    return parse_run_config_text(text);
}

}  // namespace topogate
