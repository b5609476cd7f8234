#include "topogate/checkpoint.hpp"

#include <json.hpp>

#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"

namespace topogate {
namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

json block_to_json(const ConvBlockParams<double>& b) {
    return json{{"in_ch", b.in_ch},       {"out_ch", b.out_ch},     {"w", b.w},
                {"bias", b.bias},         {"bn_scale", b.bn_scale}, {"bn_shift", b.bn_shift},
                {"bn_mean", b.bn_mean},   {"bn_var", b.bn_var}};
}

ConvBlockParams<double> block_from_json(const json& j) {
    ConvBlockParams<double> b;
    b.in_ch = j.at("in_ch").get<int>();
    b.out_ch = j.at("out_ch").get<int>();
    b.w = j.at("w").get<std::vector<double>>();
    b.bias = j.at("bias").get<std::vector<double>>();
    b.bn_scale = j.at("bn_scale").get<std::vector<double>>();
    b.bn_shift = j.at("bn_shift").get<std::vector<double>>();
    b.bn_mean = j.at("bn_mean").get<std::vector<double>>();
    b.bn_var = j.at("bn_var").get<std::vector<double>>();
    const std::size_t expected = static_cast<std::size_t>(b.in_ch) * b.out_ch * 27;
    if (b.w.size() != expected || b.bias.size() != static_cast<std::size_t>(b.out_ch))
        throw CheckpointMismatch("checkpoint: conv block tensor sizes are inconsistent");
    return b;
}

json head_to_json(const LinearHead<double>& h) { return json{{"w", h.w}, {"b", h.b}}; }

LinearHead<double> head_from_json(const json& j) {
    LinearHead<double> h;
    h.w = j.at("w").get<std::vector<double>>();
    h.b = j.at("b").get<double>();
    return h;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    json j;
    j["format_version"] = kFormatVersion;
    j["roi_edge"] = ckpt.model_cfg.roi_edge;
    j["channels1"] = ckpt.model_cfg.channels1;
    j["feature_width"] = ckpt.model_cfg.channels2;
    j["config_hash"] = ckpt.config_hash;
    j["quality"] = {{"kappa_ct", ckpt.quality_cfg.kappa_ct},
                    {"tau", ckpt.quality_cfg.tau},
                    {"ssim_eps", ckpt.quality_cfg.ssim_eps},
                    {"c1", ckpt.quality_cfg.c1},
                    {"c2", ckpt.quality_cfg.c2}};
    const ModelParams<double>& m = ckpt.params;
    j["params"] = {{"app_encoder",
                    {{"block1", block_to_json(m.app_encoder.block1)},
                     {"block2", block_to_json(m.app_encoder.block2)}}},
                   {"delta_encoder",
                    {{"block1", block_to_json(m.delta_encoder.block1)},
                     {"block2", block_to_json(m.delta_encoder.block2)}}},
                   {"head_app", head_to_json(m.head_app)},
                   {"head_delta", head_to_json(m.head_delta)},
                   {"head_concat", head_to_json(m.head_concat)},
                   {"gate",
                    {{"theta1", m.gate.theta1},
                     {"theta2", m.gate.theta2},
                     {"theta3", m.gate.theta3},
                     {"b", m.gate.b}}}};
    atomic_write_text(path, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path, int expected_roi_edge,
                           int expected_feature_width) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoFailure("load_checkpoint: " + path + ": " + e.what());
    }
    try {
        if (j.at("format_version").get<int>() != kFormatVersion)
            throw CheckpointMismatch("checkpoint: unsupported format version");
        Checkpoint ckpt;
        ckpt.model_cfg.roi_edge = j.at("roi_edge").get<int>();
        ckpt.model_cfg.channels1 = j.at("channels1").get<int>();
        ckpt.model_cfg.channels2 = j.at("feature_width").get<int>();
        if (ckpt.model_cfg.roi_edge != expected_roi_edge)
            throw CheckpointMismatch("checkpoint: ROI edge " +
                                     std::to_string(ckpt.model_cfg.roi_edge) +
                                     " does not match expected " +
                                     std::to_string(expected_roi_edge));
        if (ckpt.model_cfg.channels2 != expected_feature_width)
            throw CheckpointMismatch("checkpoint: feature width " +
                                     std::to_string(ckpt.model_cfg.channels2) +
                                     " does not match expected " +
                                     std::to_string(expected_feature_width));
        ckpt.config_hash = j.at("config_hash").get<std::string>();
        const json& q = j.at("quality");
        ckpt.quality_cfg.kappa_ct = q.at("kappa_ct").get<double>();
        ckpt.quality_cfg.tau = q.at("tau").get<double>();
        ckpt.quality_cfg.ssim_eps = q.at("ssim_eps").get<double>();
        ckpt.quality_cfg.c1 = q.at("c1").get<double>();
        ckpt.quality_cfg.c2 = q.at("c2").get<double>();
        ckpt.quality_cfg.validate();

        const json& p = j.at("params");
        ckpt.params.app_encoder.block1 = block_from_json(p.at("app_encoder").at("block1"));
        ckpt.params.app_encoder.block2 = block_from_json(p.at("app_encoder").at("block2"));
        ckpt.params.delta_encoder.block1 = block_from_json(p.at("delta_encoder").at("block1"));
        ckpt.params.delta_encoder.block2 = block_from_json(p.at("delta_encoder").at("block2"));
        ckpt.params.head_app = head_from_json(p.at("head_app"));
        ckpt.params.head_delta = head_from_json(p.at("head_delta"));
        ckpt.params.head_concat = head_from_json(p.at("head_concat"));
        ckpt.params.gate.theta1 = p.at("gate").at("theta1").get<double>();
        ckpt.params.gate.theta2 = p.at("gate").at("theta2").get<double>();
        ckpt.params.gate.theta3 = p.at("gate").at("theta3").get<double>();
        ckpt.params.gate.b = p.at("gate").at("b").get<double>();
        return ckpt;
    } catch (const nlohmann::json::exception& e) {
        throw IoFailure("load_checkpoint: malformed checkpoint " + path + ": " + e.what());
    }
}

}  // namespace topogate
