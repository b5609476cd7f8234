#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "topogate/errors.hpp"
#include "topogate/model.hpp"

using namespace topogate;

namespace {

std::vector<double> random_input(int edge, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(edge) * edge * edge);
    Prng rng(seed);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

struct OwnedBatch {
    std::vector<std::vector<double>> storage;
    std::vector<BatchCaseRef<double>> refs;
};

OwnedBatch random_batch(const ModelConfig& cfg, int n_cases, std::uint64_t seed) {
    OwnedBatch b;
    Prng rng(seed);
    for (int i = 0; i < n_cases; ++i) {
        b.storage.push_back(random_input(cfg.roi_edge, seed * 100 + 2 * i));
        b.storage.push_back(random_input(cfg.roi_edge, seed * 100 + 2 * i + 1));
    }
    for (int i = 0; i < n_cases; ++i) {
        BatchCaseRef<double> ref;
        ref.app = b.storage[2 * i].data();
        ref.delta = b.storage[2 * i + 1].data();
        ref.q = {rng.uniform(0.0, 0.99), rng.uniform(0.0, 1.0), rng.uniform(0.01, 1.0)};
        ref.label = rng.uniform() < 0.5 ? 0 : 1;
        b.refs.push_back(ref);
    }
    return b;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace

TEST_CASE("encoder_forward maps all-zero input to the zero feature vector") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 1);
    const std::vector<double> zeros(8 * 8 * 8, 0.0);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
        const auto f = encoder_forward(m.app_encoder, cfg, zeros, mode);
        REQUIRE(f.size() == 16);
        for (double x : f) CHECK(x == 0.0);
    }
}

TEST_CASE("encoder_forward is deterministic in eval mode") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 2);
    const auto in = random_input(8, 55);
    const auto f1 = encoder_forward(m.app_encoder, cfg, in, Mode::Eval);
    const auto f2 = encoder_forward(m.app_encoder, cfg, in, Mode::Eval);
    CHECK(f1 == f2);
}

TEST_CASE("encoder_forward rejects mismatched ROI sizes") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 3);
    CHECK_THROWS_AS(encoder_forward(m.app_encoder, cfg, std::vector<double>(100, 0.0), Mode::Eval),
                    ShapeMismatch);
}

TEST_CASE("hand-traced identity-kernel forward") {
    // Center-tap kernels make each conv an identity on the routed channel;
    // with scale 1, shift 0 and running stats (0,1) in eval mode, batch norm
    // reduces to division by sqrt(1 + eps).
    ModelConfig cfg;
    cfg.roi_edge = 4;
    ModelParams<double> m = init_model<double>(cfg, 4);
    auto identity_block = [](ConvBlockParams<double>& b) {
        std::fill(b.w.begin(), b.w.end(), 0.0);
        for (int co = 0; co < b.out_ch; ++co) {
            const int ci = co % b.in_ch;
            b.w[(static_cast<std::size_t>(co) * b.in_ch + ci) * 27 + 13] = 1.0;  // center tap
        }
        std::fill(b.bias.begin(), b.bias.end(), 0.0);
        std::fill(b.bn_scale.begin(), b.bn_scale.end(), 1.0);
        std::fill(b.bn_shift.begin(), b.bn_shift.end(), 0.0);
        std::fill(b.bn_mean.begin(), b.bn_mean.end(), 0.0);
        std::fill(b.bn_var.begin(), b.bn_var.end(), 1.0);
    };
    identity_block(m.app_encoder.block1);
    identity_block(m.app_encoder.block2);

    const auto in = random_input(4, 99, -2.0, 2.0);
    const auto f = encoder_forward(m.app_encoder, cfg, in, Mode::Eval);

    // Independent hand pipeline.
    const double s = 1.0 / std::sqrt(1.0 + cfg.bn_eps);
    auto relu = [](double x) { return x > 0.0 ? x : 0.0; };
    std::vector<double> a1(64);
    for (int i = 0; i < 64; ++i) a1[i] = relu(in[i] * s);
    std::vector<double> p1(8);  // 2x2x2 pooled
    for (int z = 0; z < 2; ++z)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x) {
                double best = -1e300;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            best = std::max(best,
                                            a1[((2 * z + dz) * 4 + 2 * y + dy) * 4 + 2 * x + dx]);
                p1[(z * 2 + y) * 2 + x] = best;
            }
    // Block 2 routes channel co from input channel co % 8; block 1 put the
    // same map on every channel, so all features share one expected value.
    double best2 = -1e300;
    for (double v : p1) best2 = std::max(best2, relu(v * s));
    for (int k = 0; k < 16; ++k) CHECK(f[k] == doctest::Approx(best2).epsilon(1e-12));
}

TEST_CASE("gate_alpha") {
    QualityVector q{0.4, 0.8, 0.6};
    SUBCASE("vanishing weights give 0.5 everywhere") {
        GateParams<double> g{-40.0, -40.0, -40.0, 0.0};
        CHECK(gate_alpha(g, q) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(gate_alpha(g, QualityVector{0.99, 0.01, 0.5}) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("unit weights at q = (1,1,1) give sigmoid(1)") {
        const double theta_unit = std::log(std::exp(1.0) - 1.0);  // softplus == 1
        GateParams<double> g{theta_unit, theta_unit, theta_unit, 0.0};
        CHECK(gate_alpha(g, QualityVector{1.0, 1.0, 1.0}) ==
              doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-9));
    }
    SUBCASE("monotone in each quality channel over a grid") {
        Prng rng(17);
        for (int trial = 0; trial < 5; ++trial) {
            GateParams<double> g{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3),
                                 rng.uniform(-2, 2)};
            const int steps = 5;
            auto at = [&](int i) { return i / double(steps - 1); };
            for (int a = 0; a < steps; ++a)
                for (int b = 0; b < steps; ++b)
                    for (int c = 0; c + 1 < steps; ++c) {
                        // increasing q_ct
                        CHECK(gate_alpha(g, {at(c + 1), at(a), at(b)}) >=
                              gate_alpha(g, {at(c), at(a), at(b)}));
                        // increasing q_topo
                        CHECK(gate_alpha(g, {at(a), at(b), at(c + 1)}) >=
                              gate_alpha(g, {at(a), at(b), at(c)}));
                        // increasing q_reg
                        CHECK(gate_alpha(g, {at(a), at(c + 1), at(b)}) <=
                              gate_alpha(g, {at(a), at(c), at(b)}));
                    }
        }
    }
}

TEST_CASE("predict endpoint fusion ignores the unused branch") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 7);

    CasePair pair;
    pair.fu_roi = oracles::random_volume(8, 8, 8, -1000, 400, 70);
    pair.bl_roi = oracles::random_volume(8, 8, 8, -1000, 400, 71);
    pair.delta = temporal_difference(pair.fu_roi, pair.bl_roi);
    QualityVector q{0.5, 0.5, 0.5};

    SUBCASE("alpha forced to 1 by a large gate bias") {
        m.gate.b = 40.0;
        const Prediction p1 = predict(m, cfg, pair, q);
        CHECK(p1.alpha == 1.0);
        CasePair perturbed = pair;
        for (double& x : perturbed.delta.data) x += 123.0;
        const Prediction p2 = predict(m, cfg, perturbed, q);
        CHECK(p2.prob == p1.prob);
        CHECK(p2.logit_delta != p1.logit_delta);
    }
    SUBCASE("alpha forced to 0") {
        m.gate.b = -40.0;
        const Prediction p1 = predict(m, cfg, pair, q);
        CHECK(p1.alpha <= 1e-15);  // sigmoid(-40ish) underflows the mix below one ulp
        CasePair perturbed = pair;
        for (double& x : perturbed.fu_roi.data) x += 77.0;
        const Prediction p2 = predict(m, cfg, perturbed, q);
        CHECK(p2.prob == p1.prob);
    }
    SUBCASE("frozen fusion modes") {
        const Prediction pa = predict(m, cfg, pair, q, Fusion::AppOnly);
        CHECK(pa.alpha == 1.0);
        CHECK(pa.fused_logit == pa.logit_app);
        const Prediction pd = predict(m, cfg, pair, q, Fusion::DeltaOnly);
        CHECK(pd.alpha == 0.0);
        CHECK(pd.fused_logit == pd.logit_delta);
    }
}

TEST_CASE("prediction recomposes from its own diagnostics") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    for (int trial = 0; trial < 10; ++trial) {
        ModelParams<double> m = init_model<double>(cfg, 100 + trial);
        Prng rng(200 + trial);
        m.gate.theta1 = rng.uniform(-2, 2);
        m.gate.theta2 = rng.uniform(-2, 2);
        m.gate.theta3 = rng.uniform(-2, 2);
        m.gate.b = rng.uniform(-1, 1);

        CasePair pair;
        pair.fu_roi = oracles::random_volume(8, 8, 8, -1000, 400, 300 + trial);
        pair.bl_roi = oracles::random_volume(8, 8, 8, -1000, 400, 400 + trial);
        pair.delta = temporal_difference(pair.fu_roi, pair.bl_roi);
        const QualityVector q{rng.uniform(0, 0.99), rng.uniform(0, 1), rng.uniform(0.01, 1)};

        const Prediction p = predict(m, cfg, pair, q);
        const double recomposed =
            stable_sigmoid(p.alpha * p.logit_app + (1.0 - p.alpha) * p.logit_delta);
        CHECK(std::abs(p.prob - recomposed) < 1e-9);
        CHECK(std::abs(p.fused_logit -
                       (p.alpha * p.logit_app + (1.0 - p.alpha) * p.logit_delta)) < 1e-9);
        CHECK(p.prob > 0.0);
        CHECK(p.prob < 1.0);
    }
}

TEST_CASE("loss analytic points") {
    CHECK(loss_value(0.5, 1, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(loss_value(0.5, 1, 1.0) == doctest::Approx(std::log(2.0) + 0.25).epsilon(1e-12));
    SUBCASE("grid minimization at the clamp floor") {
        const double at_truth = loss_value(1.0, 1, 0.5);
        for (double p = 0.01; p < 1.0; p += 0.01)
            CHECK(loss_value(p, 1, 0.5) >= at_truth);
        CHECK(at_truth == doctest::Approx(-std::log(1.0 - 1e-7) + 0.5 * 1e-14).epsilon(1e-3));
    }
}

TEST_CASE("zero-weight heads give zero gate-bias gradient") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 11);
    std::fill(m.head_app.w.begin(), m.head_app.w.end(), 0.0);
    std::fill(m.head_delta.w.begin(), m.head_delta.w.end(), 0.0);
    m.head_app.b = 0.0;
    m.head_delta.b = 0.0;

    OwnedBatch batch = random_batch(cfg, 2, 31);
    const auto result = gradients(m, cfg, batch.refs, Fusion::QualityGate, 0.5);

    const auto layout = param_layout(cfg);
    for (const auto& block : layout) {
        if (block.name == "gate.b") {
            CHECK(result.grad[block.offset] == 0.0);
        }
        if (block.name == "gate.theta") {
            for (std::size_t i = 0; i < block.size; ++i) CHECK(result.grad[block.offset + i] == 0.0);
        }
    }
}

TEST_CASE("analytic gradients match central finite differences") {
    SUBCASE("quality gate, every parameter") {
        auto probe = grad_check::make_probe(1);
        CHECK(grad_check::worst_rel_error(probe, Fusion::QualityGate) < 1e-4);
    }
    SUBCASE("concat head, strided subset") {
        auto probe = grad_check::make_probe(5);
        CHECK(grad_check::worst_rel_error(probe, Fusion::ConcatAll, 0.5, 3) < 1e-4);
    }
    SUBCASE("app only, strided subset") {
        auto probe = grad_check::make_probe(5);
        CHECK(grad_check::worst_rel_error(probe, Fusion::AppOnly, 0.5, 3) < 1e-4);
    }
    SUBCASE("delta only, strided subset") {
        auto probe = grad_check::make_probe(1);
        CHECK(grad_check::worst_rel_error(probe, Fusion::DeltaOnly, 0.5, 3) < 1e-4);
    }
}

TEST_CASE("finite differences converge to the analytic gradient as h shrinks") {
    // At an unscaled random point h = 1e-3 can straddle pool/ReLU kinks, so
    // this checks correctness the other way: shrinking h must drive the FD
    // toward the analytic value on a sample of parameters.
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 77);
    OwnedBatch batch = random_batch(cfg, 2, 78);
    const auto analytic = gradients(m, cfg, batch.refs, Fusion::QualityGate, 0.5);

    std::vector<double> flat = flatten(m);
    ModelParams<double> mp = m;
    for (std::size_t i = 0; i < flat.size(); i += 401) {
        const double keep = flat[i];
        const double h = 1e-5;
        flat[i] = keep + h;
        unflatten(mp, flat);
        const double up = batch_loss(mp, cfg, batch.refs, Fusion::QualityGate, 0.5);
        flat[i] = keep - h;
        unflatten(mp, flat);
        const double down = batch_loss(mp, cfg, batch.refs, Fusion::QualityGate, 0.5);
        flat[i] = keep;
        const double fd = (up - down) / (2.0 * h);
        CHECK(rel_err(fd, analytic.grad[i]) < 1e-4);
    }
}

TEST_CASE("mean-loss gradient is invariant to duplicating the batch") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> m = init_model<double>(cfg, 41);
    OwnedBatch batch = random_batch(cfg, 3, 42);

    std::vector<BatchCaseRef<double>> doubled = batch.refs;
    doubled.insert(doubled.end(), batch.refs.begin(), batch.refs.end());

    SUBCASE("with frozen normalizer statistics") {
        GradOptions opts;
        opts.frozen_stats = true;
        ModelParams<double> m2 = m;
        const auto g1 = gradients(m, cfg, batch.refs, Fusion::QualityGate, 0.5, opts);
        const auto g2 = gradients(m2, cfg, doubled, Fusion::QualityGate, 0.5, opts);
        CHECK(g1.mean_loss == doctest::Approx(g2.mean_loss).epsilon(1e-12));
        for (std::size_t i = 0; i < g1.grad.size(); ++i)
            CHECK(g1.grad[i] == doctest::Approx(g2.grad[i]).epsilon(1e-9));
    }
    SUBCASE("with batch statistics (duplication preserves them)") {
        ModelParams<double> m2 = m;
        const auto g1 = gradients(m, cfg, batch.refs, Fusion::QualityGate, 0.5);
        const auto g2 = gradients(m2, cfg, doubled, Fusion::QualityGate, 0.5);
        CHECK(g1.mean_loss == doctest::Approx(g2.mean_loss).epsilon(1e-12));
        for (std::size_t i = 0; i < g1.grad.size(); ++i)
            CHECK(g1.grad[i] == doctest::Approx(g2.grad[i]).epsilon(1e-9));
    }
}

TEST_CASE("float and double instantiations agree") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    ModelParams<double> md = init_model<double>(cfg, 51);
    ModelParams<float> mf = cast_params<float>(md);

    OwnedBatch batch = random_batch(cfg, 2, 52);
    std::vector<std::vector<float>> fstorage;
    std::vector<BatchCaseRef<float>> frefs;
    for (std::size_t i = 0; i < batch.storage.size(); ++i)
        fstorage.emplace_back(batch.storage[i].begin(), batch.storage[i].end());
    for (std::size_t i = 0; i < batch.refs.size(); ++i) {
        BatchCaseRef<float> r;
        r.app = fstorage[2 * i].data();
        r.delta = fstorage[2 * i + 1].data();
        r.q = batch.refs[i].q;
        r.label = batch.refs[i].label;
        frefs.push_back(r);
    }

    const auto gd = gradients(md, cfg, batch.refs, Fusion::QualityGate, 0.5);
    const auto gf = gradients(mf, cfg, frefs, Fusion::QualityGate, 0.5);
    CHECK(std::abs(gd.mean_loss - gf.mean_loss) < 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < gd.grad.size(); ++i)
        worst = std::max(worst, std::abs(gd.grad[i] - static_cast<double>(gf.grad[i])));
    CHECK(worst < 1e-4);
}

TEST_CASE("param layout covers the flat vector exactly") {
    ModelConfig cfg;
    cfg.roi_edge = 8;
    const auto layout = param_layout(cfg);
    const auto flat = flatten(init_model<double>(cfg, 3));
    std::size_t covered = 0;
    for (const auto& b : layout) {
        CHECK(b.offset == covered);
        covered += b.size;
    }
    CHECK(covered == flat.size());
    CHECK(param_count<double>(cfg) == flat.size());

    ModelParams<double> m = init_model<double>(cfg, 9);
    ModelParams<double> copy = init_model<double>(cfg, 10);
    unflatten(copy, flatten(m));
    CHECK(flatten(copy) == flatten(m));
}
