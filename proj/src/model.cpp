#include "topogate/model.hpp"

#include <algorithm>
#include <cstring>
#include <limits>

#include "topogate/errors.hpp"
#include "topogate/rng.hpp"

namespace topogate {
namespace {

// ----- low-level kernels ------------------------------------------------------
// Layouts: batch tensors are ((b*C + c)*S + s) with S = n^3; padded buffers
// hold cin channels of (n+2)^3 each.

template <typename Real>
void pad_one(const Real* src, int cin, int n, Real* dst) {
    const int np = n + 2;
    const std::size_t plane = static_cast<std::size_t>(np) * np * np;
    std::fill(dst, dst + cin * plane, Real(0));
    for (int c = 0; c < cin; ++c)
        for (int z = 0; z < n; ++z)
            for (int y = 0; y < n; ++y) {
                const Real* s = src + ((static_cast<std::size_t>(c) * n + z) * n + y) * n;
                Real* d = dst + (static_cast<std::size_t>(c) * np + z + 1) * np * np +
                          (y + 1) * static_cast<std::size_t>(np) + 1;
                std::memcpy(d, s, sizeof(Real) * n);
            }
}

// y[co] = bias[co] + sum_ci w[co][ci] * x[ci], 3x3x3 taps, unit stride, pad 1.
template <typename Real>
void conv3_forward_one(const Real* padded, int cin, int n, const Real* w, const Real* bias,
                       Real* out, int cout) {
    const int np = n + 2;
    const std::size_t sp = static_cast<std::size_t>(n) * n * n;
    const std::size_t plane = static_cast<std::size_t>(np) * np * np;
    for (int co = 0; co < cout; ++co) {
        Real* yc = out + co * sp;
        std::fill(yc, yc + sp, bias ? bias[co] : Real(0));
        for (int ci = 0; ci < cin; ++ci) {
            const Real* k = w + (static_cast<std::size_t>(co) * cin + ci) * 27;
            const Real* xc = padded + ci * plane;
            for (int z = 0; z < n; ++z)
                for (int y = 0; y < n; ++y) {
                    Real* __restrict yrow = yc + (static_cast<std::size_t>(z) * n + y) * n;
                    for (int dz = 0; dz < 3; ++dz)
                        for (int dy = 0; dy < 3; ++dy) {
                            const Real* __restrict xrow =
                                xc + (static_cast<std::size_t>(z + dz) * np + y + dy) * np;
                            const Real k0 = k[(dz * 3 + dy) * 3 + 0];
                            const Real k1 = k[(dz * 3 + dy) * 3 + 1];
                            const Real k2 = k[(dz * 3 + dy) * 3 + 2];
                            for (int x = 0; x < n; ++x)
                                yrow[x] += k0 * xrow[x] + k1 * xrow[x + 1] + k2 * xrow[x + 2];
                        }
                }
        }
    }
}

// dW[co][ci][k] += sum_pos dy[co](pos) * padded_x[ci](pos + k); db[co] += sum dy.
template <typename Real>
void conv3_backward_weights_one(const Real* padded, int cin, int n, const Real* dy, int cout,
                                Real* dw, Real* dbias) {
    const int np = n + 2;
    const std::size_t sp = static_cast<std::size_t>(n) * n * n;
    const std::size_t plane = static_cast<std::size_t>(np) * np * np;
    for (int co = 0; co < cout; ++co) {
        const Real* gc = dy + co * sp;
        Real bsum = 0;
        for (std::size_t i = 0; i < sp; ++i) bsum += gc[i];
        dbias[co] += bsum;
        for (int ci = 0; ci < cin; ++ci) {
            const Real* xc = padded + ci * plane;
            Real* wk = dw + (static_cast<std::size_t>(co) * cin + ci) * 27;
            for (int dz = 0; dz < 3; ++dz)
                for (int dy_ = 0; dy_ < 3; ++dy_)
                    for (int dx = 0; dx < 3; ++dx) {
                        Real acc = 0;
                        for (int z = 0; z < n; ++z)
                            for (int y = 0; y < n; ++y) {
                                const Real* __restrict grow =
                                    gc + (static_cast<std::size_t>(z) * n + y) * n;
                                const Real* __restrict xrow =
                                    xc + (static_cast<std::size_t>(z + dz) * np + y + dy_) * np +
                                    dx;
                                for (int x = 0; x < n; ++x) acc += grow[x] * xrow[x];
                            }
                        wk[dz * 9 + dy_ * 3 + dx] += acc;
                    }
        }
    }
}

// dx = transposed convolution: conv of padded dy with the flipped kernel and
// swapped channel roles.
template <typename Real>
void conv3_backward_input_one(const Real* dy_padded, int cout, int n, const Real* w, int cin,
                              Real* dx, std::vector<Real>& wt_scratch) {
    wt_scratch.assign(static_cast<std::size_t>(cin) * cout * 27, Real(0));
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci) {
            const Real* src = w + (static_cast<std::size_t>(co) * cin + ci) * 27;
            Real* dst = wt_scratch.data() + (static_cast<std::size_t>(ci) * cout + co) * 27;
            for (int k = 0; k < 27; ++k) dst[k] = src[26 - k];
        }
    conv3_forward_one(dy_padded, cout, n, wt_scratch.data(), static_cast<const Real*>(nullptr),
                      dx, cin);
}

template <typename Real>
struct BlockCache {
    int n = 0;       // conv spatial edge
    int m = 0;       // pooled spatial edge (n / 2)
    int cin = 0, cout = 0, batch = 0;
    bool batch_stats = true;   // whether mean/var came from this batch
    std::vector<Real> pre;     // conv output, pre-BN
    std::vector<Real> xhat;    // normalized
    std::vector<Real> act;     // post-ReLU
    std::vector<Real> pooled;
    std::vector<int> argmax;   // flat spatial index into act, per pooled voxel
    std::vector<Real> mean, var, istd;  // statistics actually used
};

template <typename Real>
struct EncoderCacheT {
    std::vector<Real> input;  // B x cin x L^3, contiguous
    BlockCache<Real> b1, b2;
    std::vector<Real> features;  // B x K
};

template <typename Real>
void block_forward(const ConvBlockParams<Real>& p, const Real* in, int batch, int n, Mode mode,
                   double eps, BlockCache<Real>& c) {
    const int cin = p.in_ch, cout = p.out_ch;
    const std::size_t sp = static_cast<std::size_t>(n) * n * n;
    c.n = n;
    c.m = n / 2;
    c.cin = cin;
    c.cout = cout;
    c.batch = batch;
    c.pre.resize(static_cast<std::size_t>(batch) * cout * sp);

    std::vector<Real> padded(static_cast<std::size_t>(cin) * (n + 2) * (n + 2) * (n + 2));
    for (int b = 0; b < batch; ++b) {
        pad_one(in + static_cast<std::size_t>(b) * cin * sp, cin, n, padded.data());
        conv3_forward_one(padded.data(), cin, n, p.w.data(), p.bias.data(),
                          c.pre.data() + static_cast<std::size_t>(b) * cout * sp, cout);
    }

    c.mean.resize(cout);
    c.var.resize(cout);
    c.istd.resize(cout);
    c.batch_stats = (mode == Mode::Train);
    if (mode == Mode::Train) {
        const double count = static_cast<double>(batch) * sp;
        for (int ch = 0; ch < cout; ++ch) {
            double sum = 0;
            for (int b = 0; b < batch; ++b) {
                const Real* v = c.pre.data() + (static_cast<std::size_t>(b) * cout + ch) * sp;
                for (std::size_t i = 0; i < sp; ++i) sum += v[i];
            }
            const double mu = sum / count;
            double sq = 0;
            for (int b = 0; b < batch; ++b) {
                const Real* v = c.pre.data() + (static_cast<std::size_t>(b) * cout + ch) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    const double d = static_cast<double>(v[i]) - mu;
                    sq += d * d;
                }
            }
            c.mean[ch] = static_cast<Real>(mu);
            c.var[ch] = static_cast<Real>(sq / count);
            c.istd[ch] = static_cast<Real>(1.0 / std::sqrt(sq / count + eps));
        }
    } else {
        for (int ch = 0; ch < cout; ++ch) {
            c.mean[ch] = p.bn_mean[ch];
            c.var[ch] = p.bn_var[ch];
            c.istd[ch] =
                static_cast<Real>(1.0 / std::sqrt(static_cast<double>(p.bn_var[ch]) + eps));
        }
    }

    c.xhat.resize(c.pre.size());
    c.act.resize(c.pre.size());
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < cout; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(b) * cout + ch) * sp;
            const Real mu = c.mean[ch], is = c.istd[ch];
            const Real g = p.bn_scale[ch], beta = p.bn_shift[ch];
            for (std::size_t i = 0; i < sp; ++i) {
                const Real xh = (c.pre[off + i] - mu) * is;
                c.xhat[off + i] = xh;
                const Real out = g * xh + beta;
                c.act[off + i] = out > Real(0) ? out : Real(0);
            }
        }

    // 2x2x2 max pool; first maximum in scan order wins ties.
    const int m = c.m;
    const std::size_t spm = static_cast<std::size_t>(m) * m * m;
    c.pooled.resize(static_cast<std::size_t>(batch) * cout * spm);
    c.argmax.resize(c.pooled.size());
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < cout; ++ch) {
            const std::size_t in_off = (static_cast<std::size_t>(b) * cout + ch) * sp;
            const std::size_t out_off = (static_cast<std::size_t>(b) * cout + ch) * spm;
            for (int z = 0; z < m; ++z)
                for (int y = 0; y < m; ++y)
                    for (int x = 0; x < m; ++x) {
                        Real best = -std::numeric_limits<Real>::infinity();
                        int best_idx = 0;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const int sx = 2 * x + dx, sy = 2 * y + dy, sz = 2 * z + dz;
                                    const int idx = (sz * n + sy) * n + sx;
                                    if (c.act[in_off + idx] > best) {
                                        best = c.act[in_off + idx];
                                        best_idx = idx;
                                    }
                                }
                        const std::size_t o = out_off + (static_cast<std::size_t>(z) * m + y) * m + x;
                        c.pooled[o] = best;
                        c.argmax[o] = best_idx;
                    }
        }
}

template <typename Real>
struct BlockGrads {
    std::vector<Real>*w, *bias, *bn_scale, *bn_shift;
};

// dpooled -> (dW, db, dgamma, dbeta) and the gradient w.r.t. the block input.
// `block_input` is the same pointer block_forward consumed.
template <typename Real>
void block_backward(const ConvBlockParams<Real>& p, const BlockCache<Real>& c,
                    const Real* block_input, const Real* dpooled, BlockGrads<Real> g,
                    Real* dinput_or_null) {
    const int n = c.n, m = c.m, cin = c.cin, cout = c.cout, batch = c.batch;
    const std::size_t sp = static_cast<std::size_t>(n) * n * n;
    const std::size_t spm = static_cast<std::size_t>(m) * m * m;

    // Unpool.
    std::vector<Real> dact(static_cast<std::size_t>(batch) * cout * sp, Real(0));
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < cout; ++ch) {
            const std::size_t in_off = (static_cast<std::size_t>(b) * cout + ch) * sp;
            const std::size_t out_off = (static_cast<std::size_t>(b) * cout + ch) * spm;
            for (std::size_t i = 0; i < spm; ++i)
                dact[in_off + c.argmax[out_off + i]] += dpooled[out_off + i];
        }

    // ReLU mask, then batch-norm backward through the batch statistics.
    std::vector<Real> dpre(dact.size());
    const double count = static_cast<double>(batch) * sp;
    for (int ch = 0; ch < cout; ++ch) {
        double sum_dout = 0, sum_dout_xhat = 0, dgamma = 0, dbeta = 0;
        for (int b = 0; b < batch; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * cout + ch) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                const double dout =
                    c.act[off + i] > Real(0) ? static_cast<double>(dact[off + i]) : 0.0;
                const double xh = c.xhat[off + i];
                sum_dout += dout;
                sum_dout_xhat += dout * xh;
                dgamma += dout * xh;
                dbeta += dout;
            }
        }
        (*g.bn_scale)[ch] += static_cast<Real>(dgamma);
        (*g.bn_shift)[ch] += static_cast<Real>(dbeta);

        const double gs = static_cast<double>(p.bn_scale[ch]) * c.istd[ch];
        // With frozen statistics the normalizer is a constant affine map.
        const double mean_dout = c.batch_stats ? sum_dout / count : 0.0;
        const double mean_dout_xhat = c.batch_stats ? sum_dout_xhat / count : 0.0;
        for (int b = 0; b < batch; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * cout + ch) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                const double dout =
                    c.act[off + i] > Real(0) ? static_cast<double>(dact[off + i]) : 0.0;
                dpre[off + i] = static_cast<Real>(
                    gs * (dout - mean_dout - static_cast<double>(c.xhat[off + i]) * mean_dout_xhat));
            }
        }
    }

    // Convolution backward.
    const int np = n + 2;
    std::vector<Real> padded(static_cast<std::size_t>(std::max(cin, cout)) * np * np * np);
    std::vector<Real> wt_scratch;
    for (int b = 0; b < batch; ++b) {
        pad_one(block_input + static_cast<std::size_t>(b) * cin * sp, cin, n, padded.data());
        conv3_backward_weights_one(padded.data(), cin, n,
                                   dpre.data() + static_cast<std::size_t>(b) * cout * sp, cout,
                                   g.w->data(), g.bias->data());
        if (dinput_or_null) {
            pad_one(dpre.data() + static_cast<std::size_t>(b) * cout * sp, cout, n, padded.data());
            conv3_backward_input_one(padded.data(), cout, n, p.w.data(), cin,
                                     dinput_or_null + static_cast<std::size_t>(b) * cin * sp,
                                     wt_scratch);
        }
    }
}

template <typename Real>
void encoder_forward_batch(const EncoderParams<Real>& enc, const ModelConfig& cfg,
                           const std::vector<const Real*>& inputs, Mode mode,
                           EncoderCacheT<Real>& c) {
    const int batch = static_cast<int>(inputs.size());
    const int L = cfg.roi_edge;
    const std::size_t sp = static_cast<std::size_t>(L) * L * L;
    c.input.resize(static_cast<std::size_t>(batch) * sp);
    for (int b = 0; b < batch; ++b)
        std::memcpy(c.input.data() + b * sp, inputs[b], sizeof(Real) * sp);

    block_forward(enc.block1, c.input.data(), batch, L, mode, cfg.bn_eps, c.b1);
    block_forward(enc.block2, c.b1.pooled.data(), batch, c.b1.m, mode, cfg.bn_eps, c.b2);

    const int K = cfg.channels2;
    const int m2 = c.b2.m;
    const std::size_t sp2 = static_cast<std::size_t>(m2) * m2 * m2;
    c.features.resize(static_cast<std::size_t>(batch) * K);
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < K; ++ch) {
            const Real* v = c.b2.pooled.data() + (static_cast<std::size_t>(b) * K + ch) * sp2;
            double sum = 0;
            for (std::size_t i = 0; i < sp2; ++i) sum += v[i];
            c.features[static_cast<std::size_t>(b) * K + ch] =
                static_cast<Real>(sum / static_cast<double>(sp2));
        }
}

template <typename Real>
void encoder_backward_batch(const EncoderParams<Real>& enc, const ModelConfig& cfg,
                            const EncoderCacheT<Real>& c, const std::vector<Real>& dfeatures,
                            EncoderParams<Real>& grads) {
    const int batch = c.b1.batch;
    const int K = cfg.channels2;
    const int m2 = c.b2.m;
    const std::size_t sp2 = static_cast<std::size_t>(m2) * m2 * m2;

    std::vector<Real> dpool2(static_cast<std::size_t>(batch) * K * sp2);
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < K; ++ch) {
            const Real d = dfeatures[static_cast<std::size_t>(b) * K + ch] /
                           static_cast<Real>(sp2);
            Real* v = dpool2.data() + (static_cast<std::size_t>(b) * K + ch) * sp2;
            std::fill(v, v + sp2, d);
        }

    std::vector<Real> dpool1(c.b1.pooled.size(), Real(0));
    block_backward(enc.block2, c.b2, c.b1.pooled.data(), dpool2.data(),
                   BlockGrads<Real>{&grads.block2.w, &grads.block2.bias, &grads.block2.bn_scale,
                                    &grads.block2.bn_shift},
                   dpool1.data());
    block_backward(enc.block1, c.b1, c.input.data(), dpool1.data(),
                   BlockGrads<Real>{&grads.block1.w, &grads.block1.bias, &grads.block1.bn_scale,
                                    &grads.block1.bn_shift},
                   static_cast<Real*>(nullptr));
}

template <typename Real>
void update_running(ConvBlockParams<Real>& p, const BlockCache<Real>& c, double momentum) {
    for (int ch = 0; ch < p.out_ch; ++ch) {
        p.bn_mean[ch] = static_cast<Real>((1.0 - momentum) * p.bn_mean[ch] + momentum * c.mean[ch]);
        p.bn_var[ch] = static_cast<Real>((1.0 - momentum) * p.bn_var[ch] + momentum * c.var[ch]);
    }
}

template <typename Real>
ConvBlockParams<Real> make_block(int cin, int cout, Prng& rng) {
    ConvBlockParams<Real> b;
    b.in_ch = cin;
    b.out_ch = cout;
    b.w.resize(static_cast<std::size_t>(cout) * cin * 27);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * 27.0);
    for (Real& w : b.w) w = static_cast<Real>(rng.uniform(-bound, bound));
    b.bias.assign(cout, Real(0));
    b.bn_scale.assign(cout, Real(1));
    b.bn_shift.assign(cout, Real(0));
    b.bn_mean.assign(cout, Real(0));
    b.bn_var.assign(cout, Real(1));
    return b;
}

template <typename Real>
LinearHead<Real> make_head(int width, Prng& rng) {
    LinearHead<Real> h;
    h.w.resize(width);
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    for (Real& w : h.w) w = static_cast<Real>(rng.uniform(-bound, bound));
    h.b = 0;
    return h;
}

// Single visitation order shared by flatten, unflatten, and param_layout.
template <typename Real, typename Fn>
void visit_params(ModelParams<Real>& m, Fn&& fn) {
    auto block = [&](const char* prefix, ConvBlockParams<Real>& b) {
        fn(std::string(prefix) + ".w", b.w.data(), b.w.size());
        fn(std::string(prefix) + ".bias", b.bias.data(), b.bias.size());
        fn(std::string(prefix) + ".bn_scale", b.bn_scale.data(), b.bn_scale.size());
        fn(std::string(prefix) + ".bn_shift", b.bn_shift.data(), b.bn_shift.size());
    };
    block("app_encoder.block1", m.app_encoder.block1);
    block("app_encoder.block2", m.app_encoder.block2);
    block("delta_encoder.block1", m.delta_encoder.block1);
    block("delta_encoder.block2", m.delta_encoder.block2);
    fn("head_app.w", m.head_app.w.data(), m.head_app.w.size());
    fn("head_app.b", &m.head_app.b, 1);
    fn("head_delta.w", m.head_delta.w.data(), m.head_delta.w.size());
    fn("head_delta.b", &m.head_delta.b, 1);
    fn("head_concat.w", m.head_concat.w.data(), m.head_concat.w.size());
    fn("head_concat.b", &m.head_concat.b, 1);
    fn("gate.theta", &m.gate.theta1, 3);
    fn("gate.b", &m.gate.b, 1);
}

// Forward pass shared by gradients() and batch_loss(); fills the caches only
// for the branches the fusion mode uses.
template <typename Real>
struct ForwardState {
    EncoderCacheT<Real> app, delta;
    std::vector<double> la, ld, alpha, fused, prob;
    double mean_loss = 0.0;
    bool need_app = true, need_delta = true;
};

template <typename Real>
void batch_forward_train(const ModelParams<Real>& m, const ModelConfig& cfg,
                         const std::vector<BatchCaseRef<Real>>& batch, Fusion fusion,
                         double lambda_brier, bool frozen_stats, ForwardState<Real>& st) {
    if (batch.empty()) throw EmptyInput("gradients: empty batch");
    const int B = static_cast<int>(batch.size());
    const int K = cfg.channels2;
    st.need_app = fusion != Fusion::DeltaOnly;
    st.need_delta = fusion != Fusion::AppOnly;
    const Mode mode = frozen_stats ? Mode::Eval : Mode::Train;

    std::vector<const Real*> app_inputs, delta_inputs;
    for (const auto& c : batch) {
        app_inputs.push_back(c.app);
        delta_inputs.push_back(c.delta);
    }
    if (st.need_app) encoder_forward_batch(m.app_encoder, cfg, app_inputs, mode, st.app);
    if (st.need_delta)
        encoder_forward_batch(m.delta_encoder, cfg, delta_inputs, mode, st.delta);

    st.la.assign(B, 0.0);
    st.ld.assign(B, 0.0);
    st.alpha.assign(B, 0.5);
    st.fused.assign(B, 0.0);
    st.prob.assign(B, 0.5);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        if (st.need_app) {
            double acc = m.head_app.b;
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(m.head_app.w[k]) *
                       st.app.features[static_cast<std::size_t>(b) * K + k];
            st.la[b] = acc;
        }
        if (st.need_delta) {
            double acc = m.head_delta.b;
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(m.head_delta.w[k]) *
                       st.delta.features[static_cast<std::size_t>(b) * K + k];
            st.ld[b] = acc;
        }
        switch (fusion) {
            case Fusion::QualityGate:
                st.alpha[b] = gate_alpha(m.gate, batch[b].q);
                st.fused[b] = st.alpha[b] * st.la[b] + (1.0 - st.alpha[b]) * st.ld[b];
                break;
            case Fusion::AppOnly:
                st.alpha[b] = 1.0;
                st.fused[b] = st.la[b];
                break;
            case Fusion::DeltaOnly:
                st.alpha[b] = 0.0;
                st.fused[b] = st.ld[b];
                break;
            case Fusion::ConcatAll: {
                double acc = m.head_concat.b;
                for (int k = 0; k < K; ++k)
                    acc += static_cast<double>(m.head_concat.w[k]) *
                           st.app.features[static_cast<std::size_t>(b) * K + k];
                for (int k = 0; k < K; ++k)
                    acc += static_cast<double>(m.head_concat.w[K + k]) *
                           st.delta.features[static_cast<std::size_t>(b) * K + k];
                acc += static_cast<double>(m.head_concat.w[2 * K + 0]) * batch[b].q.q_ct;
                acc += static_cast<double>(m.head_concat.w[2 * K + 1]) * batch[b].q.q_reg;
                acc += static_cast<double>(m.head_concat.w[2 * K + 2]) * batch[b].q.q_topo;
                st.alpha[b] = std::numeric_limits<double>::quiet_NaN();
                st.fused[b] = acc;
                break;
            }
        }
        st.prob[b] = stable_sigmoid(st.fused[b]);
        total += loss_value(st.prob[b], batch[b].label, lambda_brier, cfg.prob_clamp);
    }
    st.mean_loss = total / B;
}

}  // namespace

// ----- public surface ----------------------------------------------------------

template <typename Real>
ModelParams<Real> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    Prng rng(seed, 0, "model-init");
    ModelParams<Real> m;
    m.app_encoder.block1 = make_block<Real>(1, cfg.channels1, rng);
    m.app_encoder.block2 = make_block<Real>(cfg.channels1, cfg.channels2, rng);
    m.delta_encoder.block1 = make_block<Real>(1, cfg.channels1, rng);
    m.delta_encoder.block2 = make_block<Real>(cfg.channels1, cfg.channels2, rng);
    m.head_app = make_head<Real>(cfg.channels2, rng);
    m.head_delta = make_head<Real>(cfg.channels2, rng);
    m.head_concat = make_head<Real>(cfg.concat_width(), rng);
    m.gate = GateParams<Real>{};  // thetas 0 (w_i = ln 2), bias 0: alpha starts near 0.5
    return m;
}

template <typename Real>
std::size_t param_count(const ModelConfig& cfg) {
    ModelParams<Real> m = init_model<Real>(cfg, 0);
    std::size_t n = 0;
    visit_params(m, [&](const std::string&, Real*, std::size_t size) { n += size; });
    return n;
}

template <typename Real>
std::vector<Real> flatten(const ModelParams<Real>& m) {
    std::vector<Real> out;
    visit_params(const_cast<ModelParams<Real>&>(m),
                 [&](const std::string&, Real* data, std::size_t size) {
                     out.insert(out.end(), data, data + size);
                 });
    return out;
}

template <typename Real>
void unflatten(ModelParams<Real>& m, const std::vector<Real>& flat) {
    std::size_t off = 0;
    visit_params(m, [&](const std::string&, Real* data, std::size_t size) {
        std::copy(flat.begin() + off, flat.begin() + off + size, data);
        off += size;
    });
    if (off != flat.size()) throw Error("unflatten: size mismatch");
}

std::vector<TensorBlock> param_layout(const ModelConfig& cfg) {
    ModelParams<double> m = init_model<double>(cfg, 0);
    std::vector<TensorBlock> out;
    std::size_t off = 0;
    visit_params(m, [&](const std::string& name, double*, std::size_t size) {
        out.push_back({name, off, size});
        off += size;
    });
    return out;
}

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& m) {
    ModelParams<To> out;
    auto conv_block = [](const ConvBlockParams<From>& b) {
        ConvBlockParams<To> o;
        o.in_ch = b.in_ch;
        o.out_ch = b.out_ch;
        auto cast = [](const std::vector<From>& v) {
            return std::vector<To>(v.begin(), v.end());
        };
        o.w = cast(b.w);
        o.bias = cast(b.bias);
        o.bn_scale = cast(b.bn_scale);
        o.bn_shift = cast(b.bn_shift);
        o.bn_mean = cast(b.bn_mean);
        o.bn_var = cast(b.bn_var);
        return o;
    };
    out.app_encoder.block1 = conv_block(m.app_encoder.block1);
    out.app_encoder.block2 = conv_block(m.app_encoder.block2);
    out.delta_encoder.block1 = conv_block(m.delta_encoder.block1);
    out.delta_encoder.block2 = conv_block(m.delta_encoder.block2);
    out.head_app.w.assign(m.head_app.w.begin(), m.head_app.w.end());
    out.head_app.b = static_cast<To>(m.head_app.b);
    out.head_delta.w.assign(m.head_delta.w.begin(), m.head_delta.w.end());
    out.head_delta.b = static_cast<To>(m.head_delta.b);
    out.head_concat.w.assign(m.head_concat.w.begin(), m.head_concat.w.end());
    out.head_concat.b = static_cast<To>(m.head_concat.b);
    out.gate.theta1 = static_cast<To>(m.gate.theta1);
    out.gate.theta2 = static_cast<To>(m.gate.theta2);
    out.gate.theta3 = static_cast<To>(m.gate.theta3);
    out.gate.b = static_cast<To>(m.gate.b);
    return out;
}

template <typename Real>
std::vector<Real> appearance_input(const Volume& v) {
    std::vector<Real> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<Real>((v.data[i] + 1000.0) / 1400.0);
    return out;
}

template <typename Real>
std::vector<Real> difference_input(const Volume& v) {
    std::vector<Real> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<Real>(v.data[i] / 1400.0);
    return out;
}

template <typename Real>
std::vector<Real> encoder_forward(const EncoderParams<Real>& p, const ModelConfig& cfg,
                                  const std::vector<Real>& roi, Mode mode) {
    const std::size_t expected =
        static_cast<std::size_t>(cfg.roi_edge) * cfg.roi_edge * cfg.roi_edge;
    if (roi.size() != expected)
        throw ShapeMismatch("encoder_forward: ROI size does not match the configured edge");
    EncoderCacheT<Real> cache;
    encoder_forward_batch(p, cfg, {roi.data()}, mode, cache);
    return cache.features;
}

template <typename Real>
double gate_alpha(const GateParams<Real>& g, const QualityVector& q) {
    const double z = softplus(static_cast<double>(g.theta1)) * q.q_ct +
                     softplus(static_cast<double>(g.theta2)) * q.q_topo -
                     softplus(static_cast<double>(g.theta3)) * q.q_reg +
                     static_cast<double>(g.b);
    return stable_sigmoid(z);
}

double loss_value(double prob, int label, double lambda_brier, double clamp) {
    const double p = std::min(std::max(prob, clamp), 1.0 - clamp);
    const double y = static_cast<double>(label);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p)) +
           lambda_brier * (p - y) * (p - y);
}

template <typename Real>
Prediction predict_prepared(const ModelParams<Real>& m, const ModelConfig& cfg,
                            const std::vector<Real>& app, const std::vector<Real>& delta,
                            const QualityVector& q, Fusion fusion) {
    const int K = cfg.channels2;
    const std::vector<Real> fa = encoder_forward(m.app_encoder, cfg, app, Mode::Eval);
    const std::vector<Real> fd = encoder_forward(m.delta_encoder, cfg, delta, Mode::Eval);

    Prediction pred;
    pred.quality = q;
    double la = m.head_app.b, ld = m.head_delta.b;
    for (int k = 0; k < K; ++k) {
        la += static_cast<double>(m.head_app.w[k]) * fa[k];
        ld += static_cast<double>(m.head_delta.w[k]) * fd[k];
    }
    pred.logit_app = la;
    pred.logit_delta = ld;
    switch (fusion) {
        case Fusion::QualityGate:
            pred.alpha = gate_alpha(m.gate, q);
            pred.fused_logit = pred.alpha * la + (1.0 - pred.alpha) * ld;
            break;
        case Fusion::AppOnly:
            pred.alpha = 1.0;
            pred.fused_logit = la;
            break;
        case Fusion::DeltaOnly:
            pred.alpha = 0.0;
            pred.fused_logit = ld;
            break;
        case Fusion::ConcatAll: {
            double acc = m.head_concat.b;
            for (int k = 0; k < K; ++k) acc += static_cast<double>(m.head_concat.w[k]) * fa[k];
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(m.head_concat.w[K + k]) * fd[k];
            acc += static_cast<double>(m.head_concat.w[2 * K + 0]) * q.q_ct;
            acc += static_cast<double>(m.head_concat.w[2 * K + 1]) * q.q_reg;
            acc += static_cast<double>(m.head_concat.w[2 * K + 2]) * q.q_topo;
            pred.alpha = std::numeric_limits<double>::quiet_NaN();
            pred.fused_logit = acc;
            break;
        }
    }
    pred.prob = stable_sigmoid(pred.fused_logit);
    return pred;
}

template <typename Real>
Prediction predict(const ModelParams<Real>& m, const ModelConfig& cfg, const CasePair& pair,
                   const QualityVector& q, Fusion fusion) {
    return predict_prepared(m, cfg, appearance_input<Real>(pair.fu_roi),
                            difference_input<Real>(pair.delta), q, fusion);
}

template <typename Real>
double batch_loss(const ModelParams<Real>& m, const ModelConfig& cfg,
                  const std::vector<BatchCaseRef<Real>>& batch, Fusion fusion,
                  double lambda_brier, bool frozen_stats) {
    ForwardState<Real> st;
    batch_forward_train(m, cfg, batch, fusion, lambda_brier, frozen_stats, st);
    return st.mean_loss;
}

template <typename Real>
BatchGradResult<Real> gradients(ModelParams<Real>& m, const ModelConfig& cfg,
                                const std::vector<BatchCaseRef<Real>>& batch, Fusion fusion,
                                double lambda_brier, const GradOptions& opts) {
    const int B = static_cast<int>(batch.size());
    const int K = cfg.channels2;

    ForwardState<Real> st;
    batch_forward_train(m, cfg, batch, fusion, lambda_brier, opts.frozen_stats, st);

    // Zero-shaped gradient container (running buffers unused).
    ModelParams<Real> g = m;
    visit_params(g, [](const std::string&, Real* data, std::size_t size) {
        std::fill(data, data + size, Real(0));
    });

    std::vector<Real> dfa(st.need_app ? static_cast<std::size_t>(B) * K : 0, Real(0));
    std::vector<Real> dfd(st.need_delta ? static_cast<std::size_t>(B) * K : 0, Real(0));

    for (int b = 0; b < B; ++b) {
        const double p_raw = st.prob[b];
        const double clamp = cfg.prob_clamp;
        const double p = std::min(std::max(p_raw, clamp), 1.0 - clamp);
        const double y = static_cast<double>(batch[b].label);
        // d(loss)/d(p_clamped); the clamp has zero slope outside its window.
        double dLdp = -y / p + (1.0 - y) / (1.0 - p) + 2.0 * lambda_brier * (p - y);
        const double dpds = (p_raw > clamp && p_raw < 1.0 - clamp) ? p_raw * (1.0 - p_raw) : 0.0;
        const double ds = dLdp * dpds / static_cast<double>(B);

        double dla = 0.0, dld = 0.0;
        switch (fusion) {
            case Fusion::QualityGate: {
                const double a = st.alpha[b];
                dla = ds * a;
                dld = ds * (1.0 - a);
                const double dalpha = ds * (st.la[b] - st.ld[b]);
                const double dz = dalpha * a * (1.0 - a);
                const QualityVector& q = batch[b].q;
                g.gate.theta1 += static_cast<Real>(
                    dz * q.q_ct * stable_sigmoid(static_cast<double>(m.gate.theta1)));
                g.gate.theta2 += static_cast<Real>(
                    dz * q.q_topo * stable_sigmoid(static_cast<double>(m.gate.theta2)));
                g.gate.theta3 += static_cast<Real>(
                    -dz * q.q_reg * stable_sigmoid(static_cast<double>(m.gate.theta3)));
                g.gate.b += static_cast<Real>(dz);
                break;
            }
            case Fusion::AppOnly:
                dla = ds;
                break;
            case Fusion::DeltaOnly:
                dld = ds;
                break;
            case Fusion::ConcatAll: {
                for (int k = 0; k < K; ++k) {
                    g.head_concat.w[k] += static_cast<Real>(
                        ds * st.app.features[static_cast<std::size_t>(b) * K + k]);
                    g.head_concat.w[K + k] += static_cast<Real>(
                        ds * st.delta.features[static_cast<std::size_t>(b) * K + k]);
                    dfa[static_cast<std::size_t>(b) * K + k] +=
                        static_cast<Real>(ds * m.head_concat.w[k]);
                    dfd[static_cast<std::size_t>(b) * K + k] +=
                        static_cast<Real>(ds * m.head_concat.w[K + k]);
                }
                g.head_concat.w[2 * K + 0] += static_cast<Real>(ds * batch[b].q.q_ct);
                g.head_concat.w[2 * K + 1] += static_cast<Real>(ds * batch[b].q.q_reg);
                g.head_concat.w[2 * K + 2] += static_cast<Real>(ds * batch[b].q.q_topo);
                g.head_concat.b += static_cast<Real>(ds);
                break;
            }
        }
        if (fusion == Fusion::QualityGate || fusion == Fusion::AppOnly) {
            for (int k = 0; k < K; ++k) {
                g.head_app.w[k] += static_cast<Real>(
                    dla * st.app.features[static_cast<std::size_t>(b) * K + k]);
                dfa[static_cast<std::size_t>(b) * K + k] +=
                    static_cast<Real>(dla * m.head_app.w[k]);
            }
            g.head_app.b += static_cast<Real>(dla);
        }
        if (fusion == Fusion::QualityGate || fusion == Fusion::DeltaOnly) {
            for (int k = 0; k < K; ++k) {
                g.head_delta.w[k] += static_cast<Real>(
                    dld * st.delta.features[static_cast<std::size_t>(b) * K + k]);
                dfd[static_cast<std::size_t>(b) * K + k] +=
                    static_cast<Real>(dld * m.head_delta.w[k]);
            }
            g.head_delta.b += static_cast<Real>(dld);
        }
    }

    if (st.need_app) encoder_backward_batch(m.app_encoder, cfg, st.app, dfa, g.app_encoder);
    if (st.need_delta)
        encoder_backward_batch(m.delta_encoder, cfg, st.delta, dfd, g.delta_encoder);

    if (opts.update_running && !opts.frozen_stats) {
        if (st.need_app) {
            update_running(m.app_encoder.block1, st.app.b1, cfg.bn_momentum);
            update_running(m.app_encoder.block2, st.app.b2, cfg.bn_momentum);
        }
        if (st.need_delta) {
            update_running(m.delta_encoder.block1, st.delta.b1, cfg.bn_momentum);
            update_running(m.delta_encoder.block2, st.delta.b2, cfg.bn_momentum);
        }
    }

    BatchGradResult<Real> result;
    result.mean_loss = st.mean_loss;
    result.grad = flatten(g);
    result.probs = st.prob;
    result.alphas = st.alpha;
    return result;
}

// ----- explicit instantiations ---------------------------------------------------

#define TOPOGATE_INSTANTIATE(Real)                                                              \
    template ModelParams<Real> init_model<Real>(const ModelConfig&, std::uint64_t);             \
    template std::size_t param_count<Real>(const ModelConfig&);                                 \
    template std::vector<Real> flatten<Real>(const ModelParams<Real>&);                         \
    template void unflatten<Real>(ModelParams<Real>&, const std::vector<Real>&);                \
    template std::vector<Real> appearance_input<Real>(const Volume&);                           \
    template std::vector<Real> difference_input<Real>(const Volume&);                           \
    template std::vector<Real> encoder_forward<Real>(const EncoderParams<Real>&,                \
                                                     const ModelConfig&,                        \
                                                     const std::vector<Real>&, Mode);           \
    template double gate_alpha<Real>(const GateParams<Real>&, const QualityVector&);            \
    template Prediction predict_prepared<Real>(const ModelParams<Real>&, const ModelConfig&,    \
                                               const std::vector<Real>&,                        \
                                               const std::vector<Real>&, const QualityVector&,  \
                                               Fusion);                                         \
    template Prediction predict<Real>(const ModelParams<Real>&, const ModelConfig&,             \
                                      const CasePair&, const QualityVector&, Fusion);           \
    template double batch_loss<Real>(const ModelParams<Real>&, const ModelConfig&,              \
                                     const std::vector<BatchCaseRef<Real>>&, Fusion, double,    \
                                     bool);                                                     \
    template BatchGradResult<Real> gradients<Real>(ModelParams<Real>&, const ModelConfig&,      \
                                                   const std::vector<BatchCaseRef<Real>>&,      \
                                                   Fusion, double, const GradOptions&);

TOPOGATE_INSTANTIATE(float)
TOPOGATE_INSTANTIATE(double)
#undef TOPOGATE_INSTANTIATE

template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<double> cast_params<double, double>(const ModelParams<double>&);

}  // namespace topogate
