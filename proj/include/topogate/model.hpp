#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "topogate/quality.hpp"
#include "topogate/volume.hpp"

namespace topogate {

// Shallow dual-view 3D CNN with a quality-driven fusion gate. The whole
// parameter space is templated on the scalar type: training runs in float,
// finite-difference gradient checks in double.

enum class Mode { Train, Eval };

/// How the two view logits combine into the fused score.
enum class Fusion {
    QualityGate,  // alpha(q) * logit_app + (1-alpha) * logit_delta
    AppOnly,      // alpha frozen at 1, delta branch unused
    DeltaOnly,    // alpha frozen at 0, appearance branch unused
    ConcatAll     // single linear head on [f_app, f_delta, q]
};

struct ModelConfig {
    int roi_edge = 16;        // L, cubic input edge in voxels
    int channels1 = 8;        // block-1 output channels
    int channels2 = 16;       // block-2 output channels == feature width K
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double prob_clamp = 1e-7;

    int feature_width() const { return channels2; }
    int concat_width() const { return 2 * channels2 + 3; }
};

template <typename Real>
struct ConvBlockParams {
    int in_ch = 0, out_ch = 0;
    std::vector<Real> w;         // [out][in][3][3][3]
    std::vector<Real> bias;      // [out]
    std::vector<Real> bn_scale;  // gamma
    std::vector<Real> bn_shift;  // beta
    std::vector<Real> bn_mean;   // running mean (buffer, not a parameter)
    std::vector<Real> bn_var;    // running variance (buffer)
};

template <typename Real>
struct EncoderParams {
    ConvBlockParams<Real> block1, block2;
};

template <typename Real>
struct LinearHead {
    std::vector<Real> w;
    Real b = 0;
};

/// Unconstrained gate parameters; effective weights are softplus(theta_i),
/// so w_i >= 0 holds for every parameter value.
template <typename Real>
struct GateParams {
    Real theta1 = 0, theta2 = 0, theta3 = 0, b = 0;
};

template <typename Real>
struct ModelParams {
    EncoderParams<Real> app_encoder, delta_encoder;
    LinearHead<Real> head_app, head_delta;  // K -> 1
    LinearHead<Real> head_concat;           // 2K+3 -> 1, used by the ConcatAll baseline
    GateParams<Real> gate;
};

struct Prediction {
    double prob = 0.5;        // sigmoid(fused_logit)
    double alpha = 0.5;       // mixing weight; 1/0 when frozen, NaN for ConcatAll
    double logit_app = 0.0;
    double logit_delta = 0.0;
    double fused_logit = 0.0;
    QualityVector quality;
};

// --- scalar helpers -----------------------------------------------------------

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// --- construction and parameter plumbing --------------------------------------

template <typename Real>
ModelParams<Real> init_model(const ModelConfig& cfg, std::uint64_t seed);

template <typename Real>
std::size_t param_count(const ModelConfig& cfg);

template <typename Real>
std::vector<Real> flatten(const ModelParams<Real>& m);

template <typename Real>
void unflatten(ModelParams<Real>& m, const std::vector<Real>& flat);

struct TensorBlock {
    std::string name;
    std::size_t offset = 0, size = 0;
};
std::vector<TensorBlock> param_layout(const ModelConfig& cfg);

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& m);

// --- encoder inputs -----------------------------------------------------------

/// Affine intensity scaling applied before the encoders: appearance view
/// (x+1000)/1400, difference view x/1400. Keeps conv inputs near unit range.
template <typename Real>
std::vector<Real> appearance_input(const Volume& v);
template <typename Real>
std::vector<Real> difference_input(const Volume& v);

// --- forward ------------------------------------------------------------------

/// Single-ROI encoder pass: two (conv 3x3x3, pad 1 -> batch norm -> ReLU ->
/// 2x2x2 max pool) blocks, then global average pooling. Train mode uses the
/// statistics of this one-case batch; eval mode uses running statistics.
template <typename Real>
std::vector<Real> encoder_forward(const EncoderParams<Real>& p, const ModelConfig& cfg,
                                  const std::vector<Real>& roi, Mode mode);

template <typename Real>
double gate_alpha(const GateParams<Real>& g, const QualityVector& q);

/// Eval-mode prediction with full diagnostics. Both branches are always
/// evaluated so the reported logits stay meaningful for frozen-alpha modes.
template <typename Real>
Prediction predict(const ModelParams<Real>& m, const ModelConfig& cfg, const CasePair& pair,
                   const QualityVector& q, Fusion fusion = Fusion::QualityGate);

/// Same, from pre-normalized inputs.
template <typename Real>
Prediction predict_prepared(const ModelParams<Real>& m, const ModelConfig& cfg,
                            const std::vector<Real>& app, const std::vector<Real>& delta,
                            const QualityVector& q, Fusion fusion);

/// BCE plus a Brier calibration term; the probability is clamped to
/// [clamp, 1-clamp] before the logs.
double loss_value(double prob, int label, double lambda_brier, double clamp = 1e-7);

// --- training -----------------------------------------------------------------

template <typename Real>
struct BatchCaseRef {
    const Real* app = nullptr;    // normalized FU ROI, L^3
    const Real* delta = nullptr;  // normalized difference ROI, L^3
    QualityVector q;
    int label = 0;
};

struct GradOptions {
    bool update_running = false;  // fold batch statistics into the running buffers
    bool frozen_stats = false;    // normalize with running statistics instead of batch ones
};

template <typename Real>
struct BatchGradResult {
    double mean_loss = 0.0;
    std::vector<Real> grad;  // flatten() layout
    std::vector<double> probs, alphas;
};

/// Exact reverse-mode gradients of the mean batch loss with respect to every
/// parameter, including through the batch-norm batch statistics and the
/// softplus gate reparameterization. Quality vectors are constants.
template <typename Real>
BatchGradResult<Real> gradients(ModelParams<Real>& m, const ModelConfig& cfg,
                                const std::vector<BatchCaseRef<Real>>& batch, Fusion fusion,
                                double lambda_brier, const GradOptions& opts = {});

/// Train-mode mean batch loss only (the finite-difference side of the
/// gradient check). Never touches running statistics.
template <typename Real>
double batch_loss(const ModelParams<Real>& m, const ModelConfig& cfg,
                  const std::vector<BatchCaseRef<Real>>& batch, Fusion fusion,
                  double lambda_brier, bool frozen_stats = false);

}  // namespace topogate
