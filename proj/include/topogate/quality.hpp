#pragma once

#include <vector>

#include "topogate/volume.hpp"

namespace topogate {

/// Bounded per-case quality signals: appearance sharpness, slice-wise
/// registration consistency, topological stability.
struct QualityVector {
    double q_ct = 0.0;    // [0, 1)
    double q_reg = 0.0;   // [0, 1]
    double q_topo = 1.0;  // (0, 1]
};

struct QualityConfig {
    double kappa_ct = 1.0;   // sharpness scale; > 0
    double tau = 1.0;        // stability decay; > 0
    double ssim_eps = 1e-6;  // constant-slice variance threshold (normalized units)
    double c1 = 1e-4;        // SSIM stabilizers on unit dynamic range: (0.01)^2
    double c2 = 9e-4;        // (0.03)^2

    void validate() const;
};

/// Population variance of the 6-neighbor Laplacian response.
double variance_of_laplacian(const Volume& v);

/// tanh(variance_of_laplacian / kappa_ct); strictly below 1.
double q_ct(const Volume& v, const QualityConfig& cfg);

/// Global-statistics SSIM of two same-shape slices whose intensities are
/// already normalized to [0,1], clamped to [0,1].
double ssim_slice(const std::vector<double>& a, const std::vector<double>& b,
                  const QualityConfig& cfg);

struct SliceConsistency {
    double value = 0.0;        // mean SSIM over qualifying slices, 0 if none
    int slices_used = 0;       // slices where both sides are non-constant
    int slices_total = 0;
    bool all_constant = false;  // no slice qualified

    /// Any excluded slice marks the case; this operationalizes the
    /// "constant slices" low-quality criterion for filtering.
    bool constant_slice_flag() const { return slices_used < slices_total; }
};

/// Mean slice-wise SSIM between FU and BL_reg over axial slices where both
/// slices are non-constant. Intensities are normalized via (x+1000)/1400
/// before the statistics.
SliceConsistency q_reg(const Volume& fu, const Volume& bl, const QualityConfig& cfg);

/// Everything measured about one case, including the diagnostics consumed by
/// the topology-only baseline and the quality CSV export.
struct CaseQuality {
    QualityVector q;
    double vol_fu = 0.0;           // variance of Laplacian of the FU ROI
    double w_inf = 0.0;            // bottleneck distance between the pair's diagrams
    int diagram_points = 0;        // FU diagram size
    double total_persistence = 0.0;
    double max_persistence = 0.0;
    int slices_used = 0;
    int slices_total = 0;
    bool constant_slices = false;
    bool topo_downsampled = false;
};

CaseQuality quality_vector(const CasePair& pair, const QualityConfig& cfg);

/// Per-cohort calibration of the free scales: kappa_ct is the median
/// variance-of-Laplacian, tau is ln(2)/median W_inf (the median case maps to
/// q_topo = 0.5). Returns the calibrated config plus per-case measurements in
/// cohort order, reusing one topology pass.
struct CohortQuality {
    QualityConfig config;
    std::vector<CaseQuality> cases;
    double median_vol = 0.0;
    double median_w_inf = 0.0;
};

CohortQuality compute_cohort_quality(const std::vector<CasePair>& cases,
                                     const QualityConfig& base,
                                     bool kappa_auto = true, bool tau_auto = true);

}  // namespace topogate
