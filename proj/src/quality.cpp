#include "topogate/quality.hpp"

#include <algorithm>
#include <cmath>

#include "topogate/errors.hpp"
#include "topogate/topology.hpp"

namespace topogate {

void QualityConfig::validate() const {
    if (!(kappa_ct > 0.0)) throw Error("QualityConfig: kappa_ct must be positive");
    if (!(tau > 0.0)) throw Error("QualityConfig: tau must be positive");
    if (!(ssim_eps > 0.0)) throw Error("QualityConfig: ssim_eps must be positive");
}

double variance_of_laplacian(const Volume& v) {
    const Volume lap = laplacian(v);
    double mean = 0.0;
    for (double x : lap.data) mean += x;
    mean /= static_cast<double>(lap.size());
    double var = 0.0;
    for (double x : lap.data) var += (x - mean) * (x - mean);
    return var / static_cast<double>(lap.size());
}

double q_ct(const Volume& v, const QualityConfig& cfg) {
    if (!(cfg.kappa_ct > 0.0)) throw Error("q_ct: kappa_ct must be positive");
    // tanh rounds to 1.0 in double for large arguments; keep the value
    // strictly inside [0, 1).
    return std::min(std::tanh(variance_of_laplacian(v) / cfg.kappa_ct), 1.0 - 1e-12);
}

namespace {

struct SliceStats {
    double mean = 0.0;
    double var = 0.0;
};

SliceStats slice_stats(const std::vector<double>& s) {
    SliceStats st;
    for (double x : s) st.mean += x;
    st.mean /= static_cast<double>(s.size());
    for (double x : s) st.var += (x - st.mean) * (x - st.mean);
    st.var /= static_cast<double>(s.size());
    return st;
}

inline double normalize_hu(double x) { return (x + 1000.0) / 1400.0; }

std::vector<double> axial_slice_normalized(const Volume& v, int z) {
    std::vector<double> s(static_cast<std::size_t>(v.dims[0]) * v.dims[1]);
    std::size_t i = 0;
    for (int y = 0; y < v.dims[1]; ++y)
        for (int x = 0; x < v.dims[0]; ++x) s[i++] = normalize_hu(v.at(x, y, z));
    return s;
}

}  // namespace

double ssim_slice(const std::vector<double>& a, const std::vector<double>& b,
                  const QualityConfig& cfg) {
    if (a.size() != b.size() || a.empty())
        throw ShapeMismatch("ssim_slice: slices must be non-empty and of equal size");
    const SliceStats sa = slice_stats(a);
    const SliceStats sb = slice_stats(b);
    double cov = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) cov += (a[i] - sa.mean) * (b[i] - sb.mean);
    cov /= static_cast<double>(a.size());

    const double numer = (2.0 * sa.mean * sb.mean + cfg.c1) * (2.0 * cov + cfg.c2);
    const double denom =
        (sa.mean * sa.mean + sb.mean * sb.mean + cfg.c1) * (sa.var + sb.var + cfg.c2);
    const double raw = numer / denom;
    return std::min(std::max(raw, 0.0), 1.0);
}

SliceConsistency q_reg(const Volume& fu, const Volume& bl, const QualityConfig& cfg) {
    if (!fu.same_grid(bl)) throw ShapeMismatch("q_reg: dims/spacing of FU and BL differ");

    SliceConsistency result;
    result.slices_total = fu.dims[2];
    double sum = 0.0;
    for (int z = 0; z < fu.dims[2]; ++z) {
        const std::vector<double> a = axial_slice_normalized(fu, z);
        const std::vector<double> b = axial_slice_normalized(bl, z);
        if (slice_stats(a).var <= cfg.ssim_eps || slice_stats(b).var <= cfg.ssim_eps)
            continue;  // constant slice on either side: excluded
        sum += ssim_slice(a, b, cfg);
        ++result.slices_used;
    }
    if (result.slices_used == 0) {
        result.all_constant = true;
        result.value = 0.0;
    } else {
        result.value = sum / result.slices_used;
    }
    return result;
}

CaseQuality quality_vector(const CasePair& pair, const QualityConfig& cfg) {
    cfg.validate();
    CaseQuality out;
    out.vol_fu = variance_of_laplacian(pair.fu_roi);
    out.q.q_ct = std::min(std::tanh(out.vol_fu / cfg.kappa_ct), 1.0 - 1e-12);

    const SliceConsistency reg = q_reg(pair.fu_roi, pair.bl_roi, cfg);
    out.q.q_reg = reg.value;
    out.slices_used = reg.slices_used;
    out.slices_total = reg.slices_total;
    out.constant_slices = reg.constant_slice_flag();

    bool down_fu = false, down_bl = false;
    const PersistenceDiagram diagram_fu = persistence_for_quality(pair.fu_roi, &down_fu);
    const PersistenceDiagram diagram_bl = persistence_for_quality(pair.bl_roi, &down_bl);
    out.topo_downsampled = down_fu || down_bl;
    out.w_inf = bottleneck_distance(diagram_fu, diagram_bl);
    out.q.q_topo = std::max(std::exp(-cfg.tau * out.w_inf), 1e-300);
    out.diagram_points = static_cast<int>(diagram_fu.size());
    out.total_persistence = diagram_fu.total_persistence();
    out.max_persistence = diagram_fu.max_persistence();
    return out;
}

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

CohortQuality compute_cohort_quality(const std::vector<CasePair>& cases,
                                     const QualityConfig& base, bool kappa_auto,
                                     bool tau_auto) {
    if (cases.empty()) throw EmptyInput("compute_cohort_quality: empty cohort");

    CohortQuality out;
    out.config = base;
    out.cases.resize(cases.size());

    // First pass gathers the scale-free measurements once.
    std::vector<double> vols(cases.size()), winfs(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        CaseQuality& cq = out.cases[i];
        cq.vol_fu = variance_of_laplacian(cases[i].fu_roi);
        const SliceConsistency reg = q_reg(cases[i].fu_roi, cases[i].bl_roi, base);
        cq.q.q_reg = reg.value;
        cq.slices_used = reg.slices_used;
        cq.slices_total = reg.slices_total;
        cq.constant_slices = reg.constant_slice_flag();

        bool down_fu = false, down_bl = false;
        const PersistenceDiagram dfu = persistence_for_quality(cases[i].fu_roi, &down_fu);
        const PersistenceDiagram dbl = persistence_for_quality(cases[i].bl_roi, &down_bl);
        cq.topo_downsampled = down_fu || down_bl;
        cq.w_inf = bottleneck_distance(dfu, dbl);
        cq.diagram_points = static_cast<int>(dfu.size());
        cq.total_persistence = dfu.total_persistence();
        cq.max_persistence = dfu.max_persistence();
        vols[i] = cq.vol_fu;
        winfs[i] = cq.w_inf;
    }

    out.median_vol = median(vols);
    out.median_w_inf = median(winfs);
    if (kappa_auto)
        out.config.kappa_ct = out.median_vol > 1e-12 ? out.median_vol : 1.0;
    if (tau_auto)
        out.config.tau =
            out.median_w_inf > 1e-12 ? std::log(2.0) / out.median_w_inf : 1.0;
    out.config.validate();

    for (CaseQuality& cq : out.cases) {
        cq.q.q_ct = std::min(std::tanh(cq.vol_fu / out.config.kappa_ct), 1.0 - 1e-12);
        cq.q.q_topo = std::max(std::exp(-out.config.tau * cq.w_inf), 1e-300);
    }
    return out;
}

}  // namespace topogate
