#include "topogate/synth_cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "topogate/csv_io.hpp"
#include "topogate/errors.hpp"
#include "topogate/nifti_io.hpp"
#include "topogate/rng.hpp"

namespace topogate {

void CohortSpec::validate() const {
    if (n_patients < 1 || n_pairs < n_patients)
        throw BadSpec("CohortSpec: need n_pairs >= n_patients >= 1");
    if (roi_edge < 8) throw BadSpec("CohortSpec: roi_edge must be >= 8");
    if (pseudo_fraction < 0.0 || pseudo_fraction > 1.0)
        throw BadSpec("CohortSpec: pseudo_fraction outside [0,1]");
    if (corrupt_fraction < 0.0 || corrupt_fraction > 1.0)
        throw BadSpec("CohortSpec: corrupt_fraction outside [0,1]");
    if (noise_sigma_hu < 0.0 || misreg_mm < 0.0 || blur_sigma_vox < 0.0)
        throw BadSpec("CohortSpec: degradation knobs must be >= 0");
}

namespace {

constexpr double kAirHu = -1000.0;
constexpr double kClipHi = 400.0;
constexpr double kResidualFraction = 0.25;  // registration error left in BL_reg

struct Blob {
    double cx, cy, cz, sigma, amplitude;
};

struct Scene {
    std::vector<Blob> blobs;
    double value(double x, double y, double z) const {
        double acc = kAirHu;
        for (const Blob& b : blobs) {
            const double d2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy) +
                              (z - b.cz) * (z - b.cz);
            acc += b.amplitude * std::exp(-0.5 * d2 / (b.sigma * b.sigma));
        }
        return acc;
    }
};

// Which indices carry label 0 / the corrupt flag. Assignments are exact
// counts (round(fraction * n)) over a seeded shuffle, recomputable per case.
std::vector<bool> pick_indices(int n, double fraction, std::uint64_t seed,
                               const char* tag) {
    const int count = static_cast<int>(std::lround(fraction * n));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Prng rng(seed, 0, tag);
    rng.shuffle(order);
    std::vector<bool> picked(n, false);
    for (int i = 0; i < count; ++i) picked[order[i]] = true;
    return picked;
}

// Rank of `index` among picked indices, in shuffled pick order.
int pick_rank(int n, double fraction, std::uint64_t seed, const char* tag, int index) {
    const int count = static_cast<int>(std::lround(fraction * n));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Prng rng(seed, 0, tag);
    rng.shuffle(order);
    for (int i = 0; i < count; ++i)
        if (order[i] == index) return i;
    return -1;
}

Volume shift_trilinear(const Volume& v, const double t[3]) {
    Volume out = v;
    for (int z = 0; z < v.dims[2]; ++z)
        for (int y = 0; y < v.dims[1]; ++y)
            for (int x = 0; x < v.dims[0]; ++x)
                out.at(x, y, z) = sample_trilinear(v, x - t[0], y - t[1], z - t[2]);
    return out;
}

double smoothstep(double u) {
    u = std::min(std::max(u, 0.0), 1.0);
    return u * u * (3.0 - 2.0 * u);
}

}  // namespace

Volume gaussian_blur_volume(const Volume& v, double sigma_vox) {
    if (sigma_vox <= 0.0) return v;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_vox)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma_vox * sigma_vox));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    Volume out = v;
    for (int axis = 0; axis < 3; ++axis) {
        const Volume src = out;
        const int lim[3] = {v.dims[0], v.dims[1], v.dims[2]};
        for (int z = 0; z < lim[2]; ++z)
            for (int y = 0; y < lim[1]; ++y)
                for (int x = 0; x < lim[0]; ++x) {
                    double acc = 0.0;
                    for (int i = -radius; i <= radius; ++i) {
                        int c[3] = {x, y, z};
                        c[axis] = std::clamp(c[axis] + i, 0, lim[axis] - 1);
                        acc += kernel[i + radius] * src.at(c[0], c[1], c[2]);
                    }
                    out.at(x, y, z) = acc;
                }
    }
    return out;
}

SynthCase generate_pair(const CohortSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= spec.n_pairs) throw BadSpec("generate_pair: index out of range");

    const int L = spec.roi_edge;
    const double center = (L - 1) / 2.0;

    SynthCase out;
    CaseMeta& meta = out.meta;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case-%04d", index);
    meta.case_id = buf;
    std::snprintf(buf, sizeof(buf), "patient-%04d", index % spec.n_patients);
    meta.patient_id = buf;

    const std::vector<bool> label0 = pick_indices(spec.n_pairs, spec.pseudo_fraction,
                                                  spec.seed, "labels");
    meta.label = label0[index] ? 0 : 1;
    const std::vector<bool> corrupt = pick_indices(spec.n_pairs, spec.corrupt_fraction,
                                                   spec.seed, "corrupt");
    meta.corrupt = corrupt[index];
    if (meta.corrupt) {
        const int rank = pick_rank(spec.n_pairs, spec.corrupt_fraction, spec.seed, "corrupt",
                                   index);
        meta.corrupt_kind = (rank % 2 == 0) ? CorruptKind::ZeroSlices
                                            : CorruptKind::Misregistration;
    }

    // Background: 3-6 Gaussian blobs over air. Blob 0 is broad so every axial
    // slice carries intensity variation; blob 1 sits at the candidate
    // centroid, so label-0 cases also show a structure there. The candidate
    // blob targets an absolute intensity well below the +400 clip ceiling,
    // leaving headroom for the inserted lesion contrast.
    Scene scene;
    {
        Prng rng(spec.seed, static_cast<std::uint64_t>(index), "background");
        const int n_blobs = rng.uniform_int(3, 6);

        Blob broad;
        broad.cx = center + rng.uniform(-2.0, 2.0);
        broad.cy = center + rng.uniform(-2.0, 2.0);
        broad.cz = center + rng.uniform(-2.0, 2.0);
        broad.sigma = rng.uniform(L / 3.0, L / 2.0);
        broad.amplitude = rng.uniform(-800.0, -300.0) - kAirHu;
        scene.blobs.push_back(broad);

        Blob candidate;  // placed last so its target intensity is absolute
        candidate.cx = center + rng.uniform(-1.5, 1.5);
        candidate.cy = center + rng.uniform(-1.5, 1.5);
        candidate.cz = center + rng.uniform(-1.5, 1.5);
        candidate.sigma = rng.uniform(1.5, 3.5);
        const double candidate_target_hu = rng.uniform(-650.0, -250.0);

        for (int b = 2; b < n_blobs; ++b) {
            Blob blob;
            blob.cx = rng.uniform(1.0, L - 2.0);
            blob.cy = rng.uniform(1.0, L - 2.0);
            blob.cz = rng.uniform(1.0, L - 2.0);
            blob.sigma = rng.uniform(1.5, L / 3.0);
            blob.amplitude = rng.uniform(-800.0, 100.0) - kAirHu;
            // Cap each distractor's contribution at the candidate centroid so
            // the lesion contrast is never flattened by the clip ceiling.
            const double d2 = (blob.cx - center) * (blob.cx - center) +
                              (blob.cy - center) * (blob.cy - center) +
                              (blob.cz - center) * (blob.cz - center);
            const double at_center =
                blob.amplitude * std::exp(-0.5 * d2 / (blob.sigma * blob.sigma));
            if (at_center > 60.0) blob.amplitude *= 60.0 / at_center;
            scene.blobs.push_back(blob);
        }

        candidate.amplitude = std::max(
            100.0, candidate_target_hu - scene.value(candidate.cx, candidate.cy, candidate.cz));
        scene.blobs.push_back(candidate);
    }

    Volume baseline(L, L, L);
    for (int z = 0; z < L; ++z)
        for (int y = 0; y < L; ++y)
            for (int x = 0; x < L; ++x) baseline.at(x, y, z) = scene.value(x, y, z);

    // Degradation draws.
    Prng deg(spec.seed, static_cast<std::uint64_t>(index), "degradation");
    double t[3] = {0, 0, 0};
    {
        const double u = deg.uniform(-1.0, 1.0);
        const double phi = deg.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double s = std::sqrt(std::max(0.0, 1.0 - u * u));
        double magnitude = deg.uniform(0.0, spec.misreg_mm);
        meta.pseudo_kind = PseudoKind::None;
        if (meta.label == 0) {
            meta.pseudo_kind = (deg.uniform() < 0.5) ? PseudoKind::Misregistration
                                                     : PseudoKind::Blur;
            if (meta.pseudo_kind == PseudoKind::Misregistration) magnitude *= 2.0;
        }
        if (meta.corrupt_kind == CorruptKind::Misregistration) magnitude *= 4.0;
        t[0] = magnitude * s * std::cos(phi);
        t[1] = magnitude * s * std::sin(phi);
        t[2] = magnitude * u;
    }
    meta.translation_mm[0] = t[0];
    meta.translation_mm[1] = t[1];
    meta.translation_mm[2] = t[2];
    meta.residual_mm = kResidualFraction *
                       std::sqrt(t[0] * t[0] + t[1] * t[1] + t[2] * t[2]);

    meta.blur_sigma = spec.blur_sigma_vox *
                      (meta.pseudo_kind == PseudoKind::Blur ? 2.0 : 1.0);
    meta.noise_sigma = spec.noise_sigma_hu;

    // FU: baseline content displaced by t, plus the new lesion for label 1,
    // then kernel blur and noise.
    Volume fu = shift_trilinear(baseline, t);
    if (meta.label == 1) {
        Prng les(spec.seed, static_cast<std::uint64_t>(index), "lesion");
        meta.lesion_radius = les.uniform(2.0, 5.0);
        meta.lesion_contrast = les.uniform(150.0, 300.0);
        const double edge = 1.5;  // voxels of smooth falloff
        for (int z = 0; z < L; ++z)
            for (int y = 0; y < L; ++y)
                for (int x = 0; x < L; ++x) {
                    const double r = std::sqrt((x - center) * (x - center) +
                                               (y - center) * (y - center) +
                                               (z - center) * (z - center));
                    if (r < meta.lesion_radius)
                        fu.at(x, y, z) += meta.lesion_contrast *
                                          smoothstep((meta.lesion_radius - r) / edge);
                }
    }
    fu = gaussian_blur_volume(fu, meta.blur_sigma);
    if (spec.noise_sigma_hu > 0.0) {
        Prng noise(spec.seed, static_cast<std::uint64_t>(index), "noise");
        for (double& v : fu.data) v += spec.noise_sigma_hu * noise.normal();
    }

    // BL_reg: the baseline translated back toward FU with a residual error.
    double t_applied[3] = {t[0] * (1.0 - kResidualFraction),
                           t[1] * (1.0 - kResidualFraction),
                           t[2] * (1.0 - kResidualFraction)};
    Volume bl_reg = shift_trilinear(baseline, t_applied);

    fu = clip_hu(fu, kAirHu, kClipHi);
    bl_reg = clip_hu(bl_reg, kAirHu, kClipHi);

    if (meta.corrupt_kind == CorruptKind::ZeroSlices) {
        const int n_zero = static_cast<int>(std::lround(0.3 * L));
        std::vector<int> slices(L);
        std::iota(slices.begin(), slices.end(), 0);
        Prng rng(spec.seed, static_cast<std::uint64_t>(index), "corrupt-slices");
        rng.shuffle(slices);
        for (int k = 0; k < n_zero; ++k)
            for (int y = 0; y < L; ++y)
                for (int x = 0; x < L; ++x) fu.at(x, y, slices[k]) = 0.0;
    }

    // As-if persisted: quantize to float32 so in-memory and disk paths agree.
    fu = quantize_float32(fu);
    bl_reg = quantize_float32(bl_reg);

    out.pair.fu_roi = std::move(fu);
    out.pair.bl_roi = std::move(bl_reg);
    out.pair.delta = temporal_difference(out.pair.fu_roi, out.pair.bl_roi);
    out.pair.centroid_mm = {center, center, center};
    out.pair.label = meta.label;
    out.pair.patient_id = meta.patient_id;
    out.pair.case_id = meta.case_id;
    return out;
}

Cohort generate_cohort(const CohortSpec& spec) {
    spec.validate();
    Cohort cohort;
    cohort.cases.reserve(spec.n_pairs);
    cohort.manifest.reserve(spec.n_pairs);
    for (int i = 0; i < spec.n_pairs; ++i) {
        SynthCase c = generate_pair(spec, i);
        cohort.cases.push_back(std::move(c.pair));
        cohort.manifest.push_back(std::move(c.meta));
    }
    return cohort;
}

std::vector<CasePair> shuffle_labels(std::vector<CasePair> cases, std::uint64_t seed) {
    std::vector<int> labels;
    labels.reserve(cases.size());
    for (const CasePair& c : cases) labels.push_back(c.label);
    Prng rng(seed, 0, "label-shuffle");
    rng.shuffle(labels);
    for (std::size_t i = 0; i < cases.size(); ++i) cases[i].label = labels[i];
    return cases;
}

namespace {

const char* corrupt_kind_name(CorruptKind k) {
    switch (k) {
        case CorruptKind::ZeroSlices: return "zero_slices";
        case CorruptKind::Misregistration: return "misregistration";
        default: return "none";
    }
}
CorruptKind corrupt_kind_from(const std::string& s) {
    if (s == "zero_slices") return CorruptKind::ZeroSlices;
    if (s == "misregistration") return CorruptKind::Misregistration;
    return CorruptKind::None;
}
const char* pseudo_kind_name(PseudoKind k) {
    switch (k) {
        case PseudoKind::Misregistration: return "misregistration";
        case PseudoKind::Blur: return "blur";
        default: return "none";
    }
}
PseudoKind pseudo_kind_from(const std::string& s) {
    if (s == "misregistration") return PseudoKind::Misregistration;
    if (s == "blur") return PseudoKind::Blur;
    return PseudoKind::None;
}

}  // namespace

void write_cohort(const Cohort& cohort, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::string manifest =
        "case_id,patient_id,label,corrupt,corrupt_kind,pseudo_kind,"
        "translation_x_mm,translation_y_mm,translation_z_mm,residual_mm,"
        "blur_sigma_vox,noise_sigma_hu,lesion_radius_vox,lesion_contrast_hu,"
        "centroid_x_mm,centroid_y_mm,centroid_z_mm\n";
    for (std::size_t i = 0; i < cohort.cases.size(); ++i) {
        const CasePair& c = cohort.cases[i];
        const CaseMeta& m = cohort.manifest[i];
        const std::string base = dir + "/" + c.case_id;
        write_nifti(c.fu_roi, base + "_fu.nii");
        write_nifti(c.bl_roi, base + "_bl.nii");
        write_nifti(c.delta, base + "_delta.nii");
        manifest += c.case_id + "," + c.patient_id + "," + std::to_string(m.label) + "," +
                    (m.corrupt ? "1" : "0") + "," + corrupt_kind_name(m.corrupt_kind) + "," +
                    pseudo_kind_name(m.pseudo_kind) + "," + format_double(m.translation_mm[0]) +
                    "," + format_double(m.translation_mm[1]) + "," +
                    format_double(m.translation_mm[2]) + "," + format_double(m.residual_mm) +
                    "," + format_double(m.blur_sigma) + "," + format_double(m.noise_sigma) +
                    "," + format_double(m.lesion_radius) + "," +
                    format_double(m.lesion_contrast) + "," + format_double(c.centroid_mm[0]) +
                    "," + format_double(c.centroid_mm[1]) + "," +
                    format_double(c.centroid_mm[2]) + "\n";
    }
    atomic_write_text(dir + "/manifest.csv", manifest);
}

Cohort load_cohort(const std::string& dir) {
    const CsvTable manifest = read_csv(dir + "/manifest.csv");
    auto column = [&](const std::string& name) {
        for (std::size_t i = 0; i < manifest.header.size(); ++i)
            if (manifest.header[i] == name) return i;
        throw IoFailure("load_cohort: manifest missing column " + name);
    };
    const std::size_t c_case = column("case_id"), c_patient = column("patient_id"),
                      c_label = column("label"), c_corrupt = column("corrupt"),
                      c_ckind = column("corrupt_kind"), c_pkind = column("pseudo_kind"),
                      c_cx = column("centroid_x_mm"), c_cy = column("centroid_y_mm"),
                      c_cz = column("centroid_z_mm");

    Cohort cohort;
    for (const auto& row : manifest.rows) {
        CasePair pair;
        pair.case_id = row[c_case];
        pair.patient_id = row[c_patient];
        pair.label = std::stoi(row[c_label]);
        pair.centroid_mm = {std::stod(row[c_cx]), std::stod(row[c_cy]), std::stod(row[c_cz])};
        const std::string base = dir + "/" + pair.case_id;
        pair.fu_roi = read_nifti(base + "_fu.nii");
        pair.bl_roi = read_nifti(base + "_bl.nii");
        // Recomputed rather than read back: the difference of two float32
        // grids is not itself float32-representable, and delta = fu - bl must
        // hold exactly.
        pair.delta = temporal_difference(pair.fu_roi, pair.bl_roi);

        CaseMeta meta;
        meta.case_id = pair.case_id;
        meta.patient_id = pair.patient_id;
        meta.label = pair.label;
        meta.corrupt = row[c_corrupt] == "1";
        meta.corrupt_kind = corrupt_kind_from(row[c_ckind]);
        meta.pseudo_kind = pseudo_kind_from(row[c_pkind]);
        cohort.cases.push_back(std::move(pair));
        cohort.manifest.push_back(std::move(meta));
    }
    return cohort;
}

}  // namespace topogate
