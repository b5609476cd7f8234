#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "topogate/volume.hpp"

namespace topogate {

/// Knobs for the deterministic synthetic longitudinal cohort. Stands in for a
/// restricted screening cohort: paired ROIs with controllable noise, blur and
/// misregistration, real-new vs pseudo-new labels, and a corrupted fraction.
struct CohortSpec {
    int n_pairs = 152;
    int n_patients = 122;
    int roi_edge = 16;            // voxels at 1 mm isotropic
    double noise_sigma_hu = 10.0;
    double misreg_mm = 1.5;       // max applied translation magnitude
    double blur_sigma_vox = 0.5;  // kernel-difference simulation
    double pseudo_fraction = 0.5;   // fraction of label-0 (pseudo-new) cases
    double corrupt_fraction = 0.15; // pairs rendered low-quality
    std::uint64_t seed = 42;

    void validate() const;
};

enum class CorruptKind { None, ZeroSlices, Misregistration };
enum class PseudoKind { None, Misregistration, Blur };

/// Ground-truth generation record for one case. Lives in the manifest only;
/// model and filtering code never read it.
struct CaseMeta {
    std::string case_id;
    std::string patient_id;
    int label = 0;
    bool corrupt = false;
    CorruptKind corrupt_kind = CorruptKind::None;
    PseudoKind pseudo_kind = PseudoKind::None;
    double translation_mm[3] = {0, 0, 0};  // applied FU displacement
    double residual_mm = 0.0;              // misalignment left in BL_reg
    double blur_sigma = 0.0;
    double noise_sigma = 0.0;
    double lesion_radius = 0.0;    // 0 for label-0 cases
    double lesion_contrast = 0.0;  // HU
};

struct SynthCase {
    CasePair pair;
    CaseMeta meta;
};

struct Cohort {
    std::vector<CasePair> cases;
    std::vector<CaseMeta> manifest;  // index-aligned with cases
};

SynthCase generate_pair(const CohortSpec& spec, int index);
Cohort generate_cohort(const CohortSpec& spec);

/// Labels permuted with a seeded shuffle; everything else untouched. Used for
/// leakage (null-cohort) checks.
std::vector<CasePair> shuffle_labels(std::vector<CasePair> cases, std::uint64_t seed);

/// Cohort directory layout: <case_id>_{fu,bl,delta}.nii plus manifest.csv.
void write_cohort(const Cohort& cohort, const std::string& dir);
Cohort load_cohort(const std::string& dir);

/// Separable Gaussian blur with nearest-edge extension (sigma in voxels).
Volume gaussian_blur_volume(const Volume& v, double sigma_vox);

}  // namespace topogate
