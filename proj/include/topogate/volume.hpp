#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace topogate {

/// Dense 3D scalar grid with physical spacing and origin. Index order is
/// x-fastest: data[x + nx*(y + ny*z)]. The z axis carries the axial slices.
struct Volume {
    std::array<int, 3> dims{0, 0, 0};           // voxels per axis
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
    std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, position of voxel (0,0,0)
    std::vector<double> data;

    Volume() = default;
    Volume(int nx, int ny, int nz, double value = 0.0)
        : dims{nx, ny, nz}, data(static_cast<std::size_t>(nx) * ny * nz, value) {}

    std::size_t size() const { return data.size(); }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
    }
    double& at(int x, int y, int z) { return data[index(x, y, z)]; }
    double at(int x, int y, int z) const { return data[index(x, y, z)]; }

    /// Physical coordinate of a voxel center.
    std::array<double, 3> voxel_to_mm(int x, int y, int z) const {
        return {origin[0] + x * spacing[0], origin[1] + y * spacing[1],
                origin[2] + z * spacing[2]};
    }

    bool same_grid(const Volume& other) const {
        return dims == other.dims && spacing == other.spacing;
    }
};

/// One longitudinal case: follow-up ROI, registered-baseline ROI, their
/// voxelwise difference, the lesion centroid in FU space, and the label
/// (1 = real-new, 0 = pseudo-new).
struct CasePair {
    Volume fu_roi;
    Volume bl_roi;
    Volume delta;
    std::array<double, 3> centroid_mm{0.0, 0.0, 0.0};
    int label = 0;
    std::string patient_id;
    std::string case_id;
};

// --- preprocessing operators -------------------------------------------------

/// Clamp every voxel to [lo, hi]. Total function, idempotent.
Volume clip_hu(const Volume& v, double lo, double hi);

/// Trilinear sample at a physical point; out-of-bounds coordinates use
/// nearest-edge extension.
double sample_trilinear(const Volume& v, double x_mm, double y_mm, double z_mm);

/// Resample onto an isotropic grid with spacing target_mm per axis. Output
/// dims = round(physical extent / target_mm), clamped to >= 1. Exact on
/// affine intensity fields.
Volume resample_isotropic(const Volume& v, double target_mm);

/// Cubic crop of edge_voxels per side centered on the voxel nearest to
/// center_mm. Requires an isotropic volume. Regions outside the grid are
/// padded with -1000 (air). Throws CenterOutsideVolume if the nearest voxel
/// lies outside the grid.
Volume crop_roi(const Volume& v, const std::array<double, 3>& center_mm, int edge_voxels);

/// Voxelwise fu - bl. Throws ShapeMismatch unless dims and spacing agree.
Volume temporal_difference(const Volume& fu, const Volume& bl);

/// 6-neighbor discrete Laplacian; boundary voxels replicate the nearest edge
/// value for missing neighbors. Requires dims >= 3 per axis.
Volume laplacian(const Volume& v);

/// Add i.i.d. N(0, sigma^2) noise from a deterministic seeded stream.
Volume add_gaussian_noise(const Volume& v, double sigma, std::uint64_t seed);

/// Round every voxel through float32, as if the volume had been persisted.
Volume quantize_float32(const Volume& v);

}  // namespace topogate
