#include "topogate/volume.hpp"

#include <algorithm>
#include <cmath>

#include "topogate/errors.hpp"
#include "topogate/rng.hpp"

namespace topogate {

Volume clip_hu(const Volume& v, double lo, double hi) {
    Volume out = v;
    for (double& x : out.data) x = std::min(std::max(x, lo), hi);
    return out;
}

double sample_trilinear(const Volume& v, double x_mm, double y_mm, double z_mm) {
    // Continuous voxel coordinates, clamped to the grid (nearest-edge extension).
    const double fx = (x_mm - v.origin[0]) / v.spacing[0];
    const double fy = (y_mm - v.origin[1]) / v.spacing[1];
    const double fz = (z_mm - v.origin[2]) / v.spacing[2];

    auto split = [](double f, int n, int& i0, int& i1, double& t) {
        if (f <= 0.0) {
            i0 = i1 = 0;
            t = 0.0;
        } else if (f >= n - 1) {
            i0 = i1 = n - 1;
            t = 0.0;
        } else {
            i0 = static_cast<int>(std::floor(f));
            i1 = i0 + 1;
            t = f - i0;
        }
    };

    int x0, x1, y0, y1, z0, z1;
    double tx, ty, tz;
    split(fx, v.dims[0], x0, x1, tx);
    split(fy, v.dims[1], y0, y1, ty);
    split(fz, v.dims[2], z0, z1, tz);

    const double c000 = v.at(x0, y0, z0), c100 = v.at(x1, y0, z0);
    const double c010 = v.at(x0, y1, z0), c110 = v.at(x1, y1, z0);
    const double c001 = v.at(x0, y0, z1), c101 = v.at(x1, y0, z1);
    const double c011 = v.at(x0, y1, z1), c111 = v.at(x1, y1, z1);

    const double c00 = c000 + tx * (c100 - c000);
    const double c10 = c010 + tx * (c110 - c010);
    const double c01 = c001 + tx * (c101 - c001);
    const double c11 = c011 + tx * (c111 - c011);
    const double c0 = c00 + ty * (c10 - c00);
    const double c1 = c01 + ty * (c11 - c01);
    return c0 + tz * (c1 - c0);
}

Volume resample_isotropic(const Volume& v, double target_mm) {
    if (target_mm <= 0.0) throw Error("resample_isotropic: target spacing must be positive");

    std::array<int, 3> out_dims;
    for (int a = 0; a < 3; ++a) {
        const double extent = v.dims[a] * v.spacing[a];
        out_dims[a] = std::max(1, static_cast<int>(std::lround(extent / target_mm)));
    }

    Volume out(out_dims[0], out_dims[1], out_dims[2]);
    out.spacing = {target_mm, target_mm, target_mm};
    out.origin = v.origin;
    for (int z = 0; z < out_dims[2]; ++z)
        for (int y = 0; y < out_dims[1]; ++y)
            for (int x = 0; x < out_dims[0]; ++x)
                out.at(x, y, z) = sample_trilinear(v, out.origin[0] + x * target_mm,
                                                   out.origin[1] + y * target_mm,
                                                   out.origin[2] + z * target_mm);
    return out;
}

Volume crop_roi(const Volume& v, const std::array<double, 3>& center_mm, int edge_voxels) {
    if (edge_voxels < 1) throw Error("crop_roi: edge must be >= 1");
    constexpr double kPadValue = -1000.0;  // air, matches the HU clip floor

    std::array<int, 3> center;
    for (int a = 0; a < 3; ++a) {
        center[a] = static_cast<int>(std::lround((center_mm[a] - v.origin[a]) / v.spacing[a]));
        if (center[a] < 0 || center[a] >= v.dims[a])
            throw CenterOutsideVolume("crop_roi: nearest voxel to center is outside the grid");
    }

    const int lo = edge_voxels / 2;
    Volume out(edge_voxels, edge_voxels, edge_voxels, kPadValue);
    out.spacing = v.spacing;
    for (int a = 0; a < 3; ++a)
        out.origin[a] = v.origin[a] + (center[a] - lo) * v.spacing[a];

    for (int z = 0; z < edge_voxels; ++z) {
        const int sz = center[2] - lo + z;
        if (sz < 0 || sz >= v.dims[2]) continue;
        for (int y = 0; y < edge_voxels; ++y) {
            const int sy = center[1] - lo + y;
            if (sy < 0 || sy >= v.dims[1]) continue;
            for (int x = 0; x < edge_voxels; ++x) {
                const int sx = center[0] - lo + x;
                if (sx < 0 || sx >= v.dims[0]) continue;
                out.at(x, y, z) = v.at(sx, sy, sz);
            }
        }
    }
    return out;
}

Volume temporal_difference(const Volume& fu, const Volume& bl) {
    if (!fu.same_grid(bl))
        throw ShapeMismatch("temporal_difference: dims/spacing of FU and BL differ");
    Volume out = fu;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fu.data[i] - bl.data[i];
    return out;
}

Volume laplacian(const Volume& v) {
    if (v.dims[0] < 3 || v.dims[1] < 3 || v.dims[2] < 3)
        throw VolumeTooSmall("laplacian: needs at least 3 voxels per axis");

    Volume out(v.dims[0], v.dims[1], v.dims[2]);
    out.spacing = v.spacing;
    out.origin = v.origin;
    const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    auto clampi = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const double c = v.at(x, y, z);
                double acc = v.at(clampi(x - 1, nx), y, z) + v.at(clampi(x + 1, nx), y, z) +
                             v.at(x, clampi(y - 1, ny), z) + v.at(x, clampi(y + 1, ny), z) +
                             v.at(x, y, clampi(z - 1, nz)) + v.at(x, y, clampi(z + 1, nz));
                out.at(x, y, z) = acc - 6.0 * c;
            }
    return out;
}

Volume add_gaussian_noise(const Volume& v, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw Error("add_gaussian_noise: sigma must be >= 0");
    Volume out = v;
    if (sigma == 0.0) return out;
    Prng rng(seed, 0, "gaussian-noise");
    for (double& x : out.data) x += sigma * rng.normal();
    return out;
}

Volume quantize_float32(const Volume& v) {
    Volume out = v;
    for (double& x : out.data) x = static_cast<double>(static_cast<float>(x));
    return out;
}

}  // namespace topogate
