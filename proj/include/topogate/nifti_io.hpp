#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "topogate/volume.hpp"

namespace topogate {

/// Minimal single-file NIfTI-1 subset: little-endian ".nii", 348-byte header,
/// magic "n+1\0", scalar datatypes int16/uint16/float32/float64. Orientation
/// (qform/sform) is ignored; geometry is voxel indices plus pixdim spacing.
namespace nifti {

constexpr std::int32_t kHeaderSize = 348;
constexpr std::uint16_t kDtInt16 = 4;
constexpr std::uint16_t kDtFloat32 = 16;
constexpr std::uint16_t kDtFloat64 = 64;
constexpr std::uint16_t kDtUint16 = 512;

struct Header {
    std::array<int, 3> dims{1, 1, 1};
    std::array<double, 3> pixdim{1.0, 1.0, 1.0};
    std::uint16_t datatype = kDtFloat32;
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    std::size_t vox_offset = 352;
};

Header parse_header(const std::vector<unsigned char>& bytes);

}  // namespace nifti

/// Read a volume; intensities are mapped by value*scl_slope + scl_inter
/// (slope 0 treated as 1). Throws BadMagic, UnsupportedDatatype,
/// TruncatedData, IoFailure.
Volume read_nifti(const std::string& path);

/// Write a single-file NIfTI-1 (float32 payload, slope 1, inter 0, data at
/// byte 352). read_nifti inverts it exactly for float32-valued volumes.
void write_nifti(const Volume& volume, const std::string& path);

}  // namespace topogate
