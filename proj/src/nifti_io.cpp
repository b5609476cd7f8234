#include "topogate/nifti_io.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "topogate/errors.hpp"

namespace topogate {
namespace {

// Explicit little-endian accessors so parsing never depends on host layout.
std::uint16_t get_u16(const std::vector<unsigned char>& b, std::size_t off) {
    return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}
std::int16_t get_i16(const std::vector<unsigned char>& b, std::size_t off) {
    return static_cast<std::int16_t>(get_u16(b, off));
}
std::uint32_t get_u32(const std::vector<unsigned char>& b, std::size_t off) {
    return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
           (static_cast<std::uint32_t>(b[off + 2]) << 16) |
           (static_cast<std::uint32_t>(b[off + 3]) << 24);
}
float get_f32(const std::vector<unsigned char>& b, std::size_t off) {
    return std::bit_cast<float>(get_u32(b, off));
}
void put_u16(std::vector<unsigned char>& b, std::size_t off, std::uint16_t v) {
    b[off] = static_cast<unsigned char>(v & 0xff);
    b[off + 1] = static_cast<unsigned char>((v >> 8) & 0xff);
}
void put_u32(std::vector<unsigned char>& b, std::size_t off, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b[off + i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}
void put_f32(std::vector<unsigned char>& b, std::size_t off, float v) {
    put_u32(b, off, std::bit_cast<std::uint32_t>(v));
}

std::size_t bytes_per_voxel(std::uint16_t datatype) {
    switch (datatype) {
        case nifti::kDtInt16:
        case nifti::kDtUint16:
            return 2;
        case nifti::kDtFloat32:
            return 4;
        case nifti::kDtFloat64:
            return 8;
        default:
            return 0;
    }
}

}  // namespace

namespace nifti {

Header parse_header(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < static_cast<std::size_t>(kHeaderSize))
        throw TruncatedData("nifti: file shorter than the 348-byte header");

    const auto sizeof_hdr = static_cast<std::int32_t>(get_u32(bytes, 0));
    if (sizeof_hdr != kHeaderSize)
        throw BadMagic("nifti: sizeof_hdr != 348 when read little-endian "
                       "(big-endian or non-NIfTI file)");
    if (!(bytes[344] == 'n' && bytes[345] == '+' && bytes[346] == '1' && bytes[347] == '\0'))
        throw BadMagic("nifti: magic is not \"n+1\" (single-file NIfTI-1)");

    Header h;
    const int ndim = get_i16(bytes, 40);
    if (ndim < 1 || ndim > 7) throw BadMagic("nifti: dim[0] out of range");
    for (int a = 0; a < 3; ++a) {
        const int d = (a < ndim) ? get_i16(bytes, 40 + 2 * (a + 1)) : 1;
        if (d < 1) throw BadMagic("nifti: non-positive dimension");
        h.dims[a] = d;
    }
    // Trailing axes (time etc.) must be degenerate; this is a 3D-only reader.
    for (int a = 4; a <= ndim; ++a)
        if (get_i16(bytes, 40 + 2 * a) > 1)
            throw UnsupportedDatatype("nifti: >3 non-degenerate dimensions");

    h.datatype = get_u16(bytes, 70);
    if (bytes_per_voxel(h.datatype) == 0)
        throw UnsupportedDatatype("nifti: datatype code " + std::to_string(h.datatype) +
                                  " not in {int16, uint16, float32, float64}");
    for (int a = 0; a < 3; ++a) {
        const float p = get_f32(bytes, 76 + 4 * (a + 1));
        if (!(p > 0.0f)) throw BadMagic("nifti: non-positive pixdim");
        h.pixdim[a] = p;
    }
    const float vox_offset = get_f32(bytes, 108);
    if (vox_offset < 352.0f) throw BadMagic("nifti: vox_offset below 352");
    h.vox_offset = static_cast<std::size_t>(vox_offset);
    h.scl_slope = get_f32(bytes, 112);
    h.scl_inter = get_f32(bytes, 116);
    return h;
}

}  // namespace nifti

Volume read_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("read_nifti: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof()) throw IoFailure("read_nifti: read error on " + path);

    const nifti::Header h = nifti::parse_header(bytes);
    const std::size_t nvox =
        static_cast<std::size_t>(h.dims[0]) * h.dims[1] * h.dims[2];
    const std::size_t payload = nvox * bytes_per_voxel(h.datatype);
    if (bytes.size() < h.vox_offset + payload)
        throw TruncatedData("read_nifti: file shorter than vox_offset + payload");

    const double slope = (h.scl_slope == 0.0f) ? 1.0 : static_cast<double>(h.scl_slope);
    const double inter = static_cast<double>(h.scl_inter);

    Volume v(h.dims[0], h.dims[1], h.dims[2]);
    v.spacing = h.pixdim;
    const unsigned char* p = bytes.data() + h.vox_offset;
    for (std::size_t i = 0; i < nvox; ++i) {
        double raw;
        switch (h.datatype) {
            case nifti::kDtInt16:
                raw = static_cast<std::int16_t>(get_u16(bytes, h.vox_offset + 2 * i));
                break;
            case nifti::kDtUint16:
                raw = get_u16(bytes, h.vox_offset + 2 * i);
                break;
            case nifti::kDtFloat32:
                raw = get_f32(bytes, h.vox_offset + 4 * i);
                break;
            default: {  // float64
                std::uint64_t u = 0;
                for (int k = 7; k >= 0; --k) u = (u << 8) | p[8 * i + k];
                raw = std::bit_cast<double>(u);
                break;
            }
        }
        v.data[i] = raw * slope + inter;
    }
    return v;
}

void write_nifti(const Volume& volume, const std::string& path) {
    if (volume.size() == 0) throw Error("write_nifti: empty volume");

    std::vector<unsigned char> bytes(352 + 4 * volume.size(), 0);
    put_u32(bytes, 0, static_cast<std::uint32_t>(nifti::kHeaderSize));
    bytes[39] = 'r';                      // regular, per convention
    put_u16(bytes, 40, 3);                // dim[0]
    for (int a = 0; a < 3; ++a) put_u16(bytes, 42 + 2 * a, static_cast<std::uint16_t>(volume.dims[a]));
    for (int a = 3; a < 7; ++a) put_u16(bytes, 42 + 2 * a, 1);
    put_u16(bytes, 70, nifti::kDtFloat32);
    put_u16(bytes, 72, 32);               // bitpix
    put_f32(bytes, 76, 1.0f);             // pixdim[0]
    for (int a = 0; a < 3; ++a) put_f32(bytes, 80 + 4 * a, static_cast<float>(volume.spacing[a]));
    put_f32(bytes, 108, 352.0f);          // vox_offset
    put_f32(bytes, 112, 1.0f);            // scl_slope
    put_f32(bytes, 116, 0.0f);            // scl_inter
    bytes[344] = 'n';
    bytes[345] = '+';
    bytes[346] = '1';
    bytes[347] = '\0';
    // bytes 348..351 stay zero: no header extensions.

    for (std::size_t i = 0; i < volume.size(); ++i)
        put_f32(bytes, 352 + 4 * i, static_cast<float>(volume.data[i]));

    // Atomic: write to a temp file in the same directory, then rename.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoFailure("write_nifti: cannot open " + tmp);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out.good()) throw IoFailure("write_nifti: write error on " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoFailure("write_nifti: rename failed for " + path + ": " + ec.message());
}

}  // namespace topogate
