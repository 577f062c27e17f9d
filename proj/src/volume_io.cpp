#include "jsmtk/volume_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "jsmtk/errors.hpp"

namespace jsmtk {

namespace {

template <typename T>
T byteswap_value(T v) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

template <typename T>
T load(const unsigned char *p, bool swap) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return swap ? byteswap_value(v) : v;
}

template <typename T>
T load_le(const unsigned char *p) {
    return load<T>(p, std::endian::native == std::endian::big);
}

template <typename T>
void store_le(unsigned char *p, T v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
    std::memcpy(p, &v, sizeof(T));
}

std::vector<unsigned char> slurp(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::filesystem::path &path, const std::vector<unsigned char> &bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path.string() + "' for writing", 0);
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for '" + path.string() + "'", 0);
}

int components_of(VoxelType t) { return (t == VoxelType::f32x3 || t == VoxelType::f64x3) ? 3 : 1; }
std::size_t scalar_bytes(VoxelType t) { return (t == VoxelType::f32 || t == VoxelType::f32x3) ? 4 : 8; }

std::vector<unsigned char> make_header(const Dims &dims, const Spacing &sp, VoxelType type) {
    std::vector<unsigned char> h(kNativeHeaderSize, 0);
    std::memcpy(h.data(), "JSMV", 4);
    store_le<std::uint32_t>(h.data() + 4, kNativeVersion);
    store_le<std::uint32_t>(h.data() + 8, static_cast<std::uint32_t>(dims.w));
    store_le<std::uint32_t>(h.data() + 12, static_cast<std::uint32_t>(dims.h));
    store_le<std::uint32_t>(h.data() + 16, static_cast<std::uint32_t>(dims.d));
    store_le<float>(h.data() + 20, static_cast<float>(sp.x));
    store_le<float>(h.data() + 24, static_cast<float>(sp.y));
    store_le<float>(h.data() + 28, static_cast<float>(sp.z));
    h[32] = static_cast<unsigned char>(type);
    return h;
}

struct NativeHeader {
    Dims dims;
    Spacing spacing;
    VoxelType type;
};

bool has_native_magic(const std::vector<unsigned char> &bytes) {
    return bytes.size() >= 4 && std::memcmp(bytes.data(), "JSMV", 4) == 0;
}

NativeHeader parse_native_header(const std::vector<unsigned char> &bytes) {
    if (bytes.size() < kNativeHeaderSize)
        throw FormatError("truncated header: " + std::to_string(bytes.size()) + " of 64 bytes", bytes.size());
    if (!has_native_magic(bytes)) throw FormatError("bad magic, expected \"JSMV\"", 0);
    const auto version = load_le<std::uint32_t>(bytes.data() + 4);
    if (version != kNativeVersion) throw FormatError("unsupported version " + std::to_string(version), 4);
    NativeHeader h;
    h.dims = Dims{load_le<std::uint32_t>(bytes.data() + 8), load_le<std::uint32_t>(bytes.data() + 12),
                  load_le<std::uint32_t>(bytes.data() + 16)};
    for (int i = 0; i < 3; ++i) {
        const std::int64_t v = i == 0 ? h.dims.w : (i == 1 ? h.dims.h : h.dims.d);
        if (v <= 0) throw FormatError("zero dimension in header", 8 + 4 * static_cast<std::uint64_t>(i));
    }
    h.spacing = Spacing{load_le<float>(bytes.data() + 20), load_le<float>(bytes.data() + 24),
                        load_le<float>(bytes.data() + 28)};
    for (int i = 0; i < 3; ++i) {
        const double s = i == 0 ? h.spacing.x : (i == 1 ? h.spacing.y : h.spacing.z);
        if (!(s > 0.0) || !std::isfinite(s))
            throw FormatError("non-positive voxel spacing", 20 + 4 * static_cast<std::uint64_t>(i));
    }
    const unsigned char code = bytes[32];
    if (code > 3) throw FormatError("unsupported voxel type code " + std::to_string(code), 32);
    h.type = static_cast<VoxelType>(code);
    const std::uint64_t expected =
        kNativeHeaderSize + h.dims.count() * static_cast<std::uint64_t>(components_of(h.type)) * scalar_bytes(h.type);
    if (bytes.size() != expected)
        throw FormatError("size mismatch: header implies " + std::to_string(expected) + " bytes, file has " +
                              std::to_string(bytes.size()),
                          std::min<std::uint64_t>(bytes.size(), expected));
    return h;
}

double read_scalar(const std::vector<unsigned char> &bytes, std::size_t offset, VoxelType type) {
    const double v = scalar_bytes(type) == 4 ? static_cast<double>(load_le<float>(bytes.data() + offset))
                                             : load_le<double>(bytes.data() + offset);
    if (!std::isfinite(v)) throw FormatError("non-finite voxel value", offset);
    return v;
}

void write_scalar(std::vector<unsigned char> &bytes, std::size_t offset, double v, VoxelType type) {
    if (scalar_bytes(type) == 4)
        store_le<float>(bytes.data() + offset, static_cast<float>(v));
    else
        store_le<double>(bytes.data() + offset, v);
}

} // namespace

void write_volume(const Volume3D &vol, const std::filesystem::path &path, VoxelType type) {
    if (components_of(type) != 1) throw InputError("write_volume needs a scalar voxel type");
    auto bytes = make_header(vol.dims(), vol.spacing(), type);
    const std::size_t sb = scalar_bytes(type);
    bytes.resize(kNativeHeaderSize + vol.size() * sb);
    auto vals = vol.values();
    for (std::size_t i = 0; i < vals.size(); ++i) write_scalar(bytes, kNativeHeaderSize + i * sb, vals[i], type);
    spill(path, bytes);
}

void write_field(const DisplacementField &field, const std::filesystem::path &path, VoxelType type) {
    if (components_of(type) != 3) throw InputError("write_field needs a 3-component voxel type");
    auto bytes = make_header(field.dims(), field.spacing(), type);
    const std::size_t sb = scalar_bytes(type);
    bytes.resize(kNativeHeaderSize + field.size() * 3 * sb);
    for (std::size_t i = 0; i < field.size(); ++i)
        for (int c = 0; c < 3; ++c)
            write_scalar(bytes, kNativeHeaderSize + (3 * i + static_cast<std::size_t>(c)) * sb,
                         field.comp[c].values()[i], type);
    spill(path, bytes);
}

Volume3D read_volume(const std::filesystem::path &path) {
    const auto bytes = slurp(path);
    if (!has_native_magic(bytes)) return read_nifti(path);
    const auto h = parse_native_header(bytes);
    if (components_of(h.type) != 1)
        throw FormatError("expected a scalar volume, found a 3-component field", 32);
    Volume3D vol(h.dims, h.spacing);
    const std::size_t sb = scalar_bytes(h.type);
    auto vals = vol.values();
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = read_scalar(bytes, kNativeHeaderSize + i * sb, h.type);
    return vol;
}

DisplacementField read_field(const std::filesystem::path &path) {
    const auto bytes = slurp(path);
    const auto h = parse_native_header(bytes);
    if (components_of(h.type) != 3) throw FormatError("expected a 3-component field, found a scalar volume", 32);
    DisplacementField field(h.dims, h.spacing);
    const std::size_t sb = scalar_bytes(h.type);
    for (std::size_t i = 0; i < field.size(); ++i)
        for (int c = 0; c < 3; ++c)
            field.comp[c].values()[i] =
                read_scalar(bytes, kNativeHeaderSize + (3 * i + static_cast<std::size_t>(c)) * sb, h.type);
    return field;
}

Volume3D read_nifti(const std::filesystem::path &path) {
    const auto bytes = slurp(path);
    constexpr std::size_t kHeader = 348;
    if (bytes.size() < kHeader)
        throw FormatError("truncated NIfTI-1 header: " + std::to_string(bytes.size()) + " of 348 bytes",
                          bytes.size());
    bool swap = false;
    if (load<std::int32_t>(bytes.data(), false) != 348) {
        if (load<std::int32_t>(bytes.data(), true) != 348) throw FormatError("sizeof_hdr is not 348", 0);
        swap = true;
    }
    if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
        throw FormatError("unsupported NIfTI magic (only single-file \"n+1\" is read)", 344);

    const auto ndim = load<std::int16_t>(bytes.data() + 40, swap);
    if (ndim < 1 || ndim > 7) throw FormatError("dim[0] out of range", 40);
    std::array<std::int64_t, 3> extent{1, 1, 1};
    for (int i = 1; i <= ndim; ++i) {
        const auto v = load<std::int16_t>(bytes.data() + 40 + 2 * i, swap);
        if (v <= 0) throw FormatError("non-positive dim[" + std::to_string(i) + "]", 40 + 2 * static_cast<unsigned>(i));
        if (i <= 3)
            extent[static_cast<std::size_t>(i - 1)] = v;
        else if (v != 1)
            throw FormatError("only 3D volumes are supported", 40 + 2 * static_cast<unsigned>(i));
    }
    const auto datatype = load<std::int16_t>(bytes.data() + 70, swap);
    std::size_t vb = 0;
    if (datatype == 16)
        vb = 4;
    else if (datatype == 4)
        vb = 2;
    else
        throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype) + " (float32/int16 only)", 70);

    Spacing sp;
    const double px = std::fabs(load<float>(bytes.data() + 80, swap));
    const double py = std::fabs(load<float>(bytes.data() + 84, swap));
    const double pz = std::fabs(load<float>(bytes.data() + 88, swap));
    sp.x = px > 0 ? px : 1.0;
    sp.y = py > 0 ? py : 1.0;
    sp.z = pz > 0 ? pz : 1.0;

    const double vox_offset = load<float>(bytes.data() + 108, swap);
    if (!(vox_offset >= static_cast<double>(kHeader))) throw FormatError("vox_offset before end of header", 108);
    double slope = load<float>(bytes.data() + 112, swap);
    double inter = load<float>(bytes.data() + 116, swap);
    if (slope == 0.0 || !std::isfinite(slope)) {
        slope = 1.0;
        inter = 0.0;
    }
    if (!std::isfinite(inter)) inter = 0.0;

    const Dims dims{extent[0], extent[1], extent[2]};
    const auto offset = static_cast<std::size_t>(vox_offset);
    const std::uint64_t need = offset + dims.count() * vb;
    if (bytes.size() < need)
        throw FormatError("size mismatch: header implies " + std::to_string(need) + " bytes, file has " +
                              std::to_string(bytes.size()),
                          bytes.size());
    Volume3D vol(dims, sp);
    auto vals = vol.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const unsigned char *p = bytes.data() + offset + i * vb;
        const double raw = vb == 4 ? static_cast<double>(load<float>(p, swap)) : load<std::int16_t>(p, swap);
        if (!std::isfinite(raw)) throw FormatError("non-finite voxel value", offset + i * vb);
        vals[i] = raw * slope + inter;
    }
    return vol;
}

} // namespace jsmtk
