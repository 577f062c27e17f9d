#pragma once

#include <cstdint>
#include <filesystem>

#include "jsmtk/field.hpp"
#include "jsmtk/volume.hpp"

namespace jsmtk {

// Native volume container: a 64-byte header followed by little-endian voxels,
// x-fastest.
//
//   offset  size  field
//        0     4  magic "JSMV"
//        4     4  version (u32, currently 1)
//        8    12  W, H, D (u32)
//       20    12  sx, sy, sz (f32, mm)
//       32     1  voxel type code (see VoxelType)
//       33    31  reserved, zero
//
// Codes 0 and 1 are the interchange types; 2 and 3 store doubles for exact
// round trips of in-memory data.
enum class VoxelType : std::uint8_t {
    f32 = 0,
    f32x3 = 1,
    f64 = 2,
    f64x3 = 3,
};

inline constexpr std::uint32_t kNativeVersion = 1;
inline constexpr std::size_t kNativeHeaderSize = 64;

void write_volume(const Volume3D &vol, const std::filesystem::path &path, VoxelType type = VoxelType::f32);
void write_field(const DisplacementField &field, const std::filesystem::path &path,
                 VoxelType type = VoxelType::f32x3);

// Reads a scalar volume. Files starting with the native magic are parsed as native,
// anything else is tried as single-file NIfTI-1.
Volume3D read_volume(const std::filesystem::path &path);
DisplacementField read_field(const std::filesystem::path &path);

// Uncompressed single-file NIfTI-1 ("n+1"), float32 or int16 voxels, either byte order.
Volume3D read_nifti(const std::filesystem::path &path);

} // namespace jsmtk
