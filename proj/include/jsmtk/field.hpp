#pragma once

#include <array>

#include "jsmtk/volume.hpp"

namespace jsmtk {

// Per-voxel displacement v = phi(x) - x in voxel units, stored as three scalar volumes.
struct DisplacementField {
    std::array<Volume3D, 3> comp;

    DisplacementField() = default;
    explicit DisplacementField(Dims dims, Spacing spacing = {});

    const Dims &dims() const { return comp[0].dims(); }
    const Spacing &spacing() const { return comp[0].spacing(); }
    std::size_t size() const { return comp[0].size(); }

    bool all_finite() const;
    // Largest displacement norm over all voxels.
    double max_norm() const;

    bool operator==(const DisplacementField &) const = default;
};

// Resamples a field onto a grid twice as fine and doubles the vectors, the inverse
// of the block layout used by downsample2x.
DisplacementField upsample_field(const DisplacementField &coarse, const Dims &fine_dims);

} // namespace jsmtk
