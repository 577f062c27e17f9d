#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <vector>

#include "jsmtk/field.hpp"
#include "jsmtk/volume.hpp"

namespace jsmtk {

using Mat3 = std::array<std::array<double, 3>, 3>;

double determinant(const Mat3 &m);

// d v_i / d x_j at a voxel: central differences inside, one-sided on the faces.
Mat3 jacobian_at_voxel(const DisplacementField &field, std::int64_t x, std::int64_t y, std::int64_t z);

// Per-voxel det(I + dv/dx). A plain Volume3D so it can be written, resampled and
// stacked like any other image.
using JacobianSaliencyMap = Volume3D;

JacobianSaliencyMap compute_jsm(const DisplacementField &field);

enum class VolumeChange : std::uint8_t { compression = 0, none = 1, expansion = 2 };

struct VolumeChangeCounts {
    std::size_t expansion = 0;
    std::size_t none = 0;
    std::size_t compression = 0;
};

VolumeChange classify(double det, double eps_flat);
std::vector<VolumeChange> classify_voxels(const JacobianSaliencyMap &jsm, double eps_flat);
VolumeChangeCounts count_classes(const std::vector<VolumeChange> &classes);

struct WeightParams {
    double feature_weight = 0.8;
    double debug_weight = 0.2;
    double eps_flat = 0.02;

    void validate() const;
};

// feature_weight where the voxel changes volume, debug_weight where it does not.
Volume3D weight_mask(const JacobianSaliencyMap &jsm, const WeightParams &params = {});

} // namespace jsmtk
