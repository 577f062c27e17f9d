#include "jsmtk/jsm.hpp"

#include <cmath>
#include <string>

#include "jsmtk/errors.hpp"
#include "jsmtk/parallel.hpp"

namespace jsmtk {

double determinant(const Mat3 &m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

namespace {

double axis_derivative(const Volume3D &v, std::int64_t x, std::int64_t y, std::int64_t z, int axis) {
    const std::int64_t n = axis == 0 ? v.dims().w : (axis == 1 ? v.dims().h : v.dims().d);
    const std::int64_t c = axis == 0 ? x : (axis == 1 ? y : z);
    if (n == 1) return 0.0;
    auto at = [&](std::int64_t k) {
        return axis == 0 ? v(k, y, z) : (axis == 1 ? v(x, k, z) : v(x, y, k));
    };
    if (c == 0) return at(1) - at(0);
    if (c == n - 1) return at(n - 1) - at(n - 2);
    return 0.5 * (at(c + 1) - at(c - 1));
}

} // namespace

Mat3 jacobian_at_voxel(const DisplacementField &field, std::int64_t x, std::int64_t y, std::int64_t z) {
    if (!field.comp[0].contains(x, y, z))
        throw InputError("jacobian_at_voxel: voxel (" + std::to_string(x) + "," + std::to_string(y) + "," +
                         std::to_string(z) + ") out of bounds");
    Mat3 j{};
    for (int i = 0; i < 3; ++i)
        for (int a = 0; a < 3; ++a) j[i][a] = axis_derivative(field.comp[i], x, y, z, a);
    return j;
}

JacobianSaliencyMap compute_jsm(const DisplacementField &field) {
    const Dims d = field.dims();
    if (d.w < 3 || d.h < 3 || d.d < 3) throw InputError("compute_jsm requires dims >= 3 along every axis");
    JacobianSaliencyMap out(d, field.spacing());
    parallel_for(0, static_cast<std::size_t>(d.d), [&](std::size_t zi) {
        const auto z = static_cast<std::int64_t>(zi);
        for (std::int64_t y = 0; y < d.h; ++y)
            for (std::int64_t x = 0; x < d.w; ++x) {
                Mat3 j = jacobian_at_voxel(field, x, y, z);
                for (int i = 0; i < 3; ++i) j[i][i] += 1.0;
                out(x, y, z) = determinant(j);
            }
    });
    return out;
}

VolumeChange classify(double det, double eps_flat) {
    if (det > 1.0 + eps_flat) return VolumeChange::expansion;
    if (det < 1.0 - eps_flat) return VolumeChange::compression;
    return VolumeChange::none;
}

std::vector<VolumeChange> classify_voxels(const JacobianSaliencyMap &jsm, double eps_flat) {
    if (!(eps_flat >= 0.0)) throw InputError("classify_voxels: eps_flat must be >= 0");
    std::vector<VolumeChange> out;
    out.reserve(jsm.size());
    for (double v : jsm.values()) out.push_back(classify(v, eps_flat));
    return out;
}

VolumeChangeCounts count_classes(const std::vector<VolumeChange> &classes) {
    VolumeChangeCounts c;
    for (auto v : classes) {
        if (v == VolumeChange::expansion)
            ++c.expansion;
        else if (v == VolumeChange::compression)
            ++c.compression;
        else
            ++c.none;
    }
    return c;
}

void WeightParams::validate() const {
    if (!(feature_weight > debug_weight && debug_weight > 0.0))
        throw ConfigError("weights must satisfy feature_weight > debug_weight > 0");
    if (!(eps_flat >= 0.0)) throw ConfigError("eps_flat must be >= 0");
}

Volume3D weight_mask(const JacobianSaliencyMap &jsm, const WeightParams &params) {
    params.validate();
    Volume3D w(jsm.dims(), jsm.spacing());
    auto src = jsm.values();
    auto dst = w.values();
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] = classify(src[i], params.eps_flat) == VolumeChange::none ? params.debug_weight : params.feature_weight;
    return w;
}

} // namespace jsmtk
