#include "jsmtk/volume.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "jsmtk/errors.hpp"

namespace jsmtk {

void validate_dims(const Dims &dims) {
    if (dims.w <= 0 || dims.h <= 0 || dims.d <= 0)
        throw InputError("volume dims must be strictly positive, got " + std::to_string(dims.w) + "x" +
                         std::to_string(dims.h) + "x" + std::to_string(dims.d));
}

namespace {

void validate_spacing(const Spacing &s) {
    if (!(s.x > 0.0) || !(s.y > 0.0) || !(s.z > 0.0) || !std::isfinite(s.x) || !std::isfinite(s.y) ||
        !std::isfinite(s.z))
        throw InputError("voxel spacing must be finite and strictly positive");
}

} // namespace

Volume3D::Volume3D(Dims dims, Spacing spacing, double fill) : dims_(dims), spacing_(spacing) {
    validate_dims(dims);
    validate_spacing(spacing);
    values_.assign(dims.count(), fill);
}

Volume3D::Volume3D(Dims dims, Spacing spacing, std::vector<double> values)
    : dims_(dims), spacing_(spacing), values_(std::move(values)) {
    validate_dims(dims);
    validate_spacing(spacing);
    if (values_.size() != dims.count())
        throw InputError("volume data length " + std::to_string(values_.size()) + " does not match dims (" +
                         std::to_string(dims.count()) + ")");
}

void Volume3D::set_spacing(Spacing s) {
    validate_spacing(s);
    spacing_ = s;
}

double Volume3D::at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    if (!contains(x, y, z))
        throw InputError("voxel (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) +
                         ") out of bounds");
    return values_[index(x, y, z)];
}

double Volume3D::min() const { return *std::min_element(values_.begin(), values_.end()); }
double Volume3D::max() const { return *std::max_element(values_.begin(), values_.end()); }
double Volume3D::mean() const {
    return std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(values_.size());
}

namespace {

// Cell index and fractional offset along one axis, plus whether the coordinate moves
// the sample (false when clamped).
struct AxisCell {
    std::int64_t i0;
    double frac;
    bool live;
};

AxisCell clamp_axis(double c, std::int64_t n) {
    if (n == 1) return {0, 0.0, false};
    const double hi = static_cast<double>(n - 1);
    if (c <= 0.0) return {0, 0.0, c == 0.0};
    if (c >= hi) return {n - 2, 1.0, c == hi};
    const auto i0 = static_cast<std::int64_t>(std::floor(c));
    return {i0, c - static_cast<double>(i0), true};
}

AxisCell zero_axis(double c) {
    const double f = std::floor(c);
    return {static_cast<std::int64_t>(f), c - f, true};
}

void check_point(double x, double y, double z) {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z))
        throw InputError("trilinear_sample: non-finite sample point");
}

} // namespace

SampleWithGradient trilinear_sample_gradient(const Volume3D &vol, double x, double y, double z,
                                             BoundaryPolicy policy) {
    check_point(x, y, z);
    const Dims &dm = vol.dims();
    AxisCell ax, ay, az;
    if (policy == BoundaryPolicy::clamp) {
        ax = clamp_axis(x, dm.w);
        ay = clamp_axis(y, dm.h);
        az = clamp_axis(z, dm.d);
    } else {
        ax = zero_axis(x);
        ay = zero_axis(y);
        az = zero_axis(z);
    }

    auto fetch = [&](std::int64_t i, std::int64_t j, std::int64_t k) -> double {
        if (policy == BoundaryPolicy::clamp) {
            i = std::min(i, dm.w - 1);
            j = std::min(j, dm.h - 1);
            k = std::min(k, dm.d - 1);
            return vol(i, j, k);
        }
        return vol.contains(i, j, k) ? vol(i, j, k) : 0.0;
    };

    const double c000 = fetch(ax.i0, ay.i0, az.i0);
    const double c100 = fetch(ax.i0 + 1, ay.i0, az.i0);
    const double c010 = fetch(ax.i0, ay.i0 + 1, az.i0);
    const double c110 = fetch(ax.i0 + 1, ay.i0 + 1, az.i0);
    const double c001 = fetch(ax.i0, ay.i0, az.i0 + 1);
    const double c101 = fetch(ax.i0 + 1, ay.i0, az.i0 + 1);
    const double c011 = fetch(ax.i0, ay.i0 + 1, az.i0 + 1);
    const double c111 = fetch(ax.i0 + 1, ay.i0 + 1, az.i0 + 1);

    const double fx = ax.frac, fy = ay.frac, fz = az.frac;
    // std::lerp is exact at both ends, so nodes on the upper face return the stored value.
    const double c00 = std::lerp(c000, c100, fx);
    const double c10 = std::lerp(c010, c110, fx);
    const double c01 = std::lerp(c001, c101, fx);
    const double c11 = std::lerp(c011, c111, fx);
    const double c0 = std::lerp(c00, c10, fy);
    const double c1 = std::lerp(c01, c11, fy);

    SampleWithGradient out;
    out.value = std::lerp(c0, c1, fz);
    if (ax.live) {
        const double d0 = (c100 - c000) + fy * ((c110 - c010) - (c100 - c000));
        const double d1 = (c101 - c001) + fy * ((c111 - c011) - (c101 - c001));
        out.dx = d0 + fz * (d1 - d0);
    }
    if (ay.live) out.dy = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00));
    if (az.live) out.dz = c1 - c0;
    return out;
}

double trilinear_sample(const Volume3D &vol, double x, double y, double z, BoundaryPolicy policy) {
    return trilinear_sample_gradient(vol, x, y, z, policy).value;
}

double percentile(std::span<const double> values, double p) {
    if (values.empty()) throw InputError("percentile of empty sample");
    if (!(p >= 0.0 && p <= 100.0)) throw InputError("percentile must lie in [0, 100]");
    std::vector<double> sorted(values.begin(), values.end());
    const auto n = sorted.size();
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank - 1), sorted.end());
    return sorted[rank - 1];
}

Volume3D contrast_stretch(const Volume3D &vol, double p_lo, double p_hi) {
    if (!(p_lo >= 0.0 && p_lo < p_hi && p_hi <= 100.0))
        throw InputError("contrast_stretch requires 0 <= p_lo < p_hi <= 100");
    const double lo = percentile(vol.values(), p_lo);
    const double hi = percentile(vol.values(), p_hi);
    Volume3D out(vol.dims(), vol.spacing());
    auto src = vol.values();
    auto dst = out.values();
    if (!(hi > lo)) {
        // Degenerate range: a step at lo (all zeros for a constant volume).
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > lo ? 1.0 : 0.0;
        return out;
    }
    const double scale = 1.0 / (hi - lo);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::clamp((src[i] - lo) * scale, 0.0, 1.0);
    return out;
}

Volume3D downsample2x(const Volume3D &vol) {
    const Dims &in = vol.dims();
    if (in.w < 2 || in.h < 2 || in.d < 2) throw InputError("downsample2x requires every dim >= 2");
    const Dims out_dims{(in.w + 1) / 2, (in.h + 1) / 2, (in.d + 1) / 2};
    const Spacing s = vol.spacing();
    Volume3D out(out_dims, Spacing{s.x * 2.0, s.y * 2.0, s.z * 2.0});
    for (std::int64_t z = 0; z < out_dims.d; ++z)
        for (std::int64_t y = 0; y < out_dims.h; ++y)
            for (std::int64_t x = 0; x < out_dims.w; ++x) {
                double sum = 0.0;
                int n = 0;
                for (std::int64_t k = 2 * z; k < std::min(2 * z + 2, in.d); ++k)
                    for (std::int64_t j = 2 * y; j < std::min(2 * y + 2, in.h); ++j)
                        for (std::int64_t i = 2 * x; i < std::min(2 * x + 2, in.w); ++i) {
                            sum += vol(i, j, k);
                            ++n;
                        }
                out(x, y, z) = sum / n;
            }
    return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto &v : k) v /= sum;
    return k;
}

} // namespace

Volume3D gaussian_smooth(const Volume3D &vol, double sigma) {
    if (!(sigma > 0.0)) return vol;
    const auto kernel = gaussian_kernel(sigma);
    const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
    const Dims dm = vol.dims();
    Volume3D a = vol;
    Volume3D b(dm, vol.spacing());
    const std::array<std::int64_t, 3> extent{dm.w, dm.h, dm.d};
    const std::array<std::int64_t, 3> stride{1, dm.w, dm.w * dm.h};
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t n = extent[axis];
        const std::int64_t st = stride[axis];
        auto src = a.values();
        auto dst = b.values();
        for (std::size_t base = 0; base < src.size(); ++base) {
            const std::int64_t coord = (static_cast<std::int64_t>(base) / st) % n;
            const std::int64_t origin = static_cast<std::int64_t>(base) - coord * st;
            double acc = 0.0;
            for (std::int64_t t = -radius; t <= radius; ++t) {
                const std::int64_t c = std::clamp<std::int64_t>(coord + t, 0, n - 1);
                acc += kernel[static_cast<std::size_t>(t + radius)] * src[static_cast<std::size_t>(origin + c * st)];
            }
            dst[base] = acc;
        }
        std::swap(a, b);
    }
    return a;
}

} // namespace jsmtk
