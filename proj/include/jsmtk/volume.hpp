#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace jsmtk {

struct Dims {
    std::int64_t w = 0;
    std::int64_t h = 0;
    std::int64_t d = 0;

    std::size_t count() const { return static_cast<std::size_t>(w * h * d); }
    bool operator==(const Dims &) const = default;
};

// Voxel size in mm. Carried for I/O only; all processing works in voxel units.
struct Spacing {
    double x = 1.0;
    double y = 1.0;
    double z = 1.0;

    bool operator==(const Spacing &) const = default;
};

enum class BoundaryPolicy { clamp, zero };

// Dense scalar field on a regular grid, x-fastest layout.
class Volume3D {
public:
    Volume3D() = default;
    explicit Volume3D(Dims dims, Spacing spacing = {}, double fill = 0.0);
    Volume3D(Dims dims, Spacing spacing, std::vector<double> values);

    const Dims &dims() const { return dims_; }
    const Spacing &spacing() const { return spacing_; }
    void set_spacing(Spacing s);

    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return static_cast<std::size_t>((z * dims_.h + y) * dims_.w + x);
    }
    bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims_.w && y < dims_.h && z < dims_.d;
    }

    double &operator()(std::int64_t x, std::int64_t y, std::int64_t z) { return values_[index(x, y, z)]; }
    double operator()(std::int64_t x, std::int64_t y, std::int64_t z) const { return values_[index(x, y, z)]; }

    // Bounds-checked access; throws InputError.
    double at(std::int64_t x, std::int64_t y, std::int64_t z) const;

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    double min() const;
    double max() const;
    double mean() const;

    bool operator==(const Volume3D &) const = default;

private:
    Dims dims_{};
    Spacing spacing_{};
    std::vector<double> values_;
};

void validate_dims(const Dims &dims);

// Trilinear interpolation at a continuous voxel coordinate.
double trilinear_sample(const Volume3D &vol, double x, double y, double z,
                        BoundaryPolicy policy = BoundaryPolicy::clamp);

struct SampleWithGradient {
    double value = 0.0;
    double dx = 0.0;
    double dy = 0.0;
    double dz = 0.0;
};

// Value and exact partial derivatives of the trilinear interpolant. Under the clamp
// policy the derivative along a clamped axis is zero. On a node the cell to the
// upper side of the coordinate is used.
SampleWithGradient trilinear_sample_gradient(const Volume3D &vol, double x, double y, double z,
                                             BoundaryPolicy policy = BoundaryPolicy::clamp);

// Nearest-rank percentile of an unsorted sample, p in [0, 100].
double percentile(std::span<const double> values, double p);

// Linear map sending the p_lo / p_hi percentiles to 0 / 1, clipped to [0, 1].
Volume3D contrast_stretch(const Volume3D &vol, double p_lo, double p_hi);

// 2x2x2 block mean; odd trailing voxels average over the partial block.
Volume3D downsample2x(const Volume3D &vol);

// Separable Gaussian smoothing (sigma in voxels, clamp boundary). sigma <= 0 returns a copy.
Volume3D gaussian_smooth(const Volume3D &vol, double sigma);

} // namespace jsmtk
