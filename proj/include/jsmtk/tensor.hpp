#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace jsmtk {

using Shape = std::vector<std::int64_t>;

std::size_t shape_count(const Shape &shape);
std::string shape_str(const Shape &shape);

// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

    const Shape &shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::size_t size() const { return values_.size(); }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    double *data() { return values_.data(); }
    const double *data() const { return values_.data(); }

    double &operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    // The single value of a one-element tensor.
    double item() const;

    Tensor reshaped(Shape shape) const;

    bool operator==(const Tensor &) const = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

} // namespace jsmtk
