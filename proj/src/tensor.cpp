#include "jsmtk/tensor.hpp"

#include <sstream>

#include "jsmtk/errors.hpp"

namespace jsmtk {

std::size_t shape_count(const Shape &shape) {
    std::size_t n = 1;
    for (auto e : shape) {
        if (e < 0) throw InputError("negative tensor extent");
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) { values_.assign(shape_count(shape_), fill); }

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_count(shape_))
        throw InputError("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                         shape_str(shape_));
}

double Tensor::item() const {
    if (values_.size() != 1) throw InputError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_count(shape) != values_.size())
        throw InputError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
}

} // namespace jsmtk
