#include "fewshot/ad/tensor.hpp"

#include <cmath>
#include <numeric>

#include "fewshot/error.hpp"

namespace fewshot::ad {

std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape)
{
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(numel(shape_), fill)
{
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values))
{
    if (values_.size() != numel(shape_)) {
        throw ShapeError("tensor: " + std::to_string(values_.size()) + " values do not fill shape " +
                         to_string(shape_));
    }
}

double Tensor::item() const
{
    if (values_.size() != 1) {
        throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
    }
    return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (numel(shape) != values_.size()) {
        throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
    }
    return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const
{
    for (double v : values_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace fewshot::ad
