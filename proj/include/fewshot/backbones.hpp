#pragma once

#include <random>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fewshot/ad/ops.hpp"
#include "fewshot/ad/param_set.hpp"

namespace fewshot {

using ad::Activation;

enum class PoolKind { max, avg };

struct ConvBlockSpec {
    std::size_t channels = 16;
    std::size_t kernel_size = 11;
    PoolKind pooling = PoolKind::avg;
    std::size_t pool_kernel = 4;
    Activation activation = Activation::elu;
    double dropout_rate = 0.0;
};

struct DenseBlockSpec {
    std::size_t features = 64;
    Activation activation = Activation::relu;
    double dropout_rate = 0.0;
};

// conv blocks (conv -> activation -> pool -> batch norm -> dropout), flatten, dense blocks,
// final linear projection to repr_dim.
struct CnnSpec {
    std::vector<ConvBlockSpec> conv_blocks = std::vector<ConvBlockSpec>(4);
    std::vector<DenseBlockSpec> dense_blocks{DenseBlockSpec{}};
    std::size_t repr_dim = 64;
};

// Inception modules (bottleneck -> convs 39/19/9 in parallel with max pool -> 1-wide conv,
// concatenated, batch norm, activation), global average pooling, dense blocks, final linear.
struct InceptionSpec {
    std::size_t module_count = 2;
    std::size_t filters = 4;
    Activation activation = Activation::relu;
    std::vector<DenseBlockSpec> dense_blocks{DenseBlockSpec{}};
    std::size_t repr_dim = 64;

    static constexpr std::size_t kKernels[3] = {39, 19, 9};
};

using BackboneSpec = std::variant<CnnSpec, InceptionSpec>;

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

nlohmann::json backbone_to_json(const BackboneSpec& spec);
BackboneSpec backbone_from_json(const nlohmann::json& j);

// Checks every hyperparameter against its allowed search range; throws ConfigError naming
// the field and the range.
void validate_backbone_ranges(const BackboneSpec& spec);

// Embedding network over (batch, 1, length) inputs.
class Backbone {
public:
    // Throws ShapeError naming the first layer that does not fit the input length.
    Backbone(BackboneSpec spec, std::size_t input_length);

    const BackboneSpec& spec() const { return spec_; }
    std::size_t input_length() const { return input_length_; }
    std::size_t repr_dim() const;

    // Fan-in scaled uniform weights, zero biases, unit batch-norm scale and zero shift.
    ad::ParamSet init(std::mt19937_64& rng) const;

    // (B, 1, L) -> (B, repr_dim). Dropout is active only in train mode; batch norm always
    // normalizes with the statistics of the given batch. Throws NumericError naming the layer
    // whose output is not finite.
    ad::Var forward(const ad::ParamSet& params, const ad::Var& x, bool train_mode, std::mt19937_64& rng) const;

private:
    BackboneSpec spec_;
    std::size_t input_length_;
};

// Number of scalar parameters of a freshly built backbone.
std::size_t parameter_count(const BackboneSpec& spec, std::size_t input_length);

} // namespace fewshot
