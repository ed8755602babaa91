#include "fewshot/backbones.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fewshot/error.hpp"
#include "fewshot/random.hpp"

namespace fewshot {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

namespace {

template <class... Fs>
struct Overload : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overload(Fs...) -> Overload<Fs...>;

std::string pool_name(PoolKind p) { return p == PoolKind::max ? "max" : "avg"; }

PoolKind parse_pool(const std::string& s)
{
    if (s == "max") return PoolKind::max;
    if (s == "avg") return PoolKind::avg;
    throw ConfigError("pooling: unknown kind '" + s + "'; allowed: max, avg");
}

void check_range(const std::string& field, double v, double lo, double hi)
{
    if (!(v >= lo && v <= hi)) {
        std::ostringstream os;
        os << field << " = " << v << " outside allowed range [" << lo << ", " << hi << "]";
        throw ConfigError(os.str());
    }
}

void check_activation(const std::string& field, Activation a)
{
    if (a == Activation::identity) throw ConfigError(field + ": allowed activations are relu, selu, elu, mish");
}

void check_dense(const std::vector<DenseBlockSpec>& dense)
{
    check_range("dense block count", static_cast<double>(dense.size()), 1, 3);
    for (std::size_t i = 0; i < dense.size(); ++i) {
        const std::string p = "dense_blocks[" + std::to_string(i) + "].";
        check_range(p + "features", static_cast<double>(dense[i].features), 64, 256);
        check_activation(p + "activation", dense[i].activation);
        check_range(p + "dropout_rate", dense[i].dropout_rate, 0.0, 0.9);
    }
}

nlohmann::json dense_to_json(const std::vector<DenseBlockSpec>& dense)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& d : dense) {
        out.push_back({{"features", d.features},
                       {"activation", activation_name(d.activation)},
                       {"dropout_rate", d.dropout_rate}});
    }
    return out;
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
            throw ConfigError(where + "." + key + ": unknown field");
        }
    }
}

std::vector<DenseBlockSpec> dense_from_json(const nlohmann::json& j)
{
    std::vector<DenseBlockSpec> out;
    for (const auto& d : j) {
        reject_unknown(d, {"features", "activation", "dropout_rate"}, "backbone.dense_blocks[]");
        DenseBlockSpec s;
        s.features = d.value("features", s.features);
        s.activation = parse_activation(d.value("activation", activation_name(s.activation)));
        s.dropout_rate = d.value("dropout_rate", s.dropout_rate);
        out.push_back(s);
    }
    return out;
}

Tensor uniform_tensor(ad::Shape shape, std::size_t fan_in, std::mt19937_64& rng)
{
    Tensor t(std::move(shape));
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = bound * (2.0 * uniform_unit(rng) - 1.0);
    return t;
}

// Walks the layer sequence, either creating parameters or checking shapes.
struct Layout {
    struct Entry {
        std::string name;
        ad::Shape shape;
        std::size_t fan_in; // 0 for constant-filled entries
        bool ones = false;
    };
    std::vector<Entry> entries;

    void weight(std::string name, ad::Shape shape, std::size_t fan_in)
    {
        entries.push_back({std::move(name), std::move(shape), fan_in});
    }
    void zeros(std::string name, std::size_t n) { entries.push_back({std::move(name), {n}, 0}); }
    void ones(std::string name, std::size_t n) { entries.push_back({std::move(name), {n}, 0, true}); }
};

void layout_dense(Layout& lay, const std::vector<DenseBlockSpec>& dense, std::size_t in, std::size_t repr_dim)
{
    for (std::size_t i = 0; i < dense.size(); ++i) {
        const std::string p = "dense" + std::to_string(i + 1);
        lay.weight(p + ".weight", {in, dense[i].features}, in);
        lay.zeros(p + ".bias", dense[i].features);
        in = dense[i].features;
    }
    lay.weight("repr.weight", {in, repr_dim}, in);
    lay.zeros("repr.bias", repr_dim);
}

Layout layout_cnn(const CnnSpec& spec, std::size_t length)
{
    Layout lay;
    std::size_t channels = 1;
    for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
        const auto& b = spec.conv_blocks[i];
        const std::string p = "conv" + std::to_string(i + 1);
        if (b.kernel_size < 1) throw ShapeError("layer " + p + ": kernel size must be >= 1");
        if (b.channels < 1) throw ShapeError("layer " + p + ": channel count must be >= 1");
        if (b.pool_kernel < 1 || b.pool_kernel > length) {
            throw ShapeError("layer " + p + ".pool: kernel " + std::to_string(b.pool_kernel) +
                             " does not fit input length " + std::to_string(length));
        }
        lay.weight(p + ".weight", {b.channels, channels, b.kernel_size}, channels * b.kernel_size);
        lay.zeros(p + ".bias", b.channels);
        lay.ones(p + ".bn.gamma", b.channels);
        lay.zeros(p + ".bn.beta", b.channels);
        channels = b.channels;
        length /= b.pool_kernel;
    }
    layout_dense(lay, spec.dense_blocks, channels * length, spec.repr_dim);
    return lay;
}

Layout layout_inception(const InceptionSpec& spec)
{
    Layout lay;
    if (spec.filters < 1) throw ShapeError("layer inception1: filter count must be >= 1");
    std::size_t channels = 1;
    const std::size_t f = spec.filters;
    for (std::size_t m = 0; m < spec.module_count; ++m) {
        const std::string p = "inception" + std::to_string(m + 1);
        lay.weight(p + ".bottleneck.weight", {f, channels, 1}, channels);
        for (std::size_t k : InceptionSpec::kKernels) {
            lay.weight(p + ".conv" + std::to_string(k) + ".weight", {f, f, k}, f * k);
        }
        lay.weight(p + ".pool_conv.weight", {f, channels, 1}, channels);
        lay.ones(p + ".bn.gamma", 4 * f);
        lay.zeros(p + ".bn.beta", 4 * f);
        channels = 4 * f;
    }
    layout_dense(lay, spec.dense_blocks, channels, spec.repr_dim);
    return lay;
}

Layout layout(const BackboneSpec& spec, std::size_t length)
{
    return std::visit(Overload{[&](const CnnSpec& s) { return layout_cnn(s, length); },
                               [&](const InceptionSpec& s) { return layout_inception(s); }},
                      spec);
}

class Forward {
public:
    Forward(const ParamSet& params, bool train, std::mt19937_64& rng) : params_(params), train_(train), rng_(rng) {}

    const Var& p(const std::string& name) const { return params_.get(name); }

    Var checked(Var v, const std::string& layer) const
    {
        if (!v.value().all_finite()) throw NumericError("non-finite output at layer " + layer);
        return v;
    }

    Var drop(const Var& x, double rate) const { return train_ && rate > 0.0 ? ad::dropout(x, rate, rng_) : x; }

    Var dense(Var h, const std::vector<DenseBlockSpec>& dense) const
    {
        for (std::size_t i = 0; i < dense.size(); ++i) {
            const std::string n = "dense" + std::to_string(i + 1);
            h = ad::activate(ad::affine(h, p(n + ".weight"), p(n + ".bias")), dense[i].activation);
            h = checked(drop(h, dense[i].dropout_rate), n);
        }
        return checked(ad::affine(h, p("repr.weight"), p("repr.bias")), "repr");
    }

    Var cnn(Var h, const CnnSpec& spec) const
    {
        for (std::size_t i = 0; i < spec.conv_blocks.size(); ++i) {
            const auto& b = spec.conv_blocks[i];
            const std::string n = "conv" + std::to_string(i + 1);
            const Var& bias = p(n + ".bias");
            h = ad::conv1d_same(h, p(n + ".weight"));
            h = ad::add(h, ad::reshape(bias, {1, bias.size(), 1}));
            h = ad::activate(h, b.activation);
            h = b.pooling == PoolKind::max ? ad::max_pool1d(h, b.pool_kernel, b.pool_kernel, 0)
                                           : ad::avg_pool1d(h, b.pool_kernel);
            h = ad::batch_norm(h, p(n + ".bn.gamma"), p(n + ".bn.beta"));
            h = checked(drop(h, b.dropout_rate), n);
        }
        return dense(ad::flatten(h), spec.dense_blocks);
    }

    Var inception(Var h, const InceptionSpec& spec) const
    {
        for (std::size_t m = 0; m < spec.module_count; ++m) {
            const std::string n = "inception" + std::to_string(m + 1);
            const Var bottleneck = ad::conv1d_same(h, p(n + ".bottleneck.weight"));
            std::vector<Var> branches;
            for (std::size_t k : InceptionSpec::kKernels) {
                branches.push_back(ad::conv1d_same(bottleneck, p(n + ".conv" + std::to_string(k) + ".weight")));
            }
            branches.push_back(ad::conv1d_same(ad::max_pool1d(h, 3, 1, 1), p(n + ".pool_conv.weight")));
            h = ad::batch_norm(ad::concat_channels(branches), p(n + ".bn.gamma"), p(n + ".bn.beta"));
            h = checked(ad::activate(h, spec.activation), n);
        }
        return dense(ad::global_avg_pool(h), spec.dense_blocks);
    }

private:
    const ParamSet& params_;
    bool train_;
    std::mt19937_64& rng_;
};

} // namespace

std::string activation_name(Activation a)
{
    switch (a) {
    case Activation::relu: return "relu";
    case Activation::selu: return "selu";
    case Activation::elu: return "elu";
    case Activation::mish: return "mish";
    case Activation::identity: return "identity";
    }
    return "?";
}

Activation parse_activation(const std::string& name)
{
    for (Activation a : {Activation::relu, Activation::selu, Activation::elu, Activation::mish}) {
        if (activation_name(a) == name) return a;
    }
    throw ConfigError("activation: unknown name '" + name + "'; allowed: relu, selu, elu, mish");
}

nlohmann::json backbone_to_json(const BackboneSpec& spec)
{
    return std::visit(
        Overload{[](const CnnSpec& s) {
                     nlohmann::json blocks = nlohmann::json::array();
                     for (const auto& b : s.conv_blocks) {
                         blocks.push_back({{"channels", b.channels},
                                           {"kernel_size", b.kernel_size},
                                           {"pooling", pool_name(b.pooling)},
                                           {"pool_kernel", b.pool_kernel},
                                           {"activation", activation_name(b.activation)},
                                           {"dropout_rate", b.dropout_rate}});
                     }
                     return nlohmann::json{{"type", "cnn"},
                                           {"conv_blocks", blocks},
                                           {"dense_blocks", dense_to_json(s.dense_blocks)},
                                           {"repr_dim", s.repr_dim}};
                 },
                 [](const InceptionSpec& s) {
                     return nlohmann::json{{"type", "inception"},
                                           {"module_count", s.module_count},
                                           {"filters", s.filters},
                                           {"activation", activation_name(s.activation)},
                                           {"dense_blocks", dense_to_json(s.dense_blocks)},
                                           {"repr_dim", s.repr_dim}};
                 }},
        spec);
}

BackboneSpec backbone_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw ConfigError("backbone: expected a JSON object");
    const std::string type = j.value("type", "");
    if (type == "cnn") {
        reject_unknown(j, {"type", "conv_blocks", "dense_blocks", "repr_dim"}, "backbone");
        CnnSpec s;
        if (j.contains("conv_blocks")) {
            s.conv_blocks.clear();
            for (const auto& b : j["conv_blocks"]) {
                reject_unknown(b, {"channels", "kernel_size", "pooling", "pool_kernel", "activation", "dropout_rate"},
                               "backbone.conv_blocks[]");
                ConvBlockSpec c;
                c.channels = b.value("channels", c.channels);
                c.kernel_size = b.value("kernel_size", c.kernel_size);
                c.pooling = parse_pool(b.value("pooling", pool_name(c.pooling)));
                c.pool_kernel = b.value("pool_kernel", c.pool_kernel);
                c.activation = parse_activation(b.value("activation", activation_name(c.activation)));
                c.dropout_rate = b.value("dropout_rate", c.dropout_rate);
                s.conv_blocks.push_back(c);
            }
        }
        if (j.contains("dense_blocks")) s.dense_blocks = dense_from_json(j["dense_blocks"]);
        s.repr_dim = j.value("repr_dim", s.repr_dim);
        return s;
    }
    if (type == "inception") {
        reject_unknown(j, {"type", "module_count", "filters", "activation", "dense_blocks", "repr_dim"}, "backbone");
        InceptionSpec s;
        s.module_count = j.value("module_count", s.module_count);
        s.filters = j.value("filters", s.filters);
        s.activation = parse_activation(j.value("activation", activation_name(s.activation)));
        if (j.contains("dense_blocks")) s.dense_blocks = dense_from_json(j["dense_blocks"]);
        s.repr_dim = j.value("repr_dim", s.repr_dim);
        return s;
    }
    throw ConfigError("backbone.type: unknown value '" + type + "'; allowed: cnn, inception");
}

void validate_backbone_ranges(const BackboneSpec& spec)
{
    std::visit(Overload{[](const CnnSpec& s) {
                            check_range("conv block count", static_cast<double>(s.conv_blocks.size()), 2, 6);
                            for (std::size_t i = 0; i < s.conv_blocks.size(); ++i) {
                                const auto& b = s.conv_blocks[i];
                                const std::string p = "conv_blocks[" + std::to_string(i) + "].";
                                check_range(p + "channels", static_cast<double>(b.channels), 16, 64);
                                check_range(p + "kernel_size", static_cast<double>(b.kernel_size), 2, 11);
                                check_range(p + "pool_kernel", static_cast<double>(b.pool_kernel), 2, 4);
                                check_activation(p + "activation", b.activation);
                                check_range(p + "dropout_rate", b.dropout_rate, 0.0, 0.9);
                            }
                            check_dense(s.dense_blocks);
                            check_range("repr_dim", static_cast<double>(s.repr_dim), 1, 1024);
                        },
                        [](const InceptionSpec& s) {
                            check_range("module_count", static_cast<double>(s.module_count), 2, 5);
                            check_range("filters", static_cast<double>(s.filters), 4, 16);
                            check_activation("activation", s.activation);
                            check_dense(s.dense_blocks);
                            check_range("repr_dim", static_cast<double>(s.repr_dim), 64, 256);
                        }},
               spec);
}

Backbone::Backbone(BackboneSpec spec, std::size_t input_length) : spec_(std::move(spec)), input_length_(input_length)
{
    if (input_length_ == 0) throw ShapeError("layer input: length must be >= 1");
    layout(spec_, input_length_);
    if (repr_dim() == 0) throw ShapeError("layer repr: output dimension must be >= 1");
    if (const auto* s = std::get_if<CnnSpec>(&spec_)) {
        std::size_t length = input_length_;
        for (std::size_t i = 0; i < s->conv_blocks.size(); ++i) {
            length /= s->conv_blocks[i].pool_kernel;
            if (length == 0) {
                throw ShapeError("layer conv" + std::to_string(i + 1) + ".pool: series of length " +
                                 std::to_string(input_length_) + " pooled to zero length");
            }
        }
    }
}

std::size_t Backbone::repr_dim() const
{
    return std::visit([](const auto& s) { return s.repr_dim; }, spec_);
}

ParamSet Backbone::init(std::mt19937_64& rng) const
{
    ParamSet out;
    for (const auto& e : layout(spec_, input_length_).entries) {
        Tensor t = e.fan_in > 0 ? uniform_tensor(e.shape, e.fan_in, rng) : Tensor(e.shape, e.ones ? 1.0 : 0.0);
        out.add(e.name, ad::parameter(std::move(t)));
    }
    return out;
}

Var Backbone::forward(const ParamSet& params, const Var& x, bool train_mode, std::mt19937_64& rng) const
{
    if (x.value().rank() != 3 || x.shape()[1] != 1 || x.shape()[2] != input_length_) {
        throw ShapeError("layer input: expected (batch, 1, " + std::to_string(input_length_) + "), got " +
                         ad::to_string(x.shape()));
    }
    const Forward f(params, train_mode, rng);
    return std::visit(Overload{[&](const CnnSpec& s) { return f.cnn(x, s); },
                               [&](const InceptionSpec& s) { return f.inception(x, s); }},
                      spec_);
}

std::size_t parameter_count(const BackboneSpec& spec, std::size_t input_length)
{
    std::size_t n = 0;
    for (const auto& e : layout(spec, input_length).entries) n += ad::numel(e.shape);
    return n;
}

} // namespace fewshot
