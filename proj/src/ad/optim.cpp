#include "fewshot/ad/optim.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "fewshot/error.hpp"

namespace fewshot::ad {

OptimizerKind parse_optimizer(const std::string& name)
{
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "sgd") return OptimizerKind::sgd;
    if (lower == "adam") return OptimizerKind::adam;
    if (lower == "adamw") return OptimizerKind::adamw;
    if (lower == "rmsprop") return OptimizerKind::rmsprop;
    throw ConfigError("optimizer: unknown name '" + name + "'; allowed: Adam, SGD, AdamW, RMSprop");
}

std::string optimizer_name(OptimizerKind kind)
{
    switch (kind) {
    case OptimizerKind::sgd: return "SGD";
    case OptimizerKind::adam: return "Adam";
    case OptimizerKind::adamw: return "AdamW";
    case OptimizerKind::rmsprop: return "RMSprop";
    }
    return "?";
}

void Optimizer::step(ParamSet& params, std::span<const Var> grads)
{
    if (grads.size() != params.size()) throw ContractError("optimizer: one gradient per parameter required");
    if (first_.empty()) {
        first_.resize(params.size());
        second_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            first_[i].assign(params[i].size(), 0.0);
            second_[i].assign(params[i].size(), 0.0);
        }
    } else if (first_.size() != params.size()) {
        throw ContractError("optimizer: parameter set changed between steps");
    }

    ++steps_;
    const OptimizerConfig& c = config_;
    const double t = static_cast<double>(steps_);
    const double bias1 = 1.0 - std::pow(c.beta1, t);
    const double bias2 = 1.0 - std::pow(c.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& theta = params[i].mutable_value();
        const Tensor& g = grads[i].value();
        if (g.shape() != theta.shape()) {
            throw ShapeError("optimizer: gradient shape mismatch for '" + params.name(i) + "'");
        }
        auto& m = first_[i];
        auto& v = second_[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            double gj = g[j];
            if (c.kind != OptimizerKind::adamw) gj += c.weight_decay * theta[j];
            switch (c.kind) {
            case OptimizerKind::sgd:
                theta[j] -= c.learning_rate * gj;
                break;
            case OptimizerKind::adam:
            case OptimizerKind::adamw: {
                if (c.kind == OptimizerKind::adamw) theta[j] -= c.learning_rate * c.weight_decay * theta[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                const double mhat = m[j] / bias1;
                const double vhat = v[j] / bias2;
                theta[j] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.eps);
                break;
            }
            case OptimizerKind::rmsprop:
                v[j] = c.rms_decay * v[j] + (1.0 - c.rms_decay) * gj * gj;
                theta[j] -= c.learning_rate * gj / (std::sqrt(v[j]) + c.eps);
                break;
            }
        }
    }
}

} // namespace fewshot::ad
