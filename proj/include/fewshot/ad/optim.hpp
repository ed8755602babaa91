#pragma once

#include <span>
#include <string>
#include <vector>

#include "fewshot/ad/param_set.hpp"

namespace fewshot::ad {

enum class OptimizerKind { sgd, adam, adamw, rmsprop };

// Accepts "SGD", "Adam", "AdamW", "RMSprop" (case-insensitive).
OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind kind);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double rms_decay = 0.99;
};

// First-order update rules. Moment estimates persist across calls to step().
// Weight decay is added to the gradient (L2) except for AdamW, where it is decoupled.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig config) : config_(config) {}

    void step(ParamSet& params, std::span<const Var> grads);

    const OptimizerConfig& config() const { return config_; }
    long steps_taken() const { return steps_; }

private:
    OptimizerConfig config_;
    long steps_ = 0;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
};

} // namespace fewshot::ad
