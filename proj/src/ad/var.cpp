#include "fewshot/ad/var.hpp"

#include "fewshot/error.hpp"

namespace fewshot::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }

GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var Var::record(Tensor value, const char* op, const std::vector<Var>& parents, BackwardFn backward)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p.requires_grad()) {
                node->requires_grad = true;
                break;
            }
        }
    }
    if (node->requires_grad) {
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

Tensor& Var::mutable_value()
{
    if (!is_leaf()) throw ContractError("mutable_value: only leaf values may be modified in place");
    return node_->value;
}

Var Var::detach(bool requires_grad) const { return Var(node_->value, requires_grad); }

Var constant(Tensor value) { return Var(std::move(value), false); }

Var parameter(Tensor value) { return Var(std::move(value), true); }

} // namespace fewshot::ad
