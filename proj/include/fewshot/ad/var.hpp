#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fewshot/ad/tensor.hpp"

namespace fewshot::ad {

class Var;

// Maps the gradient flowing into a node's output to one gradient per parent.
// Entries for parents that do not require a gradient may be left empty.
// `self` is the node's own output, so rules such as exp or tanh can reuse it.
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const Var& self)>;

struct Node {
    Tensor value;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;
};

// Handle to a node of the differentiation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    // Records an operation result. The node only keeps its parents and backward rule when
    // recording is enabled and at least one parent requires a gradient.
    static Var record(Tensor value, const char* op, const std::vector<Var>& parents, BackwardFn backward);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t size() const { return node_->value.size(); }
    double item() const { return node_->value.item(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return node_->parents.empty(); }
    const char* op() const { return node_->op; }

    // In-place access for leaves only (optimizer updates).
    Tensor& mutable_value();

    // Fresh leaf holding a copy of the value.
    Var detach(bool requires_grad = false) const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Thread-local switch deciding whether operations are recorded.
bool grad_enabled();

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

class NoGradGuard : public GradModeGuard {
public:
    NoGradGuard() : GradModeGuard(false) {}
};

} // namespace fewshot::ad
