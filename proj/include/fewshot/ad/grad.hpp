#pragma once

#include <span>
#include <vector>

#include "fewshot/ad/var.hpp"

namespace fewshot::ad {

// Nodes reachable from a root through gradient-requiring edges, inputs before outputs.
struct Tape {
    std::vector<std::shared_ptr<Node>> order;
};

Tape record_tape(const Var& root);

// Gradients of a scalar `loss` with respect to each entry of `wrt`.
//
// With `create_graph` the backward pass is itself recorded, so the returned gradients are
// differentiable functions of the inputs and `grad` may be applied to them again.
// Entries of `wrt` that the loss does not depend on receive a zero gradient.
std::vector<Var> grad(const Var& loss, std::span<const Var> wrt, bool create_graph = false);

} // namespace fewshot::ad
