#include "fewshot/ad/grad.hpp"

#include <unordered_map>
#include <unordered_set>

#include "fewshot/ad/ops.hpp"
#include "fewshot/error.hpp"

namespace fewshot::ad {

Tape record_tape(const Var& root)
{
    Tape tape;
    if (!root.requires_grad()) return tape;

    // Iterative post-order DFS.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            const auto& parent = node->parents[next++];
            if (parent->requires_grad && visited.insert(parent.get()).second) {
                stack.emplace_back(parent, 0);
            }
            continue;
        }
        tape.order.push_back(node);
        stack.pop_back();
    }
    return tape;
}

std::vector<Var> grad(const Var& loss, std::span<const Var> wrt, bool create_graph)
{
    if (loss.size() != 1) {
        throw ContractError("grad: loss must be a scalar, got shape " + to_string(loss.shape()));
    }

    Tape tape = record_tape(loss);
    GradModeGuard mode(create_graph);

    std::unordered_map<Node*, Var> grads;
    if (loss.requires_grad()) grads[loss.node().get()] = constant(Tensor(loss.shape(), 1.0));

    for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
        const auto& node = *it;
        auto found = grads.find(node.get());
        if (found == grads.end() || !node->backward) continue;
        const Var grad_out = found->second;
        std::vector<Var> parent_grads = node->backward(grad_out, Var(node));
        for (std::size_t i = 0; i < node->parents.size() && i < parent_grads.size(); ++i) {
            const auto& parent = node->parents[i];
            if (!parent->requires_grad || !parent_grads[i].defined()) continue;
            auto [slot, inserted] = grads.try_emplace(parent.get(), parent_grads[i]);
            if (!inserted) slot->second = add(slot->second, parent_grads[i]);
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto found = grads.find(w.node().get());
        if (found != grads.end()) {
            out.push_back(found->second);
        } else {
            out.push_back(constant(Tensor(w.shape(), 0.0)));
        }
    }
    return out;
}

} // namespace fewshot::ad
