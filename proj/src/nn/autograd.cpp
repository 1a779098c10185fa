#include "seqcls/nn/autograd.hpp"

#include <stdexcept>
#include <unordered_set>

namespace seqcls::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        if (g.numel() != value.numel()) throw std::logic_error("gradient size mismatch");
        grad = g;
        grad.reshape_(value.shape());
    } else {
        grad.add_(g);
    }
}

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::backward() {
    if (!node_) throw std::logic_error("backward on undefined Var");
    if (node_->value.numel() != 1) throw std::logic_error("backward requires a scalar output");
    if (!node_->requires_grad) throw std::logic_error("backward on a value that does not require grad");

    // Iterative post-order DFS for a topological order. The order holds owning
    // pointers because releasing a node's inputs may drop the last reference.
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            NodePtr child = n->inputs[next++];
            if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Tensor(node_->value.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (!n->backward) continue;
        if (!n->grad.empty()) n->backward(n->grad, n->value);
        n->backward = nullptr;
        n->inputs.clear();
        n->grad = Tensor();
        it->reset();
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool records(std::initializer_list<const Var*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Var* v : inputs)
        if (v && v->requires_grad()) return true;
    return false;
}

bool records(const std::vector<Var>& inputs) {
    if (!g_grad_enabled) return false;
    for (const Var& v : inputs)
        if (v.requires_grad()) return true;
    return false;
}

Var attach(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    Var out(std::move(value), true);
    Node* n = out.node();
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs)
        if (v.defined()) n->inputs.push_back(v.node_ptr());
    n->backward = std::move(backward);
    return out;
}

}  // namespace seqcls::nn
