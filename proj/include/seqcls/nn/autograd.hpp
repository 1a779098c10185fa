#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "seqcls/nn/tensor.hpp"

namespace seqcls::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the gradient w.r.t. the node's value (and the value itself) and
// accumulates into the node's inputs.
using BackwardFn = std::function<void(const Tensor& grad_out, const Tensor& out)>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    BackwardFn backward;

    void accumulate(const Tensor& g);
    // Returns the gradient buffer, allocating zeros if needed.
    Tensor& grad_buffer();
};

// Handle to a node in the computation graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad = Tensor(); }

    // Back-propagates from this node, which must hold a single element. The
    // graph behind it is released afterwards.
    void backward();

    Node* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

bool grad_enabled();

// Disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// True when recording is enabled and some input requires a gradient.
bool records(std::initializer_list<const Var*> inputs);
bool records(const std::vector<Var>& inputs);

// Wraps an op result as a graph node depending on `inputs`.
Var attach(Tensor value, std::vector<Var> inputs, BackwardFn backward);

}  // namespace seqcls::nn
