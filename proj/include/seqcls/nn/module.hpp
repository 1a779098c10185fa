#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "seqcls/nn/autograd.hpp"

namespace seqcls::nn {

struct NamedParameter {
    std::string name;
    Var var;
};

struct NamedBuffer {
    std::string name;
    Tensor* tensor;
};

// Owns parameters, buffers and child modules. Names are dotted paths that
// follow the torchvision state-dict convention so external weights map 1:1.
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    // Recurses into children.
    void train(bool on = true);
    bool is_training() const { return training_; }

    // Frozen modules never receive gradients and keep their normalization
    // statistics fixed.
    void set_frozen(bool frozen);
    bool is_frozen() const { return frozen_; }

    std::vector<NamedParameter> named_parameters(const std::string& prefix = "") const;
    std::vector<NamedBuffer> named_buffers(const std::string& prefix = "");
    std::int64_t parameter_count() const;
    std::int64_t trainable_parameter_count() const;
    void zero_grad();

protected:
    // The returned handle shares the registered node.
    Var register_parameter(std::string name, Tensor init);
    Tensor& register_buffer(std::string name, Tensor init);

    template <class M>
    M& register_module(std::string name, std::unique_ptr<M> module) {
        M& ref = *module;
        children_.emplace_back(std::move(name), std::move(module));
        return ref;
    }

private:
    std::vector<std::pair<std::string, Var>> params_;
    std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
    bool training_ = true;
    bool frozen_ = false;
};

// Initialization helpers; engine drives every random draw.
using InitEngine = std::mt19937_64;

Tensor kaiming_normal_fan_out(const Shape& shape, InitEngine& rng);
Tensor uniform_tensor(const Shape& shape, double bound, InitEngine& rng);
Tensor normal_tensor(const Shape& shape, double stddev, InitEngine& rng);
Tensor xavier_uniform(const Shape& shape, InitEngine& rng);

}  // namespace seqcls::nn
