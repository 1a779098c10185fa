#include "seqcls/nn/module.hpp"

#include <cmath>

namespace seqcls::nn {

namespace {
std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}
}  // namespace

void Module::train(bool on) {
    training_ = on;
    for (auto& [_, child] : children_) child->train(on);
}

void Module::set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& [_, p] : params_) p.set_requires_grad(!frozen);
    for (auto& [_, child] : children_) child->set_frozen(frozen);
}

std::vector<NamedParameter> Module::named_parameters(const std::string& prefix) const {
    std::vector<NamedParameter> out;
    for (const auto& [name, p] : params_) out.push_back({join(prefix, name), p});
    for (const auto& [name, child] : children_) {
        auto sub = child->named_parameters(join(prefix, name));
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::vector<NamedBuffer> Module::named_buffers(const std::string& prefix) {
    std::vector<NamedBuffer> out;
    for (auto& [name, b] : buffers_) out.push_back({join(prefix, name), b.get()});
    for (auto& [name, child] : children_) {
        auto sub = child->named_buffers(join(prefix, name));
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::int64_t Module::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : named_parameters()) n += p.var.value().numel();
    return n;
}

std::int64_t Module::trainable_parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : named_parameters())
        if (p.var.requires_grad()) n += p.var.value().numel();
    return n;
}

void Module::zero_grad() {
    for (auto& p : named_parameters()) p.var.zero_grad();
}

Var Module::register_parameter(std::string name, Tensor init) {
    params_.emplace_back(std::move(name), Var(std::move(init), !frozen_));
    return params_.back().second;
}

Tensor& Module::register_buffer(std::string name, Tensor init) {
    buffers_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(init)));
    return *buffers_.back().second;
}

namespace {
std::pair<double, double> fans(const Shape& shape) {
    double receptive = 1.0;
    for (std::size_t i = 2; i < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
    const double fan_out = static_cast<double>(shape[0]) * receptive;
    const double fan_in = shape.size() > 1 ? static_cast<double>(shape[1]) * receptive : 1.0;
    return {fan_in, fan_out};
}
}  // namespace

Tensor kaiming_normal_fan_out(const Shape& shape, InitEngine& rng) {
    return normal_tensor(shape, std::sqrt(2.0 / fans(shape).second), rng);
}

Tensor uniform_tensor(const Shape& shape, double bound, InitEngine& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

Tensor normal_tensor(const Shape& shape, double stddev, InitEngine& rng) {
    Tensor t(shape);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

Tensor xavier_uniform(const Shape& shape, InitEngine& rng) {
    const auto [fan_in, fan_out] = fans(shape);
    return uniform_tensor(shape, std::sqrt(6.0 / (fan_in + fan_out)), rng);
}

}  // namespace seqcls::nn
