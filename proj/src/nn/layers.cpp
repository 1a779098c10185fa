#include "seqcls/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace seqcls::nn {

Conv3d::Conv3d(std::int64_t in, std::int64_t out, std::array<int, 3> kernel, std::array<int, 3> stride,
               std::array<int, 3> padding, InitEngine& rng)
    : weight_(register_parameter("weight", kaiming_normal_fan_out({out, in, kernel[0], kernel[1], kernel[2]}, rng))),
      geometry_{stride, padding} {}

BatchNorm::BatchNorm(std::int64_t channels)
    : weight_(register_parameter("weight", Tensor({channels}, 1.0))),
      bias_(register_parameter("bias", Tensor({channels}, 0.0))),
      running_mean_(register_buffer("running_mean", Tensor({channels}, 0.0))),
      running_var_(register_buffer("running_var", Tensor({channels}, 1.0))) {}

Var BatchNorm::forward(const Var& x) {
    return batch_norm(x, weight_, bias_, {&running_mean_, &running_var_}, is_training() && !is_frozen());
}

Linear::Linear(std::int64_t in, std::int64_t out, InitEngine& rng)
    : weight_(register_parameter("weight", uniform_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng))),
      bias_(register_parameter("bias", uniform_tensor({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng))) {}

LayerNorm::LayerNorm(std::int64_t features)
    : weight_(register_parameter("weight", Tensor({features}, 1.0))),
      bias_(register_parameter("bias", Tensor({features}, 0.0))) {}

Lstm::Lstm(std::int64_t input_size, std::int64_t hidden_size, int num_layers, InitEngine& rng)
    : hidden_(hidden_size) {
    if (num_layers < 1) throw std::invalid_argument("Lstm: num_layers must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
    for (int l = 0; l < num_layers; ++l) {
        const std::int64_t in = l == 0 ? input_size : hidden_size;
        const std::string s = std::to_string(l);
        LayerWeights w;
        w.w_ih = register_parameter("weight_ih_l" + s, uniform_tensor({4 * hidden_size, in}, bound, rng));
        w.w_hh = register_parameter("weight_hh_l" + s, uniform_tensor({4 * hidden_size, hidden_size}, bound, rng));
        w.b_ih = register_parameter("bias_ih_l" + s, uniform_tensor({4 * hidden_size}, bound, rng));
        w.b_hh = register_parameter("bias_hh_l" + s, uniform_tensor({4 * hidden_size}, bound, rng));
        layers_.push_back(std::move(w));
    }
}

Var Lstm::forward(const Var& x) const {
    if (x.value().rank() != 3) throw std::invalid_argument("Lstm: expected [B, T, F], got " + shape_str(x.shape()));
    const std::int64_t b = x.shape()[0], t = x.shape()[1];
    if (x.shape()[2] != layers_.front().w_ih.shape()[1])
        throw std::invalid_argument("Lstm: feature size " + std::to_string(x.shape()[2]) + " does not match weights");
    std::vector<Var> inputs;
    inputs.reserve(static_cast<std::size_t>(t));
    for (std::int64_t s = 0; s < t; ++s) inputs.push_back(reshape(narrow(x, 1, s, 1), {b, x.shape()[2]}));

    const std::int64_t hs = hidden_;
    for (const auto& w : layers_) {
        Var h(Tensor({b, hs})), c(Tensor({b, hs}));
        std::vector<Var> outputs;
        outputs.reserve(inputs.size());
        for (const auto& xt : inputs) {
            Var gates = add(linear(xt, w.w_ih, w.b_ih), linear(h, w.w_hh, w.b_hh));
            Var i = sigmoid(narrow(gates, 1, 0, hs));
            Var f = sigmoid(narrow(gates, 1, hs, hs));
            Var g = tanh(narrow(gates, 1, 2 * hs, hs));
            Var o = sigmoid(narrow(gates, 1, 3 * hs, hs));
            c = add(mul(f, c), mul(i, g));
            h = mul(o, tanh(c));
            outputs.push_back(h);
        }
        inputs = std::move(outputs);
    }
    return inputs.back();
}

MultiheadAttention::MultiheadAttention(std::int64_t embed_dim, int heads, InitEngine& rng)
    : dim_(embed_dim),
      heads_(heads),
      in_proj_weight_(register_parameter("in_proj_weight", xavier_uniform({3 * embed_dim, embed_dim}, rng))),
      in_proj_bias_(register_parameter("in_proj_bias", Tensor({3 * embed_dim}, 0.0))) {
    if (heads < 1 || embed_dim % heads != 0)
        throw std::invalid_argument("MultiheadAttention: embed_dim must be divisible by heads");
    out_proj_ = &register_module("out_proj", std::make_unique<Linear>(embed_dim, embed_dim, rng));
    out_proj_->zero_bias();
}

Var MultiheadAttention::forward(const Var& x) const {
    const std::int64_t b = x.shape()[0], t = x.shape()[1], d = dim_, hd = dim_ / heads_;
    if (x.value().rank() != 3 || x.shape()[2] != d)
        throw std::invalid_argument("MultiheadAttention: expected [B, T, " + std::to_string(d) + "], got " +
                                    shape_str(x.shape()));
    Var qkv = linear(reshape(x, {b * t, d}), in_proj_weight_, in_proj_bias_);
    auto split_heads = [&](std::int64_t offset) {
        Var part = reshape(narrow(qkv, 1, offset, d), {b, t, heads_, hd});
        return reshape(permute(part, {0, 2, 1, 3}), {b * heads_, t, hd});
    };
    Var q = split_heads(0), k = split_heads(d), v = split_heads(2 * d);
    Var attn = softmax_last(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd))));
    Var ctx = bmm(attn, v);
    ctx = reshape(permute(reshape(ctx, {b, heads_, t, hd}), {0, 2, 1, 3}), {b * t, d});
    return reshape(out_proj_->forward(ctx), {b, t, d});
}

TransformerEncoderLayer::TransformerEncoderLayer(std::int64_t d_model, int heads, std::int64_t feedforward,
                                                 InitEngine& rng) {
    self_attn_ = &register_module("self_attn", std::make_unique<MultiheadAttention>(d_model, heads, rng));
    linear1_ = &register_module("linear1", std::make_unique<Linear>(d_model, feedforward, rng));
    linear2_ = &register_module("linear2", std::make_unique<Linear>(feedforward, d_model, rng));
    norm1_ = &register_module("norm1", std::make_unique<LayerNorm>(d_model));
    norm2_ = &register_module("norm2", std::make_unique<LayerNorm>(d_model));
}

Var TransformerEncoderLayer::forward(const Var& x) const {
    const std::int64_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
    Var h = norm1_->forward(add(x, self_attn_->forward(x)));
    Var flat = reshape(h, {b * t, d});
    Var ff = linear2_->forward(relu(linear1_->forward(flat)));
    return reshape(norm2_->forward(add(flat, ff)), {b, t, d});
}

}  // namespace seqcls::nn
