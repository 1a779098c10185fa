#pragma once

#include <array>

#include "seqcls/nn/module.hpp"
#include "seqcls/nn/ops.hpp"

namespace seqcls::nn {

class Conv3d : public Module {
public:
    Conv3d(std::int64_t in, std::int64_t out, std::array<int, 3> kernel, std::array<int, 3> stride,
           std::array<int, 3> padding, InitEngine& rng);
    Var forward(const Var& x) const { return conv3d(x, weight_, geometry_); }
    Shape output_shape(const Shape& x) const { return conv3d_output_shape(x, weight_.shape(), geometry_); }

private:
    Var weight_;
    Conv3dGeometry geometry_;
};

// Normalizes over all dims but the channel dim (dim 1).
class BatchNorm : public Module {
public:
    explicit BatchNorm(std::int64_t channels);
    Var forward(const Var& x);

private:
    Var weight_;
    Var bias_;
    Tensor& running_mean_;
    Tensor& running_var_;
};

class Linear : public Module {
public:
    Linear(std::int64_t in, std::int64_t out, InitEngine& rng);
    Var forward(const Var& x) const { return linear(x, weight_, bias_); }
    std::int64_t in_features() const { return weight_.shape()[1]; }
    std::int64_t out_features() const { return weight_.shape()[0]; }
    const Var& weight() const { return weight_; }
    const Var& bias() const { return bias_; }
    void zero_bias() { bias_.mutable_value().fill(0.0); }

protected:
    Var weight_;
    Var bias_;
};

class LayerNorm : public Module {
public:
    explicit LayerNorm(std::int64_t features);
    Var forward(const Var& x) const { return layer_norm_last(x, weight_, bias_); }

private:
    Var weight_;
    Var bias_;
};

// Multi-layer LSTM with PyTorch gate order (input, forget, cell, output) and
// separate input/recurrent biases. Input [B, T, F]; returns the last layer's
// hidden state at the final timestep, [B, hidden].
class Lstm : public Module {
public:
    Lstm(std::int64_t input_size, std::int64_t hidden_size, int num_layers, InitEngine& rng);
    Var forward(const Var& x) const;
    std::int64_t hidden_size() const { return hidden_; }

private:
    struct LayerWeights {
        Var w_ih, w_hh, b_ih, b_hh;
    };
    std::int64_t hidden_;
    std::vector<LayerWeights> layers_;
};

// Self-attention over [B, T, D] with packed input projection.
class MultiheadAttention : public Module {
public:
    MultiheadAttention(std::int64_t embed_dim, int heads, InitEngine& rng);
    Var forward(const Var& x) const;

private:
    std::int64_t dim_;
    int heads_;
    Var in_proj_weight_;
    Var in_proj_bias_;
    Linear* out_proj_;
};

// Post-norm encoder layer with ReLU feed-forward and no dropout.
class TransformerEncoderLayer : public Module {
public:
    TransformerEncoderLayer(std::int64_t d_model, int heads, std::int64_t feedforward, InitEngine& rng);
    Var forward(const Var& x) const;

private:
    MultiheadAttention* self_attn_;
    Linear* linear1_;
    Linear* linear2_;
    LayerNorm* norm1_;
    LayerNorm* norm2_;
};

}  // namespace seqcls::nn
