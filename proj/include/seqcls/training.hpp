#pragma once

// Focal-loss training with warmup + step-decay learning rates.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqcls/clipsampling.hpp"
#include "seqcls/evaluation.hpp"
#include "seqcls/models.hpp"
#include "seqcls/nn/module.hpp"

namespace seqcls {

// Mean over the batch of -(1 - p_t)^gamma * log(p_t), p_t the softmax
// probability of the true class. Throws std::invalid_argument on non-finite
// scores or a negative gamma.
nn::Var focal_loss(const nn::Var& scores, const std::vector<Label>& labels, double gamma);

enum class OptimizerKind { adamw, sgd };
std::string_view to_string(OptimizerKind k);
// Accepts "adamw" / "adaptive_decoupled_weight_decay" and "sgd" / "plain_sgd".
OptimizerKind parse_optimizer(std::string_view text);

OptimizerKind select_optimizer(Family family);
OptimizerKind select_optimizer(std::string_view family_name);

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adamw;
    double learning_rate = 1e-4;
    int epochs = 12;
    double warmup_epochs = 1.0;
    double decay_epoch = 8.0;
    double decay_factor = 0.1;
    int batch_size = 8;
    double gamma = 2.0;
    std::uint64_t seed = 0;
    // Negative picks the optimizer default: 0.01 for AdamW, 0 for SGD.
    double weight_decay = -1.0;
    double momentum = 0.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    // 0 = no limit.
    int max_steps_per_epoch = 0;
    // Stops after this many completed epochs (0 = run to the end); the run can
    // be resumed later.
    int stop_after_epoch = 0;
    int eval_windows = 1;
    int eval_batch_size = 8;

    double resolved_weight_decay() const;
};

// Optimizer per family; batch size 128 for images, 8 for the fully
// convolutional video network and 16 for backbone + neck models.
TrainConfig default_train_config(Family family);
void validate_config(const TrainConfig& cfg);

// Linear warmup from 0, then the base rate, then base * decay_factor from
// decay_epoch on. `epoch` is real-valued progress in [0, epochs].
double lr_at(const TrainConfig& cfg, double epoch);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys throw.
TrainConfig train_config_from_json(const nlohmann::json& doc, TrainConfig base = {});

// Updates the parameters that require gradients. State round-trips through
// named tensors.
class Optimizer {
public:
    virtual ~Optimizer() = default;
    virtual void step(double lr) = 0;
    virtual std::map<std::string, nn::Tensor> state() const = 0;
    virtual void load_state(const std::map<std::string, nn::Tensor>& state) = 0;
    void zero_grad();
    const std::vector<nn::NamedParameter>& parameters() const { return params_; }

protected:
    explicit Optimizer(std::vector<nn::NamedParameter> params) : params_(std::move(params)) {}
    std::vector<nn::NamedParameter> params_;
};

// Decoupled weight decay: p -= lr * wd * p before the Adam update.
class AdamW : public Optimizer {
public:
    AdamW(std::vector<nn::NamedParameter> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8);
    void step(double lr) override;
    std::map<std::string, nn::Tensor> state() const override;
    void load_state(const std::map<std::string, nn::Tensor>& state) override;
    std::int64_t steps() const { return t_; }

private:
    double wd_, b1_, b2_, eps_;
    std::int64_t t_ = 0;
    std::vector<nn::Tensor> m_, v_;
};

class Sgd : public Optimizer {
public:
    Sgd(std::vector<nn::NamedParameter> params, double weight_decay, double momentum);
    void step(double lr) override;
    std::map<std::string, nn::Tensor> state() const override;
    void load_state(const std::map<std::string, nn::Tensor>& state) override;

private:
    double wd_, momentum_;
    std::vector<nn::Tensor> buf_;
};

std::vector<nn::NamedParameter> trainable_parameters(const nn::Module& model);
std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg, const nn::Module& model);

struct TrainState {
    int epoch = 0;  // completed epochs
    std::int64_t global_step = 0;
    double best_val_macro_f1 = -1.0;
    int best_epoch = -1;
    std::uint64_t seed = 0;
    bool operator==(const TrainState&) const = default;
};

nlohmann::json sampling_to_json(const SamplingConfig& cfg);
SamplingConfig sampling_from_json(const nlohmann::json& doc, SamplingConfig base = {});

nlohmann::json train_state_to_json(const TrainState& s);
TrainState train_state_from_json(const nlohmann::json& doc);

struct EpochMetrics {
    int epoch = 0;  // 1-based
    std::int64_t global_step = 0;
    int steps = 0;
    double train_loss = 0.0;
    double lr = 0.0;  // at the last step
    EvalReport val;
    double seconds = 0.0;
};

nlohmann::json epoch_metrics_to_json(const EpochMetrics& m);

class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainRunOptions {
    std::filesystem::path out_dir;  // empty = no files
    bool resume = false;            // continue from out_dir/last.ckpt when present
    SamplingConfig sampling;
    std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
    TrainState state;
    std::vector<EpochMetrics> history;  // epochs run in this call
};

// Per-sample randomness is derived from (seed, epoch, item), so a resumed run
// reproduces the uninterrupted one. Writes last.ckpt and best.ckpt atomically
// and appends one JSON line per epoch to metrics.jsonl.
TrainResult train(Classifier& model, const ClipDataset& train_data, const ClipDataset& val_data,
                  const TrainConfig& cfg, const TrainRunOptions& options);
// Throws std::invalid_argument when either split is empty.
TrainResult train(Classifier& model, const DatasetManifest& manifest, const std::filesystem::path& dataset_root,
                  const TrainConfig& cfg, const TrainRunOptions& options);

// Checkpoints hold "model.*" and "optim.*" tensors plus spec, freeze policy,
// train config and train state as metadata.
struct Checkpoint {
    ModelSpec spec;
    FreezePolicy policy;
    TrainConfig config;
    TrainState state;
    SamplingConfig sampling;
    std::map<std::string, nn::Tensor> model;
    std::map<std::string, nn::Tensor> optimizer;
};

void save_checkpoint(const std::filesystem::path& path, Classifier& model, const Optimizer* optimizer,
                     const TrainConfig& cfg, const TrainState& state, const SamplingConfig& sampling);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Rebuilds the model from the stored spec and policy and loads its weights.
std::unique_ptr<Classifier> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace seqcls
