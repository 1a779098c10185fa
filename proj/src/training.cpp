#include "seqcls/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "seqcls/checkpoint.hpp"
#include "seqcls/rng.hpp"

namespace seqcls {

using nlohmann::json;
using nn::Tensor;
using nn::Var;

Var focal_loss(const Var& scores, const std::vector<Label>& labels, double gamma) {
    const Tensor& z = scores.value();
    if (z.rank() != 2) throw std::invalid_argument("focal_loss: scores must be [B, O], got " + nn::shape_str(z.shape()));
    const auto batch = z.dim(0), classes = z.dim(1);
    if (batch == 0 || static_cast<std::size_t>(batch) != labels.size())
        throw std::invalid_argument("focal_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(batch));
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("focal_loss: gamma must be >= 0");
    for (auto v : z.values())
        if (!std::isfinite(v)) throw std::invalid_argument("focal_loss: non-finite score");

    Tensor dz(z.shape());
    double total = 0.0;
    std::vector<double> s(static_cast<std::size_t>(classes));
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* row = z.data() + b * classes;
        const auto t = static_cast<std::int64_t>(index_of(labels[static_cast<std::size_t>(b)]));
        if (t >= classes) throw std::invalid_argument("focal_loss: label outside score columns");
        const double m = *std::max_element(row, row + classes);
        double sum = 0.0;
        for (std::int64_t j = 0; j < classes; ++j) sum += (s[static_cast<std::size_t>(j)] = std::exp(row[j] - m));
        for (auto& v : s) v /= sum;
        const double log_p = row[t] - m - std::log(sum);
        const double p = s[static_cast<std::size_t>(t)];
        double q = 0.0;  // 1 - p without cancellation
        for (std::int64_t j = 0; j < classes; ++j)
            if (j != t) q += s[static_cast<std::size_t>(j)];
        const double w = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
        total += -w * log_p;
        // d/dz_j = (delta_tj - s_j) * (gamma p q^(gamma-1) log p - q^gamma)
        const double a = (gamma == 0.0 || q == 0.0) ? 0.0 : gamma * p * std::pow(q, gamma - 1.0) * log_p;
        const double coef = (a - w) / static_cast<double>(batch);
        for (std::int64_t j = 0; j < classes; ++j)
            dz[b * classes + j] = ((j == t ? 1.0 : 0.0) - s[static_cast<std::size_t>(j)]) * coef;
    }
    Tensor y({1}, total / static_cast<double>(batch));
    if (!nn::records({&scores})) return Var(std::move(y));
    auto zn = scores.node_ptr();
    return nn::attach(std::move(y), {scores}, [zn, dz](const Tensor& g, const Tensor&) {
        Tensor gz = dz;
        for (auto& v : gz.values()) v *= g[0];
        zn->accumulate(gz);
    });
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view text) {
    if (text == "adamw" || text == "adaptive_decoupled_weight_decay") return OptimizerKind::adamw;
    if (text == "sgd" || text == "plain_sgd") return OptimizerKind::sgd;
    throw std::invalid_argument("unknown optimizer \"" + std::string(text) + "\" (valid: adamw, sgd)");
}

OptimizerKind select_optimizer(Family family) {
    switch (family) {
        case Family::image_resnet18:
        case Family::resnet18_lstm:
        case Family::r2plus1d:
            return OptimizerKind::adamw;
        case Family::resnet18_mlp:
        case Family::resnet18_transformer:
            return OptimizerKind::sgd;
    }
    throw std::invalid_argument("unknown family");
}

OptimizerKind select_optimizer(std::string_view family_name) { return select_optimizer(parse_family(family_name)); }

double TrainConfig::resolved_weight_decay() const {
    if (weight_decay >= 0.0) return weight_decay;
    return optimizer == OptimizerKind::adamw ? 0.01 : 0.0;
}

TrainConfig default_train_config(Family family) {
    TrainConfig cfg;
    cfg.optimizer = select_optimizer(family);
    if (family == Family::image_resnet18)
        cfg.batch_size = 128;
    else
        cfg.batch_size = has_neck(family) ? 16 : 8;
    return cfg;
}

void validate_config(const TrainConfig& cfg) {
    auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
    if (!(cfg.learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (cfg.epochs < 1) fail("epochs must be >= 1");
    if (!(cfg.warmup_epochs >= 0.0 && cfg.warmup_epochs < cfg.decay_epoch && cfg.decay_epoch < cfg.epochs))
        fail("need 0 <= warmup_epochs < decay_epoch < epochs");
    if (!(cfg.decay_factor > 0.0)) fail("decay_factor must be > 0");
    if (cfg.batch_size < 1) fail("batch_size must be >= 1");
    if (!(cfg.gamma >= 0.0)) fail("gamma must be >= 0");
    if (cfg.momentum < 0.0) fail("momentum must be >= 0");
    if (cfg.max_steps_per_epoch < 0 || cfg.stop_after_epoch < 0) fail("step and epoch limits must be >= 0");
    if (cfg.eval_windows < 1 || cfg.eval_batch_size < 1) fail("eval_windows and eval_batch_size must be >= 1");
}

double lr_at(const TrainConfig& cfg, double epoch) {
    if (!(epoch >= 0.0 && epoch <= cfg.epochs))
        throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                    std::to_string(cfg.epochs) + "]");
    if (epoch < cfg.warmup_epochs) return cfg.learning_rate * epoch / cfg.warmup_epochs;
    if (epoch < cfg.decay_epoch) return cfg.learning_rate;
    return cfg.learning_rate * cfg.decay_factor;
}

json train_config_to_json(const TrainConfig& c) {
    return {{"optimizer", std::string(to_string(c.optimizer))},
            {"learning_rate", c.learning_rate},
            {"epochs", c.epochs},
            {"warmup_epochs", c.warmup_epochs},
            {"decay_epoch", c.decay_epoch},
            {"decay_factor", c.decay_factor},
            {"batch_size", c.batch_size},
            {"gamma", c.gamma},
            {"seed", c.seed},
            {"weight_decay", c.weight_decay},
            {"momentum", c.momentum},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"max_steps_per_epoch", c.max_steps_per_epoch},
            {"stop_after_epoch", c.stop_after_epoch},
            {"eval_windows", c.eval_windows},
            {"eval_batch_size", c.eval_batch_size}};
}

TrainConfig train_config_from_json(const json& doc, TrainConfig c) {
    if (!doc.is_object()) throw std::invalid_argument("train config must be an object");
    for (const auto& [key, v] : doc.items()) {
        if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
        else if (key == "learning_rate") c.learning_rate = v.get<double>();
        else if (key == "epochs") c.epochs = v.get<int>();
        else if (key == "warmup_epochs") c.warmup_epochs = v.get<double>();
        else if (key == "decay_epoch") c.decay_epoch = v.get<double>();
        else if (key == "decay_factor") c.decay_factor = v.get<double>();
        else if (key == "batch_size") c.batch_size = v.get<int>();
        else if (key == "gamma") c.gamma = v.get<double>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "weight_decay") c.weight_decay = v.get<double>();
        else if (key == "momentum") c.momentum = v.get<double>();
        else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
        else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
        else if (key == "adam_eps") c.adam_eps = v.get<double>();
        else if (key == "max_steps_per_epoch") c.max_steps_per_epoch = v.get<int>();
        else if (key == "stop_after_epoch") c.stop_after_epoch = v.get<int>();
        else if (key == "eval_windows") c.eval_windows = v.get<int>();
        else if (key == "eval_batch_size") c.eval_batch_size = v.get<int>();
        else throw std::invalid_argument("train config: unknown key \"" + key + "\"");
    }
    return c;
}

json sampling_to_json(const SamplingConfig& c) {
    return {{"num_frames", c.num_frames},
            {"window_seconds", c.window_seconds},
            {"crop_size", c.transform.crop_size},
            {"resize_min", c.transform.resize_min},
            {"resize_max", c.transform.resize_max},
            {"eval_short_side", c.transform.eval_short_side},
            {"flip_probability", c.transform.flip_probability}};
}

SamplingConfig sampling_from_json(const json& doc, SamplingConfig c) {
    if (!doc.is_object()) throw std::invalid_argument("sampling config must be an object");
    for (const auto& [key, v] : doc.items()) {
        if (key == "num_frames") c.num_frames = v.get<int>();
        else if (key == "window_seconds") c.window_seconds = v.get<double>();
        else if (key == "crop_size") c.transform.crop_size = v.get<int>();
        else if (key == "resize_min") c.transform.resize_min = v.get<int>();
        else if (key == "resize_max") c.transform.resize_max = v.get<int>();
        else if (key == "eval_short_side") c.transform.eval_short_side = v.get<int>();
        else if (key == "flip_probability") c.transform.flip_probability = v.get<double>();
        else throw std::invalid_argument("sampling config: unknown key \"" + key + "\"");
    }
    return c;
}

void Optimizer::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

namespace {

void check_state_tensor(const std::map<std::string, Tensor>& state, const std::string& key, const nn::Shape& shape) {
    auto it = state.find(key);
    if (it == state.end()) throw std::invalid_argument("optimizer state: missing " + key);
    if (it->second.shape() != shape)
        throw std::invalid_argument("optimizer state: " + key + " has shape " + nn::shape_str(it->second.shape()) +
                                    ", expected " + nn::shape_str(shape));
}

}  // namespace

AdamW::AdamW(std::vector<nn::NamedParameter> params, double weight_decay, double beta1, double beta2, double eps)
    : Optimizer(std::move(params)), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.var.shape());
        v_.emplace_back(p.var.shape());
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& var = params_[i].var;
        if (!var.has_grad()) continue;
        auto w = var.mutable_value().values();
        const auto g = var.grad().values();
        auto m = m_[i].values();
        auto v = v_[i].values();
        for (std::size_t k = 0; k < w.size(); ++k) {
            w[k] -= lr * wd_ * w[k];
            m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
            v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
            w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        }
    }
}

std::map<std::string, Tensor> AdamW::state() const {
    std::map<std::string, Tensor> out;
    out["step"] = Tensor({1}, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out["exp_avg." + params_[i].name] = m_[i];
        out["exp_avg_sq." + params_[i].name] = v_[i];
    }
    return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state) {
    check_state_tensor(state, "step", {1});
    for (const auto& p : params_) {
        check_state_tensor(state, "exp_avg." + p.name, p.var.shape());
        check_state_tensor(state, "exp_avg_sq." + p.name, p.var.shape());
    }
    t_ = static_cast<std::int64_t>(std::llround(state.at("step")[0]));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i] = state.at("exp_avg." + params_[i].name);
        v_[i] = state.at("exp_avg_sq." + params_[i].name);
    }
}

Sgd::Sgd(std::vector<nn::NamedParameter> params, double weight_decay, double momentum)
    : Optimizer(std::move(params)), wd_(weight_decay), momentum_(momentum) {
    if (momentum_ > 0.0)
        for (const auto& p : params_) buf_.emplace_back(p.var.shape());
}

void Sgd::step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& var = params_[i].var;
        if (!var.has_grad()) continue;
        auto w = var.mutable_value().values();
        const auto g = var.grad().values();
        for (std::size_t k = 0; k < w.size(); ++k) {
            double d = g[k] + wd_ * w[k];
            if (momentum_ > 0.0) {
                auto& b = buf_[i][static_cast<std::int64_t>(k)];
                b = momentum_ * b + d;
                d = b;
            }
            w[k] -= lr * d;
        }
    }
}

std::map<std::string, Tensor> Sgd::state() const {
    std::map<std::string, Tensor> out;
    for (std::size_t i = 0; i < buf_.size(); ++i) out["momentum_buffer." + params_[i].name] = buf_[i];
    return out;
}

void Sgd::load_state(const std::map<std::string, Tensor>& state) {
    for (std::size_t i = 0; i < buf_.size(); ++i) {
        const auto key = "momentum_buffer." + params_[i].name;
        check_state_tensor(state, key, params_[i].var.shape());
        buf_[i] = state.at(key);
    }
}

std::vector<nn::NamedParameter> trainable_parameters(const nn::Module& model) {
    std::vector<nn::NamedParameter> out;
    for (auto& p : model.named_parameters())
        if (p.var.requires_grad()) out.push_back(p);
    return out;
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg, const nn::Module& model) {
    auto params = trainable_parameters(model);
    if (cfg.optimizer == OptimizerKind::adamw)
        return std::make_unique<AdamW>(std::move(params), cfg.resolved_weight_decay(), cfg.adam_beta1, cfg.adam_beta2,
                                       cfg.adam_eps);
    return std::make_unique<Sgd>(std::move(params), cfg.resolved_weight_decay(), cfg.momentum);
}

json train_state_to_json(const TrainState& s) {
    return {{"epoch", s.epoch},
            {"global_step", s.global_step},
            {"best_val_macro_f1", s.best_val_macro_f1},
            {"best_epoch", s.best_epoch},
            {"seed", s.seed}};
}

TrainState train_state_from_json(const json& doc) {
    TrainState s;
    s.epoch = doc.at("epoch").get<int>();
    s.global_step = doc.at("global_step").get<std::int64_t>();
    s.best_val_macro_f1 = doc.at("best_val_macro_f1").get<double>();
    s.best_epoch = doc.at("best_epoch").get<int>();
    s.seed = doc.at("seed").get<std::uint64_t>();
    return s;
}

json epoch_metrics_to_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch},         {"global_step", m.global_step}, {"steps", m.steps},
            {"train_loss", m.train_loss}, {"lr", m.lr},                   {"seconds", m.seconds},
            {"val", report_to_json(m.val)}};
}

void save_checkpoint(const std::filesystem::path& path, Classifier& model, const Optimizer* optimizer,
                     const TrainConfig& cfg, const TrainState& state, const SamplingConfig& sampling) {
    TensorFile file;
    for (auto& [name, t] : model_state(model)) file.tensors["model." + name] = std::move(t);
    if (optimizer)
        for (auto& [name, t] : optimizer->state()) file.tensors["optim." + name] = std::move(t);
    file.metadata["format"] = "seqcls-checkpoint-1";
    file.metadata["spec"] = spec_to_json(model.spec()).dump();
    file.metadata["unfrozen_backbone_blocks"] = std::to_string(model.freeze_policy().unfrozen_backbone_blocks);
    file.metadata["train_config"] = train_config_to_json(cfg).dump();
    file.metadata["train_state"] = train_state_to_json(state).dump();
    file.metadata["sampling"] = sampling_to_json(sampling).dump();
    write_tensor_file_atomic(file, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
    auto file = read_tensor_file(path);
    auto meta = [&](const std::string& key) -> const std::string& {
        auto it = file.metadata.find(key);
        if (it == file.metadata.end())
            throw std::runtime_error(path.string() + " is not a training checkpoint (missing " + key + ")");
        return it->second;
    };
    Checkpoint c;
    c.spec = spec_from_json(json::parse(meta("spec")));
    c.policy.unfrozen_backbone_blocks = std::stoi(meta("unfrozen_backbone_blocks"));
    c.config = train_config_from_json(json::parse(meta("train_config")));
    c.state = train_state_from_json(json::parse(meta("train_state")));
    c.sampling = sampling_from_json(json::parse(meta("sampling")));
    for (auto& [name, t] : file.tensors) {
        if (name.rfind("model.", 0) == 0)
            c.model[name.substr(6)] = std::move(t);
        else if (name.rfind("optim.", 0) == 0)
            c.optimizer[name.substr(6)] = std::move(t);
    }
    return c;
}

std::unique_ptr<Classifier> model_from_checkpoint(const Checkpoint& ckpt) {
    ModelSpec spec = ckpt.spec;
    spec.pretrained.clear();
    auto model = build_model(spec, ckpt.policy, 0);
    load_model_state(*model, ckpt.model);
    return model;
}

TrainResult train(Classifier& model, const ClipDataset& train_data, const ClipDataset& val_data,
                  const TrainConfig& cfg, const TrainRunOptions& options) {
    validate_config(cfg);
    if (train_data.size() == 0) throw std::invalid_argument("train split is empty");
    if (val_data.size() == 0) throw std::invalid_argument("val split is empty");
    const auto& spec = model.spec();
    const CollateMode mode = is_sequence_family(spec.family) ? CollateMode::sequence : CollateMode::image;
    if (has_neck(spec.family) && options.sampling.num_frames != spec.timesteps)
        throw std::invalid_argument("sampling.num_frames " + std::to_string(options.sampling.num_frames) +
                                    " does not match model timesteps " + std::to_string(spec.timesteps));

    auto optimizer = make_optimizer(cfg, model);
    TrainState state;
    state.seed = cfg.seed;
    const auto& dir = options.out_dir;
    if (!dir.empty()) std::filesystem::create_directories(dir);
    if (options.resume && !dir.empty() && std::filesystem::exists(dir / "last.ckpt")) {
        const auto ckpt = load_checkpoint(dir / "last.ckpt");
        if (ckpt.spec.family != spec.family)
            throw std::invalid_argument("resume: checkpoint family " + std::string(to_string(ckpt.spec.family)) +
                                        " does not match " + std::string(to_string(spec.family)));
        load_model_state(model, ckpt.model);
        optimizer->load_state(ckpt.optimizer);
        state = ckpt.state;
    }

    const auto items = enumerate_items(train_data, mode);
    const auto n = items.size();
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    // A trailing batch of one is dropped: batch statistics need two values.
    int steps = static_cast<int>(n / bs + (n % bs >= 2 ? 1 : 0));
    if (steps == 0) throw std::invalid_argument("train split needs at least 2 samples");
    if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, cfg.max_steps_per_epoch);

    EvalOptions eval;
    eval.granularity = default_granularity(spec.family);
    eval.windows = cfg.eval_windows;
    eval.batch_size = cfg.eval_batch_size;
    eval.sampling = options.sampling;

    const int last_epoch = cfg.stop_after_epoch > 0 ? std::min(cfg.stop_after_epoch, cfg.epochs) : cfg.epochs;
    TrainResult result;
    for (int epoch = state.epoch; epoch < last_epoch; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Engine shuffle_rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(epoch), 0x5348u}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        model.train(true);
        EpochMetrics em;
        em.epoch = epoch + 1;
        em.steps = steps;
        double loss_sum = 0.0;
        for (int step = 0; step < steps; ++step) {
            const double lr = lr_at(cfg, epoch + static_cast<double>(step) / steps);
            std::vector<Sample> samples;
            const std::size_t first = static_cast<std::size_t>(step) * bs;
            for (std::size_t k = first; k < std::min(first + bs, n); ++k) {
                const auto idx = order[k];
                samples.push_back(make_sample(train_data, items[idx], mode, options.sampling, true,
                                              derive_seed({cfg.seed, static_cast<std::uint64_t>(epoch), idx})));
            }
            const auto batch = collate(samples, mode);
            Var scores = model.forward(Var(batch.pixels));
            auto diagnose = [&](const std::string& what) {
                std::ostringstream msg;
                msg << "non-finite " << what << " at epoch " << epoch + 1 << " step " << step + 1 << "/" << steps
                    << " (global step " << state.global_step + 1 << ", lr " << lr << "); clips:";
                for (const auto& id : batch.clip_ids) msg << ' ' << id;
                return NonFiniteLossError(msg.str());
            };
            for (auto v : scores.value().values())
                if (!std::isfinite(v)) throw diagnose("class scores");
            Var loss = focal_loss(scores, batch.labels, cfg.gamma);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) throw diagnose("loss");
            optimizer->zero_grad();
            loss.backward();
            optimizer->step(lr);
            ++state.global_step;
            loss_sum += lv;
            em.lr = lr;
        }
        em.train_loss = loss_sum / steps;
        em.val = evaluate(model, val_data, eval);
        state.epoch = epoch + 1;
        const bool improved = em.val.f1_macro > state.best_val_macro_f1;
        if (improved) {
            state.best_val_macro_f1 = em.val.f1_macro;
            state.best_epoch = epoch + 1;
        }
        em.global_step = state.global_step;
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!dir.empty()) {
            save_checkpoint(dir / "last.ckpt", model, optimizer.get(), cfg, state, options.sampling);
            if (improved) save_checkpoint(dir / "best.ckpt", model, optimizer.get(), cfg, state, options.sampling);
            std::ofstream log(dir / "metrics.jsonl", std::ios::app);
            log << epoch_metrics_to_json(em).dump() << '\n';
            if (!log) throw std::runtime_error("cannot append to " + (dir / "metrics.jsonl").string());
        }
        if (options.on_epoch) options.on_epoch(em);
        result.history.push_back(std::move(em));
    }
    result.state = state;
    return result;
}

TrainResult train(Classifier& model, const DatasetManifest& manifest, const std::filesystem::path& dataset_root,
                  const TrainConfig& cfg, const TrainRunOptions& options) {
    for (auto split : kSplits)
        if (manifest.entries(split).empty())
            throw std::invalid_argument("manifest has no " + std::string(to_string(split)) + " clips");
    ClipDataset train_data(manifest, dataset_root, Split::train);
    ClipDataset val_data(manifest, dataset_root, Split::val);
    return train(model, train_data, val_data, cfg, options);
}

}  // namespace seqcls
