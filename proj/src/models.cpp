#include "seqcls/models.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "seqcls/checkpoint.hpp"

namespace seqcls {

using nn::BatchNorm;
using nn::Conv3d;
using nn::InitEngine;
using nn::Linear;
using nn::Module;
using nn::Shape;
using nn::Tensor;
using nn::Var;

std::string_view to_string(Family family) {
    switch (family) {
        case Family::image_resnet18: return "image_resnet18";
        case Family::r2plus1d: return "r2plus1d";
        case Family::resnet18_lstm: return "resnet18_lstm";
        case Family::resnet18_mlp: return "resnet18_mlp";
        case Family::resnet18_transformer: return "resnet18_transformer";
    }
    return "?";
}

Family parse_family(std::string_view name) {
    for (auto f : kFamilies)
        if (to_string(f) == name) return f;
    std::string valid;
    for (auto f : kFamilies) valid += (valid.empty() ? "" : ", ") + std::string(to_string(f));
    throw std::invalid_argument("unknown family \"" + std::string(name) + "\" (valid: " + valid + ")");
}

bool is_sequence_family(Family family) { return family != Family::image_resnet18; }

bool has_neck(Family family) {
    return family == Family::resnet18_lstm || family == Family::resnet18_mlp || family == Family::resnet18_transformer;
}

ModelSpec default_spec(Family family) {
    ModelSpec s;
    s.family = family;
    switch (family) {
        case Family::resnet18_lstm: s.neck.kind = NeckKind::lstm; break;
        case Family::resnet18_mlp: s.neck.kind = NeckKind::mlp; break;
        case Family::resnet18_transformer: s.neck.kind = NeckKind::transformer; break;
        default: s.neck.kind = NeckKind::none;
    }
    return s;
}

FreezePolicy fine_tune_policy(Family family) { return {family == Family::r2plus1d ? 1 : 2}; }

namespace {

// ---------------------------------------------------------------- ResNet18

class Downsample : public Module {
public:
    Downsample(std::int64_t in, std::int64_t out, std::array<int, 3> stride, InitEngine& rng) {
        conv_ = &register_module("0", std::make_unique<Conv3d>(in, out, std::array{1, 1, 1}, stride,
                                                               std::array{0, 0, 0}, rng));
        bn_ = &register_module("1", std::make_unique<BatchNorm>(out));
    }
    Var forward(const Var& x) { return bn_->forward(conv_->forward(x)); }

private:
    Conv3d* conv_;
    BatchNorm* bn_;
};

class BasicBlock2d : public Module {
public:
    BasicBlock2d(std::int64_t in, std::int64_t out, int stride, InitEngine& rng) {
        conv1_ = &register_module("conv1", std::make_unique<Conv3d>(in, out, std::array{1, 3, 3},
                                                                    std::array{1, stride, stride},
                                                                    std::array{0, 1, 1}, rng));
        bn1_ = &register_module("bn1", std::make_unique<BatchNorm>(out));
        conv2_ = &register_module("conv2", std::make_unique<Conv3d>(out, out, std::array{1, 3, 3},
                                                                    std::array{1, 1, 1}, std::array{0, 1, 1}, rng));
        bn2_ = &register_module("bn2", std::make_unique<BatchNorm>(out));
        if (stride != 1 || in != out)
            down_ = &register_module("downsample",
                                     std::make_unique<Downsample>(in, out, std::array{1, stride, stride}, rng));
    }

    Var forward(const Var& x) {
        Var out = nn::relu(bn1_->forward(conv1_->forward(x)));
        out = bn2_->forward(conv2_->forward(out));
        return nn::relu(nn::add(out, down_ ? down_->forward(x) : x));
    }

private:
    Conv3d* conv1_;
    BatchNorm* bn1_;
    Conv3d* conv2_;
    BatchNorm* bn2_;
    Downsample* down_ = nullptr;
};

template <class Block>
class Stage : public Module {
public:
    template <class... Args>
    void add(Args&&... args) {
        blocks_.push_back(&register_module(std::to_string(blocks_.size()),
                                           std::make_unique<Block>(std::forward<Args>(args)...)));
    }
    Var forward(Var x) {
        for (auto* b : blocks_) x = b->forward(x);
        return x;
    }

private:
    std::vector<Block*> blocks_;
};

class ResNet18 final : public Backbone {
public:
    ResNet18(int width, InitEngine& rng) : width_(width) {
        conv1_ = &register_module("conv1", std::make_unique<Conv3d>(3, width, std::array{1, 7, 7}, std::array{1, 2, 2},
                                                                    std::array{0, 3, 3}, rng));
        bn1_ = &register_module("bn1", std::make_unique<BatchNorm>(width));
        std::int64_t in = width;
        for (int s = 0; s < 4; ++s) {
            const std::int64_t out = static_cast<std::int64_t>(width) << s;
            auto& stage = register_module("layer" + std::to_string(s + 1), std::make_unique<Stage<BasicBlock2d>>());
            stage.add(in, out, s == 0 ? 1 : 2, rng);
            stage.add(out, out, 1, rng);
            stages_[static_cast<std::size_t>(s)] = &stage;
            in = out;
        }
    }

    Var forward(const Var& x) override {
        Var h = nn::relu(bn1_->forward(conv1_->forward(x)));
        h = nn::max_pool3d(h, {{1, 3, 3}, {1, 2, 2}, {0, 1, 1}});
        for (auto* s : stages_) h = s->forward(h);
        return nn::global_avg_pool(h);
    }

    std::vector<BackboneBlock> blocks() override {
        std::vector<BackboneBlock> out{{"stem", {conv1_, bn1_}}};
        for (int s = 0; s < 4; ++s) out.push_back({"layer" + std::to_string(s + 1), {stages_[static_cast<std::size_t>(s)]}});
        return out;
    }

    int feature_dim() const override { return 8 * width_; }

private:
    int width_;
    Conv3d* conv1_;
    BatchNorm* bn1_;
    std::array<Stage<BasicBlock2d>*, 4> stages_{};
};

// -------------------------------------------------------------- R(2+1)D-18

// Spatial (1 x 3 x 3) conv, BN, ReLU, temporal (3 x 1 x 1) conv.
class Conv2Plus1D : public Module {
public:
    Conv2Plus1D(std::int64_t in, std::int64_t out, std::int64_t mid, int stride, InitEngine& rng) {
        spatial_ = &register_module("0", std::make_unique<Conv3d>(in, mid, std::array{1, 3, 3},
                                                                  std::array{1, stride, stride}, std::array{0, 1, 1},
                                                                  rng));
        bn_ = &register_module("1", std::make_unique<BatchNorm>(mid));
        temporal_ = &register_module("3", std::make_unique<Conv3d>(mid, out, std::array{3, 1, 1},
                                                                   std::array{stride, 1, 1}, std::array{1, 0, 0},
                                                                   rng));
    }
    Var forward(const Var& x) { return temporal_->forward(nn::relu(bn_->forward(spatial_->forward(x)))); }

private:
    Conv3d* spatial_;
    BatchNorm* bn_;
    Conv3d* temporal_;
};

class FactorizedConvBn : public Module {
public:
    FactorizedConvBn(std::int64_t in, std::int64_t out, std::int64_t mid, int stride, InitEngine& rng) {
        conv_ = &register_module("0", std::make_unique<Conv2Plus1D>(in, out, mid, stride, rng));
        bn_ = &register_module("1", std::make_unique<BatchNorm>(out));
    }
    Var forward(const Var& x) { return bn_->forward(conv_->forward(x)); }

private:
    Conv2Plus1D* conv_;
    BatchNorm* bn_;
};

class BasicBlock2Plus1D : public Module {
public:
    BasicBlock2Plus1D(std::int64_t in, std::int64_t out, int stride, InitEngine& rng) {
        // Intermediate width matching the parameter count of a full 3x3x3 conv.
        const std::int64_t mid = (in * out * 27) / (in * 9 + 3 * out);
        conv1_ = &register_module("conv1", std::make_unique<FactorizedConvBn>(in, out, mid, stride, rng));
        conv2_ = &register_module("conv2", std::make_unique<FactorizedConvBn>(out, out, mid, 1, rng));
        if (stride != 1 || in != out)
            down_ = &register_module("downsample",
                                     std::make_unique<Downsample>(in, out, std::array{stride, stride, stride}, rng));
    }
    Var forward(const Var& x) {
        Var out = conv2_->forward(nn::relu(conv1_->forward(x)));
        return nn::relu(nn::add(out, down_ ? down_->forward(x) : x));
    }

private:
    FactorizedConvBn* conv1_;
    FactorizedConvBn* conv2_;
    Downsample* down_ = nullptr;
};

class R2Plus1DStem : public Module {
public:
    R2Plus1DStem(int width, InitEngine& rng) {
        const std::int64_t mid = std::max<std::int64_t>(1, std::lround(45.0 * width / 64.0));
        spatial_ = &register_module("0", std::make_unique<Conv3d>(3, mid, std::array{1, 7, 7}, std::array{1, 2, 2},
                                                                  std::array{0, 3, 3}, rng));
        bn1_ = &register_module("1", std::make_unique<BatchNorm>(mid));
        temporal_ = &register_module("3", std::make_unique<Conv3d>(mid, width, std::array{3, 1, 1},
                                                                   std::array{1, 1, 1}, std::array{1, 0, 0}, rng));
        bn2_ = &register_module("4", std::make_unique<BatchNorm>(width));
    }
    Var forward(const Var& x) {
        Var h = nn::relu(bn1_->forward(spatial_->forward(x)));
        return nn::relu(bn2_->forward(temporal_->forward(h)));
    }

private:
    Conv3d* spatial_;
    BatchNorm* bn1_;
    Conv3d* temporal_;
    BatchNorm* bn2_;
};

class R2Plus1D18 final : public Backbone {
public:
    R2Plus1D18(int width, InitEngine& rng) : width_(width) {
        stem_ = &register_module("stem", std::make_unique<R2Plus1DStem>(width, rng));
        std::int64_t in = width;
        for (int s = 0; s < 4; ++s) {
            const std::int64_t out = static_cast<std::int64_t>(width) << s;
            auto& stage =
                register_module("layer" + std::to_string(s + 1), std::make_unique<Stage<BasicBlock2Plus1D>>());
            stage.add(in, out, s == 0 ? 1 : 2, rng);
            stage.add(out, out, 1, rng);
            stages_[static_cast<std::size_t>(s)] = &stage;
            in = out;
        }
    }

    Var forward(const Var& x) override {
        Var h = stem_->forward(x);
        for (auto* s : stages_) h = s->forward(h);
        return nn::global_avg_pool(h);
    }

    std::vector<BackboneBlock> blocks() override {
        std::vector<BackboneBlock> out{{"stem", {stem_}}};
        for (int s = 0; s < 4; ++s) out.push_back({"layer" + std::to_string(s + 1), {stages_[static_cast<std::size_t>(s)]}});
        return out;
    }

    int feature_dim() const override { return 8 * width_; }

private:
    int width_;
    R2Plus1DStem* stem_;
    std::array<Stage<BasicBlock2Plus1D>*, 4> stages_{};
};

// ------------------------------------------------------------------- necks

void check_neck_input(const Var& x, std::int64_t t, std::int64_t f, const char* what) {
    if (x.shape().size() != 3 || x.shape()[1] != t || x.shape()[2] != f)
        throw std::invalid_argument(std::string(what) + " neck expects [B, " + std::to_string(t) + ", " +
                                    std::to_string(f) + "], got " + nn::shape_str(x.shape()));
}

class LstmNeck final : public Neck {
public:
    LstmNeck(const NeckSpec& spec, int timesteps, int features, InitEngine& rng) : t_(timesteps), f_(features) {
        lstm_ = &register_module("lstm", std::make_unique<nn::Lstm>(features, spec.hidden_size, spec.num_layers, rng));
    }
    Var forward(const Var& x) override {
        check_neck_input(x, t_, f_, "lstm");
        return lstm_->forward(x);
    }
    int output_dim() const override { return static_cast<int>(lstm_->hidden_size()); }

private:
    int t_, f_;
    nn::Lstm* lstm_;
};

class MlpNeck final : public Neck {
public:
    MlpNeck(const NeckSpec& spec, int timesteps, int features, InitEngine& rng)
        : t_(timesteps), f_(features), out_(spec.hidden_size) {
        std::int64_t in = static_cast<std::int64_t>(timesteps) * features;
        for (int i = 0; i + 1 < spec.num_layers; ++i) {
            layers_.push_back(&register_module("layers." + std::to_string(i),
                                               std::make_unique<Linear>(in, spec.hidden_size, rng)));
            in = spec.hidden_size;
        }
    }
    Var forward(const Var& x) override {
        check_neck_input(x, t_, f_, "mlp");
        Var h = nn::reshape(x, {x.shape()[0], static_cast<std::int64_t>(t_) * f_});
        for (auto* l : layers_) h = nn::relu(l->forward(h));
        return h;
    }
    int output_dim() const override { return out_; }

private:
    int t_, f_, out_;
    std::vector<Linear*> layers_;
};

class TransformerNeck final : public Neck {
public:
    TransformerNeck(const NeckSpec& spec, int timesteps, int features, InitEngine& rng)
        : t_(timesteps), f_(features) {
        if (spec.positional_embedding)
            pos_ = register_parameter("pos_embedding", nn::normal_tensor({timesteps, features}, 0.02, rng));
        for (int i = 0; i < spec.num_layers; ++i)
            layers_.push_back(&register_module(
                "layers." + std::to_string(i),
                std::make_unique<nn::TransformerEncoderLayer>(features, spec.attention_heads, spec.feedforward_dim, rng)));
    }
    Var forward(const Var& x) override {
        check_neck_input(x, t_, f_, "transformer");
        Var h = pos_.defined() ? nn::add_broadcast(x, pos_) : x;
        for (auto* l : layers_) h = l->forward(h);
        return nn::mean_dim(h, 1);
    }
    int output_dim() const override { return f_; }

private:
    int t_, f_;
    Var pos_;
    std::vector<nn::TransformerEncoderLayer*> layers_;
};

}  // namespace

std::unique_ptr<Backbone> make_resnet18(int width, InitEngine& rng) { return std::make_unique<ResNet18>(width, rng); }

std::unique_ptr<Backbone> make_r2plus1d18(int width, InitEngine& rng) {
    return std::make_unique<R2Plus1D18>(width, rng);
}

std::unique_ptr<Neck> make_neck(const NeckSpec& spec, int timesteps, int features, InitEngine& rng) {
    switch (spec.kind) {
        case NeckKind::lstm: return std::make_unique<LstmNeck>(spec, timesteps, features, rng);
        case NeckKind::mlp: return std::make_unique<MlpNeck>(spec, timesteps, features, rng);
        case NeckKind::transformer: return std::make_unique<TransformerNeck>(spec, timesteps, features, rng);
        case NeckKind::none: break;
    }
    throw std::invalid_argument("make_neck: no neck kind");
}

void validate_spec(const ModelSpec& spec) {
    if (spec.width < 1) throw std::invalid_argument("model width must be >= 1");
    if (spec.timesteps < 1) throw std::invalid_argument("timesteps must be >= 1");
    if (spec.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    const NeckKind want = default_spec(spec.family).neck.kind;
    if (spec.neck.kind != want)
        throw std::invalid_argument("family " + std::string(to_string(spec.family)) + " requires a different neck kind");
    if (!has_neck(spec.family)) return;
    const auto& n = spec.neck;
    if (n.kind != NeckKind::transformer && n.hidden_size < 1) throw std::invalid_argument("neck hidden_size must be >= 1");
    if (n.kind == NeckKind::mlp && n.num_layers < 2)
        throw std::invalid_argument("mlp neck num_layers counts the head and must be >= 2");
    if (n.kind != NeckKind::mlp && n.num_layers < 1) throw std::invalid_argument("neck num_layers must be >= 1");
    if (n.kind == NeckKind::transformer) {
        if (n.attention_heads < 1 || spec.feature_dim() % n.attention_heads)
            throw std::invalid_argument("attention_heads must divide the feature width " +
                                        std::to_string(spec.feature_dim()));
        if (n.feedforward_dim < 1) throw std::invalid_argument("feedforward_dim must be >= 1");
    }
}

void validate_input(const ModelSpec& spec, const Shape& s) {
    const bool seq = is_sequence_family(spec.family);
    const std::size_t rank = seq ? 5 : 4;
    bool ok = s.size() == rank && s[1] == 3;
    if (ok && has_neck(spec.family)) ok = s[2] == spec.timesteps;
    if (!ok)
        throw std::invalid_argument(std::string(to_string(spec.family)) + " expects " +
                                    (seq ? "[B, 3, " + (has_neck(spec.family) ? std::to_string(spec.timesteps) : "T") +
                                               ", H, W]"
                                         : std::string("[B, 3, H, W]")) +
                                    ", got " + nn::shape_str(s));
}

Classifier::Classifier(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
    validate_spec(spec);
    InitEngine rng(seed);
    backbone_ = spec.family == Family::r2plus1d ? &register_module("backbone", make_r2plus1d18(spec.width, rng))
                                                : &register_module("backbone", make_resnet18(spec.width, rng));
    int features = backbone_->feature_dim();
    if (has_neck(spec.family)) {
        neck_ = &register_module("neck", make_neck(spec.neck, spec.timesteps, features, rng));
        features = neck_->output_dim();
    }
    head_ = &register_module("head", std::make_unique<Linear>(features, spec.num_classes, rng));
}

Var Classifier::forward(const Var& x) {
    validate_input(spec_, x.shape());
    const auto& s = x.shape();
    const std::int64_t b = s[0];
    if (spec_.family == Family::image_resnet18)
        return head_->forward(backbone_->forward(nn::reshape(x, {b, 3, 1, s[2], s[3]})));
    if (spec_.family == Family::r2plus1d) return head_->forward(backbone_->forward(x));
    const std::int64_t t = s[2];
    Var frames = nn::reshape(nn::permute(x, {0, 2, 1, 3, 4}), {b * t, 3, 1, s[3], s[4]});
    Var feats = nn::reshape(backbone_->forward(frames), {b, t, backbone_->feature_dim()});
    return head_->forward(neck_->forward(feats));
}

void Classifier::apply_freeze_policy(const FreezePolicy& policy) {
    auto blocks = backbone_->blocks();
    const int n = static_cast<int>(blocks.size());
    if (policy.unfrozen_backbone_blocks < 0 || policy.unfrozen_backbone_blocks > n)
        throw std::invalid_argument("unfrozen_backbone_blocks must be in [0, " + std::to_string(n) + "]");
    backbone_->set_frozen(true);
    for (int i = n - policy.unfrozen_backbone_blocks; i < n; ++i)
        for (auto* m : blocks[static_cast<std::size_t>(i)].modules) m->set_frozen(false);
    if (neck_) neck_->set_frozen(false);
    head_->set_frozen(false);
    policy_ = policy;
}

std::unique_ptr<Classifier> build_model(const ModelSpec& spec, const FreezePolicy& policy, std::uint64_t seed) {
    auto model = std::make_unique<Classifier>(spec, seed);
    if (!spec.pretrained.empty()) load_pretrained_backbone(*model, spec.pretrained);
    model->apply_freeze_policy(policy);
    return model;
}

ParamReport count_params(const Classifier& model) {
    ParamReport r;
    auto add = [&](const std::string& name, const Module* m) {
        if (!m) return;
        r.breakdown.push_back({name, m->parameter_count(), m->trainable_parameter_count()});
    };
    add("backbone", &model.backbone());
    add("neck", model.neck());
    add("head", &model.head());
    r.total_params = model.parameter_count();
    r.trainable_params = model.trainable_parameter_count();
    return r;
}

nlohmann::json param_report_to_json(const ParamReport& report) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& c : report.breakdown) parts.push_back({{"name", c.name}, {"total", c.total}, {"trainable", c.trainable}});
    return {{"total_params", report.total_params}, {"trainable_params", report.trainable_params}, {"breakdown", parts}};
}

std::map<std::string, Tensor> model_state(Classifier& model) {
    std::map<std::string, Tensor> out;
    for (const auto& p : model.named_parameters()) out.emplace(p.name, p.var.value());
    for (const auto& b : model.named_buffers()) out.emplace(b.name, *b.tensor);
    return out;
}

void load_model_state(Classifier& model, const std::map<std::string, Tensor>& state) {
    auto assign = [&](const std::string& name, Tensor& dst) {
        auto it = state.find(name);
        if (it == state.end()) throw std::invalid_argument("checkpoint is missing " + name);
        if (it->second.shape() != dst.shape())
            throw std::invalid_argument("checkpoint tensor " + name + " has shape " + nn::shape_str(it->second.shape()) +
                                        ", model expects " + nn::shape_str(dst.shape()));
        dst = it->second;
    };
    for (auto& p : model.named_parameters()) assign(p.name, p.var.mutable_value());
    for (auto& b : model.named_buffers()) assign(b.name, *b.tensor);
}

int load_pretrained_backbone(Classifier& model, const std::filesystem::path& path) {
    const TensorFile file = read_tensor_file(path);
    std::map<std::string, Tensor*> targets;
    for (auto& p : model.backbone().named_parameters()) targets.emplace(p.name, &p.var.mutable_value());
    for (auto& b : model.backbone().named_buffers()) targets.emplace(b.name, b.tensor);
    std::set<std::string> loaded;
    for (const auto& [raw_key, tensor] : file.tensors) {
        std::string key = raw_key;
        if (key.rfind("backbone.", 0) == 0) key = key.substr(9);
        if (key.rfind("fc.", 0) == 0 || key.rfind("head.", 0) == 0 || key.rfind("neck.", 0) == 0) continue;
        if (key.size() >= 20 && key.compare(key.size() - 20, 20, ".num_batches_tracked") == 0) continue;
        auto it = targets.find(key);
        if (it == targets.end()) throw std::invalid_argument(path.string() + ": unexpected backbone key " + raw_key);
        const Shape& want = it->second->shape();
        Shape got = tensor.shape();
        // torchvision Conv2d kernels [O, I, KH, KW] -> [O, I, 1, KH, KW]
        if (got.size() == 4 && want.size() == 5 && want[2] == 1) got.insert(got.begin() + 2, 1);
        if (got != want)
            throw std::invalid_argument(path.string() + ": shape mismatch for " + raw_key + ": file " +
                                        nn::shape_str(tensor.shape()) + ", model " + nn::shape_str(want));
        *it->second = tensor.reshaped(want);
        loaded.insert(key);
    }
    for (const auto& p : model.backbone().named_parameters())
        if (!loaded.count(p.name)) throw std::invalid_argument(path.string() + ": missing backbone parameter " + p.name);
    return static_cast<int>(loaded.size());
}

namespace {
std::string_view neck_name(NeckKind k) {
    switch (k) {
        case NeckKind::lstm: return "lstm";
        case NeckKind::mlp: return "mlp";
        case NeckKind::transformer: return "transformer";
        case NeckKind::none: break;
    }
    return "none";
}
}  // namespace

nlohmann::json spec_to_json(const ModelSpec& spec) {
    return {{"family", std::string(to_string(spec.family))},
            {"width", spec.width},
            {"timesteps", spec.timesteps},
            {"num_classes", spec.num_classes},
            {"pretrained", spec.pretrained},
            {"neck",
             {{"kind", std::string(neck_name(spec.neck.kind))},
              {"hidden_size", spec.neck.hidden_size},
              {"num_layers", spec.neck.num_layers},
              {"attention_heads", spec.neck.attention_heads},
              {"feedforward_dim", spec.neck.feedforward_dim},
              {"positional_embedding", spec.neck.positional_embedding}}}};
}

ModelSpec spec_from_json(const nlohmann::json& doc) {
    ModelSpec s = default_spec(parse_family(doc.at("family").get<std::string>()));
    s.width = doc.value("width", s.width);
    s.timesteps = doc.value("timesteps", s.timesteps);
    s.num_classes = doc.value("num_classes", s.num_classes);
    s.pretrained = doc.value("pretrained", s.pretrained);
    if (doc.contains("neck")) {
        const auto& n = doc.at("neck");
        s.neck.hidden_size = n.value("hidden_size", s.neck.hidden_size);
        s.neck.num_layers = n.value("num_layers", s.neck.num_layers);
        s.neck.attention_heads = n.value("attention_heads", s.neck.attention_heads);
        s.neck.feedforward_dim = n.value("feedforward_dim", s.neck.feedforward_dim);
        s.neck.positional_embedding = n.value("positional_embedding", s.neck.positional_embedding);
    }
    return s;
}

}  // namespace seqcls
