#pragma once

// Classifier families.
//
// Input layout: sequence families take [B, C, T, H, W], the image family takes
// [B, C, H, W]. All return class scores [B, O].
//
// Parameter names follow torchvision under a "backbone." prefix, so a
// converted torchvision state dict (resnet18 / r2plus1d_18) maps directly.
// The neck lives under "neck." and the linear head under "head.".

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqcls/nn/layers.hpp"

namespace seqcls {

enum class Family { image_resnet18, r2plus1d, resnet18_lstm, resnet18_mlp, resnet18_transformer };
inline constexpr std::array<Family, 5> kFamilies{Family::image_resnet18, Family::r2plus1d, Family::resnet18_lstm,
                                                 Family::resnet18_mlp, Family::resnet18_transformer};

std::string_view to_string(Family family);
// Throws std::invalid_argument listing the valid names.
Family parse_family(std::string_view name);
bool is_sequence_family(Family family);
// Type 2: shared 2D backbone per timestep plus a temporal neck.
bool has_neck(Family family);

enum class NeckKind { none, lstm, mlp, transformer };

struct NeckSpec {
    NeckKind kind = NeckKind::none;
    int hidden_size = 64;       // lstm / mlp
    int num_layers = 2;         // lstm: stacked layers; transformer: encoder layers; mlp: linear layers incl. head
    int attention_heads = 8;    // transformer
    int feedforward_dim = 3580;  // transformer
    bool positional_embedding = true;  // transformer
};

struct ModelSpec {
    Family family = Family::image_resnet18;
    NeckSpec neck;
    int width = 64;  // backbone base width; 64 is the standard network
    int timesteps = 8;
    int num_classes = 2;
    std::string pretrained;  // optional tensor file with backbone weights

    // Backbone output width: 8 * width for both backbones.
    int feature_dim() const { return 8 * width; }
};

ModelSpec default_spec(Family family);

struct FreezePolicy {
    // Residual stages left trainable, counted from the output end. The stem
    // counts as the first stage, so 5 unfreezes the whole backbone.
    int unfrozen_backbone_blocks = 0;

    static FreezePolicy transfer() { return {0}; }
    static FreezePolicy all() { return {5}; }
};

// Fine-tuning depth used for each family in the reference experiments.
FreezePolicy fine_tune_policy(Family family);

struct ParamComponent {
    std::string name;
    std::int64_t total = 0;
    std::int64_t trainable = 0;
};

struct ParamReport {
    std::int64_t total_params = 0;
    std::int64_t trainable_params = 0;
    std::vector<ParamComponent> breakdown;
};

nlohmann::json param_report_to_json(const ParamReport& report);

// Unit of freezing: the stem or one residual stage.
struct BackboneBlock {
    std::string name;
    std::vector<nn::Module*> modules;
};

// [N, 3, D, H, W] -> [N, F]. D = 1 for 2D backbones.
class Backbone : public nn::Module {
public:
    virtual nn::Var forward(const nn::Var& x) = 0;
    // Input end first: stem, layer1, ..., layer4.
    virtual std::vector<BackboneBlock> blocks() = 0;
    virtual int feature_dim() const = 0;
};

// [B, T, F] -> [B, F'].
class Neck : public nn::Module {
public:
    virtual nn::Var forward(const nn::Var& x) = 0;
    virtual int output_dim() const = 0;
};

std::unique_ptr<Backbone> make_resnet18(int width, nn::InitEngine& rng);
std::unique_ptr<Backbone> make_r2plus1d18(int width, nn::InitEngine& rng);
std::unique_ptr<Neck> make_neck(const NeckSpec& spec, int timesteps, int features, nn::InitEngine& rng);

class Classifier : public nn::Module {
public:
    Classifier(const ModelSpec& spec, std::uint64_t seed);

    nn::Var forward(const nn::Var& x);
    const ModelSpec& spec() const { return spec_; }
    Backbone& backbone() { return *backbone_; }
    Neck* neck() { return neck_; }
    nn::Linear& head() { return *head_; }
    const Backbone& backbone() const { return *backbone_; }
    const Neck* neck() const { return neck_; }
    const nn::Linear& head() const { return *head_; }

    void apply_freeze_policy(const FreezePolicy& policy);
    const FreezePolicy& freeze_policy() const { return policy_; }

private:
    ModelSpec spec_;
    FreezePolicy policy_;
    Backbone* backbone_ = nullptr;
    Neck* neck_ = nullptr;
    nn::Linear* head_ = nullptr;
};

void validate_spec(const ModelSpec& spec);
void validate_input(const ModelSpec& spec, const nn::Shape& shape);

// Loads spec.pretrained when set.
std::unique_ptr<Classifier> build_model(const ModelSpec& spec, const FreezePolicy& policy, std::uint64_t seed = 0);

ParamReport count_params(const Classifier& model);

// Copies matching backbone tensors from a tensor file. Keys may carry the
// "backbone." prefix or be raw torchvision names; torchvision classifier keys
// ("fc.*") are skipped. 4-D conv kernels are accepted for 2D convolutions.
// Throws std::invalid_argument on a shape mismatch. Returns the number of
// tensors loaded.
int load_pretrained_backbone(Classifier& model, const std::filesystem::path& path);

// Parameters and normalization buffers, keyed by dotted name.
std::map<std::string, nn::Tensor> model_state(Classifier& model);
// Every model key must be present with the same shape.
void load_model_state(Classifier& model, const std::map<std::string, nn::Tensor>& state);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& doc);

}  // namespace seqcls
