#pragma once

// Classification metrics and reports.
//
// Confusion matrices are indexed [true][predicted] in label order
// (drone, bird). A class whose precision or recall has a zero denominator
// gets F1 = 0.

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqcls/clipsampling.hpp"
#include "seqcls/models.hpp"
#include "seqcls/types.hpp"

namespace seqcls {

struct ConfusionMatrix {
    std::array<std::array<long long, kNumClasses>, kNumClasses> counts{};

    long long at(Label truth, Label predicted) const {
        return counts[static_cast<std::size_t>(index_of(truth))][static_cast<std::size_t>(index_of(predicted))];
    }
    long long total() const;
    long long support(Label truth) const;
    bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(const std::vector<Label>& predictions, const std::vector<Label>& labels);

struct F1Scores {
    double drone = 0.0;
    double bird = 0.0;
    double macro = 0.0;
};

F1Scores f1_scores(const ConfusionMatrix& cm);

enum class Granularity { clip, frame };
std::string_view to_string(Granularity g);
Granularity parse_granularity(std::string_view text);
// Frame-level for the image family, clip-level for sequence families.
Granularity default_granularity(Family family);

struct EvalReport {
    std::string modality;  // family name, or any caller-chosen tag
    Split split = Split::val;
    Granularity granularity = Granularity::clip;
    double f1_drone = 0.0;
    double f1_bird = 0.0;
    double f1_macro = 0.0;
    ConfusionMatrix confusion;
    long long n_samples = 0;
    // Filled in when the report describes a built model.
    std::optional<int> unfrozen_backbone_blocks;
    std::optional<std::int64_t> total_params;
    std::optional<std::int64_t> trainable_params;
};

EvalReport make_report(const std::vector<Label>& predictions, const std::vector<Label>& labels, Granularity g);

// Class scores [B, O] for a batch.
using ScoreFn = std::function<nn::Tensor(const SampledClipBatch&)>;

struct EvalOptions {
    Granularity granularity = Granularity::clip;
    int windows = 1;  // sequence mode: > 1 averages class probabilities over spread windows
    int batch_size = 8;
    SamplingConfig sampling;
};

// Deterministic: eval transforms only. Image mode scores every frame; clip
// granularity then averages the frame probabilities of each clip. Sequence
// mode scores each clip once (or once per window); frame granularity then
// counts the clip prediction once per stored frame.
EvalReport evaluate(const ScoreFn& score, const ClipDataset& data, CollateMode mode, const EvalOptions& options);
// Runs the model in eval mode without recording gradients.
EvalReport evaluate(Classifier& model, const ClipDataset& data, const EvalOptions& options);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& doc);

// Columns: Architecture, Modality, Unfrozen Backbone Block, # of Total
// Parameters, # of Trainable Parameters, F1_drone, F1_bird, F1_macro.
// Missing values print as "-".
std::string render_table(const std::vector<EvalReport>& rows);
// 11.2M / 181K / 1K style.
std::string abbreviate_count(std::int64_t n);
std::string architecture_name(std::string_view modality);
std::string modality_kind(std::string_view modality);

// Writes metrics.json, confusion.png and table.txt; returns the directory.
std::filesystem::path render_report(const EvalReport& report, const std::filesystem::path& out_dir);
void write_confusion_plot(const EvalReport& report, const std::filesystem::path& path);

}  // namespace seqcls
