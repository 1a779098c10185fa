#pragma once

// Command-line entry point: build-dataset, synth, train, eval, params, report.

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqcls/clipsampling.hpp"
#include "seqcls/evaluation.hpp"
#include "seqcls/models.hpp"
#include "seqcls/synthgen.hpp"
#include "seqcls/training.hpp"

namespace seqcls {

// Overrides the dataset root of any config.
inline constexpr const char* kDatasetRootEnv = "SEQCLS_DATASET_ROOT";

struct RunConfig {
    std::filesystem::path dataset_root;
    std::filesystem::path runs_root = "runs";
    ModelSpec model;
    FreezePolicy freeze;
    TrainConfig train;
    SamplingConfig sampling;
    SynthConfig synth;
    // Dotted key -> "default", "file:<path>", "env:<name>" or "flag:--<name>".
    std::map<std::string, std::string> provenance;
};

// Sections: paths, model, freeze, train, sampling, synth.
nlohmann::json run_config_to_json(const RunConfig& cfg);

struct ConfigLayer {
    std::string source;
    nlohmann::json patch;  // partial run config document
};

// Later layers win. The family is taken from the last layer naming one; the
// other defaults follow it. freeze.unfrozen_backbone_blocks also accepts
// "transfer" and "finetune". Unknown keys throw std::invalid_argument.
RunConfig resolve_run_config(const std::vector<ConfigLayer>& layers);

// First 12 hex digits of a 64-bit FNV-1a hash of the compact document.
std::string config_hash(const nlohmann::json& doc);
// <root>/<YYYYmmdd-HHMMSS>-<command>-<hash>, suffixed with -N when taken.
// Writes config.json holding the command, arguments, config and provenance.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& command,
                                   const nlohmann::json& config, const nlohmann::json& echo);

struct ParamRow {
    Family family;
    FreezePolicy policy;
};
// The nine reference configurations: transfer for every family except
// R(2+1)D, which only appears fine-tuned, plus the fine-tuned Type 2 models.
std::vector<ParamRow> reference_param_rows();
EvalReport param_row_report(const ParamRow& row, int width = 64);

// Returns the process exit code; never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqcls
