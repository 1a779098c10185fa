#include "seqcls/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "seqcls/seqdataset.hpp"
#include "seqcls/trackio.hpp"

namespace seqcls {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Family kDefaultFamily = Family::resnet18_lstm;

std::string valid_families() {
    std::string s;
    for (auto f : {Family::image_resnet18, Family::r2plus1d, Family::resnet18_lstm, Family::resnet18_mlp,
                   Family::resnet18_transformer})
        s += (s.empty() ? "" : ", ") + std::string(to_string(f));
    return s;
}

RunConfig defaults_for(Family family) {
    RunConfig c;
    c.model = default_spec(family);
    c.freeze = FreezePolicy::transfer();
    c.train = default_train_config(family);
    return c;
}

void record_leaves(const json& doc, const std::string& prefix, const std::string& source,
                   std::map<std::string, std::string>& out) {
    for (const auto& [k, v] : doc.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object())
            record_leaves(v, key, source, out);
        else
            out[key] = source;
    }
}

// Checks patch keys against the resolved document and records provenance.
void check_patch(const json& doc, const json& patch, const std::string& prefix, const std::string& source,
                 std::map<std::string, std::string>& prov) {
    if (!patch.is_object())
        throw std::invalid_argument("config section '" + (prefix.empty() ? "<root>" : prefix) + "' from " + source +
                                    " must be an object");
    for (const auto& [k, v] : patch.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (!doc.contains(k)) throw std::invalid_argument("unknown config key '" + key + "' in " + source);
        if (doc.at(k).is_object()) {
            check_patch(doc.at(k), v, key, source, prov);
        } else {
            if (v.is_object() || v.is_null())
                throw std::invalid_argument("config key '" + key + "' in " + source + " must be a value");
            prov[key] = source;
        }
    }
}

Family family_of(const std::vector<ConfigLayer>& layers, std::string* source) {
    Family family = kDefaultFamily;
    *source = "default";
    for (const auto& l : layers) {
        if (!l.patch.is_object() || !l.patch.contains("model")) continue;
        const auto& m = l.patch.at("model");
        if (m.is_object() && m.contains("family")) {
            family = parse_family(m.at("family").get<std::string>());
            *source = l.source;
        }
    }
    return family;
}

std::string now_stamp() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    localtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return buf;
}

void write_json(const fs::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path, const std::string& what) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(what + " not found: " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("cannot parse " + what + " " + path.string() + ": " + e.what());
    }
}

void require_file(const fs::path& path, const std::string& what, const std::string& hint = "") {
    if (fs::exists(path)) return;
    std::string msg = what + " not found: " + path.string();
    if (!hint.empty()) msg += "\n  hint: " + hint;
    throw std::runtime_error(msg);
}

std::string print_stats(const DatasetStats& s) {
    std::ostringstream out;
    for (auto split : {Split::train, Split::val})
        for (auto label : {Label::drone, Label::bird})
            out << to_string(split) << ' ' << to_string(label) << ": " << s.at(split, label).sequences
                << " sequences, " << s.at(split, label).frames << " frames\n";
    return out.str();
}

// Options shared by the commands that resolve a RunConfig.
struct ConfigFlags {
    std::optional<std::string> config;
    std::optional<std::string> family;
    std::optional<std::string> freeze;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> dataset_root;
    std::optional<std::string> runs_root;
    std::optional<int> width;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<int> batch_size;
    std::optional<int> max_steps;
};

std::vector<ConfigLayer> flag_layers(const ConfigFlags& f) {
    std::vector<ConfigLayer> layers;
    auto add = [&](const std::string& flag, json patch) { layers.push_back({"flag:--" + flag, std::move(patch)}); };
    if (f.family) add("family", {{"model", {{"family", *f.family}}}});
    if (f.freeze) {
        json v = *f.freeze;
        if (!f.freeze->empty() && std::all_of(f.freeze->begin(), f.freeze->end(), ::isdigit)) v = std::stoi(*f.freeze);
        add("freeze", {{"freeze", {{"unfrozen_backbone_blocks", v}}}});
    }
    if (f.seed) add("seed", {{"train", {{"seed", *f.seed}}}});
    if (f.dataset_root) add("dataset-root", {{"paths", {{"dataset_root", *f.dataset_root}}}});
    if (f.runs_root) add("runs-root", {{"paths", {{"runs_root", *f.runs_root}}}});
    if (f.width) add("width", {{"model", {{"width", *f.width}}}});
    if (f.epochs) add("epochs", {{"train", {{"epochs", *f.epochs}}}});
    if (f.lr) add("lr", {{"train", {{"learning_rate", *f.lr}}}});
    if (f.batch_size) add("batch-size", {{"train", {{"batch_size", *f.batch_size}}}});
    if (f.max_steps) add("max-steps", {{"train", {{"max_steps_per_epoch", *f.max_steps}}}});
    return layers;
}

std::vector<ConfigLayer> base_layers(const ConfigFlags& f) {
    std::vector<ConfigLayer> layers;
    if (f.config) {
        const fs::path p = *f.config;
        layers.push_back({"file:" + p.string(), read_json(p, "config file")});
    }
    if (const char* env = std::getenv(kDatasetRootEnv); env && *env)
        layers.push_back({std::string("env:") + kDatasetRootEnv, {{"paths", {{"dataset_root", env}}}}});
    return layers;
}

json echo_doc(const std::string& command, const std::vector<std::string>& args, const RunConfig& cfg) {
    json doc = run_config_to_json(cfg);
    return {{"command", command},
            {"args", args},
            {"config", doc},
            {"config_hash", config_hash(doc)},
            {"provenance", cfg.provenance}};
}

void add_config_flags(CLI::App* cmd, ConfigFlags& f, bool seed, bool model_flags) {
    cmd->add_option("--config", f.config, "JSON run config (sections: paths, model, freeze, train, sampling, synth)");
    cmd->add_option("--runs-root", f.runs_root, "Directory holding run directories");
    if (seed) cmd->add_option("--seed", f.seed, "Random seed");
    if (!model_flags) return;
    cmd->add_option("--family", f.family, "Model family: " + valid_families());
    cmd->add_option("--freeze", f.freeze, "Unfrozen backbone blocks: an integer, 'transfer' (0) or 'finetune'");
    cmd->add_option("--dataset-root", f.dataset_root,
                    std::string("Dataset directory with manifest.json (also ") + kDatasetRootEnv + ")");
    cmd->add_option("--width", f.width, "Backbone base width (64 is the standard network)");
    cmd->add_option("--epochs", f.epochs, "Training epochs");
    cmd->add_option("--lr", f.lr, "Base learning rate");
    cmd->add_option("--batch-size", f.batch_size, "Training batch size");
    cmd->add_option("--max-steps", f.max_steps, "Cap on optimizer steps per epoch (0 = none)");
}

int cmd_build_dataset(const std::string& tracks, const std::string& frames, const std::string& split_file,
                      std::optional<std::string> out_dir, int gap_threshold, const ConfigFlags& flags,
                      const std::vector<std::string>& args, std::ostream& out) {
    require_file(tracks, "tracks file", "pass --tracks with a JSON-lines file holding one track per line");
    require_file(frames, "frames root", "pass --frames with a directory of <video_id>/ frame folders or videos");
    require_file(split_file, "split file",
                 "pass --split-file with a JSON document such as {\"train\": [\"video_a\"], \"val\": "
                 "[\"video_b\"]} assigning every video to a split");
    auto layers = base_layers(flags);
    const auto flayers = flag_layers(flags);
    layers.insert(layers.end(), flayers.begin(), flayers.end());
    RunConfig cfg = resolve_run_config(layers);
    auto echo = echo_doc("build-dataset", args, cfg);
    echo["inputs"] = {{"tracks", tracks}, {"frames", frames}, {"split_file", split_file}, {"gap_threshold", gap_threshold}};
    fs::path root;
    if (out_dir) {
        root = *out_dir;
        fs::create_directories(root);
        write_json(root / "config.json", echo);
    } else {
        root = make_run_dir(cfg.runs_root, "build-dataset", echo.at("inputs"), echo) / "dataset";
    }
    const auto manifest = build_dataset(load_tracks(tracks), frames, load_split_file(split_file), root, gap_threshold);
    out << "dataset: " << root.string() << '\n' << manifest.clips.size() << " clips\n" << print_stats(manifest.stats);
    return 0;
}

int cmd_synth(std::optional<std::string> out_dir, std::optional<int> train_n, std::optional<int> val_n,
              std::optional<int> frames, const ConfigFlags& flags, const std::vector<std::string>& args,
              std::ostream& out) {
    auto layers = base_layers(flags);
    std::vector<ConfigLayer> extra;
    if (flags.runs_root) extra.push_back({"flag:--runs-root", {{"paths", {{"runs_root", *flags.runs_root}}}}});
    if (flags.seed) extra.push_back({"flag:--seed", {{"synth", {{"seed", *flags.seed}}}}});
    if (train_n) extra.push_back({"flag:--train-per-class", {{"synth", {{"train_clips_per_class", *train_n}}}}});
    if (val_n) extra.push_back({"flag:--val-per-class", {{"synth", {{"val_clips_per_class", *val_n}}}}});
    if (frames) extra.push_back({"flag:--frames", {{"synth", {{"frames_per_clip", *frames}}}}});
    layers.insert(layers.end(), extra.begin(), extra.end());
    RunConfig cfg = resolve_run_config(layers);
    const auto echo = echo_doc("synth", args, cfg);
    fs::path root;
    if (out_dir) {
        root = *out_dir;
        fs::create_directories(root);
        write_json(root / "config.json", echo);
    } else {
        root = make_run_dir(cfg.runs_root, "synth", synth_config_to_json(cfg.synth), echo);
    }
    const auto s = generate(cfg.synth, root);
    out << "dataset: " << s.dataset_root.string() << '\n'
        << "tracks: " << s.tracks_path.string() << '\n'
        << print_stats(s.manifest.stats);
    return 0;
}

int cmd_train(const ConfigFlags& flags, std::optional<std::string> resume_dir, const std::vector<std::string>& args,
              std::ostream& out) {
    std::vector<ConfigLayer> layers;
    fs::path run_dir;
    if (resume_dir) {
        run_dir = *resume_dir;
        const auto echo = read_json(run_dir / "config.json", "run config");
        layers.push_back({"resume:" + run_dir.string(), echo.at("config")});
        if (flags.config) layers.push_back({"file:" + *flags.config, read_json(*flags.config, "config file")});
    } else {
        layers = base_layers(flags);
    }
    const auto flayers = flag_layers(flags);
    layers.insert(layers.end(), flayers.begin(), flayers.end());
    RunConfig cfg = resolve_run_config(layers);
    if (cfg.provenance.at("model.family") == "default")
        throw std::invalid_argument("no model family given; pass --family (valid: " + valid_families() + ")");
    if (cfg.dataset_root.empty())
        throw std::invalid_argument(std::string("no dataset root; pass --dataset-root, set ") + kDatasetRootEnv +
                                    " or paths.dataset_root in the config file");
    const fs::path manifest_path = cfg.dataset_root / "manifest.json";
    require_file(manifest_path, "dataset manifest", "run build-dataset or synth first, or point --dataset-root at its output");
    const auto manifest = load_manifest(manifest_path);

    const auto echo = echo_doc("train", args, cfg);
    if (resume_dir) {
        write_json(run_dir / "config.json", echo);
    } else {
        run_dir = make_run_dir(cfg.runs_root, "train", echo.at("config"), echo);
    }
    out << "run dir: " << run_dir.string() << '\n';

    auto model = build_model(cfg.model, cfg.freeze, cfg.train.seed);
    TrainRunOptions opts;
    opts.out_dir = run_dir;
    opts.resume = resume_dir.has_value();
    opts.sampling = cfg.sampling;
    opts.on_epoch = [&out](const EpochMetrics& m) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %d  steps %d  loss %.6f  lr %.3g  val macro F1 %.4f  (%.1fs)", m.epoch,
                      m.steps, m.train_loss, m.lr, m.val.f1_macro, m.seconds);
        out << buf << std::endl;
    };
    const auto result = train(*model, manifest, cfg.dataset_root, cfg.train, opts);
    out << "best val macro F1 " << result.state.best_val_macro_f1 << " at epoch " << result.state.best_epoch << '\n'
        << "checkpoints: " << (run_dir / "last.ckpt").string() << ", " << (run_dir / "best.ckpt").string() << '\n';
    return 0;
}

struct EvalFlags {
    std::string checkpoint;
    std::optional<std::string> manifest;
    std::optional<std::string> dataset_root;
    std::string split = "val";
    std::optional<std::string> granularity;
    int windows = 1;
    int batch_size = 8;
    std::optional<std::string> out;
    std::optional<std::string> runs_root;
};

int cmd_eval(const EvalFlags& f, const std::vector<std::string>& args, std::ostream& out) {
    require_file(f.checkpoint, "checkpoint", "pass --checkpoint with a last.ckpt or best.ckpt from a train run");
    fs::path manifest_path;
    if (f.manifest) {
        manifest_path = *f.manifest;
    } else {
        std::string root = f.dataset_root.value_or("");
        if (root.empty())
            if (const char* env = std::getenv(kDatasetRootEnv)) root = env;
        if (root.empty())
            throw std::invalid_argument(std::string("no manifest; pass --manifest, --dataset-root or set ") +
                                        kDatasetRootEnv);
        manifest_path = fs::path(root) / "manifest.json";
    }
    require_file(manifest_path, "dataset manifest");
    const auto split = parse_split(f.split);
    if (!split) throw std::invalid_argument("unknown split \"" + f.split + "\" (valid: train, val)");

    const auto ckpt = load_checkpoint(f.checkpoint);
    auto model = model_from_checkpoint(ckpt);
    EvalOptions opts;
    opts.granularity = f.granularity ? parse_granularity(*f.granularity) : default_granularity(ckpt.spec.family);
    opts.windows = f.windows;
    opts.batch_size = f.batch_size;
    opts.sampling = ckpt.sampling;
    const auto manifest = load_manifest(manifest_path);
    const fs::path root = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
    const ClipDataset data(manifest, root, *split);
    const auto report = evaluate(*model, data, opts);

    const json eval_doc = {{"checkpoint", f.checkpoint},
                           {"manifest", manifest_path.string()},
                           {"split", f.split},
                           {"granularity", std::string(to_string(opts.granularity))},
                           {"windows", opts.windows},
                           {"batch_size", opts.batch_size},
                           {"model", spec_to_json(ckpt.spec)},
                           {"sampling", sampling_to_json(ckpt.sampling)}};
    const json echo = {{"command", "eval"}, {"args", args}, {"config", eval_doc}, {"config_hash", config_hash(eval_doc)}};
    fs::path dir;
    if (f.out) {
        dir = *f.out;
        fs::create_directories(dir);
        write_json(dir / "config.json", echo);
    } else {
        dir = make_run_dir(f.runs_root.value_or("runs"), "eval", eval_doc, echo);
    }
    render_report(report, dir);
    out << "report: " << dir.string() << '\n' << render_table({report});
    out << "confusion (rows truth drone/bird, cols predicted drone/bird): [[" << report.confusion.counts[0][0] << ", "
        << report.confusion.counts[0][1] << "], [" << report.confusion.counts[1][0] << ", "
        << report.confusion.counts[1][1] << "]]\n";
    return 0;
}

int cmd_params(std::optional<std::string> family, std::optional<std::string> freeze, int width, bool all, bool as_json,
               std::ostream& out) {
    std::vector<ParamRow> rows;
    if (all) {
        rows = reference_param_rows();
    } else {
        if (!family) throw std::invalid_argument("pass --family (valid: " + valid_families() + ") or --all");
        const Family fam = parse_family(*family);
        std::vector<ConfigLayer> layers = {{"flag:--family", {{"model", {{"family", *family}}}}}};
        if (freeze) {
            json v = *freeze;
            if (!freeze->empty() && std::all_of(freeze->begin(), freeze->end(), ::isdigit)) v = std::stoi(*freeze);
            layers.push_back({"flag:--freeze", {{"freeze", {{"unfrozen_backbone_blocks", v}}}}});
        }
        rows.push_back({fam, resolve_run_config(layers).freeze});
    }
    std::vector<EvalReport> reports;
    json docs = json::array();
    for (const auto& r : rows) {
        if (as_json) {
            ModelSpec spec = default_spec(r.family);
            spec.width = width;
            auto model = build_model(spec, r.policy, 0);
            json d = param_report_to_json(count_params(*model));
            d["family"] = std::string(to_string(r.family));
            d["unfrozen_backbone_blocks"] = r.policy.unfrozen_backbone_blocks;
            docs.push_back(d);
        } else {
            reports.push_back(param_row_report(r, width));
        }
    }
    if (as_json)
        out << (all ? docs : docs.at(0)).dump(2) << '\n';
    else
        out << render_table(reports);
    return 0;
}

int cmd_report(const std::vector<std::string>& inputs, std::optional<std::string> out_dir,
               std::optional<std::string> runs_root, const std::vector<std::string>& args, std::ostream& out) {
    std::vector<EvalReport> reports;
    json sources = json::array();
    for (const auto& in : inputs) {
        fs::path p = in;
        if (fs::is_directory(p)) p /= "metrics.json";
        reports.push_back(report_from_json(read_json(p, "metrics file")));
        sources.push_back(p.string());
    }
    const json doc = {{"inputs", sources}};
    const json echo = {{"command", "report"}, {"args", args}, {"config", doc}, {"config_hash", config_hash(doc)}};
    fs::path dir;
    if (out_dir) {
        dir = *out_dir;
        fs::create_directories(dir);
        write_json(dir / "config.json", echo);
    } else {
        dir = make_run_dir(runs_root.value_or("runs"), "report", doc, echo);
    }
    const std::string table = render_table(reports);
    std::ofstream(dir / "table.txt") << table;
    json all = json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        all.push_back(report_to_json(reports[i]));
        write_confusion_plot(reports[i], dir / ("confusion_" + std::to_string(i + 1) + ".png"));
    }
    write_json(dir / "reports.json", all);
    out << "report: " << dir.string() << '\n' << table;
    return 0;
}

}  // namespace

json run_config_to_json(const RunConfig& c) {
    return {{"paths", {{"dataset_root", c.dataset_root.string()}, {"runs_root", c.runs_root.string()}}},
            {"model", spec_to_json(c.model)},
            {"freeze", {{"unfrozen_backbone_blocks", c.freeze.unfrozen_backbone_blocks}}},
            {"train", train_config_to_json(c.train)},
            {"sampling", sampling_to_json(c.sampling)},
            {"synth", synth_config_to_json(c.synth)}};
}

RunConfig resolve_run_config(const std::vector<ConfigLayer>& layers) {
    std::string family_source;
    const Family family = family_of(layers, &family_source);
    RunConfig base = defaults_for(family);
    json doc = run_config_to_json(base);
    std::map<std::string, std::string> prov;
    record_leaves(doc, "", "default", prov);
    prov["model.family"] = family_source;

    for (const auto& layer : layers) {
        json patch = layer.patch;
        check_patch(doc, patch, "", layer.source, prov);
        if (patch.contains("model")) {
            auto& m = patch["model"];
            m["family"] = std::string(to_string(family));
            if (m.contains("neck") && m["neck"].contains("kind")) {
                if (m["neck"]["kind"] != doc["model"]["neck"]["kind"])
                    throw std::invalid_argument("model.neck.kind in " + layer.source + " does not match family " +
                                                std::string(to_string(family)));
            }
        }
        if (patch.contains("freeze") && patch["freeze"].contains("unfrozen_backbone_blocks")) {
            auto& v = patch["freeze"]["unfrozen_backbone_blocks"];
            if (v.is_string()) {
                const auto s = v.get<std::string>();
                if (s == "transfer")
                    v = FreezePolicy::transfer().unfrozen_backbone_blocks;
                else if (s == "finetune")
                    v = fine_tune_policy(family).unfrozen_backbone_blocks;
                else
                    throw std::invalid_argument("freeze value \"" + s + "\" in " + layer.source +
                                                " is not an integer, 'transfer' or 'finetune'");
            }
        }
        doc.merge_patch(patch);
    }

    RunConfig c;
    c.dataset_root = doc["paths"]["dataset_root"].get<std::string>();
    c.runs_root = doc["paths"]["runs_root"].get<std::string>();
    c.model = spec_from_json(doc["model"]);
    c.freeze.unfrozen_backbone_blocks = doc["freeze"]["unfrozen_backbone_blocks"].get<int>();
    c.train = train_config_from_json(doc["train"]);
    c.sampling = sampling_from_json(doc["sampling"]);
    c.synth = synth_config_from_json(doc["synth"]);
    c.provenance = std::move(prov);
    validate_spec(c.model);
    validate_config(c.train);
    validate_synth_config(c.synth);
    if (c.freeze.unfrozen_backbone_blocks < 0 || c.freeze.unfrozen_backbone_blocks > FreezePolicy::all().unfrozen_backbone_blocks)
        throw std::invalid_argument("freeze.unfrozen_backbone_blocks must be in [0, 5]");
    return c;
}

std::string config_hash(const json& doc) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : doc.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 12);
}

fs::path make_run_dir(const fs::path& root, const std::string& command, const json& config, const json& echo) {
    const std::string base = now_stamp() + "-" + command + "-" + config_hash(config);
    fs::create_directories(root);
    fs::path dir = root / base;
    for (int n = 2; !fs::create_directory(dir); ++n) dir = root / (base + "-" + std::to_string(n));
    write_json(dir / "config.json", echo);
    return dir;
}

std::vector<ParamRow> reference_param_rows() {
    return {{Family::image_resnet18, {0}},       {Family::r2plus1d, {1}},      {Family::resnet18_lstm, {0}},
            {Family::resnet18_mlp, {0}},         {Family::resnet18_transformer, {0}},
            {Family::image_resnet18, {2}},       {Family::resnet18_lstm, {2}}, {Family::resnet18_mlp, {2}},
            {Family::resnet18_transformer, {2}}};
}

EvalReport param_row_report(const ParamRow& row, int width) {
    ModelSpec spec = default_spec(row.family);
    spec.width = width;
    auto model = build_model(spec, row.policy, 0);
    const auto counts = count_params(*model);
    EvalReport r;
    r.modality = std::string(to_string(row.family));
    r.unfrozen_backbone_blocks = row.policy.unfrozen_backbone_blocks;
    r.total_params = counts.total_params;
    r.trainable_params = counts.trainable_params;
    return r;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Track-to-sequence drone vs bird classification toolkit", "seqcls"};
    app.require_subcommand(1);

    ConfigFlags bd_flags;
    std::string bd_tracks, bd_frames, bd_split;
    std::optional<std::string> bd_out;
    int bd_gap = kDefaultGapThreshold;
    auto* bd = app.add_subcommand("build-dataset", "Export track crops into a clip dataset and manifest");
    bd->add_option("--tracks", bd_tracks, "Tracks file (JSON lines)")->required();
    bd->add_option("--frames", bd_frames, "Frames root: <video_id>/ image folders or video files")->required();
    bd->add_option("--split-file", bd_split, "Video split assignment (JSON)")->required();
    bd->add_option("--out", bd_out, "Dataset output directory (default: a new run directory)");
    bd->add_option("--gap-threshold", bd_gap, "Predicted-only run length that splits a track")->capture_default_str();
    add_config_flags(bd, bd_flags, false, false);

    ConfigFlags sy_flags;
    std::optional<std::string> sy_out;
    std::optional<int> sy_train, sy_val, sy_frames;
    auto* sy = app.add_subcommand("synth", "Generate a synthetic dataset separable only through temporal cues");
    sy->add_option("--out", sy_out, "Output directory (default: a new run directory)");
    sy->add_option("--train-per-class", sy_train, "Training clips per class");
    sy->add_option("--val-per-class", sy_val, "Validation clips per class");
    sy->add_option("--frames", sy_frames, "Frames per clip");
    add_config_flags(sy, sy_flags, true, false);

    ConfigFlags tr_flags;
    std::optional<std::string> tr_resume;
    auto* tr = app.add_subcommand("train", "Train a classifier");
    add_config_flags(tr, tr_flags, true, true);
    tr->add_option("--resume", tr_resume, "Continue the run in this run directory from its last.ckpt");

    EvalFlags ev_flags;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    ev->add_option("--checkpoint", ev_flags.checkpoint, "Checkpoint file")->required();
    ev->add_option("--manifest", ev_flags.manifest, "Dataset manifest.json");
    ev->add_option("--dataset-root", ev_flags.dataset_root,
                   std::string("Dataset directory with manifest.json (also ") + kDatasetRootEnv + ")");
    ev->add_option("--split", ev_flags.split, "train or val")->capture_default_str();
    ev->add_option("--granularity", ev_flags.granularity, "clip or frame (default: frame for the image family)");
    ev->add_option("--windows", ev_flags.windows, "Windows averaged per clip for sequence models")->capture_default_str();
    ev->add_option("--batch-size", ev_flags.batch_size, "Inference batch size")->capture_default_str();
    ev->add_option("--out", ev_flags.out, "Report directory (default: a new run directory)");
    ev->add_option("--runs-root", ev_flags.runs_root, "Directory holding run directories");

    std::optional<std::string> pa_family, pa_freeze;
    int pa_width = 64;
    bool pa_all = false, pa_json = false;
    auto* pa = app.add_subcommand("params", "Report total and trainable parameter counts");
    pa->add_option("--family", pa_family, "Model family: " + valid_families());
    pa->add_option("--freeze", pa_freeze, "Unfrozen backbone blocks: an integer, 'transfer' or 'finetune'");
    pa->add_option("--width", pa_width, "Backbone base width")->capture_default_str();
    pa->add_flag("--all", pa_all, "All nine reference configurations");
    pa->add_flag("--json", pa_json, "JSON output with a per-component breakdown");

    std::vector<std::string> rp_inputs;
    std::optional<std::string> rp_out, rp_runs;
    auto* rp = app.add_subcommand("report", "Combine evaluation reports into one table");
    rp->add_option("inputs", rp_inputs, "metrics.json files or eval report directories")->required();
    rp->add_option("--out", rp_out, "Output directory (default: a new run directory)");
    rp->add_option("--runs-root", rp_runs, "Directory holding run directories");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*bd) return cmd_build_dataset(bd_tracks, bd_frames, bd_split, bd_out, bd_gap, bd_flags, args, out);
        if (*sy) return cmd_synth(sy_out, sy_train, sy_val, sy_frames, sy_flags, args, out);
        if (*tr) return cmd_train(tr_flags, tr_resume, args, out);
        if (*ev) return cmd_eval(ev_flags, args, out);
        if (*pa) return cmd_params(pa_family, pa_freeze, pa_width, pa_all, pa_json, out);
        if (*rp) return cmd_report(rp_inputs, rp_out, rp_runs, args, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

}  // namespace seqcls
