#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "fixtures.hpp"
#include "seqcls/cli.hpp"
#include "seqcls/synthgen.hpp"

using namespace seqcls;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh(const std::string& name) {
    const auto p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_file(const fs::path& p, const json& doc) { std::ofstream(p) << doc.dump(2); }

json read_file(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::vector<fs::path> run_dirs(const fs::path& root) {
    std::vector<fs::path> out;
    if (fs::exists(root))
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<json> metric_lines(const fs::path& run_dir) {
    std::vector<json> out;
    std::ifstream in(run_dir / "metrics.jsonl");
    for (std::string line; std::getline(in, line);) {
        auto j = json::parse(line);
        j.erase("seconds");
        out.push_back(j);
    }
    return out;
}

fs::path toy_dataset(const std::string& name) {
    const auto root = fresh(name);
    auto clips = testing::write_flat_clips(root, "tr", Split::train, 8, 8, 6, 100);
    const auto val = testing::write_flat_clips(root, "va", Split::val, 3, 3, 6, 100);
    clips.insert(clips.end(), val.begin(), val.end());
    save_manifest(build_manifest(clips, {{"tr", Split::train}, {"va", Split::val}}), root / "manifest.json");
    return root;
}

// Tiny LSTM that solves the toy dataset.
json toy_config() {
    return {{"model",
             {{"family", "resnet18_lstm"}, {"width", 4}, {"timesteps", 4}, {"neck", {{"hidden_size", 6}}}}},
            {"freeze", {{"unfrozen_backbone_blocks", 5}}},
            {"train", {{"optimizer", "adamw"}, {"learning_rate", 1e-2}, {"batch_size", 4}}},
            {"sampling",
             {{"num_frames", 4}, {"crop_size", 8}, {"resize_min", 8}, {"resize_max", 10}, {"eval_short_side", 8}}}};
}

}  // namespace

TEST_CASE("help enumerates flags and exit codes follow success") {
    const auto help = run({"train", "--help"});
    CHECK(help.code == 0);
    for (const char* flag : {"--config", "--family", "--freeze", "--seed", "--resume", "--dataset-root", "--runs-root",
                             "--width", "--epochs", "--lr", "--batch-size", "--max-steps"})
        CHECK_MESSAGE(help.out.find(flag) != std::string::npos, flag);
    const auto top = run({"--help"});
    CHECK(top.code == 0);
    for (const char* cmd : {"build-dataset", "synth", "train", "eval", "params", "report"})
        CHECK_MESSAGE(top.out.find(cmd) != std::string::npos, cmd);
    CHECK(run({}).code != 0);
    CHECK(run({"frobnicate"}).code != 0);
    CHECK(run({"params", "--family", "resnet18_lstm", "--bogus"}).code != 0);
}

TEST_CASE("params reports the reference configurations") {
    const auto image = run({"params", "--family", "image_resnet18", "--freeze", "0", "--json"});
    REQUIRE(image.code == 0);
    CHECK(json::parse(image.out).at("trainable_params") == 1026);

    const auto all = run({"params", "--all"});
    REQUIRE(all.code == 0);
    std::istringstream lines(all.out);
    int rows = 0;
    for (std::string line; std::getline(lines, line);) rows += line.find("Image") != std::string::npos;
    CHECK(rows == 9);
    CHECK(all.out.find("31.3M") != std::string::npos);
    CHECK(all.out.find("9.5M") != std::string::npos);

    const auto bad = run({"params", "--family", "x3d"});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("resnet18_transformer") != std::string::npos);
    CHECK(bad.err.find("image_resnet18") != std::string::npos);
}

TEST_CASE("run config layering, strict keys and provenance") {
    const auto dir = fresh("seqcls_test_cli_cfg");
    const json file = {{"model", {{"family", "r2plus1d"}}}, {"train", {{"seed", 5}, {"epochs", 20}}}};
    const std::vector<ConfigLayer> layers = {
        {"file:a.json", file}, {"env:X", {{"paths", {{"dataset_root", "/data"}}}}},
        {"flag:--seed", {{"train", {{"seed", 7}}}}}, {"flag:--freeze", {{"freeze", {{"unfrozen_backbone_blocks", "finetune"}}}}}};
    const auto cfg = resolve_run_config(layers);
    CHECK(cfg.model.family == Family::r2plus1d);
    CHECK(cfg.train.batch_size == 8);
    CHECK(cfg.train.seed == 7);
    CHECK(cfg.train.epochs == 20);
    CHECK(cfg.freeze.unfrozen_backbone_blocks == 1);
    CHECK(cfg.dataset_root == "/data");
    CHECK(cfg.provenance.at("train.seed") == "flag:--seed");
    CHECK(cfg.provenance.at("train.epochs") == "file:a.json");
    CHECK(cfg.provenance.at("model.family") == "file:a.json");
    CHECK(cfg.provenance.at("paths.dataset_root") == "env:X");
    CHECK(cfg.provenance.at("train.learning_rate") == "default");

    const auto lstm = resolve_run_config({{"f", {{"model", {{"family", "resnet18_lstm"}}}, {"freeze", {{"unfrozen_backbone_blocks", "finetune"}}}}}});
    CHECK(lstm.freeze.unfrozen_backbone_blocks == 2);
    CHECK(lstm.train.batch_size == 16);

    CHECK_THROWS_WITH_AS(resolve_run_config({{"file:b.json", {{"train", {{"lrate", 1}}}}}}),
                         doctest::Contains("train.lrate"), std::invalid_argument);
    CHECK_THROWS_AS(resolve_run_config({{"f", {{"extras", {{"a", 1}}}}}}), std::invalid_argument);
    CHECK_THROWS_AS(resolve_run_config({{"f", {{"model", {{"family", "resnet18_mlp"}, {"neck", {{"kind", "lstm"}}}}}}}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(resolve_run_config({{"f", {{"freeze", {{"unfrozen_backbone_blocks", "most"}}}}}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(resolve_run_config({{"f", {{"train", {{"epochs", 0}}}}}}), std::invalid_argument);

    // The config files shipped with the repository resolve cleanly.
    int files = 0;
    for (const auto& e : fs::directory_iterator(fs::path(SEQCLS_SOURCE_DIR) / "configs")) {
        std::ifstream in(e.path());
        const auto c = resolve_run_config({{"file:" + e.path().string(), json::parse(in)}});
        if (c.model.family == Family::resnet18_transformer) CHECK(c.model.neck.feedforward_dim == 3580);
        ++files;
    }
    CHECK(files >= 5);

    const auto unknown = dir / "unknown.json";
    write_file(unknown, {{"train", {{"epocs", 3}}}});
    const auto r = run({"train", "--config", unknown.string(), "--family", "resnet18_lstm"});
    CHECK(r.code == 1);
    CHECK(r.err.find("train.epocs") != std::string::npos);
}

TEST_CASE("run directories are named by timestamp and config hash") {
    const json a = {{"x", 1}}, b = {{"x", 2}};
    CHECK(config_hash(a) == config_hash(json{{"x", 1}}));
    CHECK(config_hash(a) != config_hash(b));
    CHECK(config_hash(a).size() == 12);
    const auto root = fresh("seqcls_test_cli_runs");
    const auto d1 = make_run_dir(root, "train", a, {{"echo", 1}});
    const auto d2 = make_run_dir(root, "train", a, {{"echo", 2}});
    CHECK(d1 != d2);
    const auto name = d1.filename().string();
    CHECK(name.size() >= 15 + 7 + 12);
    CHECK(name.find("-train-" + config_hash(a)) == 15);
    CHECK(read_file(d1 / "config.json") == json{{"echo", 1}});
}

TEST_CASE("build-dataset matches planted expectations and is idempotent") {
    const auto dir = fresh("seqcls_test_cli_build");
    GapConfig gc;
    gc.tracks = 6;
    gc.seed = 9;
    const auto fixtures = make_gap_tracks(gc);
    std::vector<Track> tracks;
    json split = {{"train", json::array()}, {"val", json::array()}};
    std::size_t expected_clips = 0;
    for (std::size_t i = 0; i < fixtures.size(); ++i) {
        const auto& t = fixtures[i].track;
        tracks.push_back(t);
        expected_clips += fixtures[i].expected.size();
        split[i < 4 ? "train" : "val"].push_back(t.video_id);
        const auto vdir = dir / "frames" / t.video_id;
        fs::create_directories(vdir);
        for (const auto& b : t.boxes) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%06d.png", b.frame_index + 1);
            cv::imwrite((vdir / name).string(), cv::Mat(140, 140, CV_8UC3, cv::Scalar(b.frame_index % 200, 90, 40)));
        }
    }
    write_tracks(dir / "tracks.jsonl", tracks);
    write_file(dir / "split.json", split);

    const std::vector<std::string> base = {"build-dataset", "--tracks", (dir / "tracks.jsonl").string(), "--frames",
                                           (dir / "frames").string(), "--split-file", (dir / "split.json").string()};
    auto args = base;
    args.insert(args.end(), {"--out", (dir / "ds").string()});
    const auto r = run(args);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto m1 = load_manifest(dir / "ds" / "manifest.json");
    CHECK(m1.clips.size() == expected_clips);
    CHECK(verify_manifest(m1).empty());
    for (std::size_t i = 0; i < fixtures.size(); ++i) {
        const auto& f = fixtures[i];
        const cv::Size target = largest_box_size(f.track);
        std::vector<int> lengths;
        for (const auto& c : m1.clips)
            if (c.video_id == f.track.video_id) {
                lengths.push_back(c.frame_count);
                CHECK(c.target_size == target);
                CHECK(c.split == (i < 4 ? Split::train : Split::val));
            }
        std::vector<int> expected;
        for (const auto& seg : f.expected) expected.push_back(static_cast<int>(seg.size()));
        std::sort(lengths.begin(), lengths.end());
        std::sort(expected.begin(), expected.end());
        CHECK(lengths == expected);
    }
    CHECK(fs::exists(dir / "ds" / "config.json"));

    const auto again = run(args);
    REQUIRE(again.code == 0);
    CHECK(load_manifest(dir / "ds" / "manifest.json").clips == m1.clips);
    CHECK(load_manifest(dir / "ds" / "manifest.json").stats == m1.stats);

    auto missing = base;
    missing[6] = (dir / "nope.json").string();
    missing.insert(missing.end(), {"--out", (dir / "ds2").string()});
    const auto bad = run(missing);
    CHECK(bad.code == 1);
    CHECK(bad.err.find("split file not found") != std::string::npos);
    CHECK(bad.err.find("hint:") != std::string::npos);
}

TEST_CASE("synth writes a dataset the builder accepts") {
    const auto dir = fresh("seqcls_test_cli_synth");
    const auto r = run({"synth", "--out", (dir / "s").string(), "--train-per-class", "3", "--val-per-class", "2",
                        "--frames", "10", "--seed", "4"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto m = load_manifest(dir / "s" / "dataset" / "manifest.json");
    CHECK(m.clips.size() == 10);
    CHECK(read_file(dir / "s" / "config.json").at("config").at("synth").at("seed") == 4);
    CHECK(read_file(dir / "s" / "config.json").at("provenance").at("synth.seed") == "flag:--seed");
}

TEST_CASE("train, resume and eval through the command line") {
    const auto ds = toy_dataset("seqcls_test_cli_toy");
    const auto dir = fresh("seqcls_test_cli_train");
    write_file(dir / "toy.json", toy_config());
    const std::vector<std::string> common = {"train", "--config", (dir / "toy.json").string(), "--dataset-root",
                                             ds.string(), "--seed", "11"};

    auto args = common;
    args.insert(args.end(), {"--runs-root", (dir / "a").string()});
    const auto a = run(args);
    REQUIRE_MESSAGE(a.code == 0, a.err);
    const auto runs_a = run_dirs(dir / "a");
    REQUIRE(runs_a.size() == 1);
    const auto lines_a = metric_lines(runs_a[0]);
    CHECK(lines_a.size() == 12);
    CHECK(lines_a.back().at("val").at("f1_macro") == 1.0);
    const auto echo = read_file(runs_a[0] / "config.json");
    CHECK(echo.at("provenance").at("train.seed") == "flag:--seed");
    CHECK(echo.at("provenance").at("train.batch_size") == "file:" + (dir / "toy.json").string());
    CHECK(runs_a[0].filename().string().find(echo.at("config_hash").get<std::string>()) != std::string::npos);

    // Same seed, identical trajectory.
    args = common;
    args.insert(args.end(), {"--runs-root", (dir / "b").string()});
    REQUIRE(run(args).code == 0);
    CHECK(metric_lines(run_dirs(dir / "b").at(0)) == lines_a);

    // Interrupted at epoch 6, resumed to the end.
    auto stop = toy_config();
    stop["train"]["stop_after_epoch"] = 6;
    write_file(dir / "stop.json", stop);
    const auto r1 = run({"train", "--config", (dir / "stop.json").string(), "--dataset-root", ds.string(), "--seed",
                         "11", "--runs-root", (dir / "c").string()});
    REQUIRE(r1.code == 0);
    const auto run_c = run_dirs(dir / "c").at(0);
    CHECK(metric_lines(run_c).size() == 6);
    write_file(dir / "go.json", {{"train", {{"stop_after_epoch", 0}}}});
    const auto r2 = run({"train", "--resume", run_c.string(), "--config", (dir / "go.json").string()});
    REQUIRE_MESSAGE(r2.code == 0, r2.err);
    CHECK(metric_lines(run_c) == lines_a);

    // Evaluation of the best checkpoint reproduces the perfect validation score.
    const auto ckpt = (runs_a[0] / "best.ckpt").string();
    const auto e = run({"eval", "--checkpoint", ckpt, "--manifest", (ds / "manifest.json").string(), "--out",
                        (dir / "eval_clip").string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    const auto clip = report_from_json(read_file(dir / "eval_clip" / "metrics.json"));
    CHECK(clip.f1_macro == 1.0);
    CHECK(clip.f1_drone == 1.0);
    CHECK(clip.f1_bird == 1.0);
    CHECK(clip.granularity == Granularity::clip);
    CHECK(clip.n_samples == 6);
    CHECK(fs::exists(dir / "eval_clip" / "confusion.png"));
    CHECK(fs::exists(dir / "eval_clip" / "config.json"));

    setenv(kDatasetRootEnv, ds.string().c_str(), 1);
    const auto f = run({"eval", "--checkpoint", ckpt, "--granularity", "frame", "--runs-root", (dir / "ev").string()});
    unsetenv(kDatasetRootEnv);
    REQUIRE_MESSAGE(f.code == 0, f.err);
    const auto frame = report_from_json(read_file(run_dirs(dir / "ev").at(0) / "metrics.json"));
    CHECK(frame.granularity == Granularity::frame);
    CHECK(frame.n_samples == 36);

    const auto rep = run({"report", (dir / "eval_clip").string(), run_dirs(dir / "ev").at(0).string(), "--out",
                          (dir / "rep").string()});
    REQUIRE(rep.code == 0);
    CHECK(rep.out.find("100.0") != std::string::npos);
    CHECK(fs::exists(dir / "rep" / "table.txt"));

    const auto missing = run({"eval", "--checkpoint", (dir / "none.ckpt").string(), "--manifest",
                              (ds / "manifest.json").string()});
    CHECK(missing.code == 1);
    CHECK(missing.err.find("checkpoint not found") != std::string::npos);

    const auto bad_family = run({"train", "--family", "x3d", "--dataset-root", ds.string()});
    CHECK(bad_family.code == 1);
    CHECK(bad_family.err.find("resnet18_lstm") != std::string::npos);

    const auto no_family = run({"train", "--dataset-root", ds.string(), "--runs-root", (dir / "z").string()});
    CHECK(no_family.code == 1);
}
