#include "seqcls/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "seqcls/rng.hpp"

namespace seqcls {

using nlohmann::json;

void validate_synth_config(const SynthConfig& c) {
    auto fail = [](const std::string& what) { throw std::invalid_argument("synth config: " + what); };
    if (c.train_clips_per_class < 1 || c.val_clips_per_class < 1) fail("clip counts must be >= 1");
    if (c.frames_per_clip < 2) fail("frames_per_clip must be >= 2");
    if (!(c.fps > 0)) fail("fps must be > 0");
    if (c.min_crop < 8 || c.max_crop < c.min_crop) fail("need 8 <= min_crop <= max_crop");
    if (!(c.min_flap_hz > 0 && c.max_flap_hz >= c.min_flap_hz)) fail("need 0 < min_flap_hz <= max_flap_hz");
    if (!(c.flap_amplitude >= 0 && c.flap_amplitude < 1)) fail("flap_amplitude must be in [0, 1)");
    if (!(c.min_blob_fraction > 0 && c.max_blob_fraction >= c.min_blob_fraction && c.max_blob_fraction <= 0.7))
        fail("need 0 < min_blob_fraction <= max_blob_fraction <= 0.7");
    if (c.position_jitter < 0 || c.noise_sigma < 0) fail("jitter and noise must be >= 0");
    if (c.margin < 0) fail("margin must be >= 0");
}

json synth_config_to_json(const SynthConfig& c) {
    return {{"train_clips_per_class", c.train_clips_per_class},
            {"val_clips_per_class", c.val_clips_per_class},
            {"frames_per_clip", c.frames_per_clip},
            {"fps", c.fps},
            {"min_crop", c.min_crop},
            {"max_crop", c.max_crop},
            {"min_flap_hz", c.min_flap_hz},
            {"max_flap_hz", c.max_flap_hz},
            {"flap_amplitude", c.flap_amplitude},
            {"min_blob_fraction", c.min_blob_fraction},
            {"max_blob_fraction", c.max_blob_fraction},
            {"position_jitter", c.position_jitter},
            {"noise_sigma", c.noise_sigma},
            {"margin", c.margin},
            {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& doc, SynthConfig c) {
    if (!doc.is_object()) throw std::invalid_argument("synth config must be an object");
    for (const auto& [key, v] : doc.items()) {
        if (key == "train_clips_per_class") c.train_clips_per_class = v.get<int>();
        else if (key == "val_clips_per_class") c.val_clips_per_class = v.get<int>();
        else if (key == "frames_per_clip") c.frames_per_clip = v.get<int>();
        else if (key == "fps") c.fps = v.get<double>();
        else if (key == "min_crop") c.min_crop = v.get<int>();
        else if (key == "max_crop") c.max_crop = v.get<int>();
        else if (key == "min_flap_hz") c.min_flap_hz = v.get<double>();
        else if (key == "max_flap_hz") c.max_flap_hz = v.get<double>();
        else if (key == "flap_amplitude") c.flap_amplitude = v.get<double>();
        else if (key == "min_blob_fraction") c.min_blob_fraction = v.get<double>();
        else if (key == "max_blob_fraction") c.max_blob_fraction = v.get<double>();
        else if (key == "position_jitter") c.position_jitter = v.get<double>();
        else if (key == "noise_sigma") c.noise_sigma = v.get<double>();
        else if (key == "margin") c.margin = v.get<int>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else throw std::invalid_argument("synth config: unknown key \"" + key + "\"");
    }
    return c;
}

cv::Mat render_frame(const SynthConfig& cfg, const SynthAppearance& a, double width, std::uint64_t seed) {
    Engine rng(seed);
    std::uniform_real_distribution<double> jitter(-cfg.position_jitter, cfg.position_jitter);
    const cv::Size scene(a.canvas.width + 2 * cfg.margin, a.canvas.height + 2 * cfg.margin);
    cv::Mat gray(scene, CV_8UC1, cv::Scalar(a.background));
    constexpr int shift = 4;
    constexpr double scale = 1 << shift;
    const double cx = cfg.margin + a.canvas.width / 2.0 + jitter(rng);
    const double cy = cfg.margin + a.canvas.height / 2.0 + jitter(rng);
    cv::ellipse(gray, cv::Point(static_cast<int>(std::lround(cx * scale)), static_cast<int>(std::lround(cy * scale))),
                cv::Size(static_cast<int>(std::lround(width / 2 * scale)),
                         static_cast<int>(std::lround(a.blob_height / 2 * scale))),
                0.0, 0.0, 360.0, cv::Scalar(a.blob_intensity), cv::FILLED, cv::LINE_AA, shift);
    if (cfg.noise_sigma > 0) {
        cv::Mat noisy;
        gray.convertTo(noisy, CV_64F);
        std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
        for (int y = 0; y < noisy.rows; ++y)
            for (int x = 0; x < noisy.cols; ++x) noisy.at<double>(y, x) += noise(rng);
        noisy.convertTo(gray, CV_8UC1);  // rounds and saturates
    }
    cv::Mat bgr;
    cv::cvtColor(gray, bgr, cv::COLOR_GRAY2BGR);
    return bgr;
}

std::vector<SynthClip> generate_pair(const SynthConfig& cfg, Split split, int index) {
    const auto split_id = static_cast<std::uint64_t>(split == Split::train ? 0 : 1);
    Engine rng(derive_seed({cfg.seed, split_id, static_cast<std::uint64_t>(index)}));
    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto uniform_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

    SynthAppearance a;
    a.canvas = {uniform_int(cfg.min_crop, cfg.max_crop), uniform_int(cfg.min_crop, cfg.max_crop)};
    a.blob_width = uniform(cfg.min_blob_fraction, cfg.max_blob_fraction) * a.canvas.width;
    a.blob_height = uniform(0.25, 0.45) * a.canvas.height;
    a.blob_intensity = uniform_int(20, 90);
    a.background = uniform_int(150, 220);
    a.flap_hz = uniform(cfg.min_flap_hz, cfg.max_flap_hz);
    a.phase = uniform(0.0, 2 * std::numbers::pi);

    std::vector<double> flap(static_cast<std::size_t>(cfg.frames_per_clip));
    for (int t = 0; t < cfg.frames_per_clip; ++t)
        flap[static_cast<std::size_t>(t)] =
            a.blob_width *
            (1.0 + cfg.flap_amplitude * std::sin(2 * std::numbers::pi * a.flap_hz * t / cfg.fps + a.phase));
    std::vector<double> shuffled = flap;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);

    std::vector<SynthClip> out;
    for (auto label : {Label::bird, Label::drone}) {
        SynthClip c;
        char id[64];
        std::snprintf(id, sizeof id, "%s_%04d_%s", std::string(to_string(split)).c_str(), index,
                      std::string(to_string(label)).c_str());
        c.video_id = id;
        c.label = label;
        c.split = split;
        c.appearance = a;
        c.widths = label == Label::bird ? flap : shuffled;
        for (int t = 0; t < cfg.frames_per_clip; ++t)
            c.frames.push_back(render_frame(
                cfg, a, c.widths[static_cast<std::size_t>(t)],
                derive_seed({cfg.seed, split_id, static_cast<std::uint64_t>(index),
                             static_cast<std::uint64_t>(index_of(label)), static_cast<std::uint64_t>(t)})));
        out.push_back(std::move(c));
    }
    return out;
}

SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    validate_synth_config(cfg);
    SynthOutput out;
    out.frames_root = out_dir / "videos";
    out.tracks_path = out_dir / "tracks.jsonl";
    out.split_path = out_dir / "split.json";
    out.dataset_root = out_dir / "dataset";
    std::filesystem::create_directories(out.frames_root);

    std::vector<Track> tracks;
    VideoSplitMap split_map;
    json split_doc = {{"train", json::array()}, {"val", json::array()}};
    for (auto split : kSplits) {
        const int n = split == Split::train ? cfg.train_clips_per_class : cfg.val_clips_per_class;
        for (int i = 0; i < n; ++i) {
            for (const auto& clip : generate_pair(cfg, split, i)) {
                const auto dir = out.frames_root / clip.video_id;
                std::filesystem::create_directories(dir);
                Track track;
                track.video_id = clip.video_id;
                track.track_id = "0";
                track.fps = cfg.fps;
                track.label = clip.label;
                for (std::size_t t = 0; t < clip.frames.size(); ++t) {
                    const auto path = dir / frame_file_name(t);
                    if (!cv::imwrite(path.string(), clip.frames[t]))
                        throw std::runtime_error("cannot write " + path.string());
                    BoundingBox box;
                    box.frame_index = static_cast<int>(t);
                    box.x = cfg.margin;
                    box.y = cfg.margin;
                    box.width = clip.appearance.canvas.width;
                    box.height = clip.appearance.canvas.height;
                    box.source = BoxSource::detected;
                    box.score = 1.0;
                    track.boxes.push_back(box);
                }
                tracks.push_back(std::move(track));
                split_map[clip.video_id] = split;
                split_doc[std::string(to_string(split))].push_back(clip.video_id);
            }
        }
    }
    write_tracks(out.tracks_path, tracks);
    {
        std::ofstream f(out.split_path);
        f << split_doc.dump(1) << '\n';
        std::ofstream c(out_dir / "synth_config.json");
        c << synth_config_to_json(cfg).dump(1) << '\n';
        if (!f || !c) throw std::runtime_error("cannot write synth metadata under " + out_dir.string());
    }
    out.manifest = build_dataset(tracks, out.frames_root, split_map, out.dataset_root);
    return out;
}

namespace {

// Boxes for `runs` (run length, predicted?) plus the segments the splitting
// rule must produce.
GapFixture assemble(const std::vector<std::pair<int, bool>>& runs, int gap_threshold, Engine& rng,
                    const std::string& video_id) {
    GapFixture f;
    f.track.video_id = video_id;
    f.track.track_id = "t";
    f.track.fps = 30.0;
    f.track.label = rng() % 2 ? Label::bird : Label::drone;
    std::uniform_int_distribution<int> pos(0, 100), dim(4, 30);
    FrameSegment current;
    int frame = 0;
    for (const auto& [length, predicted] : runs) {
        const bool dropped = predicted && length >= gap_threshold;
        if (dropped && !current.empty()) {
            f.expected.push_back(current);
            current.clear();
        }
        for (int k = 0; k < length; ++k, ++frame) {
            BoundingBox b;
            b.frame_index = frame;
            b.x = pos(rng);
            b.y = pos(rng);
            b.width = dim(rng);
            b.height = dim(rng);
            b.source = predicted ? BoxSource::predicted : BoxSource::detected;
            b.score = predicted ? 0.0 : 1.0;
            f.track.boxes.push_back(b);
            if (!dropped) current.push_back(frame);
        }
    }
    if (!current.empty()) f.expected.push_back(current);
    return f;
}

}  // namespace

GapFixture planted_gap_track(const std::vector<int>& predicted_runs, int gap_threshold, std::uint64_t seed) {
    Engine rng(seed);
    std::uniform_int_distribution<int> detected(1, 5);
    std::vector<std::pair<int, bool>> runs = {{detected(rng), false}};
    for (int p : predicted_runs) {
        if (p < 1) throw std::invalid_argument("planted_gap_track: run lengths must be >= 1");
        runs.emplace_back(p, true);
        runs.emplace_back(detected(rng), false);
    }
    return assemble(runs, gap_threshold, rng, "planted");
}

std::vector<GapFixture> make_gap_tracks(const GapConfig& cfg) {
    if (cfg.tracks < 0 || cfg.max_runs < 1 || cfg.max_run_length < 1 || cfg.gap_threshold < 1)
        throw std::invalid_argument("gap config: counts and lengths must be positive");
    std::vector<GapFixture> out;
    for (int i = 0; i < cfg.tracks; ++i) {
        Engine rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(i)}));
        const int nruns = std::uniform_int_distribution<int>(1, cfg.max_runs)(rng);
        bool predicted = rng() % 2 == 0;
        std::vector<std::pair<int, bool>> runs;
        bool any_detected = false;
        for (int r = 0; r < nruns; ++r) {
            int length = std::uniform_int_distribution<int>(1, cfg.max_run_length)(rng);
            // Lengths next to the threshold are the interesting ones.
            if (predicted && rng() % 3 == 0)
                length = std::max(1, cfg.gap_threshold + std::uniform_int_distribution<int>(-1, 1)(rng));
            runs.emplace_back(length, predicted);
            any_detected = any_detected || !predicted;
            predicted = !predicted;
        }
        if (!any_detected) runs.emplace_back(std::uniform_int_distribution<int>(1, 5)(rng), false);
        char id[32];
        std::snprintf(id, sizeof id, "gap_%04d", i);
        out.push_back(assemble(runs, cfg.gap_threshold, rng, id));
    }
    return out;
}

}  // namespace seqcls
