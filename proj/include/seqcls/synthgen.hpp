#pragma once

// Synthetic drone/bird data that only a temporal model can separate.
//
// Every clip shows one dark elliptical blob on a noisy sky. Bird blobs change
// their horizontal extent sinusoidally at a per-clip frequency. Each drone
// clip is paired with a bird clip of the same appearance (canvas, blob size,
// intensity, background) and shows that bird's extents in shuffled order:
// per-frame appearance is identical across classes, only the temporal order
// differs.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "seqcls/seqdataset.hpp"
#include "seqcls/trackio.hpp"

namespace seqcls {

struct SynthConfig {
    int train_clips_per_class = 200;
    int val_clips_per_class = 50;
    int frames_per_clip = 24;
    double fps = 30.0;
    int min_crop = 28;  // canvas side range, inclusive
    int max_crop = 40;
    double min_flap_hz = 0.8;
    double max_flap_hz = 2.0;
    double flap_amplitude = 0.6;  // relative change of the blob width
    double min_blob_fraction = 0.35;  // blob width / canvas width
    double max_blob_fraction = 0.55;
    double position_jitter = 1.0;  // pixels, i.i.d. per frame in both classes
    double noise_sigma = 4.0;      // background pixel noise
    // Frames of the scene around the crop box.
    int margin = 6;
    std::uint64_t seed = 0;
};

void validate_synth_config(const SynthConfig& cfg);
nlohmann::json synth_config_to_json(const SynthConfig& cfg);
// Missing keys keep their defaults; unknown keys throw.
SynthConfig synth_config_from_json(const nlohmann::json& doc, SynthConfig base = {});

// Appearance shared by a bird clip and its drone partner.
struct SynthAppearance {
    cv::Size canvas;
    double blob_width = 0.0;
    double blob_height = 0.0;
    int blob_intensity = 0;
    int background = 0;
    double flap_hz = 0.0;
    double phase = 0.0;
};

struct SynthClip {
    std::string video_id;
    Label label = Label::drone;
    Split split = Split::train;
    SynthAppearance appearance;
    std::vector<double> widths;  // blob width per frame
    std::vector<cv::Mat> frames;  // full scene frames
};

// Deterministic in (cfg.seed, split, pair index).
std::vector<SynthClip> generate_pair(const SynthConfig& cfg, Split split, int index);
cv::Mat render_frame(const SynthConfig& cfg, const SynthAppearance& a, double width, std::uint64_t seed);

struct SynthOutput {
    std::filesystem::path frames_root;  // <out>/videos/<video_id>/frame_000001.png
    std::filesystem::path tracks_path;  // <out>/tracks.jsonl
    std::filesystem::path split_path;   // <out>/split.json
    std::filesystem::path dataset_root; // <out>/dataset (clips + manifest.json)
    DatasetManifest manifest;
};

// Writes scene frames, one detected-only track per clip, the split file and
// the clip dataset built from them through build_dataset.
SynthOutput generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Track fixtures with planted predicted-only runs and their expected segments.
struct GapFixture {
    Track track;
    std::vector<FrameSegment> expected;
};

struct GapConfig {
    int tracks = 500;
    int max_runs = 8;  // alternating detected / predicted runs per track
    int max_run_length = 24;
    int gap_threshold = kDefaultGapThreshold;
    std::uint64_t seed = 0;
};

// Detected runs separated by `predicted_runs`; detected runs get 1..5 frames.
GapFixture planted_gap_track(const std::vector<int>& predicted_runs, int gap_threshold, std::uint64_t seed);
// Random run structures, including leading and trailing predicted runs.
std::vector<GapFixture> make_gap_tracks(const GapConfig& cfg);

}  // namespace seqcls
