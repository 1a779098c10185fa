#pragma once

// Stored clip -> model input.
//
// Pixel tensors are RGB, scaled to [0,1] and then standardized per channel.
// A video sample is [C, T, H, W]; an image sample is [C, H, W]. Every random
// choice for one sample (window start, frame subset, resize, crop, flip) comes
// from a single seed, and spatial draws are shared by all frames of a clip.

#include <array>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "seqcls/nn/tensor.hpp"
#include "seqcls/seqdataset.hpp"
#include "seqcls/types.hpp"

namespace seqcls {

enum class NormVariant { video, image };

struct NormalizationStats {
    std::array<double, 3> mean{};
    std::array<double, 3> std{};  // RGB order
    NormVariant variant = NormVariant::video;

    static NormalizationStats video();
    static NormalizationStats image();
};

// Window length in source frames: max(round(seconds * fps), num_frames).
int window_length(double fps, int num_frames, double seconds = 0.5);

// Sorted indices into a clip of clip_length frames. Short clips are padded by
// repeating the last frame.
std::vector<int> sample_clip_window(int clip_length, double fps, int num_frames, std::uint64_t seed,
                                    double seconds = 0.5);
// Deterministic variant: centered window, evenly spaced indices inside it.
std::vector<int> center_clip_window(int clip_length, double fps, int num_frames, double seconds = 0.5);

// k deterministic windows with starts spread evenly over the clip, each with
// evenly spaced indices. k = 1 equals center_clip_window.
std::vector<std::vector<int>> spread_clip_windows(int clip_length, double fps, int num_frames, int k,
                                                  double seconds = 0.5);

struct TransformConfig {
    int crop_size = 224;
    int resize_min = 250;  // short side, inclusive range
    int resize_max = 320;
    int eval_short_side = 224;
    double flip_probability = 0.5;
};

struct AugmentDraw {
    int short_side = 0;
    int crop_x = 0;
    int crop_y = 0;
    bool flip = false;
};

cv::Size short_side_size(cv::Size size, int short_side);
AugmentDraw draw_augmentation(cv::Size frame_size, const TransformConfig& cfg, std::uint64_t seed);

// 8-bit BGR image -> [3, H, W] RGB in [0,1].
nn::Tensor to_unit_tensor(const cv::Mat& bgr);
void normalize_(nn::Tensor& t, const NormalizationStats& stats);
void denormalize_(nn::Tensor& t, const NormalizationStats& stats);

// Resize + crop + flip for all frames with one draw. Output [C, T, crop, crop].
nn::Tensor train_transform_video(const std::vector<cv::Mat>& frames, const TransformConfig& cfg,
                                 const NormalizationStats& stats, std::uint64_t seed);
// Short side to eval_short_side, center crop.
nn::Tensor eval_transform_video(const std::vector<cv::Mat>& frames, const TransformConfig& cfg,
                                const NormalizationStats& stats);
nn::Tensor train_transform_image(const cv::Mat& frame, const TransformConfig& cfg, const NormalizationStats& stats,
                                 std::uint64_t seed);
nn::Tensor eval_transform_image(const cv::Mat& frame, const TransformConfig& cfg, const NormalizationStats& stats);

// The spatial pipeline alone, before tensor conversion (exposed for tests).
cv::Mat apply_augmentation(const cv::Mat& frame, const AugmentDraw& draw, int crop_size);
cv::Mat apply_eval_geometry(const cv::Mat& frame, const TransformConfig& cfg);

enum class CollateMode { sequence, image };

struct Sample {
    nn::Tensor pixels;
    Label label = Label::drone;
    std::string clip_id;
};

struct SampledClipBatch {
    nn::Tensor pixels;  // [B, C, T, H, W] or [B, C, H, W]
    std::vector<Label> labels;
    std::vector<std::string> clip_ids;
    CollateMode mode = CollateMode::sequence;

    std::size_t size() const { return labels.size(); }
};

SampledClipBatch collate(const std::vector<Sample>& samples, CollateMode mode);

struct SamplingConfig {
    int num_frames = 8;
    double window_seconds = 0.5;
    TransformConfig transform;
};

// Read-only view of one split of a stored dataset. Decoded frames are cached.
class ClipDataset {
public:
    ClipDataset(const DatasetManifest& manifest, std::filesystem::path root, Split split, bool cache = true);

    std::size_t size() const { return entries_.size(); }
    const ClipEntry& entry(std::size_t i) const { return entries_.at(i); }
    const std::vector<ClipEntry>& entries() const { return entries_; }
    Split split() const { return split_; }
    std::vector<cv::Mat> frames(std::size_t i) const;

private:
    std::filesystem::path root_;
    Split split_;
    std::vector<ClipEntry> entries_;
    bool cache_;
    mutable std::mutex mutex_;
    mutable std::vector<std::vector<cv::Mat>> cached_;
};

// One training/eval unit: a whole clip (sequence mode) or one frame of a clip
// (image mode).
struct SampleItem {
    std::size_t clip = 0;
    int frame = -1;
};

std::vector<SampleItem> enumerate_items(const ClipDataset& data, CollateMode mode);

// Eval path is deterministic and ignores the seed.
Sample make_sample(const ClipDataset& data, const SampleItem& item, CollateMode mode, const SamplingConfig& cfg,
                   bool train, std::uint64_t seed);

// Eval-path sequence sample built from explicit frame positions.
Sample make_sequence_sample(const ClipDataset& data, std::size_t clip, const std::vector<int>& positions,
                            const SamplingConfig& cfg);

const NormalizationStats& stats_for(CollateMode mode);

}  // namespace seqcls
