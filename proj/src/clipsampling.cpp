#include "seqcls/clipsampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "seqcls/rng.hpp"

namespace seqcls {

using nn::Tensor;

NormalizationStats NormalizationStats::video() { return {{0.45, 0.45, 0.45}, {0.225, 0.225, 0.225}, NormVariant::video}; }

NormalizationStats NormalizationStats::image() {
    return {{0.485, 0.456, 0.406}, {0.229, 0.224, 0.225}, NormVariant::image};
}

const NormalizationStats& stats_for(CollateMode mode) {
    static const NormalizationStats video = NormalizationStats::video();
    static const NormalizationStats image = NormalizationStats::image();
    return mode == CollateMode::sequence ? video : image;
}

int window_length(double fps, int num_frames, double seconds) {
    return std::max(static_cast<int>(std::lround(seconds * fps)), num_frames);
}

namespace {

std::vector<int> padded_whole_clip(int clip_length, int num_frames) {
    std::vector<int> out(static_cast<std::size_t>(num_frames), clip_length - 1);
    std::iota(out.begin(), out.begin() + clip_length, 0);
    return out;
}

void check_window_args(int clip_length, int num_frames) {
    if (clip_length < 1) throw std::invalid_argument("clip_length must be >= 1");
    if (num_frames < 1) throw std::invalid_argument("num_frames must be >= 1");
}

}  // namespace

std::vector<int> sample_clip_window(int clip_length, double fps, int num_frames, std::uint64_t seed, double seconds) {
    check_window_args(clip_length, num_frames);
    if (clip_length < num_frames) return padded_whole_clip(clip_length, num_frames);
    Engine rng(seed);
    const int w = std::min(window_length(fps, num_frames, seconds), clip_length);
    const int start = std::uniform_int_distribution<int>(0, clip_length - w)(rng);
    std::vector<int> window(static_cast<std::size_t>(w));
    std::iota(window.begin(), window.end(), start);
    std::vector<int> out;
    std::sample(window.begin(), window.end(), std::back_inserter(out), num_frames, rng);
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

std::vector<int> evenly_spaced(int start, int w, int num_frames) {
    std::vector<int> out;
    for (int i = 0; i < num_frames; ++i) {
        const double pos = num_frames == 1 ? (w - 1) / 2.0 : static_cast<double>(i) * (w - 1) / (num_frames - 1);
        out.push_back(start + static_cast<int>(std::floor(pos + 0.5)));
    }
    return out;
}

}  // namespace

std::vector<int> center_clip_window(int clip_length, double fps, int num_frames, double seconds) {
    check_window_args(clip_length, num_frames);
    if (clip_length < num_frames) return padded_whole_clip(clip_length, num_frames);
    const int w = std::min(window_length(fps, num_frames, seconds), clip_length);
    return evenly_spaced((clip_length - w) / 2, w, num_frames);
}

std::vector<std::vector<int>> spread_clip_windows(int clip_length, double fps, int num_frames, int k,
                                                  double seconds) {
    if (k < 1) throw std::invalid_argument("window count must be >= 1");
    if (k == 1) return {center_clip_window(clip_length, fps, num_frames, seconds)};
    check_window_args(clip_length, num_frames);
    if (clip_length < num_frames) return {padded_whole_clip(clip_length, num_frames)};
    const int w = std::min(window_length(fps, num_frames, seconds), clip_length);
    std::vector<std::vector<int>> out;
    for (int i = 0; i < k; ++i) {
        const int start = static_cast<int>(std::lround(static_cast<double>(i) * (clip_length - w) / (k - 1)));
        auto idx = evenly_spaced(start, w, num_frames);
        if (out.empty() || out.back() != idx) out.push_back(std::move(idx));
    }
    return out;
}

cv::Size short_side_size(cv::Size size, int short_side) {
    if (size.width <= 0 || size.height <= 0) throw std::invalid_argument("empty frame");
    if (size.width <= size.height) {
        const int h = static_cast<int>(std::lround(static_cast<double>(size.height) * short_side / size.width));
        return {short_side, std::max(h, short_side)};
    }
    const int w = static_cast<int>(std::lround(static_cast<double>(size.width) * short_side / size.height));
    return {std::max(w, short_side), short_side};
}

AugmentDraw draw_augmentation(cv::Size frame_size, const TransformConfig& cfg, std::uint64_t seed) {
    if (cfg.resize_min > cfg.resize_max) throw std::invalid_argument("resize_min > resize_max");
    if (cfg.resize_min < cfg.crop_size) throw std::invalid_argument("resize range must not go below the crop size");
    Engine rng(seed);
    AugmentDraw d;
    d.short_side = std::uniform_int_distribution<int>(cfg.resize_min, cfg.resize_max)(rng);
    const cv::Size resized = short_side_size(frame_size, d.short_side);
    d.crop_x = std::uniform_int_distribution<int>(0, resized.width - cfg.crop_size)(rng);
    d.crop_y = std::uniform_int_distribution<int>(0, resized.height - cfg.crop_size)(rng);
    d.flip = std::bernoulli_distribution(cfg.flip_probability)(rng);
    return d;
}

cv::Mat apply_augmentation(const cv::Mat& frame, const AugmentDraw& draw, int crop_size) {
    cv::Mat resized;
    cv::resize(frame, resized, short_side_size(frame.size(), draw.short_side), 0, 0, cv::INTER_LINEAR);
    cv::Mat out = resized(cv::Rect(draw.crop_x, draw.crop_y, crop_size, crop_size)).clone();
    if (draw.flip) cv::flip(out, out, 1);
    return out;
}

cv::Mat apply_eval_geometry(const cv::Mat& frame, const TransformConfig& cfg) {
    if (cfg.eval_short_side < cfg.crop_size) throw std::invalid_argument("eval_short_side must be >= crop_size");
    cv::Mat resized;
    cv::resize(frame, resized, short_side_size(frame.size(), cfg.eval_short_side), 0, 0, cv::INTER_LINEAR);
    const int x = (resized.cols - cfg.crop_size) / 2;
    const int y = (resized.rows - cfg.crop_size) / 2;
    return resized(cv::Rect(x, y, cfg.crop_size, cfg.crop_size)).clone();
}

Tensor to_unit_tensor(const cv::Mat& bgr) {
    if (bgr.type() != CV_8UC3) throw std::invalid_argument("expected an 8-bit 3-channel image");
    const int h = bgr.rows, w = bgr.cols;
    Tensor t({3, h, w});
    double* r = t.data();
    double* g = r + h * w;
    double* b = g + h * w;
    for (int y = 0; y < h; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            const auto i = static_cast<std::size_t>(y) * w + x;
            b[i] = row[x][0] / 255.0;
            g[i] = row[x][1] / 255.0;
            r[i] = row[x][2] / 255.0;
        }
    }
    return t;
}

namespace {

template <class F>
void per_channel(Tensor& t, F&& f) {
    if (t.rank() < 1 || t.dim(0) != 3) throw std::invalid_argument("expected channel-first tensor with 3 channels");
    const auto plane = t.numel() / 3;
    for (int c = 0; c < 3; ++c) {
        double* p = t.data() + c * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] = f(c, p[i]);
    }
}

// Stacks [3, H, W] frames into [3, T, H, W].
Tensor stack_time(const std::vector<Tensor>& frames) {
    const auto h = frames[0].dim(1), w = frames[0].dim(2);
    const auto t_count = static_cast<std::int64_t>(frames.size());
    Tensor out({3, t_count, h, w});
    for (std::int64_t t = 0; t < t_count; ++t)
        for (int c = 0; c < 3; ++c)
            std::copy_n(frames[static_cast<std::size_t>(t)].data() + c * h * w, h * w,
                        out.data() + (c * t_count + t) * h * w);
    return out;
}

}  // namespace

void normalize_(Tensor& t, const NormalizationStats& s) {
    per_channel(t, [&](int c, double v) { return (v - s.mean[c]) / s.std[c]; });
}

void denormalize_(Tensor& t, const NormalizationStats& s) {
    per_channel(t, [&](int c, double v) { return v * s.std[c] + s.mean[c]; });
}

Tensor train_transform_video(const std::vector<cv::Mat>& frames, const TransformConfig& cfg,
                             const NormalizationStats& stats, std::uint64_t seed) {
    if (frames.empty()) throw std::invalid_argument("train_transform_video: no frames");
    const AugmentDraw draw = draw_augmentation(frames[0].size(), cfg, seed);
    std::vector<Tensor> out;
    for (const auto& f : frames) {
        if (f.size() != frames[0].size()) throw std::invalid_argument("clip frames differ in size");
        out.push_back(to_unit_tensor(apply_augmentation(f, draw, cfg.crop_size)));
    }
    Tensor t = stack_time(out);
    normalize_(t, stats);
    return t;
}

Tensor eval_transform_video(const std::vector<cv::Mat>& frames, const TransformConfig& cfg,
                            const NormalizationStats& stats) {
    if (frames.empty()) throw std::invalid_argument("eval_transform_video: no frames");
    std::vector<Tensor> out;
    for (const auto& f : frames) out.push_back(to_unit_tensor(apply_eval_geometry(f, cfg)));
    Tensor t = stack_time(out);
    normalize_(t, stats);
    return t;
}

Tensor train_transform_image(const cv::Mat& frame, const TransformConfig& cfg, const NormalizationStats& stats,
                             std::uint64_t seed) {
    Tensor t = to_unit_tensor(apply_augmentation(frame, draw_augmentation(frame.size(), cfg, seed), cfg.crop_size));
    normalize_(t, stats);
    return t;
}

Tensor eval_transform_image(const cv::Mat& frame, const TransformConfig& cfg, const NormalizationStats& stats) {
    Tensor t = to_unit_tensor(apply_eval_geometry(frame, cfg));
    normalize_(t, stats);
    return t;
}

SampledClipBatch collate(const std::vector<Sample>& samples, CollateMode mode) {
    if (samples.empty()) throw std::invalid_argument("collate: empty batch");
    const int want_rank = mode == CollateMode::sequence ? 4 : 3;
    const auto& shape = samples[0].pixels.shape();
    if (static_cast<int>(shape.size()) != want_rank)
        throw std::invalid_argument("collate: expected rank-" + std::to_string(want_rank) + " samples, got " +
                                    nn::shape_str(shape));
    nn::Shape out_shape{static_cast<std::int64_t>(samples.size())};
    out_shape.insert(out_shape.end(), shape.begin(), shape.end());
    SampledClipBatch batch;
    batch.mode = mode;
    batch.pixels = Tensor(out_shape);
    const auto per = samples[0].pixels.numel();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].pixels.shape() != shape)
            throw std::invalid_argument("collate: shape mismatch " + nn::shape_str(samples[i].pixels.shape()) +
                                        " vs " + nn::shape_str(shape));
        std::copy_n(samples[i].pixels.data(), per, batch.pixels.data() + static_cast<std::int64_t>(i) * per);
        batch.labels.push_back(samples[i].label);
        batch.clip_ids.push_back(samples[i].clip_id);
    }
    return batch;
}

ClipDataset::ClipDataset(const DatasetManifest& manifest, std::filesystem::path root, Split split, bool cache)
    : root_(std::move(root)), split_(split), cache_(cache) {
    for (const auto* e : manifest.entries(split)) entries_.push_back(*e);
    cached_.resize(entries_.size());
}

std::vector<cv::Mat> ClipDataset::frames(std::size_t i) const {
    const auto& e = entries_.at(i);
    if (cache_) {
        std::lock_guard lock(mutex_);
        if (!cached_[i].empty()) return cached_[i];
    }
    auto frames = read_clip_frames(root_ / e.path, static_cast<std::size_t>(e.frame_count));
    if (cache_) {
        std::lock_guard lock(mutex_);
        cached_[i] = frames;
    }
    return frames;
}

std::vector<SampleItem> enumerate_items(const ClipDataset& data, CollateMode mode) {
    std::vector<SampleItem> items;
    for (std::size_t c = 0; c < data.size(); ++c) {
        if (mode == CollateMode::sequence) {
            items.push_back({c, -1});
            continue;
        }
        for (int f = 0; f < data.entry(c).frame_count; ++f) items.push_back({c, f});
    }
    return items;
}

Sample make_sample(const ClipDataset& data, const SampleItem& item, CollateMode mode, const SamplingConfig& cfg,
                   bool train, std::uint64_t seed) {
    const auto& entry = data.entry(item.clip);
    const auto frames = data.frames(item.clip);
    const auto& stats = stats_for(mode);
    Sample s;
    s.label = entry.label;
    s.clip_id = entry.clip_id;
    if (mode == CollateMode::image) {
        if (item.frame < 0 || item.frame >= static_cast<int>(frames.size()))
            throw std::out_of_range("make_sample: frame position out of range for clip " + entry.clip_id);
        const auto& f = frames[static_cast<std::size_t>(item.frame)];
        s.pixels = train ? train_transform_image(f, cfg.transform, stats, derive_seed({seed, 2}))
                         : eval_transform_image(f, cfg.transform, stats);
        return s;
    }
    const int n = static_cast<int>(frames.size());
    const auto idx = train ? sample_clip_window(n, entry.fps, cfg.num_frames, derive_seed({seed, 1}), cfg.window_seconds)
                           : center_clip_window(n, entry.fps, cfg.num_frames, cfg.window_seconds);
    std::vector<cv::Mat> picked;
    for (int i : idx) picked.push_back(frames[static_cast<std::size_t>(i)]);
    s.pixels = train ? train_transform_video(picked, cfg.transform, stats, derive_seed({seed, 2}))
                     : eval_transform_video(picked, cfg.transform, stats);
    return s;
}

Sample make_sequence_sample(const ClipDataset& data, std::size_t clip, const std::vector<int>& positions,
                            const SamplingConfig& cfg) {
    const auto& entry = data.entry(clip);
    const auto frames = data.frames(clip);
    std::vector<cv::Mat> picked;
    for (int i : positions) picked.push_back(frames.at(static_cast<std::size_t>(i)));
    return {eval_transform_video(picked, cfg.transform, stats_for(CollateMode::sequence)), entry.label, entry.clip_id};
}

}  // namespace seqcls
