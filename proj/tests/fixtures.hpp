#pragma once

// Small on-disk clip datasets for module tests.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "seqcls/clipsampling.hpp"
#include "seqcls/seqdataset.hpp"

namespace seqcls::testing {

// Drone clips are dark, bird clips are bright; `noise` adds uniform per-pixel
// noise of that amplitude. Clips named "<prefix>N" belong to video "<prefix>".
inline std::vector<SequenceClip> write_flat_clips(const std::filesystem::path& root, const std::string& prefix,
                                                  Split split, int drones, int birds, int frames, int noise = 0) {
    cv::RNG rng(static_cast<std::uint64_t>(std::hash<std::string>{}(prefix)));
    std::vector<SequenceClip> clips;
    for (int c = 0; c < drones + birds; ++c) {
        SequenceClip clip;
        clip.clip_id = prefix + std::to_string(c);
        clip.video_id = prefix;
        clip.track_id = clip.clip_id;
        clip.label = c < drones ? Label::drone : Label::bird;
        clip.fps = 30;
        clip.target_size = {10, 10};
        for (int f = 0; f < frames; ++f) {
            clip.frame_indices.push_back(f);
            clip.sources.push_back(BoxSource::detected);
            const int base = clip.label == Label::drone ? 0 : 255;
            cv::Mat img(10, 10, CV_8UC3, cv::Scalar::all(base));
            if (noise > 0) {
                cv::Mat n(10, 10, CV_16SC3);
                rng.fill(n, cv::RNG::UNIFORM, 0, noise + 1);
                img.convertTo(img, CV_16SC3);
                img = base == 0 ? img + n : img - n;
                img.convertTo(img, CV_8UC3);
            }
            clip.frames.push_back(img);
        }
        write_clip(clip, root, split);
        clip.frames.clear();
        clips.push_back(clip);
    }
    return clips;
}

inline ClipDataset make_flat_dataset(const std::filesystem::path& root, int drones, int birds, int frames) {
    std::filesystem::remove_all(root);
    const auto clips = write_flat_clips(root, "v", Split::val, drones, birds, frames);
    return ClipDataset(build_manifest(clips, {{"v", Split::val}}), root, Split::val);
}

// 8x8 crops from 10x10 frames.
inline SamplingConfig small_sampling(int num_frames = 4) {
    SamplingConfig s;
    s.num_frames = num_frames;
    s.transform = {8, 8, 10, 8, 0.5};
    return s;
}

}  // namespace seqcls::testing
