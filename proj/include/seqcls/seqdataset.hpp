#pragma once

// Track -> labeled clip dataset.
//
// A track is cut into segments wherever the tracker coasted (predicted-only
// boxes) for `gap_threshold` or more consecutive boxes. Those long runs are
// dropped; shorter runs stay inside their segment, including runs at the very
// start or end of the track. Every crop of every segment is stretched to the
// largest box (by area) of the whole track.
//
// Storage layout under a dataset root:
//   manifest.json
//   <split>/<label>/<clip_id>/meta.json
//   <split>/<label>/<clip_id>/frame_000001.png ...

#include <array>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "seqcls/trackio.hpp"
#include "seqcls/types.hpp"

namespace seqcls {

inline constexpr int kDefaultGapThreshold = 10;
inline constexpr int kNoGapLimit = std::numeric_limits<int>::max();

using FrameSegment = std::vector<int>;

std::vector<FrameSegment> split_track(const Track& track, int gap_threshold = kDefaultGapThreshold);

// Box with the largest area; ties go to the larger width, then the earliest frame.
cv::Size largest_box_size(const Track& track);

struct SequenceClip {
    std::string clip_id;
    std::string video_id;
    std::string track_id;
    Label label = Label::drone;
    double fps = 0.0;
    cv::Size target_size;
    std::vector<int> frame_indices;
    std::vector<BoxSource> sources;  // parallel to frame_indices
    std::vector<cv::Mat> frames;     // crops at target_size; may be empty once stored
};

// Longest run of consecutive predicted boxes in the clip.
int longest_predicted_run(const SequenceClip& clip);

std::string make_clip_id(const Track& track, std::size_t segment);

std::vector<SequenceClip> export_clips(const Track& track, const VideoFrameStore& store,
                                       int gap_threshold = kDefaultGapThreshold);

// Direct stretch with bilinear interpolation; no aspect-preserving padding.
cv::Mat stretch_to(const cv::Mat& image, cv::Size size);

std::filesystem::path clip_relative_dir(Split split, Label label, const std::string& clip_id);
std::string frame_file_name(std::size_t position);  // 0-based position -> frame_000001.png

nlohmann::json clip_meta_to_json(const SequenceClip& clip);
SequenceClip clip_meta_from_json(const nlohmann::json& meta);

// Writes meta.json and lossless PNG frames; returns the clip directory.
std::filesystem::path write_clip(const SequenceClip& clip, const std::filesystem::path& dataset_root, Split split);
// Metadata only; frames stay empty.
SequenceClip read_clip_meta(const std::filesystem::path& clip_dir);
std::vector<cv::Mat> read_clip_frames(const std::filesystem::path& clip_dir, std::size_t count);

struct ClipEntry {
    std::string clip_id;
    std::string video_id;
    std::string track_id;
    Label label = Label::drone;
    Split split = Split::train;
    int frame_count = 0;
    cv::Size target_size;
    double fps = 0.0;
    std::string path;  // relative to the dataset root

    bool operator==(const ClipEntry&) const = default;
};

struct LabelStats {
    int sequences = 0;
    long long frames = 0;
    bool operator==(const LabelStats&) const = default;
};

struct DatasetStats {
    // [split][label]
    std::array<std::array<LabelStats, kNumClasses>, 2> counts{};

    const LabelStats& at(Split s, Label l) const {
        return counts[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)];
    }
    LabelStats& at(Split s, Label l) { return counts[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)]; }
    long long frames(Split s) const { return at(s, Label::drone).frames + at(s, Label::bird).frames; }
    bool operator==(const DatasetStats&) const = default;
};

struct DatasetManifest {
    std::vector<ClipEntry> clips;
    std::map<std::string, Split> split_map;  // clip_id -> split
    DatasetStats stats;
    int gap_threshold = kDefaultGapThreshold;

    std::vector<const ClipEntry*> entries(Split split) const;
};

using VideoSplitMap = std::map<std::string, Split>;  // video_id -> split

DatasetStats compute_stats(const std::vector<ClipEntry>& clips);

// Split is inherited from the clip's source video. Throws
// std::invalid_argument on an unmapped video id.
DatasetManifest build_manifest(const std::vector<SequenceClip>& clips, const VideoSplitMap& split_map,
                               int gap_threshold = kDefaultGapThreshold);

// Empty iff every manifest invariant holds.
std::vector<std::string> verify_manifest(const DatasetManifest& manifest);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& doc);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Exports every track's clips from <frames_root>/<video_id>, writes them under
// out_root and saves out_root/manifest.json. Throws std::runtime_error when a
// video is missing or the manifest fails verification.
DatasetManifest build_dataset(const std::vector<Track>& tracks, const std::filesystem::path& frames_root,
                              const VideoSplitMap& split_map, const std::filesystem::path& out_root,
                              int gap_threshold = kDefaultGapThreshold);

// {"train": ["video_a", ...], "val": [...]} or {"video_a": "train", ...}.
VideoSplitMap load_split_file(const std::filesystem::path& path);
VideoSplitMap split_map_from_json(const nlohmann::json& doc);

}  // namespace seqcls
