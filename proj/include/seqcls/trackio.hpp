#pragma once

// Tracker output ingestion.
//
// Track file: one JSON object per line,
//   {"video_id": "...", "track_id": "...", "fps": 25.0, "label": "drone"|"bird",
//    "boxes": [{"frame": 0, "x": 10, "y": 12, "w": 20, "h": 16,
//               "source": "detected"|"predicted", "score": 0.91}, ...]}
// Blank lines are ignored. Box coordinates are integer pixels; non-integer
// values are rounded to the nearest pixel on load.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/videoio.hpp>

#include "json.hpp"
#include "seqcls/types.hpp"

namespace seqcls {

enum class BoxSource { detected, predicted };

std::string_view to_string(BoxSource source);

struct BoundingBox {
    int frame_index = 0;
    int x = 0;  // top-left corner; may lie outside the frame
    int y = 0;
    int width = 1;
    int height = 1;
    BoxSource source = BoxSource::detected;
    double score = 1.0;

    bool predicted() const { return source == BoxSource::predicted; }
    long long area() const { return static_cast<long long>(width) * height; }
    bool operator==(const BoundingBox&) const = default;
};

struct Track {
    std::string video_id;
    std::string track_id;
    double fps = 0.0;
    Label label = Label::drone;
    std::vector<BoundingBox> boxes;

    bool operator==(const Track&) const = default;
};

// Carries the 1-based line number of the offending record (0 when unknown).
class TrackFormatError : public std::runtime_error {
public:
    TrackFormatError(std::size_t line, const std::string& what);
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// Throws std::invalid_argument describing the first violated invariant.
void validate_track(const Track& track);

nlohmann::json track_to_json(const Track& track);
Track track_from_json(const nlohmann::json& record);

std::vector<Track> parse_tracks(std::istream& in);
std::vector<Track> load_tracks(const std::filesystem::path& path);
void write_tracks(std::ostream& out, const std::vector<Track>& tracks);
void write_tracks(const std::filesystem::path& path, const std::vector<Track>& tracks);

// Random access to the frames of one video. Frames are 8-bit BGR.
class VideoFrameStore {
public:
    virtual ~VideoFrameStore() = default;
    virtual const std::string& video_id() const = 0;
    virtual int frame_count() const = 0;
    virtual bool has_frame(int index) const = 0;
    // Throws std::out_of_range when the frame does not exist.
    virtual cv::Mat frame(int index) const = 0;
};

// Directory of zero-padded numbered images (e.g. frame_000001.png). The file
// with the smallest number is frame 0; numbering gaps are missing frames.
// Safe for concurrent reads.
class ImageDirectoryFrameStore final : public VideoFrameStore {
public:
    ImageDirectoryFrameStore(std::string video_id, const std::filesystem::path& dir);
    const std::string& video_id() const override { return video_id_; }
    int frame_count() const override { return count_; }
    bool has_frame(int index) const override;
    cv::Mat frame(int index) const override;

private:
    std::string video_id_;
    std::vector<std::filesystem::path> files_;  // indexed by frame, empty path = missing
    int count_ = 0;
};

// Video container decoded by frame index. Reads are serialized internally, so
// concurrent callers are safe but do not run in parallel.
class VideoFileFrameStore final : public VideoFrameStore {
public:
    VideoFileFrameStore(std::string video_id, const std::filesystem::path& file);
    const std::string& video_id() const override { return video_id_; }
    int frame_count() const override { return count_; }
    bool has_frame(int index) const override { return index >= 0 && index < count_; }
    cv::Mat frame(int index) const override;

private:
    std::string video_id_;
    mutable std::mutex mutex_;
    mutable cv::VideoCapture capture_;
    mutable int next_index_ = 0;
    int count_ = 0;
};

class InMemoryFrameStore final : public VideoFrameStore {
public:
    InMemoryFrameStore(std::string video_id, std::vector<cv::Mat> frames);
    const std::string& video_id() const override { return video_id_; }
    int frame_count() const override { return static_cast<int>(frames_.size()); }
    bool has_frame(int index) const override { return index >= 0 && index < frame_count(); }
    cv::Mat frame(int index) const override;

private:
    std::string video_id_;
    std::vector<cv::Mat> frames_;
};

// Looks for <root>/<video_id>/ (image directory) or <root>/<video_id>.<ext>
// (mp4, avi, mkv, mov).
std::unique_ptr<VideoFrameStore> open_frame_store(const std::filesystem::path& root, const std::string& video_id);

// Returns a box.width x box.height crop; parts outside the frame are zero.
cv::Mat crop_box(const cv::Mat& frame, const BoundingBox& box);
cv::Mat crop_box(const VideoFrameStore& store, const BoundingBox& box);

}  // namespace seqcls
