#include "seqcls/trackio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

namespace seqcls {

using nlohmann::json;

std::string_view to_string(BoxSource source) { return source == BoxSource::detected ? "detected" : "predicted"; }

TrackFormatError::TrackFormatError(std::size_t line, const std::string& what)
    : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

void validate_track(const Track& track) {
    if (track.boxes.empty()) throw std::invalid_argument("track " + track.track_id + " has no boxes");
    if (!(track.fps > 0.0) || !std::isfinite(track.fps))
        throw std::invalid_argument("track " + track.track_id + " has non-positive fps");
    for (std::size_t i = 0; i < track.boxes.size(); ++i) {
        const auto& b = track.boxes[i];
        if (b.frame_index < 0) throw std::invalid_argument("negative frame index " + std::to_string(b.frame_index));
        if (b.width <= 0 || b.height <= 0)
            throw std::invalid_argument("nonpositive box dims at frame " + std::to_string(b.frame_index));
        if (!(b.score >= 0.0 && b.score <= 1.0))
            throw std::invalid_argument("score outside [0,1] at frame " + std::to_string(b.frame_index));
        if (i > 0) {
            const int prev = track.boxes[i - 1].frame_index;
            if (b.frame_index == prev) throw std::invalid_argument("duplicate frame " + std::to_string(prev));
            if (b.frame_index < prev)
                throw std::invalid_argument("unsorted frames: " + std::to_string(b.frame_index) + " after " +
                                            std::to_string(prev));
        }
    }
}

json track_to_json(const Track& track) {
    json boxes = json::array();
    for (const auto& b : track.boxes) {
        boxes.push_back({{"frame", b.frame_index},
                         {"x", b.x},
                         {"y", b.y},
                         {"w", b.width},
                         {"h", b.height},
                         {"source", std::string(to_string(b.source))},
                         {"score", b.score}});
    }
    return {{"video_id", track.video_id},
            {"track_id", track.track_id},
            {"fps", track.fps},
            {"label", std::string(to_string(track.label))},
            {"boxes", std::move(boxes)}};
}

namespace {

int pixel(const json& v, const char* key) {
    const auto& f = v.at(key);
    if (!f.is_number()) throw std::invalid_argument(std::string("field '") + key + "' is not a number");
    if (f.is_number_integer()) return f.get<int>();
    return static_cast<int>(std::lround(f.get<double>()));
}

std::string id_field(const json& v, const char* key) {
    const auto& f = v.at(key);
    if (f.is_string()) return f.get<std::string>();
    if (f.is_number_integer()) return std::to_string(f.get<long long>());
    throw std::invalid_argument(std::string("field '") + key + "' must be a string");
}

}  // namespace

Track track_from_json(const json& record) {
    if (!record.is_object()) throw std::invalid_argument("record is not an object");
    Track t;
    t.video_id = id_field(record, "video_id");
    t.track_id = id_field(record, "track_id");
    t.fps = record.at("fps").get<double>();
    const auto label_text = record.at("label").get<std::string>();
    const auto label = parse_label(label_text);
    if (!label) throw std::invalid_argument("unknown label \"" + label_text + "\"");
    t.label = *label;
    for (const auto& b : record.at("boxes")) {
        BoundingBox box;
        box.frame_index = b.at("frame").get<int>();
        box.x = pixel(b, "x");
        box.y = pixel(b, "y");
        box.width = pixel(b, "w");
        box.height = pixel(b, "h");
        const auto src = b.at("source").get<std::string>();
        if (src == "detected")
            box.source = BoxSource::detected;
        else if (src == "predicted")
            box.source = BoxSource::predicted;
        else
            throw std::invalid_argument("unknown box source \"" + src + "\"");
        box.score = b.contains("score") ? b.at("score").get<double>() : (box.predicted() ? 0.0 : 1.0);
        t.boxes.push_back(box);
    }
    validate_track(t);
    return t;
}

std::vector<Track> parse_tracks(std::istream& in) {
    std::vector<Track> tracks;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            tracks.push_back(track_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw TrackFormatError(number, std::string("malformed record: ") + e.what());
        } catch (const std::invalid_argument& e) {
            throw TrackFormatError(number, e.what());
        }
    }
    return tracks;
}

std::vector<Track> load_tracks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open track file " + path.string());
    return parse_tracks(in);
}

void write_tracks(std::ostream& out, const std::vector<Track>& tracks) {
    for (const auto& t : tracks) out << track_to_json(t).dump() << '\n';
}

void write_tracks(const std::filesystem::path& path, const std::vector<Track>& tracks) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write track file " + path.string());
    write_tracks(out, tracks);
}

namespace {

bool is_image_file(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

// Last run of digits in the file stem, if any.
std::optional<long long> frame_number(const std::filesystem::path& p) {
    const std::string stem = p.stem().string();
    auto end = stem.find_last_of("0123456789");
    if (end == std::string::npos) return std::nullopt;
    auto begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
    return std::stoll(stem.substr(begin, end - begin + 1));
}

}  // namespace

ImageDirectoryFrameStore::ImageDirectoryFrameStore(std::string video_id, const std::filesystem::path& dir)
    : video_id_(std::move(video_id)) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("frame directory not found: " + dir.string());
    std::map<long long, std::filesystem::path> numbered;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        if (auto n = frame_number(entry.path())) numbered.emplace(*n, entry.path());
    }
    if (numbered.empty()) return;
    const long long first = numbered.begin()->first;
    count_ = static_cast<int>(numbered.rbegin()->first - first + 1);
    files_.resize(static_cast<std::size_t>(count_));
    for (auto& [n, p] : numbered) files_[static_cast<std::size_t>(n - first)] = p;
}

bool ImageDirectoryFrameStore::has_frame(int index) const {
    return index >= 0 && index < count_ && !files_[static_cast<std::size_t>(index)].empty();
}

cv::Mat ImageDirectoryFrameStore::frame(int index) const {
    if (!has_frame(index))
        throw std::out_of_range("video " + video_id_ + ": frame " + std::to_string(index) + " missing");
    cv::Mat img = cv::imread(files_[static_cast<std::size_t>(index)].string(), cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("cannot decode " + files_[static_cast<std::size_t>(index)].string());
    return img;
}

VideoFileFrameStore::VideoFileFrameStore(std::string video_id, const std::filesystem::path& file)
    : video_id_(std::move(video_id)), capture_(file.string()) {
    if (!capture_.isOpened()) throw std::runtime_error("cannot open video " + file.string());
    count_ = static_cast<int>(capture_.get(cv::CAP_PROP_FRAME_COUNT));
}

cv::Mat VideoFileFrameStore::frame(int index) const {
    if (!has_frame(index))
        throw std::out_of_range("video " + video_id_ + ": frame " + std::to_string(index) + " missing");
    std::lock_guard lock(mutex_);
    if (index != next_index_) capture_.set(cv::CAP_PROP_POS_FRAMES, index);
    cv::Mat img;
    if (!capture_.read(img) || img.empty())
        throw std::out_of_range("video " + video_id_ + ": cannot decode frame " + std::to_string(index));
    next_index_ = index + 1;
    return img;
}

InMemoryFrameStore::InMemoryFrameStore(std::string video_id, std::vector<cv::Mat> frames)
    : video_id_(std::move(video_id)), frames_(std::move(frames)) {}

cv::Mat InMemoryFrameStore::frame(int index) const {
    if (!has_frame(index))
        throw std::out_of_range("video " + video_id_ + ": frame " + std::to_string(index) + " missing");
    return frames_[static_cast<std::size_t>(index)];
}

std::unique_ptr<VideoFrameStore> open_frame_store(const std::filesystem::path& root, const std::string& video_id) {
    const auto dir = root / video_id;
    if (std::filesystem::is_directory(dir)) return std::make_unique<ImageDirectoryFrameStore>(video_id, dir);
    for (const char* ext : {".mp4", ".avi", ".mkv", ".mov", ".MP4", ".AVI"}) {
        auto file = root / (video_id + ext);
        if (std::filesystem::is_regular_file(file)) return std::make_unique<VideoFileFrameStore>(video_id, file);
    }
    throw std::runtime_error("no frames for video " + video_id + " under " + root.string());
}

cv::Mat crop_box(const cv::Mat& frame, const BoundingBox& box) {
    if (box.width <= 0 || box.height <= 0) throw std::invalid_argument("crop_box: nonpositive box dims");
    const cv::Rect want(box.x, box.y, box.width, box.height);
    const cv::Rect inside = want & cv::Rect(0, 0, frame.cols, frame.rows);
    if (inside.empty())
        throw std::invalid_argument("crop_box: box at frame " + std::to_string(box.frame_index) +
                                    " lies fully outside the frame");
    cv::Mat out = cv::Mat::zeros(box.height, box.width, frame.type());
    frame(inside).copyTo(out(cv::Rect(inside.x - box.x, inside.y - box.y, inside.width, inside.height)));
    return out;
}

cv::Mat crop_box(const VideoFrameStore& store, const BoundingBox& box) {
    return crop_box(store.frame(box.frame_index), box);
}

}  // namespace seqcls
