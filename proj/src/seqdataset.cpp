#include "seqcls/seqdataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace seqcls {

using nlohmann::json;

std::vector<FrameSegment> split_track(const Track& track, int gap_threshold) {
    if (gap_threshold < 1) throw std::invalid_argument("gap_threshold must be >= 1");
    std::vector<FrameSegment> segments;
    FrameSegment current;
    FrameSegment pending;  // predicted run not yet known to be short
    bool dropping = false;

    auto close_current = [&] {
        if (!current.empty()) segments.push_back(std::move(current));
        current.clear();
    };

    for (const auto& box : track.boxes) {
        if (!box.predicted()) {
            current.insert(current.end(), pending.begin(), pending.end());
            pending.clear();
            dropping = false;
            current.push_back(box.frame_index);
            continue;
        }
        if (dropping) continue;
        pending.push_back(box.frame_index);
        if (static_cast<int>(pending.size()) >= gap_threshold) {
            pending.clear();
            dropping = true;
            close_current();
        }
    }
    current.insert(current.end(), pending.begin(), pending.end());
    close_current();
    return segments;
}

cv::Size largest_box_size(const Track& track) {
    if (track.boxes.empty()) throw std::invalid_argument("largest_box_size: empty track");
    const BoundingBox* best = &track.boxes.front();
    for (const auto& b : track.boxes) {
        if (b.area() > best->area() || (b.area() == best->area() && b.width > best->width)) best = &b;
    }
    return {best->width, best->height};
}

int longest_predicted_run(const SequenceClip& clip) {
    int best = 0, run = 0;
    for (auto s : clip.sources) {
        run = s == BoxSource::predicted ? run + 1 : 0;
        best = std::max(best, run);
    }
    return best;
}

namespace {
std::string sanitize(const std::string& s) {
    std::string out = s;
    for (auto& c : out)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
    return out;
}
}  // namespace

std::string make_clip_id(const Track& track, std::size_t segment) {
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "s%03zu", segment);
    return sanitize(track.video_id) + "__" + sanitize(track.track_id) + "__" + suffix;
}

cv::Mat stretch_to(const cv::Mat& image, cv::Size size) {
    if (image.size() == size) return image.clone();
    cv::Mat out;
    cv::resize(image, out, size, 0, 0, cv::INTER_LINEAR);
    return out;
}

std::vector<SequenceClip> export_clips(const Track& track, const VideoFrameStore& store, int gap_threshold) {
    const cv::Size target = largest_box_size(track);
    const auto segments = split_track(track, gap_threshold);
    std::vector<SequenceClip> clips;
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        SequenceClip clip;
        clip.clip_id = make_clip_id(track, s);
        clip.video_id = track.video_id;
        clip.track_id = track.track_id;
        clip.label = track.label;
        clip.fps = track.fps;
        clip.target_size = target;
        for (int frame : segments[s]) {
            while (track.boxes[cursor].frame_index != frame) ++cursor;
            const auto& box = track.boxes[cursor];
            clip.frame_indices.push_back(frame);
            clip.sources.push_back(box.source);
            clip.frames.push_back(stretch_to(crop_box(store, box), target));
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

std::filesystem::path clip_relative_dir(Split split, Label label, const std::string& clip_id) {
    return std::filesystem::path(std::string(to_string(split))) / std::string(to_string(label)) / clip_id;
}

std::string frame_file_name(std::size_t position) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%06zu.png", position + 1);
    return name;
}

json clip_meta_to_json(const SequenceClip& clip) {
    json sources = json::array();
    for (auto s : clip.sources) sources.push_back(std::string(to_string(s)));
    return {{"clip_id", clip.clip_id},
            {"video_id", clip.video_id},
            {"track_id", clip.track_id},
            {"label", std::string(to_string(clip.label))},
            {"fps", clip.fps},
            {"target_size", {clip.target_size.width, clip.target_size.height}},
            {"frame_indices", clip.frame_indices},
            {"sources", sources}};
}

SequenceClip clip_meta_from_json(const json& meta) {
    SequenceClip clip;
    clip.clip_id = meta.at("clip_id").get<std::string>();
    clip.video_id = meta.at("video_id").get<std::string>();
    clip.track_id = meta.at("track_id").get<std::string>();
    const auto label = parse_label(meta.at("label").get<std::string>());
    if (!label) throw std::invalid_argument("clip " + clip.clip_id + ": unknown label");
    clip.label = *label;
    clip.fps = meta.at("fps").get<double>();
    clip.target_size = {meta.at("target_size").at(0).get<int>(), meta.at("target_size").at(1).get<int>()};
    clip.frame_indices = meta.at("frame_indices").get<std::vector<int>>();
    for (const auto& s : meta.at("sources"))
        clip.sources.push_back(s.get<std::string>() == "predicted" ? BoxSource::predicted : BoxSource::detected);
    if (clip.sources.size() != clip.frame_indices.size())
        throw std::invalid_argument("clip " + clip.clip_id + ": sources and frame_indices differ in length");
    return clip;
}

std::filesystem::path write_clip(const SequenceClip& clip, const std::filesystem::path& dataset_root, Split split) {
    const auto dir = dataset_root / clip_relative_dir(split, clip.label, clip.clip_id);
    std::filesystem::create_directories(dir);
    if (clip.frames.size() != clip.frame_indices.size())
        throw std::invalid_argument("write_clip: clip " + clip.clip_id + " frames do not match frame indices");
    for (std::size_t i = 0; i < clip.frames.size(); ++i) {
        if (clip.frames[i].size() != clip.target_size)
            throw std::invalid_argument("write_clip: clip " + clip.clip_id + " has a crop of the wrong size");
        if (!cv::imwrite((dir / frame_file_name(i)).string(), clip.frames[i]))
            throw std::runtime_error("cannot write " + (dir / frame_file_name(i)).string());
    }
    std::ofstream meta(dir / "meta.json");
    meta << clip_meta_to_json(clip).dump(1) << '\n';
    if (!meta) throw std::runtime_error("cannot write " + (dir / "meta.json").string());
    return dir;
}

SequenceClip read_clip_meta(const std::filesystem::path& clip_dir) {
    std::ifstream in(clip_dir / "meta.json");
    if (!in) throw std::runtime_error("missing clip metadata in " + clip_dir.string());
    return clip_meta_from_json(json::parse(in));
}

std::vector<cv::Mat> read_clip_frames(const std::filesystem::path& clip_dir, std::size_t count) {
    std::vector<cv::Mat> frames;
    frames.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto file = clip_dir / frame_file_name(i);
        cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
        if (img.empty()) throw std::runtime_error("cannot read clip frame " + file.string());
        frames.push_back(std::move(img));
    }
    return frames;
}

std::vector<const ClipEntry*> DatasetManifest::entries(Split split) const {
    std::vector<const ClipEntry*> out;
    for (const auto& c : clips)
        if (c.split == split) out.push_back(&c);
    return out;
}

DatasetStats compute_stats(const std::vector<ClipEntry>& clips) {
    DatasetStats stats;
    for (const auto& c : clips) {
        auto& s = stats.at(c.split, c.label);
        s.sequences += 1;
        s.frames += c.frame_count;
    }
    return stats;
}

DatasetManifest build_manifest(const std::vector<SequenceClip>& clips, const VideoSplitMap& split_map,
                               int gap_threshold) {
    DatasetManifest m;
    m.gap_threshold = gap_threshold;
    for (const auto& clip : clips) {
        auto it = split_map.find(clip.video_id);
        if (it == split_map.end())
            throw std::invalid_argument("video " + clip.video_id + " (clip " + clip.clip_id +
                                        ") is not in the split map");
        ClipEntry e;
        e.clip_id = clip.clip_id;
        e.video_id = clip.video_id;
        e.track_id = clip.track_id;
        e.label = clip.label;
        e.split = it->second;
        e.frame_count = static_cast<int>(clip.frame_indices.size());
        e.target_size = clip.target_size;
        e.fps = clip.fps;
        e.path = clip_relative_dir(e.split, e.label, e.clip_id).generic_string();
        m.split_map[e.clip_id] = e.split;
        m.clips.push_back(std::move(e));
    }
    m.stats = compute_stats(m.clips);
    return m;
}

std::vector<std::string> verify_manifest(const DatasetManifest& manifest) {
    std::vector<std::string> issues;
    std::map<std::string, Split> seen;
    for (const auto& c : manifest.clips) {
        auto [it, fresh] = seen.emplace(c.clip_id, c.split);
        if (!fresh) {
            issues.push_back(it->second != c.split ? "duplicate split assignment: " + c.clip_id
                                                   : "duplicate clip id: " + c.clip_id);
        }
        auto m = manifest.split_map.find(c.clip_id);
        if (m == manifest.split_map.end())
            issues.push_back("unassigned clip: " + c.clip_id);
        else if (m->second != c.split)
            issues.push_back("duplicate split assignment: " + c.clip_id + " listed as " +
                             std::string(to_string(c.split)) + " but mapped to " + std::string(to_string(m->second)));
        if (c.frame_count < 1) issues.push_back("empty clip: " + c.clip_id);
        if (c.target_size.width <= 0 || c.target_size.height <= 0) issues.push_back("bad target size: " + c.clip_id);
    }
    for (const auto& [id, _] : manifest.split_map)
        if (!seen.count(id)) issues.push_back("split map entry without clip: " + id);
    if (!(compute_stats(manifest.clips) == manifest.stats)) issues.push_back("stale stats");
    return issues;
}

json manifest_to_json(const DatasetManifest& manifest) {
    json clips = json::array();
    for (const auto& c : manifest.clips) {
        clips.push_back({{"id", c.clip_id},
                         {"video_id", c.video_id},
                         {"track_id", c.track_id},
                         {"label", std::string(to_string(c.label))},
                         {"split", std::string(to_string(c.split))},
                         {"frame_count", c.frame_count},
                         {"target_size", {c.target_size.width, c.target_size.height}},
                         {"fps", c.fps},
                         {"path", c.path}});
    }
    json split_map = json::object();
    for (const auto& [id, s] : manifest.split_map) split_map[id] = std::string(to_string(s));
    json stats = json::object();
    for (auto s : kSplits) {
        json per = json::object();
        for (auto l : kLabels) {
            const auto& st = manifest.stats.at(s, l);
            per[std::string(to_string(l))] = {{"sequences", st.sequences}, {"frames", st.frames}};
        }
        stats[std::string(to_string(s))] = per;
    }
    return {{"gap_threshold", manifest.gap_threshold}, {"clips", clips}, {"split_map", split_map}, {"stats", stats}};
}

DatasetManifest manifest_from_json(const json& doc) {
    DatasetManifest m;
    m.gap_threshold = doc.value("gap_threshold", kDefaultGapThreshold);
    for (const auto& c : doc.at("clips")) {
        ClipEntry e;
        e.clip_id = c.at("id").get<std::string>();
        e.video_id = c.at("video_id").get<std::string>();
        e.track_id = c.at("track_id").get<std::string>();
        const auto label = parse_label(c.at("label").get<std::string>());
        const auto split = parse_split(c.at("split").get<std::string>());
        if (!label || !split) throw std::invalid_argument("manifest clip " + e.clip_id + ": bad label or split");
        e.label = *label;
        e.split = *split;
        e.frame_count = c.at("frame_count").get<int>();
        e.target_size = {c.at("target_size").at(0).get<int>(), c.at("target_size").at(1).get<int>()};
        e.fps = c.at("fps").get<double>();
        e.path = c.at("path").get<std::string>();
        m.clips.push_back(std::move(e));
    }
    for (const auto& [id, s] : doc.at("split_map").items()) {
        const auto split = parse_split(s.get<std::string>());
        if (!split) throw std::invalid_argument("manifest split map: bad split for " + id);
        m.split_map[id] = *split;
    }
    for (auto s : kSplits)
        for (auto l : kLabels) {
            const auto& st = doc.at("stats").at(std::string(to_string(s))).at(std::string(to_string(l)));
            m.stats.at(s, l) = {st.at("sequences").get<int>(), st.at("frames").get<long long>()};
        }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path);
    out << manifest_to_json(manifest).dump(1) << '\n';
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    return manifest_from_json(json::parse(in));
}

DatasetManifest build_dataset(const std::vector<Track>& tracks, const std::filesystem::path& frames_root,
                              const VideoSplitMap& split_map, const std::filesystem::path& out_root,
                              int gap_threshold) {
    std::vector<SequenceClip> clips;
    std::map<std::string, std::unique_ptr<VideoFrameStore>> stores;
    for (const auto& track : tracks) {
        auto split = split_map.find(track.video_id);
        if (split == split_map.end())
            throw std::invalid_argument("video " + track.video_id + " (track " + track.track_id +
                                        ") is not assigned to a split");
        auto& store = stores[track.video_id];
        if (!store) store = open_frame_store(frames_root, track.video_id);
        for (auto& clip : export_clips(track, *store, gap_threshold)) {
            write_clip(clip, out_root, split->second);
            clip.frames.clear();
            clips.push_back(std::move(clip));
        }
    }
    auto manifest = build_manifest(clips, split_map, gap_threshold);
    const auto issues = verify_manifest(manifest);
    if (!issues.empty()) {
        std::string msg = "manifest verification failed:";
        for (const auto& i : issues) msg += "\n  " + i;
        throw std::runtime_error(msg);
    }
    save_manifest(manifest, out_root / "manifest.json");
    return manifest;
}

VideoSplitMap split_map_from_json(const json& doc) {
    VideoSplitMap out;
    if (!doc.is_object()) throw std::invalid_argument("split file must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
        if (value.is_array()) {
            const auto split = parse_split(key);
            if (!split) throw std::invalid_argument("split file: unknown split \"" + key + "\"");
            for (const auto& v : value) {
                const auto id = v.get<std::string>();
                if (auto [it, fresh] = out.emplace(id, *split); !fresh && it->second != *split)
                    throw std::invalid_argument("split file: video " + id + " listed in both splits");
            }
        } else {
            const auto split = parse_split(value.get<std::string>());
            if (!split) throw std::invalid_argument("split file: bad split for video " + key);
            out[key] = *split;
        }
    }
    return out;
}

VideoSplitMap load_split_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open split file " + path.string());
    return split_map_from_json(json::parse(in));
}

}  // namespace seqcls
