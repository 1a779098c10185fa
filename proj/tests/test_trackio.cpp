#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "doctest.h"
#include "seqcls/trackio.hpp"

using namespace seqcls;

namespace {

std::string record_line(const std::string& label, const std::vector<int>& frames) {
    std::string boxes;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        if (i) boxes += ",";
        boxes += R"({"frame":)" + std::to_string(frames[i]) +
                 R"(,"x":10,"y":12,"w":20,"h":16,"source":"detected","score":0.9})";
    }
    return R"({"video_id":"v1","track_id":"t1","fps":30,"label":")" + label + R"(","boxes":[)" + boxes + "]}";
}

std::string error_of(const std::string& text) {
    std::istringstream in(text);
    try {
        parse_tracks(in);
    } catch (const TrackFormatError& e) {
        return e.what();
    }
    return "";
}

cv::Mat gradient_frame(int w, int h) {
    cv::Mat m(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.at<cv::Vec3b>(y, x) = {uchar(x), uchar(y), uchar((x + 2 * y) % 256)};
    return m;
}

// Copies pixel by pixel, writing zero wherever the source coordinate is off-frame.
cv::Mat crop_oracle(const cv::Mat& frame, const BoundingBox& b) {
    cv::Mat out(b.height, b.width, CV_8UC3);
    for (int r = 0; r < b.height; ++r)
        for (int c = 0; c < b.width; ++c) {
            const int sx = b.x + c, sy = b.y + r;
            const bool in = sx >= 0 && sy >= 0 && sx < frame.cols && sy < frame.rows;
            out.at<cv::Vec3b>(r, c) = in ? frame.at<cv::Vec3b>(sy, sx) : cv::Vec3b(0, 0, 0);
        }
    return out;
}

bool same_pixels(const cv::Mat& a, const cv::Mat& b) {
    return a.size() == b.size() && a.type() == b.type() && cv::countNonZero(cv::Mat(a != b).reshape(1)) == 0;
}

}  // namespace

TEST_CASE("one record with three detected boxes") {
    std::istringstream in(record_line("drone", {0, 1, 2}));
    const auto tracks = parse_tracks(in);
    REQUIRE(tracks.size() == 1);
    CHECK(tracks[0].boxes.size() == 3);
    CHECK(tracks[0].label == Label::drone);
    CHECK(tracks[0].fps == 30.0);
    CHECK(tracks[0].boxes[1].frame_index == 1);
    CHECK(tracks[0].boxes[1].width == 20);
}

TEST_CASE("rejected records") {
    CHECK(error_of(record_line("plane", {0, 1})).find("unknown label") != std::string::npos);
    CHECK(error_of(record_line("bird", {5, 5, 6})).find("duplicate frame") != std::string::npos);
    CHECK(error_of(record_line("bird", {5, 4})).find("unsorted frames") != std::string::npos);

    std::string zero_width = record_line("bird", {0});
    zero_width.replace(zero_width.find("\"w\":20"), 6, "\"w\":0");
    CHECK(error_of(zero_width).find("nonpositive box dims") != std::string::npos);

    const std::string three_lines = record_line("bird", {0}) + "\n\n" + "{\"video_id\": oops\n";
    const auto msg = error_of(three_lines);
    CHECK(msg.rfind("line 3:", 0) == 0);
    CHECK(msg.find("malformed record") != std::string::npos);
}

TEST_CASE("track file round trip") {
    std::mt19937 rng(7);
    std::vector<Track> tracks;
    for (int t = 0; t < 20; ++t) {
        Track tr{"video_" + std::to_string(t % 3), "track_" + std::to_string(t), 25.0 + t, t % 2 ? Label::bird : Label::drone, {}};
        int frame = static_cast<int>(rng() % 5);
        for (int i = 0; i < 1 + static_cast<int>(rng() % 30); ++i) {
            BoundingBox b;
            b.frame_index = frame;
            frame += 1 + static_cast<int>(rng() % 3);
            b.x = static_cast<int>(rng() % 200) - 20;
            b.y = static_cast<int>(rng() % 200) - 20;
            b.width = 1 + static_cast<int>(rng() % 60);
            b.height = 1 + static_cast<int>(rng() % 60);
            b.source = rng() % 3 == 0 ? BoxSource::predicted : BoxSource::detected;
            b.score = b.predicted() ? 0.0 : (rng() % 1000) / 1000.0;
            tr.boxes.push_back(b);
        }
        tracks.push_back(tr);
    }
    std::ostringstream first;
    write_tracks(first, tracks);
    std::istringstream in(first.str());
    const auto loaded = parse_tracks(in);
    CHECK(loaded == tracks);
    std::ostringstream second;
    write_tracks(second, loaded);
    CHECK(second.str() == first.str());
}

TEST_CASE("crop interior box") {
    const cv::Mat frame = gradient_frame(100, 100);
    BoundingBox b;
    b.x = 10, b.y = 10, b.width = 20, b.height = 20;
    const cv::Mat crop = crop_box(frame, b);
    CHECK(crop.cols == 20);
    CHECK(crop.rows == 20);
    CHECK(same_pixels(crop, crop_oracle(frame, b)));
}

TEST_CASE("crop box hanging off the left edge") {
    const cv::Mat frame = gradient_frame(100, 100);
    BoundingBox b;
    b.x = -5, b.y = 0, b.width = 10, b.height = 10;
    const cv::Mat crop = crop_box(frame, b);
    REQUIRE(crop.size() == cv::Size(10, 10));
    CHECK(same_pixels(crop, crop_oracle(frame, b)));
    CHECK(cv::countNonZero(crop(cv::Rect(0, 0, 5, 10)).clone().reshape(1)) == 0);
}

TEST_CASE("crop dims always equal box dims") {
    const cv::Mat frame = gradient_frame(64, 48);
    std::mt19937 rng(3);
    for (int i = 0; i < 300; ++i) {
        BoundingBox b;
        b.width = 1 + static_cast<int>(rng() % 40);
        b.height = 1 + static_cast<int>(rng() % 40);
        b.x = static_cast<int>(rng() % 100) - 40;
        b.y = static_cast<int>(rng() % 90) - 40;
        const cv::Rect inter = cv::Rect(b.x, b.y, b.width, b.height) & cv::Rect(0, 0, 64, 48);
        if (inter.empty()) {
            CHECK_THROWS_AS(crop_box(frame, b), std::invalid_argument);
            continue;
        }
        const cv::Mat crop = crop_box(frame, b);
        CHECK(crop.size() == cv::Size(b.width, b.height));
        CHECK(same_pixels(crop, crop_oracle(frame, b)));
    }
}

TEST_CASE("crop errors") {
    const cv::Mat frame = gradient_frame(100, 100);
    BoundingBox b;
    b.x = 150, b.y = 150, b.width = 10, b.height = 10;
    CHECK_THROWS_AS(crop_box(frame, b), std::invalid_argument);

    InMemoryFrameStore store("v", {frame});
    b.x = 0, b.y = 0, b.frame_index = 3;
    CHECK_THROWS_AS(crop_box(store, b), std::out_of_range);
}

TEST_CASE("image directory frame store") {
    const auto dir = std::filesystem::temp_directory_path() / "seqcls_test_frames";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir / "clip_a");
    for (int i : {1, 2, 4}) {
        char name[32];
        std::snprintf(name, sizeof name, "img_%05d.png", i);
        cv::imwrite((dir / "clip_a" / name).string(), cv::Mat(8, 6, CV_8UC3, cv::Scalar(i, i, i)));
    }
    const auto store = open_frame_store(dir, "clip_a");
    CHECK(store->frame_count() == 4);
    CHECK(store->has_frame(0));
    CHECK_FALSE(store->has_frame(2));
    CHECK(store->frame(3).at<cv::Vec3b>(0, 0)[0] == 4);
    CHECK_THROWS_AS(store->frame(2), std::out_of_range);
    CHECK_THROWS(open_frame_store(dir, "missing"));
    std::filesystem::remove_all(dir);
}
