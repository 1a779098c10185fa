#include "seqcls/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace seqcls {

using nlohmann::json;
using nn::Tensor;

long long ConfusionMatrix::total() const {
    long long t = 0;
    for (const auto& row : counts)
        for (auto v : row) t += v;
    return t;
}

long long ConfusionMatrix::support(Label truth) const {
    long long t = 0;
    for (auto v : counts[static_cast<std::size_t>(index_of(truth))]) t += v;
    return t;
}

ConfusionMatrix confusion(const std::vector<Label>& predictions, const std::vector<Label>& labels) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(labels.size()) + " labels");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i)
        ++cm.counts[static_cast<std::size_t>(index_of(labels[i]))][static_cast<std::size_t>(index_of(predictions[i]))];
    return cm;
}

namespace {
double class_f1(const ConfusionMatrix& cm, Label c) {
    const long long tp = cm.at(c, c);
    long long fp = 0, fn = 0;
    for (auto other : kLabels) {
        if (other == c) continue;
        fp += cm.at(other, c);
        fn += cm.at(c, other);
    }
    // Harmonic mean of precision and recall as one division, so the result is
    // the correctly rounded ratio. Zero when precision and recall are both 0/0.
    const long long denom = 2 * tp + fp + fn;
    return denom ? static_cast<double>(2 * tp) / static_cast<double>(denom) : 0.0;
}
}  // namespace

F1Scores f1_scores(const ConfusionMatrix& cm) {
    F1Scores s;
    s.drone = class_f1(cm, Label::drone);
    s.bird = class_f1(cm, Label::bird);
    s.macro = (s.drone + s.bird) / 2.0;
    return s;
}

std::string_view to_string(Granularity g) { return g == Granularity::clip ? "clip" : "frame"; }

Granularity parse_granularity(std::string_view text) {
    if (text == "clip") return Granularity::clip;
    if (text == "frame") return Granularity::frame;
    throw std::invalid_argument("unknown granularity \"" + std::string(text) + "\" (valid: clip, frame)");
}

Granularity default_granularity(Family family) {
    return family == Family::image_resnet18 ? Granularity::frame : Granularity::clip;
}

EvalReport make_report(const std::vector<Label>& predictions, const std::vector<Label>& labels, Granularity g) {
    EvalReport r;
    r.granularity = g;
    r.confusion = confusion(predictions, labels);
    const auto f1 = f1_scores(r.confusion);
    r.f1_drone = f1.drone;
    r.f1_bird = f1.bird;
    r.f1_macro = f1.macro;
    r.n_samples = static_cast<long long>(labels.size());
    return r;
}

namespace {

// Row-wise softmax of [B, O] scores.
std::vector<std::array<double, kNumClasses>> probabilities(const Tensor& scores) {
    if (scores.rank() != 2 || scores.dim(1) != kNumClasses)
        throw std::invalid_argument("scores must be [B, 2], got " + nn::shape_str(scores.shape()));
    std::vector<std::array<double, kNumClasses>> out(static_cast<std::size_t>(scores.dim(0)));
    for (std::size_t b = 0; b < out.size(); ++b) {
        const double* row = scores.data() + b * kNumClasses;
        if (!std::isfinite(row[0]) || !std::isfinite(row[1])) throw std::runtime_error("non-finite class scores");
        const double m = std::max(row[0], row[1]);
        const double e0 = std::exp(row[0] - m), e1 = std::exp(row[1] - m);
        out[b] = {e0 / (e0 + e1), e1 / (e0 + e1)};
    }
    return out;
}

Label argmax(const std::array<double, kNumClasses>& p) { return p[1] > p[0] ? Label::bird : Label::drone; }

}  // namespace

EvalReport evaluate(const ScoreFn& score, const ClipDataset& data, CollateMode mode, const EvalOptions& options) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: split is empty");
    if (options.batch_size < 1) throw std::invalid_argument("evaluate: batch_size must be >= 1");

    // Accumulated probabilities per stored clip.
    std::vector<std::array<double, kNumClasses>> clip_prob(data.size(), {0.0, 0.0});
    std::vector<int> clip_votes(data.size(), 0);
    std::vector<Label> preds, labels;

    struct Pending {
        std::size_t clip;
        int frame;
    };
    std::vector<Sample> batch;
    std::vector<Pending> owners;
    auto flush = [&] {
        if (batch.empty()) return;
        const auto probs = probabilities(score(collate(batch, mode)));
        for (std::size_t i = 0; i < owners.size(); ++i) {
            const auto c = owners[i].clip;
            if (mode == CollateMode::image && options.granularity == Granularity::frame) {
                preds.push_back(argmax(probs[i]));
                labels.push_back(data.entry(c).label);
            }
            clip_prob[c][0] += probs[i][0];
            clip_prob[c][1] += probs[i][1];
            ++clip_votes[c];
        }
        batch.clear();
        owners.clear();
    };

    for (std::size_t c = 0; c < data.size(); ++c) {
        const auto& e = data.entry(c);
        if (mode == CollateMode::image) {
            for (int f = 0; f < e.frame_count; ++f) {
                batch.push_back(make_sample(data, {c, f}, mode, options.sampling, false, 0));
                owners.push_back({c, f});
                if (static_cast<int>(batch.size()) == options.batch_size) flush();
            }
            continue;
        }
        const auto windows = spread_clip_windows(e.frame_count, e.fps, options.sampling.num_frames, options.windows,
                                                 options.sampling.window_seconds);
        for (const auto& w : windows) {
            batch.push_back(make_sequence_sample(data, c, w, options.sampling));
            owners.push_back({c, -1});
            if (static_cast<int>(batch.size()) == options.batch_size) flush();
        }
    }
    flush();

    if (!(mode == CollateMode::image && options.granularity == Granularity::frame)) {
        for (std::size_t c = 0; c < data.size(); ++c) {
            const Label p = argmax(clip_prob[c]);
            const int repeat = options.granularity == Granularity::frame ? data.entry(c).frame_count : 1;
            for (int i = 0; i < repeat; ++i) {
                preds.push_back(p);
                labels.push_back(data.entry(c).label);
            }
        }
    }
    EvalReport r = make_report(preds, labels, options.granularity);
    r.split = data.split();
    return r;
}

EvalReport evaluate(Classifier& model, const ClipDataset& data, const EvalOptions& options) {
    const bool was_training = model.is_training();
    model.train(false);
    const CollateMode mode = is_sequence_family(model.spec().family) ? CollateMode::sequence : CollateMode::image;
    ScoreFn fn = [&](const SampledClipBatch& b) {
        nn::NoGradGuard guard;
        return model.forward(nn::Var(b.pixels)).value();
    };
    EvalReport r;
    try {
        r = evaluate(fn, data, mode, options);
    } catch (...) {
        model.train(was_training);
        throw;
    }
    model.train(was_training);
    const auto params = count_params(model);
    r.modality = std::string(to_string(model.spec().family));
    r.unfrozen_backbone_blocks = model.freeze_policy().unfrozen_backbone_blocks;
    r.total_params = params.total_params;
    r.trainable_params = params.trainable_params;
    return r;
}

json report_to_json(const EvalReport& r) {
    json cm = json::array();
    for (const auto& row : r.confusion.counts) cm.push_back(row);
    json out = {{"modality", r.modality},
                {"split", std::string(to_string(r.split))},
                {"granularity", std::string(to_string(r.granularity))},
                {"f1_drone", r.f1_drone},
                {"f1_bird", r.f1_bird},
                {"f1_macro", r.f1_macro},
                {"confusion", cm},
                {"n_samples", r.n_samples}};
    if (r.unfrozen_backbone_blocks) out["unfrozen_backbone_blocks"] = *r.unfrozen_backbone_blocks;
    if (r.total_params) out["total_params"] = *r.total_params;
    if (r.trainable_params) out["trainable_params"] = *r.trainable_params;
    return out;
}

EvalReport report_from_json(const json& doc) {
    EvalReport r;
    r.modality = doc.at("modality").get<std::string>();
    const auto split = parse_split(doc.at("split").get<std::string>());
    if (!split) throw std::invalid_argument("metrics file: bad split");
    r.split = *split;
    r.granularity = parse_granularity(doc.at("granularity").get<std::string>());
    r.f1_drone = doc.at("f1_drone").get<double>();
    r.f1_bird = doc.at("f1_bird").get<double>();
    r.f1_macro = doc.at("f1_macro").get<double>();
    for (std::size_t i = 0; i < kNumClasses; ++i)
        for (std::size_t j = 0; j < kNumClasses; ++j) r.confusion.counts[i][j] = doc.at("confusion").at(i).at(j).get<long long>();
    r.n_samples = doc.at("n_samples").get<long long>();
    if (doc.contains("unfrozen_backbone_blocks")) r.unfrozen_backbone_blocks = doc.at("unfrozen_backbone_blocks").get<int>();
    if (doc.contains("total_params")) r.total_params = doc.at("total_params").get<std::int64_t>();
    if (doc.contains("trainable_params")) r.trainable_params = doc.at("trainable_params").get<std::int64_t>();
    return r;
}

std::string abbreviate_count(std::int64_t n) {
    char buf[32];
    if (n >= 1'000'000)
        std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(n) / 1e6);
    else if (n >= 1'000)
        std::snprintf(buf, sizeof buf, "%lldK", static_cast<long long>(std::llround(static_cast<double>(n) / 1e3)));
    else
        std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(n));
    return buf;
}

std::string architecture_name(std::string_view modality) {
    static const std::map<std::string, std::string, std::less<>> names = {
        {"image_resnet18", "ResNet18"},
        {"r2plus1d", "R(2+1)D"},
        {"resnet18_lstm", "ResNet18 + LSTM neck"},
        {"resnet18_mlp", "ResNet18 + MLP neck"},
        {"resnet18_transformer", "ResNet18 + Transformer neck"}};
    auto it = names.find(modality);
    return it == names.end() ? std::string(modality) : it->second;
}

std::string modality_kind(std::string_view modality) {
    return modality == "image_resnet18" ? "Single Image" : "Image Sequence";
}

std::string render_table(const std::vector<EvalReport>& rows) {
    const std::vector<std::string> header = {"Architecture",          "Modality",           "Unfrozen Backbone Block",
                                             "# of Total Parameters", "# of Trainable Parameters",
                                             "F1_drone",              "F1_bird",            "F1_macro"};
    std::vector<std::vector<std::string>> cells;
    auto pct = [](double v) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        const bool has_scores = r.n_samples > 0;
        cells.push_back({architecture_name(r.modality), modality_kind(r.modality),
                         r.unfrozen_backbone_blocks ? std::to_string(*r.unfrozen_backbone_blocks) : "-",
                         r.total_params ? abbreviate_count(*r.total_params) : "-",
                         r.trainable_params ? abbreviate_count(*r.trainable_params) : "-",
                         has_scores ? pct(r.f1_drone) : "-", has_scores ? pct(r.f1_bird) : "-",
                         has_scores ? pct(r.f1_macro) : "-"});
    }
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
        width[c] = header[c].size();
        for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            out << (c ? " | " : "") << std::left << std::setw(static_cast<int>(width[c])) << row[c];
        }
        out << '\n';
    };
    line(header);
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "-+-" : "") << std::string(width[c], '-');
    out << '\n';
    for (const auto& row : cells) line(row);
    return out.str();
}

void write_confusion_plot(const EvalReport& report, const std::filesystem::path& path) {
    const int cell = 160, left = 110, top = 80;
    cv::Mat img(top + 2 * cell + 50, left + 2 * cell + 30, CV_8UC3, cv::Scalar(255, 255, 255));
    const auto font = cv::FONT_HERSHEY_SIMPLEX;
    for (auto t : kLabels) {
        const double support = static_cast<double>(report.confusion.support(t));
        for (auto p : kLabels) {
            const long long n = report.confusion.at(t, p);
            const double frac = support > 0 ? static_cast<double>(n) / support : 0.0;
            const int x = left + index_of(p) * cell, y = top + index_of(t) * cell;
            // White to dark blue with the row-normalized fraction.
            const cv::Scalar color(255 - 100 * frac, 255 - 200 * frac, 255 - 225 * frac);
            cv::rectangle(img, {x, y, cell, cell}, color, cv::FILLED);
            cv::rectangle(img, {x, y, cell, cell}, cv::Scalar(60, 60, 60), 1);
            const cv::Scalar ink = frac > 0.55 ? cv::Scalar(255, 255, 255) : cv::Scalar(20, 20, 20);
            const std::string count = std::to_string(n);
            char pct[16];
            std::snprintf(pct, sizeof pct, "%.1f%%", 100.0 * frac);
            int base = 0;
            auto sz = cv::getTextSize(count, font, 0.9, 2, &base);
            cv::putText(img, count, {x + (cell - sz.width) / 2, y + cell / 2}, font, 0.9, ink, 2, cv::LINE_AA);
            sz = cv::getTextSize(pct, font, 0.5, 1, &base);
            cv::putText(img, pct, {x + (cell - sz.width) / 2, y + cell / 2 + 28}, font, 0.5, ink, 1, cv::LINE_AA);
        }
        const std::string name(to_string(t));
        cv::putText(img, name, {left + index_of(t) * cell + cell / 2 - 25, top - 12}, font, 0.6, {0, 0, 0}, 1,
                    cv::LINE_AA);
        cv::putText(img, name, {20, top + index_of(t) * cell + cell / 2 + 5}, font, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
    }
    cv::putText(img, "predicted", {left + cell - 45, 30}, font, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
    cv::putText(img, "true", {20, top + 2 * cell + 35}, font, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
    if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write " + path.string());
}

std::filesystem::path render_report(const EvalReport& report, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
    {
        std::ofstream m(out_dir / "metrics.json");
        m << report_to_json(report).dump(1) << '\n';
        if (!m) throw std::runtime_error("cannot write " + (out_dir / "metrics.json").string());
    }
    write_confusion_plot(report, out_dir / "confusion.png");
    std::ofstream t(out_dir / "table.txt");
    t << render_table({report});
    if (!t) throw std::runtime_error("cannot write " + (out_dir / "table.txt").string());
    return out_dir;
}

}  // namespace seqcls
