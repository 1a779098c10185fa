#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <random>

#include <opencv2/imgcodecs.hpp>

#include "seqcls/evaluation.hpp"
#include "seqcls/seqdataset.hpp"
#include "fixtures.hpp"

using namespace seqcls;
using nn::Tensor;
using testing::make_flat_dataset;

namespace {

std::vector<Label> repeat(Label l, int n) { return std::vector<Label>(static_cast<std::size_t>(n), l); }

std::vector<Label> concat(std::vector<Label> a, const std::vector<Label>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

// Dice form 2TP / (2TP + FP + FN), counted straight from the label lists.
double oracle_f1(const std::vector<Label>& pred, const std::vector<Label>& truth, Label c) {
    long long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == c && truth[i] == c) ++tp;
        if (pred[i] == c && truth[i] != c) ++fp;
        if (pred[i] != c && truth[i] == c) ++fn;
    }
    const long long denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

EvalOptions small_options(Granularity g) {
    EvalOptions o;
    o.granularity = g;
    o.batch_size = 3;
    o.sampling = testing::small_sampling();
    return o;
}

Tensor mean_sign_scores(const SampledClipBatch& b) {
    const auto n = b.size();
    const auto per = b.pixels.numel() / static_cast<std::int64_t>(n);
    Tensor out({static_cast<std::int64_t>(n), 2});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::int64_t k = 0; k < per; ++k) s += b.pixels[static_cast<std::int64_t>(i) * per + k];
        out[static_cast<std::int64_t>(i) * 2 + 0] = -s / static_cast<double>(per);
        out[static_cast<std::int64_t>(i) * 2 + 1] = s / static_cast<double>(per);
    }
    return out;
}

}  // namespace

TEST_CASE("worked metric examples") {
    {
        const auto truth = concat(repeat(Label::drone, 50), repeat(Label::bird, 20));
        const auto r = make_report(truth, truth, Granularity::clip);
        CHECK(r.confusion.counts[0] == std::array<long long, 2>{50, 0});
        CHECK(r.confusion.counts[1] == std::array<long long, 2>{0, 20});
        CHECK(r.f1_drone == 1.0);
        CHECK(r.f1_bird == 1.0);
        CHECK(r.f1_macro == 1.0);
    }
    {
        const auto truth = concat(repeat(Label::drone, 50), repeat(Label::bird, 20));
        const auto r = make_report(repeat(Label::drone, 70), truth, Granularity::clip);
        CHECK(r.confusion.counts[0] == std::array<long long, 2>{50, 0});
        CHECK(r.confusion.counts[1] == std::array<long long, 2>{20, 0});
        CHECK(r.f1_drone == doctest::Approx(0.8333).epsilon(1e-4));
        CHECK(r.f1_bird == 0.0);
        CHECK(r.f1_macro == doctest::Approx(0.4167).epsilon(1e-3));
    }
    {
        // TP=8, FP=2, FN=4 for drone.
        ConfusionMatrix cm;
        cm.counts = {{{8, 4}, {2, 6}}};
        CHECK(f1_scores(cm).drone == doctest::Approx(0.72727).epsilon(1e-5));
    }
    {
        ConfusionMatrix empty;
        const auto f = f1_scores(empty);
        CHECK(f.drone == 0.0);
        CHECK(f.bird == 0.0);
        CHECK(f.macro == 0.0);
    }
    CHECK_THROWS_AS(confusion({Label::bird}, {}), std::invalid_argument);
}

TEST_CASE("metrics agree with a brute-force oracle") {
    std::mt19937_64 rng(20241014);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = std::uniform_int_distribution<int>(0, 60)(rng);
        const double p_bird = std::uniform_real_distribution<double>(0, 1)(rng);
        std::bernoulli_distribution coin(p_bird), flip(0.3);
        std::vector<Label> truth, pred;
        for (int i = 0; i < n; ++i) {
            truth.push_back(coin(rng) ? Label::bird : Label::drone);
            pred.push_back(flip(rng) ? (coin(rng) ? Label::bird : Label::drone) : truth.back());
        }
        const auto r = make_report(pred, truth, Granularity::clip);
        const double d = oracle_f1(pred, truth, Label::drone), b = oracle_f1(pred, truth, Label::bird);
        REQUIRE(r.f1_drone == doctest::Approx(d).epsilon(1e-12));
        REQUIRE(r.f1_bird == doctest::Approx(b).epsilon(1e-12));
        REQUIRE(r.f1_macro == doctest::Approx((d + b) / 2).epsilon(1e-12));
        REQUIRE(r.confusion.total() == n);

        // Shuffling sample order changes nothing.
        std::vector<std::size_t> order(truth.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<Label> pt, tt;
        for (auto i : order) {
            pt.push_back(pred[i]);
            tt.push_back(truth[i]);
        }
        REQUIRE(confusion(pt, tt) == r.confusion);

        // Renaming the classes transposes the matrix and swaps the scores.
        std::vector<Label> ps, ts;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            ps.push_back(pred[i] == Label::drone ? Label::bird : Label::drone);
            ts.push_back(truth[i] == Label::drone ? Label::bird : Label::drone);
        }
        const auto swapped = make_report(ps, ts, Granularity::clip);
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) REQUIRE(swapped.confusion.counts[1 - i][1 - j] == r.confusion.counts[i][j]);
        REQUIRE(swapped.f1_drone == r.f1_bird);
        REQUIRE(swapped.f1_bird == r.f1_drone);
    }
}

TEST_CASE("evaluate with an oracle scorer and a constant scorer") {
    const auto root = std::filesystem::temp_directory_path() / "seqcls_test_eval";
    const auto data = make_flat_dataset(root, 6, 2, 5);

    for (auto mode : {CollateMode::sequence, CollateMode::image}) {
        for (auto g : {Granularity::clip, Granularity::frame}) {
            const auto r = evaluate(mean_sign_scores, data, mode, small_options(g));
            CHECK(r.f1_macro == 1.0);
            CHECK(r.n_samples == (g == Granularity::clip ? 8 : 40));
            CHECK(r.split == Split::val);
        }
    }

    ScoreFn always_drone = [](const SampledClipBatch& b) {
        Tensor out({static_cast<std::int64_t>(b.size()), 2});
        for (std::size_t i = 0; i < b.size(); ++i) out[static_cast<std::int64_t>(i) * 2] = 1.0;
        return out;
    };
    const auto clip = evaluate(always_drone, data, CollateMode::sequence, small_options(Granularity::clip));
    CHECK(clip.confusion.counts[0] == std::array<long long, 2>{6, 0});
    CHECK(clip.confusion.counts[1] == std::array<long long, 2>{2, 0});
    const auto frame = evaluate(always_drone, data, CollateMode::image, small_options(Granularity::frame));
    CHECK(frame.confusion.counts[0] == std::array<long long, 2>{30, 0});
    CHECK(frame.confusion.counts[1] == std::array<long long, 2>{10, 0});

    // Ties go to drone.
    ScoreFn tie = [](const SampledClipBatch& b) { return Tensor({static_cast<std::int64_t>(b.size()), 2}); };
    CHECK(evaluate(tie, data, CollateMode::sequence, small_options(Granularity::clip)).confusion.counts[1][0] == 2);

    auto windows = small_options(Granularity::clip);
    windows.windows = 3;
    int calls = 0;
    ScoreFn counting = [&](const SampledClipBatch& b) {
        calls += static_cast<int>(b.size());
        return mean_sign_scores(b);
    };
    CHECK(evaluate(counting, data, CollateMode::sequence, windows).f1_macro == 1.0);
    CHECK(calls == 8);  // 5-frame clips fit a single window
    const auto long_root = root.string() + "_long";
    const auto long_data = make_flat_dataset(long_root, 2, 2, 20);
    calls = 0;
    CHECK(evaluate(counting, long_data, CollateMode::sequence, windows).f1_macro == 1.0);
    CHECK(calls == 12);
    std::filesystem::remove_all(long_root);

    ScoreFn bad = [](const SampledClipBatch& b) {
        Tensor out({static_cast<std::int64_t>(b.size()), 2});
        out[0] = std::nan("");
        return out;
    };
    CHECK_THROWS(evaluate(bad, data, CollateMode::sequence, small_options(Granularity::clip)));
    std::filesystem::remove_all(root);
}

TEST_CASE("evaluate a classifier") {
    const auto root = std::filesystem::temp_directory_path() / "seqcls_test_eval_model";
    const auto data = make_flat_dataset(root, 2, 2, 4);
    ModelSpec spec = default_spec(Family::resnet18_lstm);
    spec.width = 4;
    spec.timesteps = 4;
    spec.neck.hidden_size = 6;
    auto model = build_model(spec, FreezePolicy::transfer(), 3);
    model->train(true);
    auto opts = small_options(Granularity::clip);
    const auto a = evaluate(*model, data, opts);
    const auto b = evaluate(*model, data, opts);
    CHECK(model->is_training());
    CHECK(a.confusion == b.confusion);
    CHECK(a.modality == "resnet18_lstm");
    CHECK(a.unfrozen_backbone_blocks == 0);
    CHECK(a.total_params == count_params(*model).total_params);
    CHECK(a.trainable_params == count_params(*model).trainable_params);
    std::filesystem::remove_all(root);
}

TEST_CASE("report serialization and rendering") {
    EvalReport r = make_report({Label::drone, Label::bird, Label::bird}, {Label::drone, Label::drone, Label::bird},
                               Granularity::frame);
    r.modality = "resnet18_transformer";
    r.split = Split::val;
    r.unfrozen_backbone_blocks = 2;
    r.total_params = 20'627'002;
    r.trainable_params = 19'943'930;
    const auto back = report_from_json(report_to_json(r));
    CHECK(back.modality == r.modality);
    CHECK(back.granularity == Granularity::frame);
    CHECK(back.confusion == r.confusion);
    CHECK(back.f1_macro == r.f1_macro);
    CHECK(back.total_params == r.total_params);
    CHECK(back.unfrozen_backbone_blocks == 2);

    CHECK(abbreviate_count(11'176'512) == "11.2M");
    CHECK(abbreviate_count(181'378) == "181K");
    CHECK(abbreviate_count(1'026) == "1K");
    CHECK(abbreviate_count(9'450'490) == "9.5M");
    CHECK(abbreviate_count(512) == "512");

    const auto table = render_table({r, EvalReport{}});
    const auto header = table.substr(0, table.find('\n'));
    const std::vector<std::string> cols = {"Architecture",          "Modality",
                                           "Unfrozen Backbone Block", "# of Total Parameters",
                                           "# of Trainable Parameters", "F1_drone",
                                           "F1_bird",               "F1_macro"};
    std::size_t pos = 0;
    for (const auto& c : cols) {
        const auto at = header.find(c, pos);
        REQUIRE(at != std::string::npos);
        pos = at + c.size();
    }
    CHECK(table.find("ResNet18 + Transformer neck") != std::string::npos);
    CHECK(table.find("Image Sequence") != std::string::npos);
    CHECK(table.find("20.6M") != std::string::npos);
    CHECK(table.find("19.9M") != std::string::npos);
    CHECK(table.find("66.7") != std::string::npos);

    const auto dir = std::filesystem::temp_directory_path() / "seqcls_test_report";
    std::filesystem::remove_all(dir);
    render_report(r, dir);
    CHECK(std::filesystem::file_size(dir / "confusion.png") > 1000);
    CHECK(std::filesystem::exists(dir / "metrics.json"));
    CHECK(std::filesystem::exists(dir / "table.txt"));
    const auto img = cv::imread((dir / "confusion.png").string());
    CHECK(img.cols > 300);
    std::filesystem::remove_all(dir);
}
