#include <chrono>
#include <random>
#include <set>

#include "doctest.h"
#include "seqcls/checkpoint.hpp"
#include "seqcls/models.hpp"

using namespace seqcls;
using nn::Tensor;
using nn::Var;

namespace {

// Closed forms for the standard-width networks, written out layer by layer.
std::int64_t conv(std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k; }
std::int64_t bn(std::int64_t c) { return 2 * c; }

std::int64_t resnet18_stage(std::int64_t in, std::int64_t out, bool down) {
    std::int64_t first = conv(in, out, 9) + bn(out) + conv(out, out, 9) + bn(out);
    if (down) first += conv(in, out, 1) + bn(out);
    const std::int64_t second = 2 * (conv(out, out, 9) + bn(out));
    return first + second;
}

std::int64_t resnet18_backbone() {
    return conv(3, 64, 49) + bn(64) + resnet18_stage(64, 64, false) + resnet18_stage(64, 128, true) +
           resnet18_stage(128, 256, true) + resnet18_stage(256, 512, true);
}

std::int64_t factorized(std::int64_t in, std::int64_t out, std::int64_t mid) {
    return conv(in, mid, 9) + bn(mid) + conv(mid, out, 3) + bn(out);
}

std::int64_t r21d_stage(std::int64_t in, std::int64_t out, bool down) {
    const std::int64_t mid1 = in * out * 27 / (in * 9 + 3 * out);
    const std::int64_t mid2 = out * out * 27 / (out * 9 + 3 * out);
    std::int64_t total = factorized(in, out, mid1) + factorized(out, out, mid1);
    if (down) total += conv(in, out, 1) + bn(out);
    return total + 2 * factorized(out, out, mid2);
}

std::int64_t r21d_backbone() {
    const std::int64_t stem = conv(3, 45, 49) + bn(45) + conv(45, 64, 3) + bn(64);
    return stem + r21d_stage(64, 64, false) + r21d_stage(64, 128, true) + r21d_stage(128, 256, true) +
           r21d_stage(256, 512, true);
}

std::int64_t linear(std::int64_t in, std::int64_t out) { return in * out + out; }

std::int64_t lstm_layer(std::int64_t in, std::int64_t h) { return 4 * (in * h + h * h + 2 * h); }

std::int64_t transformer_layer(std::int64_t d, std::int64_t ff) {
    return 3 * d * d + 3 * d + linear(d, d) + linear(d, ff) + linear(ff, d) + 2 * 2 * d;
}

ParamReport report(Family f, int unfrozen, int ff = 3580) {
    auto spec = default_spec(f);
    spec.neck.feedforward_dim = ff;
    return count_params(*build_model(spec, {unfrozen}));
}

ModelSpec tiny(Family f) {
    auto s = default_spec(f);
    s.width = 4;
    s.neck.hidden_size = 6;
    s.neck.attention_heads = 4;
    s.neck.feedforward_dim = 12;
    return s;
}

Tensor random_input(const nn::Shape& shape, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    Tensor t(shape);
    for (auto& v : t.values()) v = n(rng);
    return t;
}

nn::Shape tiny_input_shape(Family f, std::int64_t b, std::int64_t hw = 16) {
    if (f == Family::image_resnet18) return {b, 3, hw, hw};
    return {b, 3, 8, hw, hw};
}

}  // namespace

TEST_CASE("closed-form references agree with known totals") {
    CHECK(resnet18_backbone() == 11176512);
    CHECK(r21d_backbone() + linear(512, 2) == 31301151);
    CHECK(lstm_layer(512, 64) + lstm_layer(64, 64) == 181248);
}

TEST_CASE("parameter counts per family") {
    const auto r18 = resnet18_backbone();
    const auto head = linear(512, 2);
    const auto stage34 = resnet18_stage(128, 256, true) + resnet18_stage(256, 512, true);

    auto img0 = report(Family::image_resnet18, 0);
    CHECK(img0.total_params == r18 + head);
    CHECK(img0.trainable_params == 1026);
    CHECK(report(Family::image_resnet18, 2).trainable_params == stage34 + head);
    CHECK(stage34 + head == 10494466);

    auto r21d0 = report(Family::r2plus1d, 0);
    CHECK(r21d0.total_params == 31301151);
    CHECK(r21d0.trainable_params == 1026);
    CHECK(report(Family::r2plus1d, 1).trainable_params == r21d_stage(256, 512, true) + head);

    const auto lstm = lstm_layer(512, 64) + lstm_layer(64, 64) + linear(64, 2);
    auto l0 = report(Family::resnet18_lstm, 0);
    CHECK(l0.trainable_params == 181378);
    CHECK(l0.trainable_params == lstm);
    CHECK(l0.total_params == r18 + lstm);
    CHECK(report(Family::resnet18_lstm, 2).trainable_params == stage34 + lstm);

    const auto mlp = linear(8 * 512, 64) + linear(64, 2);
    auto m0 = report(Family::resnet18_mlp, 0);
    CHECK(m0.trainable_params == 262338);
    CHECK(m0.total_params == r18 + mlp);

    const auto tr = 8 * 512 + 2 * transformer_layer(512, 3580) + head;
    auto t0 = report(Family::resnet18_transformer, 0);
    CHECK(t0.trainable_params == tr);
    CHECK(t0.total_params == r18 + tr);
    CHECK(report(Family::resnet18_transformer, 2).trainable_params == stage34 + tr);
}

TEST_CASE("param report invariants") {
    for (auto f : kFamilies) {
        for (int u = 0; u <= 5; ++u) {
            const auto r = count_params(*build_model(tiny(f), {u}));
            std::int64_t total = 0, trainable = 0;
            for (const auto& c : r.breakdown) {
                total += c.total;
                trainable += c.trainable;
            }
            CHECK(total == r.total_params);
            CHECK(trainable == r.trainable_params);
            CHECK(r.trainable_params <= r.total_params);
            if (u == 5) CHECK(r.trainable_params == r.total_params);
        }
        CHECK_THROWS_AS(build_model(tiny(f), {6}), std::invalid_argument);
    }
}

TEST_CASE("torchvision key layout") {
    auto r21d = build_model(default_spec(Family::r2plus1d), {0});
    std::map<std::string, nn::Shape> names;
    for (const auto& p : r21d->named_parameters()) names[p.name] = p.var.shape();
    CHECK(names.at("backbone.stem.0.weight") == nn::Shape{45, 3, 1, 7, 7});
    CHECK(names.at("backbone.stem.3.weight") == nn::Shape{64, 45, 3, 1, 1});
    CHECK(names.at("backbone.layer1.0.conv1.0.0.weight") == nn::Shape{144, 64, 1, 3, 3});
    CHECK(names.at("backbone.layer1.0.conv1.0.3.weight") == nn::Shape{64, 144, 3, 1, 1});
    CHECK(names.at("backbone.layer2.0.downsample.0.weight") == nn::Shape{128, 64, 1, 1, 1});
    CHECK(names.count("backbone.layer4.1.conv2.1.bias") == 1);
    CHECK(names.at("head.weight") == nn::Shape{2, 512});

    auto lstm = build_model(default_spec(Family::resnet18_lstm), {0});
    std::set<std::string> lnames;
    for (const auto& p : lstm->named_parameters()) lnames.insert(p.name);
    CHECK(lnames.count("backbone.conv1.weight"));
    CHECK(lnames.count("backbone.layer3.0.downsample.1.weight"));
    CHECK(lnames.count("neck.lstm.weight_ih_l1"));
    std::set<std::string> bufs;
    for (const auto& b : lstm->named_buffers()) bufs.insert(b.name);
    CHECK(bufs.count("backbone.bn1.running_var"));
}

TEST_CASE("forward shapes on tiny models") {
    for (auto f : kFamilies) {
        auto m = build_model(tiny(f), FreezePolicy::all(), 3);
        m->train(false);
        nn::NoGradGuard ng;
        const auto out = m->forward(Var(random_input(tiny_input_shape(f, 3), 1)));
        CHECK(out.shape() == nn::Shape{3, 2});
        CHECK(out.value().all_finite());
        const nn::Shape bad = f == Family::r2plus1d ? nn::Shape{2, 3, 16, 16} : nn::Shape{2, 3, 5, 16, 16};
        CHECK_THROWS_AS(m->forward(Var(Tensor(bad))), std::invalid_argument);
    }
}

TEST_CASE("standard-width forward at model resolution") {
    // One sample per family at 224 x 224; the batch dimension is exercised on
    // tiny models above.
    nn::NoGradGuard ng;
    for (auto f : {Family::image_resnet18, Family::resnet18_lstm, Family::r2plus1d}) {
        auto m = build_model(default_spec(f), {0}, 1);
        m->train(false);
        const auto out = m->forward(Var(random_input(f == Family::image_resnet18 ? nn::Shape{2, 3, 224, 224}
                                                                                 : nn::Shape{1, 3, 8, 224, 224},
                                                     2)));
        CHECK(out.shape() == nn::Shape{f == Family::image_resnet18 ? 2 : 1, 2});
        CHECK(out.value().all_finite());
    }
}

TEST_CASE("eval forward is deterministic") {
    for (auto f : kFamilies) {
        auto m = build_model(tiny(f), {0}, 5);
        m->train(false);
        nn::NoGradGuard ng;
        const Tensor x = random_input(tiny_input_shape(f, 2), 4);
        CHECK(bit_equal(m->forward(Var(x)).value(), m->forward(Var(x)).value()));
        auto again = build_model(tiny(f), {0}, 5);
        again->train(false);
        CHECK(bit_equal(m->forward(Var(x)).value(), again->forward(Var(x)).value()));
    }
}

TEST_CASE("lstm neck on zero input matches a hand-rolled recurrence") {
    nn::InitEngine rng(9);
    NeckSpec spec;
    spec.kind = NeckKind::lstm;
    spec.hidden_size = 5;
    spec.num_layers = 2;
    auto neck = make_neck(spec, 8, 7, rng);
    nn::NoGradGuard ng;
    const Tensor out = neck->forward(Var(Tensor({2, 8, 7}))).value();
    CHECK(bit_equal(out, neck->forward(Var(Tensor({2, 8, 7}))).value()));

    std::map<std::string, Tensor> w;
    for (const auto& p : neck->named_parameters()) w.emplace(p.name, p.var.value());
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<double> input(7, 0.0);
    std::vector<std::vector<double>> seq(8, input);
    for (int layer = 0; layer < 2; ++layer) {
        const auto s = std::to_string(layer);
        const auto& wih = w.at("lstm.weight_ih_l" + s);
        const auto& whh = w.at("lstm.weight_hh_l" + s);
        const auto& bih = w.at("lstm.bias_ih_l" + s);
        const auto& bhh = w.at("lstm.bias_hh_l" + s);
        const auto in = wih.dim(1);
        std::vector<double> h(5, 0.0), c(5, 0.0);
        std::vector<std::vector<double>> next;
        for (const auto& xt : seq) {
            std::vector<double> g(20);
            for (int r = 0; r < 20; ++r) {
                double acc = bih[r] + bhh[r];
                for (int k = 0; k < in; ++k) acc += wih[r * in + k] * xt[static_cast<std::size_t>(k)];
                for (int k = 0; k < 5; ++k) acc += whh[r * 5 + k] * h[static_cast<std::size_t>(k)];
                g[static_cast<std::size_t>(r)] = acc;
            }
            for (int j = 0; j < 5; ++j) {
                const double i = sig(g[j]), f = sig(g[5 + j]), gg = std::tanh(g[10 + j]), o = sig(g[15 + j]);
                c[j] = f * c[j] + i * gg;
                h[j] = o * std::tanh(c[j]);
            }
            next.push_back(h);
        }
        seq = next;
    }
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < 5; ++j) CHECK(out[b * 5 + j] == doctest::Approx(seq.back()[j]).epsilon(1e-12));
}

TEST_CASE("transformer neck and timestep order") {
    const std::vector<int> perm = {3, 0, 7, 5, 1, 2, 6, 4};
    auto permuted = [&](const Tensor& x) {
        Tensor y(x.shape());
        const auto f = x.dim(2);
        for (std::int64_t b = 0; b < x.dim(0); ++b)
            for (int t = 0; t < 8; ++t)
                std::copy_n(x.data() + (b * 8 + perm[t]) * f, f, y.data() + (b * 8 + t) * f);
        return y;
    };
    nn::NoGradGuard ng;
    for (bool pos : {false, true}) {
        nn::InitEngine rng(1);
        NeckSpec spec;
        spec.kind = NeckKind::transformer;
        spec.attention_heads = 4;
        spec.feedforward_dim = 24;
        spec.positional_embedding = pos;
        auto neck = make_neck(spec, 8, 16, rng);
        const Tensor x = random_input({3, 8, 16}, 2);
        const double diff = max_abs_diff(neck->forward(Var(x)).value(), neck->forward(Var(permuted(x))).value());
        if (pos)
            CHECK(diff > 1e-6);
        else
            CHECK(diff < 1e-12);
    }
}

TEST_CASE("mlp neck flattens time and features") {
    nn::InitEngine rng(4);
    NeckSpec spec;
    spec.kind = NeckKind::mlp;
    auto neck = make_neck(spec, 8, 512, rng);
    CHECK(neck->output_dim() == 64);
    CHECK(neck->parameter_count() == 4096 * 64 + 64);
    nn::NoGradGuard ng;
    CHECK(neck->forward(Var(Tensor({2, 8, 512}, 0.1))).shape() == nn::Shape{2, 64});
    CHECK_THROWS_AS(neck->forward(Var(Tensor({2, 7, 512}))), std::invalid_argument);
}

TEST_CASE("frozen blocks follow the policy") {
    auto m = build_model(tiny(Family::resnet18_lstm), {2});
    const auto blocks = m->backbone().blocks();
    REQUIRE(blocks.size() == 5);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        for (auto* mod : blocks[i].modules) CHECK(mod->is_frozen() == (i < 3));
    for (const auto& p : m->named_parameters()) {
        const bool trainable = p.name.rfind("backbone.layer3", 0) == 0 || p.name.rfind("backbone.layer4", 0) == 0 ||
                               p.name.rfind("neck.", 0) == 0 || p.name.rfind("head.", 0) == 0;
        CHECK_MESSAGE(p.var.requires_grad() == trainable, p.name);
    }
}

TEST_CASE("frozen normalization keeps its statistics in training mode") {
    auto m = build_model(tiny(Family::image_resnet18), {0});
    m->train(true);
    const auto before = model_state(*m);
    {
        auto out = m->forward(Var(random_input({4, 3, 16, 16}, 3)));
        nn::weighted_sum(out, Tensor(out.shape(), 1.0)).backward();
    }
    const auto after = model_state(*m);
    for (const auto& [name, t] : before)
        if (name.rfind("backbone.", 0) == 0) CHECK_MESSAGE(bit_equal(t, after.at(name)), name);
}

TEST_CASE("model state round trip through a tensor file") {
    const auto path = std::filesystem::temp_directory_path() / "seqcls_test_state.safetensors";
    auto a = build_model(tiny(Family::resnet18_transformer), {0}, 1);
    auto b = build_model(tiny(Family::resnet18_transformer), {0}, 2);
    TensorFile file;
    file.tensors = model_state(*a);
    file.metadata["spec"] = spec_to_json(a->spec()).dump();
    write_tensor_file(file, path);
    const auto loaded = read_tensor_file(path);
    CHECK(loaded.metadata.at("spec") == file.metadata.at("spec"));
    load_model_state(*b, loaded.tensors);
    const auto sa = model_state(*a), sb = model_state(*b);
    for (const auto& [k, v] : sa) CHECK(bit_equal(v, sb.at(k)));

    auto other = build_model(tiny(Family::resnet18_lstm), {0});
    CHECK_THROWS_AS(load_model_state(*other, loaded.tensors), std::invalid_argument);
    std::filesystem::remove(path);
}

TEST_CASE("pretrained backbone loading") {
    const auto dir = std::filesystem::temp_directory_path();
    auto source = build_model(tiny(Family::image_resnet18), {0}, 11);
    TensorFile file;
    // Raw torchvision-style names with 4-D conv kernels.
    for (const auto& [name, t] : model_state(*source)) {
        if (name.rfind("backbone.", 0) != 0) continue;
        Tensor v = t;
        if (v.rank() == 5 && v.dim(2) == 1) v.reshape_({v.dim(0), v.dim(1), v.dim(3), v.dim(4)});
        file.tensors.emplace(name.substr(9), v);
    }
    file.tensors.emplace("fc.weight", Tensor({1000, 32}));
    file.tensors.emplace("bn1.num_batches_tracked", Tensor(nn::Shape{}));
    write_tensor_file(file, dir / "seqcls_pre.safetensors");

    auto spec = tiny(Family::resnet18_mlp);
    spec.pretrained = (dir / "seqcls_pre.safetensors").string();
    auto target = build_model(spec, {0}, 99);
    const auto ss = model_state(*source), st = model_state(*target);
    for (const auto& [k, v] : ss)
        if (k.rfind("backbone.", 0) == 0) CHECK(bit_equal(v, st.at(k)));

    file.tensors.at("conv1.weight") = Tensor({4, 3, 5, 5});
    write_tensor_file(file, dir / "seqcls_pre_bad.safetensors");
    spec.pretrained = (dir / "seqcls_pre_bad.safetensors").string();
    CHECK_THROWS_AS(build_model(spec, {0}), std::invalid_argument);
    std::filesystem::remove(dir / "seqcls_pre.safetensors");
    std::filesystem::remove(dir / "seqcls_pre_bad.safetensors");
}

TEST_CASE("family names") {
    CHECK(parse_family("r2plus1d") == Family::r2plus1d);
    try {
        parse_family("x3d");
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("resnet18_transformer") != std::string::npos);
    }
    for (auto f : kFamilies) CHECK(spec_from_json(spec_to_json(tiny(f))).neck.feedforward_dim == tiny(f).neck.feedforward_dim);
}
