#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "pseg/adam.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/ops.hpp"
#include "pseg/prompt_generator.hpp"
#include "pseg/synthdata.hpp"

using namespace pseg;

namespace {

MaskU8 make_mask(int h, int w, const std::vector<std::pair<int, int>>& fg) {
    MaskU8 m;
    m.h = h;
    m.w = w;
    m.v.assign((std::size_t)h * w, 0);
    for (auto [r, c] : fg) m.v[(std::size_t)r * w + c] = 1;
    return m;
}

} // namespace

TEST_CASE("box_from_mask matches the declared convention") {
    // Foreground at rows 1-2, cols 0-1 of a 4x4 grid.
    MaskU8 m = make_mask(4, 4, {{1, 0}, {1, 1}, {2, 0}, {2, 1}});
    BoxPrompt b = box_from_mask(m);
    CHECK(b.x0 == 0.0);
    CHECK(b.y0 == 0.25);
    CHECK(b.x1 == 0.5);
    CHECK(b.y1 == 0.75);

    MaskU8 full = make_mask(4, 4, {});
    std::fill(full.v.begin(), full.v.end(), 1);
    BoxPrompt fb = box_from_mask(full);
    CHECK(fb.x0 == 0.0);
    CHECK(fb.y0 == 0.0);
    CHECK(fb.x1 == 1.0);
    CHECK(fb.y1 == 1.0);

    MaskU8 single = make_mask(4, 4, {{0, 3}});
    BoxPrompt sb = box_from_mask(single);
    CHECK(sb.x0 == 0.75);
    CHECK(sb.y0 == 0.0);
    CHECK(sb.x1 == 1.0);
    CHECK(sb.y1 == 0.25);

    MaskU8 empty = make_mask(4, 4, {});
    CHECK_THROWS_AS((void)box_from_mask(empty), EmptyMaskError);
}

TEST_CASE("box_from_mask tightness over random masks") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 4 + (int)rng.below(13);
        const int w = 4 + (int)rng.below(13);
        MaskU8 m;
        m.h = h;
        m.w = w;
        m.v.assign((std::size_t)h * w, 0);
        const int k = 1 + (int)rng.below(10);
        for (int i = 0; i < k; ++i) m.v[(std::size_t)rng.below((std::uint64_t)h * w)] = 1;

        const BoxPrompt b = box_from_mask(m);
        b.validate();
        const int c0 = (int)std::lround(b.x0 * w), c1 = (int)std::lround(b.x1 * w);
        const int r0 = (int)std::lround(b.y0 * h), r1 = (int)std::lround(b.y1 * h);
        bool edge_top = false, edge_bottom = false, edge_left = false, edge_right = false;
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                if (!m.v[(std::size_t)r * w + c]) continue;
                CHECK(r >= r0);
                CHECK(r < r1);
                CHECK(c >= c0);
                CHECK(c < c1);
                if (r == r0) edge_top = true;
                if (r == r1 - 1) edge_bottom = true;
                if (c == c0) edge_left = true;
                if (c == c1 - 1) edge_right = true;
            }
        }
        // Shrinking any side by one pixel would drop a foreground pixel.
        CHECK(edge_top);
        CHECK(edge_bottom);
        CHECK(edge_left);
        CHECK(edge_right);
    }
}

TEST_CASE("sample_points: membership, exhaustion, determinism, errors") {
    MaskU8 m = make_mask(6, 6, {{1, 1}, {1, 2}, {2, 1}, {2, 2}, {4, 4}});

    Rng r1(5);
    auto pts = sample_points(m, 3, r1);
    REQUIRE(pts.size() == 3);
    for (const auto& p : pts) {
        CHECK(p.foreground);
        const int c = (int)(p.x * 6.0);
        const int r = (int)(p.y * 6.0);
        CHECK(m.v[(std::size_t)r * 6 + c] == 1);
    }

    // k equal to the foreground count returns exactly the foreground set.
    Rng r2(7);
    auto all = sample_points(m, 5, r2);
    std::set<std::pair<int, int>> got;
    for (const auto& p : all) got.insert({(int)(p.y * 6.0), (int)(p.x * 6.0)});
    CHECK(got == std::set<std::pair<int, int>>{{1, 1}, {1, 2}, {2, 1}, {2, 2}, {4, 4}});

    Rng r3(9), r4(9);
    auto a = sample_points(m, 4, r3);
    auto b = sample_points(m, 4, r4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].x == b[i].x);
        CHECK(a[i].y == b[i].y);
    }

    Rng r5(11);
    CHECK_THROWS_AS((void)sample_points(m, 6, r5), DataError);
}

TEST_CASE("detector produces structurally valid boxes for arbitrary weights") {
    DetectorConfig cfg;
    cfg.input_size = 32;
    cfg.channels = {4, 8};
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 99ull}) {
        Detector det(cfg, seed);
        Rng rng(seed + 100);
        Tensor img = Tensor::zeros({32, 32, 3});
        for (auto& v : img.vec()) v = rng.uniform();
        const Detection d = det.detect(img);
        CHECK_NOTHROW(d.box.validate());
        CHECK(d.objectness >= 0.0);
        CHECK(d.objectness <= 1.0);
    }
}

TEST_CASE("positive-cell assignment rule") {
    CHECK(Detector::target_cell(0.55, 8) == 4);
    CHECK(Detector::target_cell(0.0, 8) == 0);
    CHECK(Detector::target_cell(1.0, 8) == 7); // clamped below 1.0
    CHECK(Detector::target_cell(0.124, 8) == 0);
    CHECK(Detector::target_cell(0.126, 8) == 1);
}

TEST_CASE("detector loss gradients match finite differences") {
    DetectorConfig cfg;
    cfg.input_size = 16;
    cfg.channels = {2, 2};
    Detector det(cfg, 17);
    Rng rng(19);
    Tensor img = Tensor::zeros({16, 16, 3});
    for (auto& v : img.vec()) v = rng.uniform();
    const BoxPrompt gt{0.25, 0.3, 0.8, 0.75};

    auto loss = [&]() { return det.loss(img, gt); };
    for (const char* name : {"conv0.w", "conv1.w", "obj.w", "obj.b", "box.w", "box.b"}) {
        INFO(name);
        CHECK(finite_diff_check_param(loss, det.params().find(name), 1e-4) < 1e-4);
    }
}

TEST_CASE("detector training reduces the loss and is deterministic") {
    DomainSpec spec = DomainSpec::domain('A', 32);
    std::vector<Tensor> images;
    std::vector<BoxPrompt> boxes;
    for (int i = 0; i < 12; ++i) {
        const Sample s = render_sample(spec, mix_seed(400, (std::uint64_t)i));
        images.push_back(image_to_tensor(s.image));
        boxes.push_back(s.box);
    }
    DetectorConfig cfg;
    cfg.input_size = 32;
    cfg.channels = {4, 8};

    auto run = [&](std::uint64_t seed) {
        Detector det(cfg, seed);
        std::vector<Tensor> params = det.params().trainable_tensors();
        AdamState adam;
        adam.init(params);
        double first_epoch = 0.0, last_epoch = 0.0;
        for (int epoch = 0; epoch < 6; ++epoch) {
            double epoch_loss = 0.0;
            for (std::size_t i = 0; i < images.size(); ++i) {
                det.params().zero_grads();
                Tape tape;
                TapeGuard guard(tape);
                Tensor loss = det.loss(images[i], boxes[i]);
                epoch_loss += loss.data()[0];
                tape.backward(loss);
                adam_step(params, adam, 1e-3);
            }
            if (epoch == 0) first_epoch = epoch_loss;
            last_epoch = epoch_loss;
        }
        CHECK(last_epoch < first_epoch);
        return det.params().payload_hash();
    };
    const auto h1 = run(7);
    const auto h2 = run(7);
    CHECK(h1 == h2);
    const auto h3 = run(8);
    CHECK(h1 != h3);
}

TEST_CASE("segmenter predicts full-resolution masks and its box fallback works") {
    SegmenterConfig cfg;
    cfg.input_size = 32;
    TinySegmenter seg(cfg, 23);
    Rng rng(29);
    Tensor img = Tensor::zeros({32, 32, 3});
    for (auto& v : img.vec()) v = rng.uniform();
    const MaskU8 pred = seg.predict(img);
    CHECK(pred.h == 32);
    CHECK(pred.w == 32);

    // A perfect prediction yields exactly the GT box.
    MaskU8 gt = make_mask(8, 8, {{2, 2}, {2, 3}, {3, 2}, {3, 3}, {4, 3}});
    const BoxPrompt direct = box_from_mask(gt);
    const BoxPrompt via = box_from_predicted_mask(gt);
    CHECK(via.x0 == direct.x0);
    CHECK(via.y0 == direct.y0);
    CHECK(via.x1 == direct.x1);
    CHECK(via.y1 == direct.y1);

    // All-background predictions fall back to the full-image box.
    MaskU8 empty = make_mask(8, 8, {});
    const BoxPrompt fb = box_from_predicted_mask(empty);
    CHECK(fb.x0 == 0.0);
    CHECK(fb.y0 == 0.0);
    CHECK(fb.x1 == 1.0);
    CHECK(fb.y1 == 1.0);
}

TEST_CASE("segmenter training reduces BCE on a tiny set") {
    DomainSpec spec = DomainSpec::domain('A', 32);
    SegmenterConfig cfg;
    cfg.input_size = 32;
    TinySegmenter seg(cfg, 31);
    std::vector<Tensor> images, targets;
    for (int i = 0; i < 8; ++i) {
        const Sample s = render_sample(spec, mix_seed(500, (std::uint64_t)i));
        images.push_back(image_to_tensor(s.image));
        targets.push_back(reshape(mask_to_tensor(s.mask), {32, 32}));
    }
    std::vector<Tensor> params = seg.params().trainable_tensors();
    AdamState adam;
    adam.init(params);
    double first = 0.0, last = 0.0;
    for (int epoch = 0; epoch < 5; ++epoch) {
        double epoch_loss = 0.0;
        for (std::size_t i = 0; i < images.size(); ++i) {
            seg.params().zero_grads();
            Tape tape;
            TapeGuard guard(tape);
            Tensor loss = seg.loss(images[i], targets[i]);
            epoch_loss += loss.data()[0];
            tape.backward(loss);
            adam_step(params, adam, 1e-3);
        }
        if (epoch == 0) first = epoch_loss;
        last = epoch_loss;
    }
    CHECK(last < first);
}

TEST_CASE("generator kind labels round-trip") {
    CHECK(GeneratorKind::parse("gt_box").type == GeneratorKind::Type::gt_box);
    CHECK(GeneratorKind::parse("none").type == GeneratorKind::Type::none);
    CHECK(GeneratorKind::parse("detector_box").type == GeneratorKind::Type::detector_box);
    CHECK(GeneratorKind::parse("segmenter_box").type == GeneratorKind::Type::segmenter_box);
    const GeneratorKind pts = GeneratorKind::parse("gt_points:5");
    CHECK(pts.type == GeneratorKind::Type::gt_points);
    CHECK(pts.point_count == 5);
    CHECK(pts.label() == "gt_points:5");
    CHECK_THROWS_AS((void)GeneratorKind::parse("boxes!"), UsageError);
}
