#include "pseg/prompt_generator.hpp"

#include <algorithm>
#include <cmath>

#include "pseg/ops.hpp"

namespace pseg {

std::string GeneratorKind::label() const {
    switch (type) {
        case Type::gt_box: return "gt_box";
        case Type::gt_points: return "gt_points:" + std::to_string(point_count);
        case Type::detector_box: return "detector_box";
        case Type::segmenter_box: return "segmenter_box";
        case Type::none: return "none";
    }
    return "none";
}

GeneratorKind GeneratorKind::parse(const std::string& text) {
    if (text == "gt_box") return gt_box();
    if (text == "detector_box") return detector_box();
    if (text == "segmenter_box") return segmenter_box();
    if (text == "none") return none();
    const std::string prefix = "gt_points:";
    if (text.rfind(prefix, 0) == 0) {
        const int k = std::stoi(text.substr(prefix.size()));
        if (k <= 0) throw UsageError("generator: point count must be positive in '" + text + "'");
        return gt_points(k);
    }
    throw UsageError("generator: unknown kind '" + text +
                     "' (expected gt_box, gt_points:<k>, detector_box, segmenter_box, none)");
}

BoxPrompt box_from_mask(const MaskU8& mask) {
    int rmin = mask.h, rmax = -1, cmin = mask.w, cmax = -1;
    for (int r = 0; r < mask.h; ++r) {
        for (int c = 0; c < mask.w; ++c) {
            if (!mask.v[(std::size_t)r * mask.w + c]) continue;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
        }
    }
    if (rmax < 0) throw EmptyMaskError("box_from_mask: mask has no foreground pixels");
    BoxPrompt box;
    box.x0 = (double)cmin / mask.w;
    box.x1 = (double)(cmax + 1) / mask.w;
    box.y0 = (double)rmin / mask.h;
    box.y1 = (double)(rmax + 1) / mask.h;
    return box;
}

std::vector<PointPrompt> sample_points(const MaskU8& mask, int k, Rng& rng) {
    if (k <= 0) throw UsageError("sample_points: k must be positive");
    std::vector<int> fg;
    for (int i = 0; i < mask.h * mask.w; ++i) {
        if (mask.v[(std::size_t)i]) fg.push_back(i);
    }
    if ((int)fg.size() < k) {
        throw DataError("sample_points: requested " + std::to_string(k) + " points from a mask with only " +
                        std::to_string(fg.size()) + " foreground pixels");
    }
    // Partial Fisher-Yates: the first k entries become the sample.
    for (int i = 0; i < k; ++i) {
        const std::size_t j = i + (std::size_t)rng.below(fg.size() - i);
        std::swap(fg[(std::size_t)i], fg[j]);
    }
    std::vector<PointPrompt> out;
    out.reserve((std::size_t)k);
    for (int i = 0; i < k; ++i) {
        const int r = fg[(std::size_t)i] / mask.w;
        const int c = fg[(std::size_t)i] % mask.w;
        out.push_back({(c + 0.5) / mask.w, (r + 0.5) / mask.h, true});
    }
    return out;
}

void DetectorConfig::validate() const {
    if (channels.empty()) throw ConfigError("detector: needs at least one backbone stage");
    int s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] <= 0) throw ConfigError("detector: channel counts must be positive");
        if (s % 2 != 0) throw ConfigError("detector: input_size must halve cleanly through every stage");
        s /= 2;
    }
    if (s <= 0) throw ConfigError("detector: too many stages for this input size");
}

Detector::Detector(DetectorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 401));
    int cin = 3;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
        const int cout = cfg_.channels[i];
        conv_w_.push_back(params_.add("conv" + std::to_string(i) + ".w",
                                      normal_init({3, 3, cin, cout}, 1.0 / std::sqrt(9.0 * cin), rng)));
        conv_b_.push_back(params_.add("conv" + std::to_string(i) + ".b", Tensor::zeros({cout})));
        cin = cout;
    }
    // Objectness starts at a background prior; the regression head starts at
    // small extents (softplus(-2) ~ 0.13) so the decoded box is not clamped
    // to the full image, which would silence the IoU gradient.
    obj_w_ = params_.add("obj.w", normal_init({1, 1, cin, 1}, 1.0 / std::sqrt((double)cin), rng));
    obj_b_ = params_.add("obj.b", Tensor::full({1}, -4.0));
    box_w_ = params_.add("box.w", normal_init({1, 1, cin, 4}, 1.0 / std::sqrt((double)cin), rng));
    box_b_ = params_.add("box.b", Tensor::full({4}, -2.0));
}

Tensor Detector::backbone(const Tensor& image) const {
    const int s = cfg_.input_size;
    if (image.rank() != 3 || image.dim(0) != s || image.dim(1) != s || image.dim(2) != 3) {
        throw ShapeError("detector: expected [" + std::to_string(s) + "," + std::to_string(s) + ",3] image, got " +
                         shape_str(image.shape()));
    }
    Tensor h = image;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
        h = relu(conv2d(h, conv_w_[i], conv_b_[i], 2, 1));
    }
    return h;
}

Detector::HeadOutputs Detector::forward(const Tensor& image) const {
    Tensor feat = backbone(image);
    return {conv2d(feat, obj_w_, obj_b_, 1, 0), conv2d(feat, box_w_, box_b_, 1, 0)};
}

int Detector::target_cell(double center, int grid_side) {
    const double clamped = std::clamp(center, 0.0, 1.0 - 1e-9);
    return (int)(clamped * grid_side);
}

Detection Detector::detect(const Tensor& image) const {
    const HeadOutputs heads = forward(image);
    const int d = cfg_.grid_side();
    int best = 0;
    double best_score = heads.objectness.data()[0];
    for (int i = 1; i < d * d; ++i) {
        if (heads.objectness.data()[i] > best_score) {
            best_score = heads.objectness.data()[i];
            best = i;
        }
    }
    if (!std::isfinite(best_score)) throw NumericError("detector: non-finite objectness score");
    const int gy = best / d, gx = best % d;
    const double cx = (gx + 0.5) / d;
    const double cy = (gy + 0.5) / d;
    const double* raw = heads.box_raw.data() + (std::size_t)best * 4;
    auto sp = [](double x) { return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x))); };
    Detection det;
    det.box.x0 = std::clamp(cx - sp(raw[0]), 0.0, 1.0);
    det.box.y0 = std::clamp(cy - sp(raw[1]), 0.0, 1.0);
    det.box.x1 = std::clamp(cx + sp(raw[2]), 0.0, 1.0);
    det.box.y1 = std::clamp(cy + sp(raw[3]), 0.0, 1.0);
    det.objectness = 1.0 / (1.0 + std::exp(-best_score));
    return det;
}

Tensor Detector::loss(const Tensor& image, const BoxPrompt& gt) const {
    gt.validate();
    const HeadOutputs heads = forward(image);
    const int d = cfg_.grid_side();

    const double gcx = 0.5 * (gt.x0 + gt.x1);
    const double gcy = 0.5 * (gt.y0 + gt.y1);
    const int tx = target_cell(gcx, d);
    const int ty = target_cell(gcy, d);

    Tensor target = Tensor::zeros({d, d, 1});
    target.data()[(std::size_t)ty * d + tx] = 1.0;
    Tensor obj_loss = bce_with_logits_mean(heads.objectness, target);

    // Decode the positive cell with the same clamped softplus rule as detect().
    const int cell = ty * d + tx;
    Tensor raw = gather_elems(reshape(heads.box_raw, {d * d * 4}), {cell * 4, cell * 4 + 1, cell * 4 + 2, cell * 4 + 3});
    Tensor ltrb = softplus(raw);
    const double cx = (tx + 0.5) / d;
    const double cy = (ty + 0.5) / d;
    Tensor zero = Tensor::zeros({1});
    Tensor one = Tensor::full({1}, 1.0);
    Tensor l = gather_elems(ltrb, {0}), t = gather_elems(ltrb, {1});
    Tensor r = gather_elems(ltrb, {2}), b = gather_elems(ltrb, {3});
    Tensor x0 = minimum(maximum(sub(Tensor::full({1}, cx), l), zero), one);
    Tensor y0 = minimum(maximum(sub(Tensor::full({1}, cy), t), zero), one);
    Tensor x1 = minimum(maximum(add(Tensor::full({1}, cx), r), zero), one);
    Tensor y1 = minimum(maximum(add(Tensor::full({1}, cy), b), zero), one);

    Tensor iw = relu(sub(minimum(x1, Tensor::full({1}, gt.x1)), maximum(x0, Tensor::full({1}, gt.x0))));
    Tensor ih = relu(sub(minimum(y1, Tensor::full({1}, gt.y1)), maximum(y0, Tensor::full({1}, gt.y0))));
    Tensor inter = mul(iw, ih);
    Tensor area_p = mul(sub(x1, x0), sub(y1, y0));
    const double area_g = (gt.x1 - gt.x0) * (gt.y1 - gt.y0);
    Tensor uni = sub(add(area_p, Tensor::full({1}, area_g)), inter);
    Tensor iou = divide(inter, uni);
    Tensor box_loss = sub(one, iou);

    return add(obj_loss, sum_all(box_loss));
}

void SegmenterConfig::validate() const {
    if (channels.size() != 2 || channels[0] <= 0 || channels[1] <= 0) {
        throw ConfigError("segmenter: expects exactly two hidden channel counts");
    }
    if (input_size <= 0) throw ConfigError("segmenter: input_size must be positive");
}

TinySegmenter::TinySegmenter(SegmenterConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 501));
    const int c1 = cfg_.channels[0], c2 = cfg_.channels[1];
    params_.add("conv1.w", normal_init({3, 3, 3, c1}, 1.0 / std::sqrt(27.0), rng));
    params_.add("conv1.b", Tensor::zeros({c1}));
    params_.add("conv2.w", normal_init({3, 3, c1, c2}, 1.0 / std::sqrt(9.0 * c1), rng));
    params_.add("conv2.b", Tensor::zeros({c2}));
    params_.add("conv3.w", normal_init({3, 3, c2, 1}, 1.0 / std::sqrt(9.0 * c2), rng));
    params_.add("conv3.b", Tensor::zeros({1}));
}

Tensor TinySegmenter::logits(const Tensor& image) const {
    const int s = cfg_.input_size;
    if (image.rank() != 3 || image.dim(0) != s || image.dim(1) != s || image.dim(2) != 3) {
        throw ShapeError("segmenter: expected [" + std::to_string(s) + "," + std::to_string(s) + ",3] image, got " +
                         shape_str(image.shape()));
    }
    Tensor h = relu(conv2d(image, params_.find("conv1.w"), params_.find("conv1.b"), 1, 1));
    h = relu(conv2d(h, params_.find("conv2.w"), params_.find("conv2.b"), 1, 1));
    return conv2d(h, params_.find("conv3.w"), params_.find("conv3.b"), 1, 1);
}

MaskU8 TinySegmenter::predict(const Tensor& image) const {
    Tensor z = logits(image);
    MaskU8 mask;
    mask.h = z.dim(0);
    mask.w = z.dim(1);
    mask.v.resize((std::size_t)mask.h * mask.w);
    for (std::size_t i = 0; i < mask.v.size(); ++i) mask.v[i] = z.data()[i] > 0.0 ? 1 : 0;
    return mask;
}

Tensor TinySegmenter::loss(const Tensor& image, const Tensor& mask_targets) const {
    Tensor z = logits(image);
    return bce_with_logits_mean(reshape(z, {z.dim(0) * z.dim(1)}),
                                reshape(mask_targets, {mask_targets.dim(0) * mask_targets.dim(1)}));
}

BoxPrompt box_from_predicted_mask(const MaskU8& predicted) {
    if (predicted.foreground_count() == 0) return BoxPrompt{0.0, 0.0, 1.0, 1.0};
    return box_from_mask(predicted);
}

} // namespace pseg
