#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pseg/params.hpp"
#include "pseg/prompt_encoder.hpp"
#include "pseg/raster.hpp"
#include "pseg/rng.hpp"

namespace pseg {

// Which mechanism supplies prompts for an experiment arm.
struct GeneratorKind {
    enum class Type { gt_box, gt_points, detector_box, segmenter_box, none };
    Type type = Type::none;
    int point_count = 0; // gt_points only

    static GeneratorKind gt_box() { return {Type::gt_box, 0}; }
    static GeneratorKind gt_points(int k) { return {Type::gt_points, k}; }
    static GeneratorKind detector_box() { return {Type::detector_box, 0}; }
    static GeneratorKind segmenter_box() { return {Type::segmenter_box, 0}; }
    static GeneratorKind none() { return {Type::none, 0}; }

    std::string label() const;
    static GeneratorKind parse(const std::string& text); // e.g. "gt_points:3"
};

struct Detection {
    BoxPrompt box;
    double objectness = 0.0; // sigmoid of the best raw score
};

// Tight normalized bounding box of the foreground: x0=cmin/W, x1=(cmax+1)/W,
// y0=rmin/H, y1=(rmax+1)/H. Throws EmptyMaskError when nothing is set.
BoxPrompt box_from_mask(const MaskU8& mask);

// k distinct foreground pixel centers, uniform without replacement, all
// foreground-labeled.
std::vector<PointPrompt> sample_points(const MaskU8& mask, int k, Rng& rng);

// Anchor-free single-object detector: four stride-2 conv stages and 1x1
// objectness / box-regression heads over a D x D score grid.
struct DetectorConfig {
    int input_size = 128;
    std::vector<int> channels = {8, 16, 32, 64};

    int grid_side() const {
        int s = input_size;
        for (std::size_t i = 0; i < channels.size(); ++i) s = (s + 1) / 2;
        return s;
    }
    void validate() const;
};

class Detector {
public:
    Detector(DetectorConfig cfg, std::uint64_t seed);

    const DetectorConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // Head outputs on the score grid: objectness logits [D,D,1] and raw box
    // regression values [D,D,4] (l,t,r,b before softplus).
    struct HeadOutputs {
        Tensor objectness;
        Tensor box_raw;
    };
    HeadOutputs forward(const Tensor& image) const;

    // Top-1 decode: the cell with maximal objectness wins; softplus extents
    // are clamped into [0,1], so any weights produce a valid box.
    Detection detect(const Tensor& image) const;

    // Differentiable per-sample loss: BCE over the objectness grid plus
    // (1 - IoU) of the decoded box at the ground-truth cell.
    Tensor loss(const Tensor& image, const BoxPrompt& gt) const;

    // The positive-cell assignment rule: floor(center * D), clamped.
    static int target_cell(double center, int grid_side);

private:
    DetectorConfig cfg_;
    ParamSet params_;
    std::vector<Tensor> conv_w_, conv_b_;
    Tensor obj_w_, obj_b_, box_w_, box_b_;

    Tensor backbone(const Tensor& image) const;
};

// Three-layer same-resolution convolutional segmenter used as the
// segmentation-derived-box baseline.
struct SegmenterConfig {
    int input_size = 128;
    std::vector<int> channels = {8, 8};

    void validate() const;
};

class TinySegmenter {
public:
    TinySegmenter(SegmenterConfig cfg, std::uint64_t seed);

    const SegmenterConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    Tensor logits(const Tensor& image) const; // [H,W,1]
    MaskU8 predict(const Tensor& image) const; // probability > 0.5
    Tensor loss(const Tensor& image, const Tensor& mask_targets) const;

private:
    SegmenterConfig cfg_;
    ParamSet params_;
};

// Threshold the predicted mask and take its tight box; an empty prediction
// falls back to the full-image box.
BoxPrompt box_from_predicted_mask(const MaskU8& predicted);

} // namespace pseg
