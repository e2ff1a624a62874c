#pragma once

#include <cstdint>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// Interleaved 8-bit RGB raster.
struct ImageU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> rgb; // h*w*3

    bool empty() const { return rgb.empty(); }
};

// Binary mask, values 0/1.
struct MaskU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v; // h*w

    bool empty() const { return v.empty(); }
    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (auto x : v) n += x ? 1 : 0;
        return n;
    }
};

// [H,W,3] tensor scaled to [0,1].
Tensor image_to_tensor(const ImageU8& img);
// [H,W,1] tensor with values {0,1}.
Tensor mask_to_tensor(const MaskU8& mask);

ImageU8 bilinear_resize(const ImageU8& img, int out_h, int out_w);
MaskU8 nearest_resize(const MaskU8& mask, int out_h, int out_w);

// Bilinear upsample of a single-channel grid to out x out.
std::vector<double> bilinear_upsample(const std::vector<double>& src, int src_h, int src_w, int out_h, int out_w);

// Block-average downsample of a {0,1} mask by an integer factor, then
// re-binarize at 0.5 (>= 0.5 maps to foreground). Used to build loss targets
// at logit resolution.
Tensor downsample_mask_to_targets(const MaskU8& mask, int out_side);

} // namespace pseg
