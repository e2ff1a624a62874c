#include "pseg/raster.hpp"

#include <algorithm>
#include <cmath>

namespace pseg {

Tensor image_to_tensor(const ImageU8& img) {
    Tensor t = Tensor::zeros({img.h, img.w, 3});
    for (std::size_t i = 0; i < img.rgb.size(); ++i) t.data()[i] = img.rgb[i] / 255.0;
    return t;
}

Tensor mask_to_tensor(const MaskU8& mask) {
    Tensor t = Tensor::zeros({mask.h, mask.w, 1});
    for (std::size_t i = 0; i < mask.v.size(); ++i) t.data()[i] = mask.v[i] ? 1.0 : 0.0;
    return t;
}

ImageU8 bilinear_resize(const ImageU8& img, int out_h, int out_w) {
    ImageU8 out;
    out.h = out_h;
    out.w = out_w;
    out.rgb.resize((std::size_t)out_h * out_w * 3);
    const double sy = (double)img.h / out_h;
    const double sx = (double)img.w / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, (double)img.h - 1.0);
        const int y0 = (int)fy;
        const int y1 = std::min(y0 + 1, img.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, (double)img.w - 1.0);
            const int x0 = (int)fx;
            const int x1 = std::min(x0 + 1, img.w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v00 = img.rgb[((std::size_t)y0 * img.w + x0) * 3 + c];
                const double v01 = img.rgb[((std::size_t)y0 * img.w + x1) * 3 + c];
                const double v10 = img.rgb[((std::size_t)y1 * img.w + x0) * 3 + c];
                const double v11 = img.rgb[((std::size_t)y1 * img.w + x1) * 3 + c];
                const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
                out.rgb[((std::size_t)y * out_w + x) * 3 + c] = (std::uint8_t)std::lround(std::clamp(v, 0.0, 255.0));
            }
        }
    }
    return out;
}

MaskU8 nearest_resize(const MaskU8& mask, int out_h, int out_w) {
    MaskU8 out;
    out.h = out_h;
    out.w = out_w;
    out.v.resize((std::size_t)out_h * out_w);
    for (int y = 0; y < out_h; ++y) {
        int sy = (int)((y + 0.5) * mask.h / out_h);
        sy = std::min(sy, mask.h - 1);
        for (int x = 0; x < out_w; ++x) {
            int sx = (int)((x + 0.5) * mask.w / out_w);
            sx = std::min(sx, mask.w - 1);
            out.v[(std::size_t)y * out_w + x] = mask.v[(std::size_t)sy * mask.w + sx];
        }
    }
    return out;
}

std::vector<double> bilinear_upsample(const std::vector<double>& src, int src_h, int src_w, int out_h, int out_w) {
    std::vector<double> out((std::size_t)out_h * out_w);
    const double sy = (double)src_h / out_h;
    const double sx = (double)src_w / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, (double)src_h - 1.0);
        const int y0 = (int)fy;
        const int y1 = std::min(y0 + 1, src_h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, (double)src_w - 1.0);
            const int x0 = (int)fx;
            const int x1 = std::min(x0 + 1, src_w - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * src[(std::size_t)y0 * src_w + x0] + wx * src[(std::size_t)y0 * src_w + x1]) +
                             wy * ((1 - wx) * src[(std::size_t)y1 * src_w + x0] + wx * src[(std::size_t)y1 * src_w + x1]);
            out[(std::size_t)y * out_w + x] = v;
        }
    }
    return out;
}

Tensor downsample_mask_to_targets(const MaskU8& mask, int out_side) {
    if (mask.h != mask.w || mask.h % out_side != 0) {
        throw ShapeError("downsample_mask_to_targets: mask side must be a multiple of the target side");
    }
    const int f = mask.h / out_side;
    Tensor t = Tensor::zeros({out_side, out_side});
    for (int y = 0; y < out_side; ++y) {
        for (int x = 0; x < out_side; ++x) {
            int count = 0;
            for (int dy = 0; dy < f; ++dy) {
                for (int dx = 0; dx < f; ++dx) {
                    count += mask.v[(std::size_t)(y * f + dy) * mask.w + (x * f + dx)] ? 1 : 0;
                }
            }
            t.data()[(std::size_t)y * out_side + x] = (2 * count >= f * f) ? 1.0 : 0.0;
        }
    }
    return t;
}

} // namespace pseg
