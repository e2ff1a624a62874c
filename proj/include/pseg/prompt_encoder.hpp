#pragma once

#include <optional>
#include <vector>

#include "pseg/params.hpp"
#include "pseg/pe.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Normalized image-relative coordinates throughout: x = column/width in [0,1].

struct PointPrompt {
    double x = 0.0;
    double y = 0.0;
    bool foreground = true;
};

struct BoxPrompt {
    double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0; // top-left, bottom-right

    void validate() const {
        if (!(x0 >= 0.0 && x0 < x1 && x1 <= 1.0 && y0 >= 0.0 && y0 < y1 && y1 <= 1.0)) {
            throw DataError("box prompt: corners must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1");
        }
    }
};

struct MaskPrompt {
    Tensor lowres; // [S,S,1], S = input_size/4
};

struct PromptSet {
    std::vector<PointPrompt> points;
    std::optional<BoxPrompt> box;
    std::optional<MaskPrompt> mask;

    int sparse_token_count() const { return (int)points.size() + (box ? 2 : 0); }
};

struct PromptEncoderConfig {
    int input_size = 128;
    int channels = 32; // C, matches the image embedding
    // Mask-prompt tower widths; defaults keep the desk-scale 2/8/C laddering.
    int mask_c1 = 0; // 0 -> channels/16
    int mask_c2 = 0; // 0 -> channels/4
    // Embedding grid side; 0 derives the standard 16x downsample. Toy
    // geometries with other patch sizes set it explicitly (mask prompts then
    // require the tower output to still match).
    int grid_side_override = 0;

    int grid_side() const { return grid_side_override > 0 ? grid_side_override : input_size / 16; }
    int mask_side() const { return input_size / 4; }
    int c1() const { return mask_c1 > 0 ? mask_c1 : std::max(1, channels / 16); }
    int c2() const { return mask_c2 > 0 ? mask_c2 : std::max(1, channels / 4); }
    void validate() const;
};

// Maps sparse prompts to C-dim tokens and dense mask prompts to an additive
// embedding grid; also owns the shared positional encoder.
class PromptEncoder {
public:
    PromptEncoder(PromptEncoderConfig cfg, std::uint64_t seed);

    const PromptEncoderConfig& config() const { return cfg_; }
    const PositionalEncoder& pe() const { return pe_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // One token per point: pe(x,y) + E_fg or E_bg. Invalid tensor when empty.
    Tensor encode_points(const std::vector<PointPrompt>& points) const;
    // Exactly two tokens: pe(top-left) + E_tl, pe(bottom-right) + E_br.
    Tensor encode_box(const BoxPrompt& box) const;
    // Points followed by box corners; invalid tensor when no sparse prompts.
    Tensor sparse_tokens(const PromptSet& prompts) const;

    // [G,G,C] dense embedding of a low-res mask prompt.
    Tensor encode_mask(const MaskPrompt& mask) const;

    // embedding + dense mask embedding, or embedding + broadcast no-mask
    // embedding when the prompt set has no mask. Shapes [G,G,C].
    Tensor fuse_dense(const Tensor& embedding_grid, const PromptSet& prompts) const;

    // The decoder-side positional grid, [G*G, C].
    Tensor pe_grid() const { return pe_.grid(cfg_.grid_side()); }

    // Restores the positional encoder after checkpoint load.
    void sync_pe_from_params();

private:
    PromptEncoderConfig cfg_;
    ParamSet params_;
    PositionalEncoder pe_;

    Tensor e_fg_, e_bg_, e_tl_, e_br_, no_mask_;
    Tensor mw1_, mb1_, mg1_, mbeta1_;
    Tensor mw2_, mb2_, mg2_, mbeta2_;
    Tensor mw3_, mb3_;
};

} // namespace pseg
