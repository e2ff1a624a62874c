#pragma once

#include <vector>

#include "pseg/nn_util.hpp"
#include "pseg/params.hpp"
#include "pseg/prompt_encoder.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// ViT-style encoder: patch embedding, interleaved windowed/global attention
// blocks, and a convolutional neck down to the embedding channel count.
// Defaults are desk scale; the full-scale geometry (1024/16/256 et al.)
// remains expressible through the same fields.
struct EncoderConfig {
    int input_size = 128;
    int patch_size = 16;
    int embed_dim = 64;
    int num_blocks = 8;
    int num_heads = 4;
    int window_size = 4; // tokens per window side
    std::vector<int> global_block_indices = {1, 3, 5, 7};
    int neck_channels = 32; // C

    int grid_side() const { return input_size / patch_size; }
    bool is_global_block(int index) const {
        for (int g : global_block_indices) {
            if (g == index) return true;
        }
        return false;
    }
    void validate() const;
};

// G x G grid of C-dim features plus the fixed positional-encoding grid the
// decoder re-adds at every attention step. pe_grid depends only on the
// geometry and the positional-encoder seed, never on image content.
struct ImageEmbedding {
    Tensor grid;    // [G,G,C]
    Tensor pe_grid; // [G,G,C]
};

class ImageEncoder {
public:
    ImageEncoder(EncoderConfig cfg, std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // [input,input,3] in [0,1] -> [G,G,embed_dim]. No implicit resizing.
    Tensor patch_embed(const Tensor& image) const;
    // Pre-norm transformer block; windowed or global attention per config.
    Tensor encoder_block(const Tensor& tokens_grid, int block_index) const;
    // 1x1 conv -> channel LN -> padded 3x3 conv -> channel LN.
    Tensor neck(const Tensor& tokens_grid) const;

    ImageEmbedding encode(const Tensor& image, const PromptEncoder& prompt_encoder) const;

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        AttentionWeights attn;
        Tensor ln2_g, ln2_b;
        Tensor fc1_w, fc1_b, fc2_w, fc2_b;
    };

    EncoderConfig cfg_;
    ParamSet params_;
    Tensor patch_w_, patch_b_;
    std::vector<Block> blocks_;
    Tensor n1_w_, n1_b_, nln1_g_, nln1_b_;
    Tensor n2_w_, n2_b_, nln2_g_, nln2_b_;
};

} // namespace pseg
