#pragma once

#include "pseg/image_encoder.hpp"
#include "pseg/nn_util.hpp"
#include "pseg/params.hpp"
#include "pseg/prompt_encoder.hpp"
#include "pseg/raster.hpp"

namespace pseg {

// Two-layer two-way transformer decoder. Layer count, dropout rate, and
// upscale factor are contract constants and are asserted at construction.
struct DecoderConfig {
    int num_layers = 2;
    int num_heads = 2;
    int token_dim = 32; // C, must match the image embedding
    int mlp_hidden = 128;
    double dropout_rate = 0.1;
    int upscale_factor = 4;

    void validate() const;
};

// (4G)x(4G) pre-sigmoid logits.
struct MaskLogits {
    Tensor logits; // [4G,4G]
};

class MaskDecoder {
public:
    MaskDecoder(DecoderConfig cfg, std::uint64_t seed);

    const DecoderConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // Prepends the learned output token; prompt_tokens may be invalid (empty).
    Tensor insert_output_token(const Tensor& prompt_tokens) const;

    // One two-way layer: token self-attention, token->image cross-attention,
    // token MLP, image->token cross-attention. Every step carries residual,
    // layer norm, and train-mode dropout. original_tokens and pe_grid are
    // re-added to the respective queries/keys at each attention step.
    struct LayerIO {
        Tensor tokens;    // [T,C]
        Tensor embedding; // [G*G,C]
    };
    LayerIO decoder_layer(int layer_index, const Tensor& tokens, const Tensor& embedding,
                          const Tensor& original_tokens, const Tensor& pe_grid, bool train, Rng& rng) const;

    // Upscales the final embedding 4x and projects through the output-token
    // hyperplane to per-pixel logits.
    MaskLogits predict_mask(const Tensor& final_tokens, const Tensor& final_embedding, int grid_side) const;

    MaskLogits decode(const ImageEmbedding& embedding, const PromptSet& prompts,
                      const PromptEncoder& prompt_encoder, bool train, Rng& rng) const;

private:
    struct Layer {
        AttentionWeights self_attn;
        Tensor ln0_g, ln0_b;
        AttentionWeights cross_t2i;
        Tensor ln1_g, ln1_b;
        Tensor fc1_w, fc1_b, fc2_w, fc2_b;
        Tensor ln2_g, ln2_b;
        AttentionWeights cross_i2t;
        Tensor ln3_g, ln3_b;
    };

    DecoderConfig cfg_;
    ParamSet params_;
    Tensor output_token_;
    std::vector<Layer> layers_;
    Tensor up1_w_, up1_b_, uln1_g_, uln1_b_;
    Tensor up2_w_, up2_b_, uln2_g_, uln2_b_;
    Tensor h1_w_, h1_b_, h2_w_, h2_b_, h3_w_, h3_b_;
};

// Bilinear upsample to image resolution, threshold at logit 0. Strictly
// positive logits map to foreground.
MaskU8 binarize(const MaskLogits& logits, int image_size);

} // namespace pseg
