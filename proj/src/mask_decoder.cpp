#include "pseg/mask_decoder.hpp"

#include <cmath>

#include "pseg/ops.hpp"

namespace pseg {

void DecoderConfig::validate() const {
    if (num_layers != 2) throw ConfigError("decoder: layer count is fixed at 2");
    if (dropout_rate != 0.1) throw ConfigError("decoder: dropout rate is fixed at 0.1");
    if (upscale_factor != 4) throw ConfigError("decoder: upscale factor is fixed at 4");
    if (token_dim <= 0 || token_dim % 4 != 0) {
        throw ConfigError("decoder: token_dim must be a positive multiple of 4");
    }
    if (num_heads <= 0 || token_dim % num_heads != 0) {
        throw ConfigError("decoder: token_dim must be divisible by num_heads");
    }
    if (mlp_hidden <= 0) throw ConfigError("decoder: mlp_hidden must be positive");
}

namespace {

AttentionWeights make_attention(ParamSet& params, const std::string& prefix, int dim, Rng& rng) {
    const double s = 1.0 / std::sqrt((double)dim);
    AttentionWeights w;
    w.wq = params.add(prefix + ".wq", normal_init({dim, dim}, s, rng));
    w.bq = params.add(prefix + ".bq", Tensor::zeros({dim}));
    w.wk = params.add(prefix + ".wk", normal_init({dim, dim}, s, rng));
    w.bk = params.add(prefix + ".bk", Tensor::zeros({dim}));
    w.wv = params.add(prefix + ".wv", normal_init({dim, dim}, s, rng));
    w.bv = params.add(prefix + ".bv", Tensor::zeros({dim}));
    w.wo = params.add(prefix + ".wo", normal_init({dim, dim}, s, rng));
    w.bo = params.add(prefix + ".bo", Tensor::zeros({dim}));
    return w;
}

} // namespace

MaskDecoder::MaskDecoder(DecoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 301));
    const int c = cfg_.token_dim;
    const int h = cfg_.mlp_hidden;
    const int c2 = c / 2, c4 = c / 4;

    output_token_ = params_.add("output_token", normal_init({1, c}, 0.5, rng));

    layers_.resize((std::size_t)cfg_.num_layers);
    for (int l = 0; l < cfg_.num_layers; ++l) {
        Layer& ly = layers_[(std::size_t)l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        ly.self_attn = make_attention(params_, pre + "self", c, rng);
        ly.ln0_g = params_.add(pre + "ln0.g", Tensor::full({c}, 1.0));
        ly.ln0_b = params_.add(pre + "ln0.b", Tensor::zeros({c}));
        ly.cross_t2i = make_attention(params_, pre + "t2i", c, rng);
        ly.ln1_g = params_.add(pre + "ln1.g", Tensor::full({c}, 1.0));
        ly.ln1_b = params_.add(pre + "ln1.b", Tensor::zeros({c}));
        ly.fc1_w = params_.add(pre + "mlp.fc1.w", normal_init({c, h}, 1.0 / std::sqrt((double)c), rng));
        ly.fc1_b = params_.add(pre + "mlp.fc1.b", Tensor::zeros({h}));
        ly.fc2_w = params_.add(pre + "mlp.fc2.w", normal_init({h, c}, 1.0 / std::sqrt((double)h), rng));
        ly.fc2_b = params_.add(pre + "mlp.fc2.b", Tensor::zeros({c}));
        ly.ln2_g = params_.add(pre + "ln2.g", Tensor::full({c}, 1.0));
        ly.ln2_b = params_.add(pre + "ln2.b", Tensor::zeros({c}));
        ly.cross_i2t = make_attention(params_, pre + "i2t", c, rng);
        ly.ln3_g = params_.add(pre + "ln3.g", Tensor::full({c}, 1.0));
        ly.ln3_b = params_.add(pre + "ln3.b", Tensor::zeros({c}));
    }

    up1_w_ = params_.add("up1.w", normal_init({2, 2, c, c2}, 1.0 / std::sqrt((double)c), rng));
    up1_b_ = params_.add("up1.b", Tensor::zeros({c2}));
    uln1_g_ = params_.add("up1.ln.g", Tensor::full({c2}, 1.0));
    uln1_b_ = params_.add("up1.ln.b", Tensor::zeros({c2}));
    up2_w_ = params_.add("up2.w", normal_init({2, 2, c2, c4}, 1.0 / std::sqrt((double)c2), rng));
    up2_b_ = params_.add("up2.b", Tensor::zeros({c4}));
    uln2_g_ = params_.add("up2.ln.g", Tensor::full({c4}, 1.0));
    uln2_b_ = params_.add("up2.ln.b", Tensor::zeros({c4}));

    const double hs = 1.0 / std::sqrt((double)c);
    h1_w_ = params_.add("hyper.fc1.w", normal_init({c, c}, hs, rng));
    h1_b_ = params_.add("hyper.fc1.b", Tensor::zeros({c}));
    h2_w_ = params_.add("hyper.fc2.w", normal_init({c, c}, hs, rng));
    h2_b_ = params_.add("hyper.fc2.b", Tensor::zeros({c}));
    h3_w_ = params_.add("hyper.fc3.w", normal_init({c, c4}, hs, rng));
    h3_b_ = params_.add("hyper.fc3.b", Tensor::zeros({c4}));
}

Tensor MaskDecoder::insert_output_token(const Tensor& prompt_tokens) const {
    if (!prompt_tokens.valid()) return output_token_;
    if (prompt_tokens.rank() != 2 || prompt_tokens.dim(1) != cfg_.token_dim) {
        throw ShapeError("insert_output_token: prompt tokens must be [k," + std::to_string(cfg_.token_dim) +
                         "], got " + shape_str(prompt_tokens.shape()));
    }
    return concat_rows({output_token_, prompt_tokens});
}

MaskDecoder::LayerIO MaskDecoder::decoder_layer(int layer_index, const Tensor& tokens, const Tensor& embedding,
                                                const Tensor& original_tokens, const Tensor& pe_grid, bool train,
                                                Rng& rng) const {
    if (layer_index < 0 || layer_index >= cfg_.num_layers) {
        throw ShapeError("decoder_layer: layer index out of range");
    }
    const int c = cfg_.token_dim;
    if (tokens.rank() != 2 || tokens.dim(1) != c || embedding.rank() != 2 || embedding.dim(1) != c) {
        throw ShapeError("decoder_layer: token width mismatch, tokens " + shape_str(tokens.shape()) +
                         " embedding " + shape_str(embedding.shape()));
    }
    const Layer& ly = layers_[(std::size_t)layer_index];
    const double rate = cfg_.dropout_rate;

    // (1) token self-attention; queries and keys carry the original tokens.
    Tensor t = tokens;
    {
        Tensor qk = add(t, original_tokens);
        Tensor a = multihead_attention(qk, qk, t, ly.self_attn, cfg_.num_heads);
        t = affine_layer_norm(add(t, dropout(a, rate, train, rng)), ly.ln0_g, ly.ln0_b);
    }
    // (2) cross-attention, tokens query the image embedding.
    {
        Tensor q = add(t, original_tokens);
        Tensor k = add(embedding, pe_grid);
        Tensor a = multihead_attention(q, k, embedding, ly.cross_t2i, cfg_.num_heads);
        t = affine_layer_norm(add(t, dropout(a, rate, train, rng)), ly.ln1_g, ly.ln1_b);
    }
    // (3) point-wise MLP on tokens.
    {
        Tensor m = linear(gelu(linear(t, ly.fc1_w, ly.fc1_b)), ly.fc2_w, ly.fc2_b);
        t = affine_layer_norm(add(t, dropout(m, rate, train, rng)), ly.ln2_g, ly.ln2_b);
    }
    // (4) cross-attention, image embedding queries the tokens and the result
    // is written back into the grid.
    Tensor e = embedding;
    {
        Tensor q = add(e, pe_grid);
        Tensor k = add(t, original_tokens);
        Tensor a = multihead_attention(q, k, t, ly.cross_i2t, cfg_.num_heads);
        e = affine_layer_norm(add(e, dropout(a, rate, train, rng)), ly.ln3_g, ly.ln3_b);
    }
    return {t, e};
}

MaskLogits MaskDecoder::predict_mask(const Tensor& final_tokens, const Tensor& final_embedding,
                                     int grid_side) const {
    const int c = cfg_.token_dim;
    const int g = grid_side;
    if (final_embedding.rank() != 2 || final_embedding.dim(0) != g * g || final_embedding.dim(1) != c) {
        throw ShapeError("predict_mask: embedding shape " + shape_str(final_embedding.shape()) +
                         " does not match grid side " + std::to_string(g));
    }

    Tensor grid = reshape(final_embedding, {g, g, c});
    Tensor up = transposed_conv2d(grid, up1_w_, up1_b_, 2);
    up = channel_layer_norm(gelu(up), uln1_g_, uln1_b_);
    up = transposed_conv2d(up, up2_w_, up2_b_, 2);
    up = channel_layer_norm(gelu(up), uln2_g_, uln2_b_);

    Tensor out_tok = row_slice(final_tokens, 0, 1);
    Tensor hyper = linear(gelu(linear(gelu(linear(out_tok, h1_w_, h1_b_)), h2_w_, h2_b_)), h3_w_, h3_b_);

    const int side = cfg_.upscale_factor * g;
    Tensor flat = reshape(up, {side * side, c / 4});
    Tensor logits = matmul(flat, transpose2d(hyper));
    return {reshape(logits, {side, side})};
}

MaskLogits MaskDecoder::decode(const ImageEmbedding& embedding, const PromptSet& prompts,
                               const PromptEncoder& prompt_encoder, bool train, Rng& rng) const {
    const int g = embedding.grid.dim(0);
    const int c = cfg_.token_dim;
    if (embedding.grid.dim(2) != c) {
        throw ShapeError("decode: embedding channels " + std::to_string(embedding.grid.dim(2)) +
                         " do not match decoder token_dim " + std::to_string(c));
    }
    Tensor fused = prompt_encoder.fuse_dense(embedding.grid, prompts);
    Tensor grid_flat = reshape(fused, {g * g, c});
    Tensor pe_flat = reshape(embedding.pe_grid, {g * g, c});

    Tensor tokens = insert_output_token(prompt_encoder.sparse_tokens(prompts));
    Tensor original = tokens;

    LayerIO io{tokens, grid_flat};
    for (int l = 0; l < cfg_.num_layers; ++l) {
        io = decoder_layer(l, io.tokens, io.embedding, original, pe_flat, train, rng);
    }
    return predict_mask(io.tokens, io.embedding, g);
}

MaskU8 binarize(const MaskLogits& logits, int image_size) {
    const int side = logits.logits.dim(0);
    const std::vector<double> up =
        bilinear_upsample(logits.logits.vec(), side, side, image_size, image_size);
    MaskU8 mask;
    mask.h = image_size;
    mask.w = image_size;
    mask.v.resize((std::size_t)image_size * image_size);
    for (std::size_t i = 0; i < up.size(); ++i) mask.v[i] = up[i] > 0.0 ? 1 : 0;
    return mask;
}

} // namespace pseg
