#include "pseg/image_encoder.hpp"

#include <cmath>

#include "pseg/ops.hpp"

namespace pseg {

void EncoderConfig::validate() const {
    if (input_size <= 0 || patch_size <= 0 || input_size % patch_size != 0) {
        throw ConfigError("encoder: input_size must be a positive multiple of patch_size");
    }
    const int g = grid_side();
    if (window_size <= 0 || g % window_size != 0) {
        throw ConfigError("encoder: grid side " + std::to_string(g) + " is not divisible by window_size " +
                          std::to_string(window_size));
    }
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
        throw ConfigError("encoder: embed_dim must be divisible by num_heads");
    }
    if (num_blocks <= 0) throw ConfigError("encoder: num_blocks must be positive");
    if (neck_channels <= 0 || neck_channels % 2 != 0) {
        throw ConfigError("encoder: neck_channels must be positive and even");
    }
    std::vector<int> g_sorted = global_block_indices;
    for (std::size_t i = 1; i < g_sorted.size(); ++i) {
        if (g_sorted[i] <= g_sorted[i - 1]) throw ConfigError("encoder: global block indices must be increasing");
    }
    for (int gi : g_sorted) {
        if (gi < 0 || gi >= num_blocks) {
            throw ConfigError("encoder: global block index " + std::to_string(gi) + " outside [0," +
                              std::to_string(num_blocks) + ")");
        }
    }
    if (g_sorted.size() >= 2) {
        const int stride = g_sorted[1] - g_sorted[0];
        for (std::size_t i = 2; i < g_sorted.size(); ++i) {
            if (g_sorted[i] - g_sorted[i - 1] != stride) {
                throw ConfigError("encoder: global attention blocks must be equidistant");
            }
        }
    }
}

ImageEncoder::ImageEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 101));
    const int d = cfg_.embed_dim;
    const int p = cfg_.patch_size;
    const int c = cfg_.neck_channels;
    const int hidden = 4 * d;

    patch_w_ = params_.add("patch.w", normal_init({p, p, 3, d}, 1.0 / std::sqrt(3.0 * p * p), rng));
    patch_b_ = params_.add("patch.b", Tensor::zeros({d}));

    const double attn_std = 1.0 / std::sqrt((double)d);
    blocks_.resize((std::size_t)cfg_.num_blocks);
    for (int b = 0; b < cfg_.num_blocks; ++b) {
        Block& blk = blocks_[(std::size_t)b];
        const std::string pre = "block" + std::to_string(b) + ".";
        blk.ln1_g = params_.add(pre + "ln1.g", Tensor::full({d}, 1.0));
        blk.ln1_b = params_.add(pre + "ln1.b", Tensor::zeros({d}));
        blk.attn.wq = params_.add(pre + "attn.wq", normal_init({d, d}, attn_std, rng));
        blk.attn.bq = params_.add(pre + "attn.bq", Tensor::zeros({d}));
        blk.attn.wk = params_.add(pre + "attn.wk", normal_init({d, d}, attn_std, rng));
        blk.attn.bk = params_.add(pre + "attn.bk", Tensor::zeros({d}));
        blk.attn.wv = params_.add(pre + "attn.wv", normal_init({d, d}, attn_std, rng));
        blk.attn.bv = params_.add(pre + "attn.bv", Tensor::zeros({d}));
        blk.attn.wo = params_.add(pre + "attn.wo", normal_init({d, d}, attn_std, rng));
        blk.attn.bo = params_.add(pre + "attn.bo", Tensor::zeros({d}));
        blk.ln2_g = params_.add(pre + "ln2.g", Tensor::full({d}, 1.0));
        blk.ln2_b = params_.add(pre + "ln2.b", Tensor::zeros({d}));
        blk.fc1_w = params_.add(pre + "mlp.fc1.w", normal_init({d, hidden}, attn_std, rng));
        blk.fc1_b = params_.add(pre + "mlp.fc1.b", Tensor::zeros({hidden}));
        blk.fc2_w = params_.add(pre + "mlp.fc2.w", normal_init({hidden, d}, 1.0 / std::sqrt((double)hidden), rng));
        blk.fc2_b = params_.add(pre + "mlp.fc2.b", Tensor::zeros({d}));
    }

    n1_w_ = params_.add("neck.conv1.w", normal_init({1, 1, d, c}, attn_std, rng));
    n1_b_ = params_.add("neck.conv1.b", Tensor::zeros({c}));
    nln1_g_ = params_.add("neck.ln1.g", Tensor::full({c}, 1.0));
    nln1_b_ = params_.add("neck.ln1.b", Tensor::zeros({c}));
    n2_w_ = params_.add("neck.conv2.w", normal_init({3, 3, c, c}, 1.0 / std::sqrt(9.0 * c), rng));
    n2_b_ = params_.add("neck.conv2.b", Tensor::zeros({c}));
    nln2_g_ = params_.add("neck.ln2.g", Tensor::full({c}, 1.0));
    nln2_b_ = params_.add("neck.ln2.b", Tensor::zeros({c}));
}

Tensor ImageEncoder::patch_embed(const Tensor& image) const {
    const int s = cfg_.input_size;
    if (image.rank() != 3 || image.dim(0) != s || image.dim(1) != s || image.dim(2) != 3) {
        throw ShapeError("patch_embed: expected [" + std::to_string(s) + "," + std::to_string(s) +
                         ",3] image, got " + shape_str(image.shape()));
    }
    return conv2d(image, patch_w_, patch_b_, cfg_.patch_size, 0);
}

Tensor ImageEncoder::encoder_block(const Tensor& tokens_grid, int block_index) const {
    if (block_index < 0 || block_index >= cfg_.num_blocks) {
        throw ShapeError("encoder_block: block index " + std::to_string(block_index) + " outside [0," +
                         std::to_string(cfg_.num_blocks) + ")");
    }
    const int g = cfg_.grid_side();
    const int d = cfg_.embed_dim;
    if (tokens_grid.rank() != 3 || tokens_grid.dim(0) != g || tokens_grid.dim(1) != g || tokens_grid.dim(2) != d) {
        throw ShapeError("encoder_block: expected [" + std::to_string(g) + "," + std::to_string(g) + "," +
                         std::to_string(d) + "] tokens, got " + shape_str(tokens_grid.shape()));
    }
    const Block& blk = blocks_[(std::size_t)block_index];
    const int t = g * g;

    Tensor x = reshape(tokens_grid, {t, d});
    Tensor h = affine_layer_norm(x, blk.ln1_g, blk.ln1_b);

    Tensor attn_out;
    if (cfg_.is_global_block(block_index)) {
        attn_out = multihead_attention(h, h, h, blk.attn, cfg_.num_heads);
    } else {
        const int ws = cfg_.window_size;
        const int tokens_per_window = ws * ws;
        const auto perm = window_permutation(g, ws);
        Tensor hw = gather_rows(h, perm);
        std::vector<Tensor> outs;
        outs.reserve((std::size_t)(t / tokens_per_window));
        for (int w0 = 0; w0 < t; w0 += tokens_per_window) {
            Tensor win = row_slice(hw, w0, w0 + tokens_per_window);
            outs.push_back(multihead_attention(win, win, win, blk.attn, cfg_.num_heads));
        }
        Tensor stacked = outs.size() == 1 ? outs[0] : concat_rows(outs);
        attn_out = gather_rows(stacked, inverse_permutation(perm));
    }
    x = add(x, attn_out);

    Tensor m = affine_layer_norm(x, blk.ln2_g, blk.ln2_b);
    m = linear(gelu(linear(m, blk.fc1_w, blk.fc1_b)), blk.fc2_w, blk.fc2_b);
    x = add(x, m);
    return reshape(x, {g, g, d});
}

Tensor ImageEncoder::neck(const Tensor& tokens_grid) const {
    Tensor h = conv2d(tokens_grid, n1_w_, n1_b_, 1, 0);
    h = channel_layer_norm(h, nln1_g_, nln1_b_);
    h = conv2d(h, n2_w_, n2_b_, 1, 1);
    return channel_layer_norm(h, nln2_g_, nln2_b_);
}

ImageEmbedding ImageEncoder::encode(const Tensor& image, const PromptEncoder& prompt_encoder) const {
    Tensor tokens = patch_embed(image);
    for (int b = 0; b < cfg_.num_blocks; ++b) tokens = encoder_block(tokens, b);
    ImageEmbedding out;
    out.grid = neck(tokens);
    const int g = cfg_.grid_side();
    out.pe_grid = reshape(prompt_encoder.pe_grid(), {g, g, cfg_.neck_channels});
    return out;
}

} // namespace pseg
