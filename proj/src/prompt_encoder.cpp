#include "pseg/prompt_encoder.hpp"

#include <cmath>

#include "pseg/nn_util.hpp"
#include "pseg/ops.hpp"

namespace pseg {

void PromptEncoderConfig::validate() const {
    if (input_size <= 0 || input_size % 4 != 0) {
        throw ConfigError("prompt encoder: input_size must be a positive multiple of 4");
    }
    if (grid_side_override == 0 && input_size % 16 != 0) {
        throw ConfigError("prompt encoder: input_size must be a multiple of 16 unless grid_side is overridden");
    }
    if (grid_side() <= 0) throw ConfigError("prompt encoder: grid side must be positive");
    if (channels <= 0 || channels % 2 != 0) {
        throw ConfigError("prompt encoder: channels must be positive and even");
    }
    if (mask_c1 < 0 || mask_c2 < 0) throw ConfigError("prompt encoder: mask tower widths must be non-negative");
}

PromptEncoder::PromptEncoder(PromptEncoderConfig cfg, std::uint64_t seed)
    : cfg_(cfg), pe_(cfg.channels, mix_seed(seed, 901)) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 902));
    const int c = cfg_.channels;
    const int c1 = cfg_.c1(), c2 = cfg_.c2();

    e_fg_ = params_.add("point_fg", normal_init({c}, 0.5, rng));
    e_bg_ = params_.add("point_bg", normal_init({c}, 0.5, rng));
    e_tl_ = params_.add("box_tl", normal_init({c}, 0.5, rng));
    e_br_ = params_.add("box_br", normal_init({c}, 0.5, rng));
    no_mask_ = params_.add("no_mask", normal_init({c}, 0.5, rng));

    mw1_ = params_.add("mask.conv1.w", normal_init({2, 2, 1, c1}, 0.5, rng));
    mb1_ = params_.add("mask.conv1.b", Tensor::zeros({c1}));
    mg1_ = params_.add("mask.ln1.g", Tensor::full({c1}, 1.0));
    mbeta1_ = params_.add("mask.ln1.b", Tensor::zeros({c1}));
    mw2_ = params_.add("mask.conv2.w", normal_init({2, 2, c1, c2}, 1.0 / std::sqrt(4.0 * c1), rng));
    mb2_ = params_.add("mask.conv2.b", Tensor::zeros({c2}));
    mg2_ = params_.add("mask.ln2.g", Tensor::full({c2}, 1.0));
    mbeta2_ = params_.add("mask.ln2.b", Tensor::zeros({c2}));
    mw3_ = params_.add("mask.conv3.w", normal_init({1, 1, c2, c}, 1.0 / std::sqrt((double)c2), rng));
    mb3_ = params_.add("mask.conv3.b", Tensor::zeros({c}));

    params_.add("pe_freq", pe_.frequencies(), /*trainable=*/false);
}

void PromptEncoder::sync_pe_from_params() { pe_.set_frequencies(params_.find("pe_freq")); }

Tensor PromptEncoder::encode_points(const std::vector<PointPrompt>& points) const {
    if (points.empty()) return Tensor();
    const int c = cfg_.channels;
    std::vector<Tensor> rows;
    rows.reserve(points.size());
    for (const auto& p : points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("point prompt: non-finite coordinate");
        Tensor loc = Tensor::from_data({1, c}, pe_.encode(p.x, p.y));
        Tensor type = reshape(p.foreground ? e_fg_ : e_bg_, {1, c});
        rows.push_back(add(loc, type));
    }
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

Tensor PromptEncoder::encode_box(const BoxPrompt& box) const {
    box.validate();
    const int c = cfg_.channels;
    Tensor tl = add(Tensor::from_data({1, c}, pe_.encode(box.x0, box.y0)), reshape(e_tl_, {1, c}));
    Tensor br = add(Tensor::from_data({1, c}, pe_.encode(box.x1, box.y1)), reshape(e_br_, {1, c}));
    return concat_rows({tl, br});
}

Tensor PromptEncoder::sparse_tokens(const PromptSet& prompts) const {
    Tensor pts = encode_points(prompts.points);
    Tensor box = prompts.box ? encode_box(*prompts.box) : Tensor();
    if (pts.valid() && box.valid()) return concat_rows({pts, box});
    if (pts.valid()) return pts;
    if (box.valid()) return box;
    return Tensor();
}

Tensor PromptEncoder::encode_mask(const MaskPrompt& mask) const {
    const int side = cfg_.mask_side();
    if (mask.lowres.rank() != 3 || mask.lowres.dim(0) != side || mask.lowres.dim(1) != side ||
        mask.lowres.dim(2) != 1) {
        throw ShapeError("mask prompt: expected [" + std::to_string(side) + "," + std::to_string(side) +
                         ",1], got " + shape_str(mask.lowres.shape()));
    }
    Tensor h = conv2d(mask.lowres, mw1_, mb1_, 2, 0);
    h = channel_layer_norm(gelu(h), mg1_, mbeta1_);
    h = conv2d(h, mw2_, mb2_, 2, 0);
    h = channel_layer_norm(gelu(h), mg2_, mbeta2_);
    h = conv2d(h, mw3_, mb3_, 1, 0);
    if (h.dim(0) != cfg_.grid_side()) {
        throw ConfigError("mask prompt: tower output side " + std::to_string(h.dim(0)) +
                          " does not match the embedding grid side " + std::to_string(cfg_.grid_side()));
    }
    return h;
}

Tensor PromptEncoder::fuse_dense(const Tensor& embedding_grid, const PromptSet& prompts) const {
    const int g = cfg_.grid_side(), c = cfg_.channels;
    if (embedding_grid.rank() != 3 || embedding_grid.dim(0) != g || embedding_grid.dim(1) != g ||
        embedding_grid.dim(2) != c) {
        throw ShapeError("fuse_dense: embedding shape " + shape_str(embedding_grid.shape()) +
                         " does not match the configured [" + std::to_string(g) + "," + std::to_string(g) + "," +
                         std::to_string(c) + "]");
    }
    if (prompts.mask) return add(embedding_grid, encode_mask(*prompts.mask));
    Tensor flat = reshape(embedding_grid, {g * g, c});
    return reshape(add_rowvec(flat, no_mask_), {g, g, c});
}

} // namespace pseg
