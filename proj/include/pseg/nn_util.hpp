#pragma once

#include <cmath>
#include <vector>

#include "pseg/ops.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// Multi-head scaled dot-product attention over token matrices. q_in is
// [Tq,D], k_in and v_in are [Tk,D]; heads partition the channel dimension.
inline Tensor multihead_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                  const AttentionWeights& w, int num_heads) {
    const int d = q_in.dim(1);
    const int dh = d / num_heads;
    Tensor q = linear(q_in, w.wq, w.bq);
    Tensor k = linear(k_in, w.wk, w.bk);
    Tensor v = linear(v_in, w.wv, w.bv);
    const double scale = 1.0 / std::sqrt((double)dh);
    std::vector<Tensor> heads;
    heads.reserve((std::size_t)num_heads);
    for (int h = 0; h < num_heads; ++h) {
        Tensor qh = col_slice(q, h * dh, (h + 1) * dh);
        Tensor kh = col_slice(k, h * dh, (h + 1) * dh);
        Tensor vh = col_slice(v, h * dh, (h + 1) * dh);
        Tensor scores = mul_scalar(matmul(qh, transpose2d(kh)), scale);
        heads.push_back(matmul(softmax_lastdim(scores), vh));
    }
    Tensor merged = num_heads == 1 ? heads[0] : concat_cols(heads);
    return linear(merged, w.wo, w.bo);
}

// Layer norm over the last dim of a token matrix followed by affine terms.
inline Tensor affine_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    return add_rowvec(mul_rowvec(layer_norm(x), gamma), beta);
}

// Channel-wise affine layer norm over a [H,W,C] grid.
inline Tensor channel_layer_norm(const Tensor& grid, const Tensor& gamma, const Tensor& beta) {
    const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
    return reshape(affine_layer_norm(reshape(grid, {h * w, c}), gamma, beta), {h, w, c});
}

// Row permutation grouping a [G*G] token grid into non-overlapping
// window_size x window_size windows, window-major.
inline std::vector<int> window_permutation(int grid_side, int window_size) {
    const int wins = grid_side / window_size;
    std::vector<int> perm;
    perm.reserve((std::size_t)grid_side * grid_side);
    for (int wy = 0; wy < wins; ++wy) {
        for (int wx = 0; wx < wins; ++wx) {
            for (int iy = 0; iy < window_size; ++iy) {
                for (int ix = 0; ix < window_size; ++ix) {
                    perm.push_back((wy * window_size + iy) * grid_side + wx * window_size + ix);
                }
            }
        }
    }
    return perm;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[(std::size_t)perm[i]] = (int)i;
    return inv;
}

} // namespace pseg
