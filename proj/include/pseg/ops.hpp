#pragma once

#include <vector>

#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Differentiable primitives. Every op validates shapes, rejects non-finite
// outputs, and records a vector-Jacobian closure on the active tape when any
// input requires gradients. With no active tape the ops are pure functions.

Tensor matmul(const Tensor& a, const Tensor& b); // [m,k] x [k,n] -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b); // ties differentiate toward a
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor transpose2d(const Tensor& a); // [m,n] -> [n,m]

// x: [H,W,Cin], w: [kh,kw,Cin,Cout], b: [Cout] (pass invalid Tensor for none).
// Output spatial extent: floor((H + 2*pad - kh)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// Output spatial extent: (H-1)*stride + kh.
Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& a); // normalizes last dim; no affine terms

Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);

// Inverted dropout: scales surviving activations by 1/(1-rate) so eval-mode
// (train=false) is the identity.
Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng);

Tensor mean_all(const Tensor& a); // -> [1]
Tensor sum_all(const Tensor& a);  // -> [1]

Tensor row_slice(const Tensor& a, int r0, int r1);      // rows [r0,r1) of [m,n]
Tensor col_slice(const Tensor& a, int c0, int c1);      // cols [c0,c1) of [m,n]
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor gather_elems(const Tensor& a, const std::vector<int>& idx); // -> [|idx|]

Tensor add_rowvec(const Tensor& a, const Tensor& v); // [m,n] + [n] per row
Tensor mul_rowvec(const Tensor& a, const Tensor& v);

// Numerically stable mean BCE over all elements; targets in [0,1].
Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets);
// Soft Dice loss 1 - (2*sum(p*y)+1)/(sum(p)+sum(y)+1) with p = sigmoid(logits).
Tensor dice_loss_with_logits(const Tensor& logits, const Tensor& targets);

// Convenience composition: add_rowvec(matmul(x, w), b).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Raw kernels shared with non-differentiating code paths.
namespace kernels {
void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n); // c += a.b
void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n); // c += a.b^T, b is [n,k]
void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n); // c += a^T.b, a is [k,m]
} // namespace kernels

} // namespace pseg
