#include "pseg/ops.hpp"

#include <cmath>
#include <cstring>

namespace pseg {

namespace kernels {

void matmul_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (std::size_t)i * k;
        double* crow = c + (std::size_t)i * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + (std::size_t)kk * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + (std::size_t)i * k;
        double* crow = c + (std::size_t)i * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + (std::size_t)j * k;
            double s = 0.0;
            for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            crow[j] += s;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int r = 0; r < k; ++r) {
        const double* arow = a + (std::size_t)r * m;
        const double* brow = b + (std::size_t)r * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + (std::size_t)i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace kernels

namespace {

void check_finite(const char* op, const Tensor& t) {
    for (double v : t.vec()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
    }
}

bool tracked(const Tensor& t) { return active_tape() != nullptr && t.valid() && t.requires_grad(); }

void record_op(Tensor& out, std::function<void()> fn) {
    Tape* tape = active_tape();
    out.set_requires_grad(true);
    const int idx = tape->record(std::move(fn));
    out.set_producer(tape->serial(), idx);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_matrix(const char* op, const Tensor& t) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
    }
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kLayerNormEps = 1e-12;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    kernels::matmul_nn(a.data(), b.data(), out.data(), m, k, n);
    check_finite("matmul", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) kernels::matmul_nt(g, b.data(), a.grad().data(), m, n, k);
            if (b.requires_grad()) kernels::matmul_tn(a.data(), g, b.grad().data(), k, m, n);
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    check_finite("add", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    check_finite("sub", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    check_finite("mul", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
    require_same_shape("divide", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
    check_finite("divide", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / b.data()[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double bv = b.data()[i];
                    gb[i] -= g[i] * a.data()[i] / (bv * bv);
                }
            }
        });
    }
    return out;
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    require_same_shape("minimum", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] <= b.data()[i] ? a.data()[i] : b.data()[i];
    check_finite("minimum", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const bool pick_a = a.data()[i] <= b.data()[i];
                if (pick_a && a.requires_grad()) a.grad()[i] += g[i];
                if (!pick_a && b.requires_grad()) b.grad()[i] += g[i];
            }
        });
    }
    return out;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    require_same_shape("maximum", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] >= b.data()[i] ? a.data()[i] : b.data()[i];
    check_finite("maximum", out);
    if (tracked(a) || tracked(b)) {
        record_op(out, [a, b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const bool pick_a = a.data()[i] >= b.data()[i];
                if (pick_a && a.requires_grad()) a.grad()[i] += g[i];
                if (!pick_a && b.requires_grad()) b.grad()[i] += g[i];
            }
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
    check_finite("add_scalar", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    check_finite("mul_scalar", out);
    if (tracked(a)) {
        record_op(out, [a, out, n, s]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    Tensor out = Tensor::from_data(std::move(shape), a.vec());
    if (tracked(a)) {
        record_op(out, [a, out]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            a.accumulate_grad(out.grad().data(), out.numel());
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require_matrix("transpose", a);
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) out.data()[(std::size_t)j * m + i] = a.data()[(std::size_t)i * n + j];
    }
    if (tracked(a)) {
        record_op(out, [a, out, m, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < n; ++j) ga[(std::size_t)i * n + j] += g[(std::size_t)j * m + i];
            }
        });
    }
    return out;
}

namespace {

struct ConvDims {
    int h, w, cin, kh, kw, cout, ho, wo;
};

ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.rank() != 3) throw ShapeError(std::string(op) + ": input must be [H,W,Cin], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError(std::string(op) + ": weight must be [kh,kw,Cin,Cout], got " + shape_str(w.shape()));
    ConvDims d{};
    d.h = x.dim(0);
    d.w = x.dim(1);
    d.cin = x.dim(2);
    d.kh = w.dim(0);
    d.kw = w.dim(1);
    d.cout = w.dim(3);
    if (w.dim(2) != d.cin) {
        throw ShapeError(std::string(op) + ": weight expects " + std::to_string(w.dim(2)) +
                         " input channels, image has " + std::to_string(d.cin));
    }
    if (b.valid() && (b.rank() != 1 || b.dim(0) != d.cout)) {
        throw ShapeError(std::string(op) + ": bias shape " + shape_str(b.shape()) + " does not match " +
                         std::to_string(d.cout) + " output channels");
    }
    if (stride <= 0) throw ShapeError(std::string(op) + ": stride must be positive");
    if (pad < 0) throw ShapeError(std::string(op) + ": padding must be non-negative");
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw) {
        throw ShapeError(std::string(op) + ": kernel larger than padded input");
    }
    return d;
}

void im2col(const double* x, const ConvDims& d, int stride, int pad, double* cols) {
    const int patch = d.kh * d.kw * d.cin;
    std::memset(cols, 0, sizeof(double) * (std::size_t)d.ho * d.wo * patch);
    for (int oy = 0; oy < d.ho; ++oy) {
        for (int ox = 0; ox < d.wo; ++ox) {
            double* row = cols + ((std::size_t)oy * d.wo + ox) * patch;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= d.h) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= d.w) continue;
                    std::memcpy(row + ((std::size_t)ky * d.kw + kx) * d.cin,
                                x + ((std::size_t)iy * d.w + ix) * d.cin, sizeof(double) * (std::size_t)d.cin);
                }
            }
        }
    }
}

void col2im_add(const double* cols, const ConvDims& d, int stride, int pad, double* dx) {
    const int patch = d.kh * d.kw * d.cin;
    for (int oy = 0; oy < d.ho; ++oy) {
        for (int ox = 0; ox < d.wo; ++ox) {
            const double* row = cols + ((std::size_t)oy * d.wo + ox) * patch;
            for (int ky = 0; ky < d.kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= d.h) continue;
                for (int kx = 0; kx < d.kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= d.w) continue;
                    const double* src = row + ((std::size_t)ky * d.kw + kx) * d.cin;
                    double* dst = dx + ((std::size_t)iy * d.w + ix) * d.cin;
                    for (int c = 0; c < d.cin; ++c) dst[c] += src[c];
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const ConvDims d = conv_dims("conv2d", x, w, b, stride, pad);
    const int patch = d.kh * d.kw * d.cin;
    const int positions = d.ho * d.wo;

    std::vector<double> cols((std::size_t)positions * patch);
    im2col(x.data(), d, stride, pad, cols.data());

    Tensor out = Tensor::zeros({d.ho, d.wo, d.cout});
    kernels::matmul_nn(cols.data(), w.data(), out.data(), positions, patch, d.cout);
    if (b.valid()) {
        for (int p = 0; p < positions; ++p) {
            double* row = out.data() + (std::size_t)p * d.cout;
            for (int c = 0; c < d.cout; ++c) row[c] += b.data()[c];
        }
    }
    check_finite("conv2d", out);

    if (tracked(x) || tracked(w) || tracked(b)) {
        record_op(out, [x, w, b, out, d, stride, pad, patch, positions]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (b.valid() && b.requires_grad()) {
                double* gb = b.grad().data();
                for (int p = 0; p < positions; ++p) {
                    const double* row = g + (std::size_t)p * d.cout;
                    for (int c = 0; c < d.cout; ++c) gb[c] += row[c];
                }
            }
            if (w.requires_grad()) {
                // im2col is recomputed rather than saved; it is cheap next to the matmul.
                std::vector<double> cols2((std::size_t)positions * patch);
                im2col(x.data(), d, stride, pad, cols2.data());
                kernels::matmul_tn(cols2.data(), g, w.grad().data(), patch, positions, d.cout);
            }
            if (x.requires_grad()) {
                std::vector<double> dcols((std::size_t)positions * patch, 0.0);
                kernels::matmul_nt(g, w.data(), dcols.data(), positions, d.cout, patch);
                col2im_add(dcols.data(), d, stride, pad, x.grad().data());
            }
        });
    }
    return out;
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    if (x.rank() != 3) throw ShapeError("transposed_conv2d: input must be [H,W,Cin], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ShapeError("transposed_conv2d: weight must be [kh,kw,Cin,Cout], got " + shape_str(w.shape()));
    const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
    const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
    if (w.dim(2) != cin) {
        throw ShapeError("transposed_conv2d: weight expects " + std::to_string(w.dim(2)) +
                         " input channels, image has " + std::to_string(cin));
    }
    if (stride <= 0) throw ShapeError("transposed_conv2d: stride must be positive");
    if (b.valid() && (b.rank() != 1 || b.dim(0) != cout)) {
        throw ShapeError("transposed_conv2d: bias shape " + shape_str(b.shape()) + " does not match output channels");
    }
    const int ho = (h - 1) * stride + kh;
    const int wo = (wd - 1) * stride + kw;

    Tensor out = Tensor::zeros({ho, wo, cout});
    if (b.valid()) {
        for (int p = 0; p < ho * wo; ++p) {
            double* row = out.data() + (std::size_t)p * cout;
            for (int c = 0; c < cout; ++c) row[c] = b.data()[c];
        }
    }
    for (int iy = 0; iy < h; ++iy) {
        for (int ix = 0; ix < wd; ++ix) {
            const double* xpix = x.data() + ((std::size_t)iy * wd + ix) * cin;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    double* opix = out.data() + ((std::size_t)(iy * stride + ky) * wo + (ix * stride + kx)) * cout;
                    const double* wbase = w.data() + ((std::size_t)ky * kw + kx) * cin * cout;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double xv = xpix[ci];
                        const double* wrow = wbase + (std::size_t)ci * cout;
                        for (int co = 0; co < cout; ++co) opix[co] += xv * wrow[co];
                    }
                }
            }
        }
    }
    check_finite("transposed_conv2d", out);

    if (tracked(x) || tracked(w) || tracked(b)) {
        record_op(out, [x, w, b, out, h, wd, cin, kh, kw, cout, stride, ho, wo]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (b.valid() && b.requires_grad()) {
                double* gb = b.grad().data();
                for (int p = 0; p < ho * wo; ++p) {
                    const double* row = g + (std::size_t)p * cout;
                    for (int c = 0; c < cout; ++c) gb[c] += row[c];
                }
            }
            const bool need_x = x.requires_grad();
            const bool need_w = w.requires_grad();
            if (!need_x && !need_w) return;
            double* gx = need_x ? x.grad().data() : nullptr;
            double* gw = need_w ? w.grad().data() : nullptr;
            for (int iy = 0; iy < h; ++iy) {
                for (int ix = 0; ix < wd; ++ix) {
                    const double* xpix = x.data() + ((std::size_t)iy * wd + ix) * cin;
                    double* gxpix = need_x ? gx + ((std::size_t)iy * wd + ix) * cin : nullptr;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const double* gpix =
                                g + ((std::size_t)(iy * stride + ky) * wo + (ix * stride + kx)) * cout;
                            const std::size_t wbase = ((std::size_t)ky * kw + kx) * cin * cout;
                            for (int ci = 0; ci < cin; ++ci) {
                                const double* wrow = w.data() + wbase + (std::size_t)ci * cout;
                                double acc = 0.0;
                                for (int co = 0; co < cout; ++co) acc += gpix[co] * wrow[co];
                                if (need_x) gxpix[ci] += acc;
                                if (need_w) {
                                    double* gwrow = gw + wbase + (std::size_t)ci * cout;
                                    const double xv = xpix[ci];
                                    for (int co = 0; co < cout; ++co) gwrow[co] += xv * gpix[co];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("softmax: rank must be >= 1");
    const int d = a.shape().back();
    const std::size_t rows = a.numel() / (std::size_t)d;
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = a.data() + r * d;
        double* dst = out.data() + r * d;
        double mx = src[0];
        for (int i = 1; i < d; ++i) mx = src[i] > mx ? src[i] : mx;
        double sum = 0.0;
        for (int i = 0; i < d; ++i) {
            dst[i] = std::exp(src[i] - mx);
            sum += dst[i];
        }
        const double inv = 1.0 / sum;
        for (int i = 0; i < d; ++i) dst[i] *= inv;
    }
    check_finite("softmax", out);
    if (tracked(a)) {
        record_op(out, [a, out, d, rows]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = out.data() + r * d;
                const double* gr = g + r * d;
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += gr[i] * y[i];
                for (int i = 0; i < d; ++i) ga[r * d + i] += y[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    const int d = a.shape().back();
    const std::size_t rows = a.numel() / (std::size_t)d;
    Tensor out = Tensor::zeros(a.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = a.data() + r * d;
        double* dst = out.data() + r * d;
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += src[i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double c = src[i] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[r] = inv;
        for (int i = 0; i < d; ++i) dst[i] = (src[i] - mean) * inv;
    }
    check_finite("layer_norm", out);
    if (tracked(a)) {
        record_op(out, [a, out, d, rows, inv_std = std::move(inv_std)]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = out.data() + r * d;
                const double* gr = g + r * d;
                double gmean = 0.0, gydot = 0.0;
                for (int i = 0; i < d; ++i) {
                    gmean += gr[i];
                    gydot += gr[i] * y[i];
                }
                gmean /= d;
                gydot /= d;
                const double inv = inv_std[r];
                for (int i = 0; i < d; ++i) ga[r * d + i] += inv * (gr[i] - gmean - y[i] * gydot);
            }
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    check_finite("gelu", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const double x = a.data()[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ga[i] += g[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    check_finite("relu", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                if (a.data()[i] > 0.0) ga[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = sigmoid_scalar(a.data()[i]);
    check_finite("sigmoid", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) {
                const double y = out.data()[i];
                ga[i] += g[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor softplus(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        out.data()[i] = (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    check_finite("softplus", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * sigmoid_scalar(a.data()[i]);
        });
    }
    return out;
}

Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ShapeError("dropout: rate must lie in [0,1)");
    if (!train || rate == 0.0) return a;
    const std::size_t n = a.numel();
    std::vector<double> mask(n);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * mask[i];
    check_finite("dropout", out);
    if (tracked(a)) {
        record_op(out, [a, out, n, mask = std::move(mask)]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * mask[i];
        });
    }
    return out;
}

Tensor mean_all(const Tensor& a) {
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s / (double)n);
    check_finite("mean", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double g = out.grad()[0] / (double)n;
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a) {
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.data()[i];
    Tensor out = Tensor::scalar(s);
    check_finite("sum", out);
    if (tracked(a)) {
        record_op(out, [a, out, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double g = out.grad()[0];
            double* ga = a.grad().data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor row_slice(const Tensor& a, int r0, int r1) {
    require_matrix("row_slice", a);
    if (r0 < 0 || r1 > a.dim(0) || r0 >= r1) {
        throw ShapeError("row_slice: invalid range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") for " + shape_str(a.shape()));
    }
    const int n = a.dim(1);
    Tensor out = Tensor::zeros({r1 - r0, n});
    std::memcpy(out.data(), a.data() + (std::size_t)r0 * n, sizeof(double) * out.numel());
    if (tracked(a)) {
        record_op(out, [a, out, r0, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data() + (std::size_t)r0 * n;
            for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor col_slice(const Tensor& a, int c0, int c1) {
    require_matrix("col_slice", a);
    if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) {
        throw ShapeError("col_slice: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") for " + shape_str(a.shape()));
    }
    const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (int i = 0; i < m; ++i) {
        std::memcpy(out.data() + (std::size_t)i * w, a.data() + (std::size_t)i * n + c0, sizeof(double) * w);
    }
    if (tracked(a)) {
        record_op(out, [a, out, c0, m, n, w]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < w; ++j) ga[(std::size_t)i * n + c0 + j] += g[(std::size_t)i * w + j];
            }
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int n = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        require_matrix("concat_rows", p);
        if (p.dim(1) != n) throw ShapeError("concat_rows: column count mismatch");
        total += p.dim(0);
    }
    Tensor out = Tensor::zeros({total, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data() + off, p.data(), sizeof(double) * p.numel());
        off += p.numel();
    }
    bool any = false;
    for (const auto& p : parts) any = any || tracked(p);
    if (any) {
        record_op(out, [parts, out]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            std::size_t off2 = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) p.accumulate_grad(g + off2, p.numel());
                off2 += p.numel();
            }
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require_matrix("concat_cols", p);
        if (p.dim(0) != m) throw ShapeError("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({m, total});
    int coff = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; ++i) {
            std::memcpy(out.data() + (std::size_t)i * total + coff, p.data() + (std::size_t)i * w,
                        sizeof(double) * w);
        }
        coff += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || tracked(p);
    if (any) {
        record_op(out, [parts, out, m, total]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            int coff2 = 0;
            for (auto& p : parts) {
                const int w = p.dim(1);
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < w; ++j) gp[(std::size_t)i * w + j] += g[(std::size_t)i * total + coff2 + j];
                    }
                }
                coff2 += w;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    require_matrix("gather_rows", a);
    const int m = a.dim(0), n = a.dim(1);
    for (int i : idx) {
        if (i < 0 || i >= m) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
    }
    Tensor out = Tensor::zeros({(int)idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        std::memcpy(out.data() + r * n, a.data() + (std::size_t)idx[r] * n, sizeof(double) * n);
    }
    if (tracked(a)) {
        record_op(out, [a, out, idx, n]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t r = 0; r < idx.size(); ++r) {
                double* dst = ga + (std::size_t)idx[r] * n;
                const double* src = g + r * n;
                for (int j = 0; j < n; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor gather_elems(const Tensor& a, const std::vector<int>& idx) {
    const std::size_t n = a.numel();
    for (int i : idx) {
        if (i < 0 || (std::size_t)i >= n) throw ShapeError("gather_elems: index " + std::to_string(i) + " out of range");
    }
    Tensor out = Tensor::zeros({(int)idx.size()});
    for (std::size_t r = 0; r < idx.size(); ++r) out.data()[r] = a.data()[idx[r]];
    if (tracked(a)) {
        record_op(out, [a, out, idx]() mutable {
            if (!out.has_grad() || !a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad().data();
            for (std::size_t r = 0; r < idx.size(); ++r) ga[idx[r]] += g[r];
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    require_matrix("add_rowvec", a);
    if (v.rank() != 1 || v.dim(0) != a.dim(1)) {
        throw ShapeError("add_rowvec: vector shape " + shape_str(v.shape()) + " does not match columns of " +
                         shape_str(a.shape()));
    }
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + (std::size_t)i * n;
        double* orow = out.data() + (std::size_t)i * n;
        for (int j = 0; j < n; ++j) orow[j] = arow[j] + v.data()[j];
    }
    check_finite("add_rowvec", out);
    if (tracked(a) || tracked(v)) {
        record_op(out, [a, v, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (std::size_t i = 0; i < (std::size_t)m * n; ++i) ga[i] += g[i];
            }
            if (v.requires_grad()) {
                double* gv = v.grad().data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + (std::size_t)i * n;
                    for (int j = 0; j < n; ++j) gv[j] += grow[j];
                }
            }
        });
    }
    return out;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
    require_matrix("mul_rowvec", a);
    if (v.rank() != 1 || v.dim(0) != a.dim(1)) {
        throw ShapeError("mul_rowvec: vector shape " + shape_str(v.shape()) + " does not match columns of " +
                         shape_str(a.shape()));
    }
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape());
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + (std::size_t)i * n;
        double* orow = out.data() + (std::size_t)i * n;
        for (int j = 0; j < n; ++j) orow[j] = arow[j] * v.data()[j];
    }
    check_finite("mul_rowvec", out);
    if (tracked(a) || tracked(v)) {
        record_op(out, [a, v, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) ga[(std::size_t)i * n + j] += g[(std::size_t)i * n + j] * v.data()[j];
                }
            }
            if (v.requires_grad()) {
                double* gv = v.grad().data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + (std::size_t)i * n;
                    const double* arow = a.data() + (std::size_t)i * n;
                    for (int j = 0; j < n; ++j) gv[j] += grow[j] * arow[j];
                }
            }
        });
    }
    return out;
}

Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
    require_same_shape("bce_with_logits", logits, targets);
    const std::size_t n = logits.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        const double y = targets.data()[i];
        acc += (z > 0.0 ? z : 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = Tensor::scalar(acc / (double)n);
    check_finite("bce_with_logits", out);
    if (tracked(logits) || tracked(targets)) {
        record_op(out, [logits, targets, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / (double)n;
            if (logits.requires_grad()) {
                double* gz = logits.grad().data();
                for (std::size_t i = 0; i < n; ++i) {
                    gz[i] += g * (sigmoid_scalar(logits.data()[i]) - targets.data()[i]);
                }
            }
            if (targets.requires_grad()) {
                double* gy = targets.grad().data();
                for (std::size_t i = 0; i < n; ++i) gy[i] -= g * logits.data()[i];
            }
        });
    }
    return out;
}

Tensor dice_loss_with_logits(const Tensor& logits, const Tensor& targets) {
    require_same_shape("dice_loss", logits, targets);
    const std::size_t n = logits.numel();
    std::vector<double> probs(n);
    double inter = 0.0, psum = 0.0, ysum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        probs[i] = sigmoid_scalar(logits.data()[i]);
        inter += probs[i] * targets.data()[i];
        psum += probs[i];
        ysum += targets.data()[i];
    }
    const double smooth = 1.0;
    const double denom = psum + ysum + smooth;
    Tensor out = Tensor::scalar(1.0 - (2.0 * inter + smooth) / denom);
    check_finite("dice_loss", out);
    if (tracked(logits) || tracked(targets)) {
        record_op(out, [logits, targets, out, n, probs = std::move(probs), inter, denom, smooth]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            const double numer = 2.0 * inter + smooth;
            const double inv_d2 = 1.0 / (denom * denom);
            if (logits.requires_grad()) {
                double* gz = logits.grad().data();
                for (std::size_t i = 0; i < n; ++i) {
                    const double p = probs[i];
                    const double dd_dp = -(2.0 * targets.data()[i] * denom - numer) * inv_d2;
                    gz[i] += g * dd_dp * p * (1.0 - p);
                }
            }
            if (targets.requires_grad()) {
                double* gy = targets.grad().data();
                for (std::size_t i = 0; i < n; ++i) {
                    gy[i] += g * (-(2.0 * probs[i] * denom - numer) * inv_d2);
                }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    return b.valid() ? add_rowvec(y, b) : y;
}

} // namespace pseg
