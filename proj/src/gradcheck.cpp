#include "pseg/gradcheck.hpp"

#include <cmath>

namespace pseg {

namespace {

double eval_scalar(const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    Tensor out = f(x);
    if (out.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
    const double v = out.data()[0];
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: f returned a non-finite value");
    return v;
}

} // namespace

double finite_diff_check_param(const std::function<Tensor()>& f, const Tensor& param, double eps) {
    if (!(eps > 0.0)) throw NumericError("finite_diff_check: eps must be positive");

    const bool was_rg = param.requires_grad();
    Tensor p = param; // shared-storage handle
    p.set_requires_grad(true);
    p.zero_grad();
    std::vector<double> analytic(p.numel(), 0.0);
    {
        Tape tape;
        TapeGuard guard(tape);
        Tensor loss = f();
        if (loss.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
        if (!std::isfinite(loss.data()[0])) throw NumericError("finite_diff_check: f returned a non-finite value");
        if (loss.tape_serial() == tape.serial() && loss.producer_op() >= 0) {
            tape.backward(loss);
            if (p.has_grad()) analytic = p.grad();
        }
    }
    p.zero_grad();
    p.set_requires_grad(false); // keep fd evaluations off any tape

    double max_err = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const double orig = p.data()[i];
        p.data()[i] = orig + eps;
        const double fp = eval_scalar([&](const Tensor&) { return f(); }, p);
        p.data()[i] = orig - eps;
        const double fm = eval_scalar([&](const Tensor&) { return f(); }, p);
        p.data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(fd));
        const double err = std::abs(analytic[i] - fd) / denom;
        if (err > max_err) max_err = err;
    }
    p.set_requires_grad(was_rg);
    return max_err;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (!(eps > 0.0)) throw NumericError("finite_diff_check: eps must be positive");

    Tensor probe = x.clone();
    probe.set_requires_grad(true);
    std::vector<double> analytic(probe.numel(), 0.0);
    {
        Tape tape;
        TapeGuard guard(tape);
        Tensor loss = f(probe);
        if (loss.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
        if (!std::isfinite(loss.data()[0])) throw NumericError("finite_diff_check: f returned a non-finite value");
        // A loss that never touched the probe has zero gradient by definition.
        if (loss.tape_serial() == tape.serial() && loss.producer_op() >= 0) {
            tape.backward(loss);
            if (probe.has_grad()) analytic = probe.grad();
        }
    }

    Tensor shifted = x.clone();
    double max_err = 0.0;
    for (std::size_t i = 0; i < shifted.numel(); ++i) {
        const double orig = shifted.data()[i];
        shifted.data()[i] = orig + eps;
        const double fp = eval_scalar(f, shifted);
        shifted.data()[i] = orig - eps;
        const double fm = eval_scalar(f, shifted);
        shifted.data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(fd));
        const double err = std::abs(analytic[i] - fd) / denom;
        if (err > max_err) max_err = err;
    }
    return max_err;
}

} // namespace pseg
