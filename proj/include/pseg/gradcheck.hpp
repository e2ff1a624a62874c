#pragma once

#include <functional>

#include "pseg/tensor.hpp"

namespace pseg {

// Central-difference verification oracle. f must be a deterministic map from
// x to a scalar tensor built from the differentiable primitives. Returns the
// maximum over components of
//   |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

// Same oracle against a live model parameter: f() evaluates the loss through
// the model holding `param`, whose entries are perturbed in place for the
// central differences. The parameter is restored afterwards.
double finite_diff_check_param(const std::function<Tensor()>& f, const Tensor& param, double eps);

} // namespace pseg
