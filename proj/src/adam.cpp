#include "pseg/adam.hpp"

#include <cmath>

namespace pseg {

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: state holds " + std::to_string(state.m.size()) +
                         " accumulators for " + std::to_string(params.size()) + " parameters");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, (double)state.step);
    const double bc2 = 1.0 - std::pow(state.beta2, (double)state.step);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        if (m.size() != p.numel()) {
            throw ShapeError("adam_step: accumulator " + std::to_string(pi) + " has length " +
                             std::to_string(m.size()) + ", parameter has " + std::to_string(p.numel()));
        }
        const bool has_g = p.has_grad();
        const double* g = has_g ? p.grad().data() : nullptr;
        double* w = p.data();
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double gi = has_g ? g[i] : 0.0;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

} // namespace pseg
