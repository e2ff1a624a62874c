#pragma once

#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// Adam with bias correction. Moment accumulators are laid out parallel to the
// parameter list handed to init(); the list must not change between steps.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    void init(const std::vector<Tensor>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
    }
};

// One update over all parameters from their accumulated gradients. Parameters
// without an accumulated gradient are treated as having zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

} // namespace pseg
