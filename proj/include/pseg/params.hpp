#pragma once

#include <string>
#include <vector>

#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

// Ordered registry of a model's parameters. Order is construction order and
// is part of the checkpoint contract, so keep registration deterministic.
class ParamSet {
public:
    Tensor add(std::string name, Tensor t, bool trainable = true) {
        items_.push_back({std::move(name), t, trainable});
        t.set_requires_grad(trainable);
        return t;
    }

    const std::vector<NamedParam>& items() const { return items_; }

    std::vector<Tensor> trainable_tensors() const {
        std::vector<Tensor> out;
        for (const auto& it : items_) {
            if (it.trainable) out.push_back(it.tensor);
        }
        return out;
    }

    void set_requires_grad(bool v) {
        for (auto& it : items_) {
            if (it.trainable) it.tensor.set_requires_grad(v);
        }
    }

    void zero_grads() {
        for (auto& it : items_) it.tensor.zero_grad();
    }

    // Hash of all payload bytes; used by the freeze contract checks.
    std::uint64_t payload_hash() const {
        std::uint64_t h = 14695981039346656037ULL;
        for (const auto& it : items_) {
            h = fnv1a64(it.name.data(), it.name.size(), h);
            h = fnv1a64(it.tensor.data(), it.tensor.numel() * sizeof(double), h);
        }
        return h;
    }

    Tensor find(const std::string& name) const {
        for (const auto& it : items_) {
            if (it.name == name) return it.tensor;
        }
        throw ShapeError("params: no parameter named " + name);
    }

private:
    std::vector<NamedParam> items_;
};

// He-style fan-in init used by every conv / linear weight in the project.
inline Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.normal(0.0, stddev);
    return t;
}

} // namespace pseg
