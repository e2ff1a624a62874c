#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pseg/errors.hpp"

namespace pseg {

// Dense row-major f64 tensor. Copies are shallow: they share the underlying
// storage (data, grad, requires_grad), so a tensor captured by a tape closure
// sees gradients accumulated later. Values are treated as immutable once
// created; the optimizer is the only sanctioned in-place writer.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool valid() const { return st_ != nullptr; }
    const std::vector<int>& shape() const { return st_->shape; }
    int dim(int i) const { return st_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(st_->shape.size()); }
    std::size_t numel() const { return st_->data.size(); }

    double* data() { return st_->data.data(); }
    const double* data() const { return st_->data.data(); }
    std::vector<double>& vec() { return st_->data; }
    const std::vector<double>& vec() const { return st_->data; }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }

    // Tensor is a handle: const protects the handle, not the shared storage.
    // Gradient accessors are const so tape closures holding copies can
    // accumulate into the same buffers the optimizer later reads.
    bool has_grad() const { return st_ && !st_->grad.empty(); }
    std::vector<double>& grad() const; // allocates zero-filled on first use
    void zero_grad() const;
    void accumulate_grad(const double* g, std::size_t n) const;

    // Identity of the tape op that produced this tensor (leaves: -1).
    std::uint64_t tape_serial() const { return st_ ? st_->tape_serial : 0; }
    int producer_op() const { return st_ ? st_->producer_op : -1; }
    void set_producer(std::uint64_t serial, int op_index) {
        st_->tape_serial = serial;
        st_->producer_op = op_index;
    }

    // Deep copy (fresh storage, grad not copied).
    Tensor clone() const;

private:
    struct Storage {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad; // empty until first accumulation
        bool requires_grad = false;
        std::uint64_t tape_serial = 0;
        int producer_op = -1;
    };

    std::shared_ptr<Storage> st_;
};

std::string shape_str(const std::vector<int>& shape);
std::size_t shape_numel(const std::vector<int>& shape);

// Reverse-mode tape. Ops append themselves in execution order; backward
// replays the closures in reverse, visiting each exactly once. One tape per
// forward pass, confined to a single thread.
class Tape {
public:
    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t serial() const { return serial_; }
    std::size_t size() const { return ops_.size(); }

    // Returns the index of the recorded op.
    int record(std::function<void()> backward_fn);

    // Seeds d(loss)/d(loss) = 1 and runs all recorded ops in reverse.
    // loss must be a scalar produced on this tape.
    void backward(Tensor& loss);

private:
    std::uint64_t serial_;
    std::vector<std::function<void()>> ops_;
};

Tape* active_tape();

// RAII activation of a tape for the current thread.
class TapeGuard {
public:
    explicit TapeGuard(Tape& tape);
    ~TapeGuard();
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape* prev_;
};

} // namespace pseg
