#include "pseg/tensor.hpp"

#include <atomic>

namespace pseg {

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
thread_local Tape* g_active_tape = nullptr;
} // namespace

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor: non-positive extent in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    const std::size_t n = shape_numel(shape);
    t.st_->shape = std::move(shape);
    t.st_->data.assign(n, 0.0);
    t.st_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.st_->data) v = value;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    if (n != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                         " values, got " + std::to_string(data.size()));
    }
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

std::vector<double>& Tensor::grad() const {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
    return st_->grad;
}

void Tensor::zero_grad() const {
    if (!st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
}

void Tensor::accumulate_grad(const double* g, std::size_t n) const {
    if (n != st_->data.size()) {
        throw ShapeError("tensor: gradient length " + std::to_string(n) + " does not match data length " +
                         std::to_string(st_->data.size()));
    }
    auto& gr = grad();
    for (std::size_t i = 0; i < n; ++i) gr[i] += g[i];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.st_ = std::make_shared<Storage>();
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    t.st_->requires_grad = st_->requires_grad;
    return t;
}

Tape::Tape() : serial_(g_tape_counter.fetch_add(1)) {}

int Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
    return static_cast<int>(ops_.size()) - 1;
}

void Tape::backward(Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (loss.tape_serial() != serial_ || loss.producer_op() < 0) {
        throw NumericError("backward: loss was not produced on this tape");
    }
    loss.grad()[0] += 1.0;
    for (std::size_t i = ops_.size(); i > 0; --i) ops_[i - 1]();
}

Tape* active_tape() { return g_active_tape; }

TapeGuard::TapeGuard(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeGuard::~TapeGuard() { g_active_tape = prev_; }

} // namespace pseg
