#include "pseg/pe.hpp"

#include <cmath>

namespace pseg {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

PositionalEncoder::PositionalEncoder(int channels, std::uint64_t seed) : channels_(channels) {
    if (channels <= 0 || channels % 2 != 0) {
        throw ConfigError("positional encoder: channel count must be positive and even");
    }
    Rng rng(seed);
    freq_ = Tensor::zeros({channels / 2, 2});
    for (auto& v : freq_.vec()) v = rng.normal();
}

void PositionalEncoder::set_frequencies(const Tensor& f) {
    if (f.rank() != 2 || f.dim(0) != channels_ / 2 || f.dim(1) != 2) {
        throw ShapeError("positional encoder: frequency matrix must be [" + std::to_string(channels_ / 2) + ",2]");
    }
    freq_ = f;
}

std::vector<double> PositionalEncoder::encode(double x, double y) const {
    if (!std::isfinite(x) || !std::isfinite(y)) {
        throw NumericError("positional encoder: non-finite coordinate");
    }
    const int half = channels_ / 2;
    std::vector<double> out((std::size_t)channels_);
    for (int i = 0; i < half; ++i) {
        const double phase = kTwoPi * (freq_.data()[2 * i] * x + freq_.data()[2 * i + 1] * y);
        out[(std::size_t)i] = std::sin(phase);
        out[(std::size_t)(half + i)] = std::cos(phase);
    }
    return out;
}

Tensor PositionalEncoder::grid(int side) const {
    Tensor t = Tensor::zeros({side * side, channels_});
    for (int row = 0; row < side; ++row) {
        for (int col = 0; col < side; ++col) {
            const auto v = encode((col + 0.5) / side, (row + 0.5) / side);
            double* dst = t.data() + ((std::size_t)row * side + col) * channels_;
            for (int c = 0; c < channels_; ++c) dst[c] = v[(std::size_t)c];
        }
    }
    return t;
}

} // namespace pseg
