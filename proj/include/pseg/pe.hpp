#pragma once

#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

// Random Fourier coordinate encoding shared by the prompt encoder and the
// mask decoder. The frequency matrix is drawn once from a seeded unit
// Gaussian and is fixed afterwards; identical seeds give identical encoders.
class PositionalEncoder {
public:
    PositionalEncoder(int channels, std::uint64_t seed);

    int channels() const { return channels_; }

    // v = [sin(2*pi*F.(x,y)) ; cos(2*pi*F.(x,y))], components in [-1,1].
    std::vector<double> encode(double x, double y) const;

    // [G*G, C] encoding of cell centers ((col+0.5)/G, (row+0.5)/G), row-major.
    // Depends only on (G, C, seed), never on image content.
    Tensor grid(int side) const;

    // Frequency matrix [C/2, 2]; registered as a non-trainable checkpoint
    // entry so restored models reproduce encodings exactly.
    const Tensor& frequencies() const { return freq_; }
    void set_frequencies(const Tensor& f);

private:
    int channels_;
    Tensor freq_;
};

} // namespace pseg
