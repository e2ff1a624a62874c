#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/raster.hpp"

namespace pseg {

// Pixel confusion counts with foreground = 1. Additive across images, which
// is the whole basis of micro aggregation.
struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

ConfusionCounts confusion(const MaskU8& pred, const MaskU8& gt);

// Two-class metrics in percent. A class with an empty denominator (absent
// from both prediction and ground truth) is excluded from the mean.
double miou(const ConfusionCounts& c);
double mpa(const ConfusionCounts& c);
double acc(const ConfusionCounts& c);

struct EvalRecord {
    std::string method;
    std::string generator;
    std::string train_domain;
    std::string eval_domain;
    double miou = 0.0;
    double mpa = 0.0;
    double acc = 0.0;
    std::uint64_t seed = 0;
    int n = 0;
};

// Micro aggregation: pool counts over the whole set, then compute once.
EvalRecord aggregate_micro(const std::vector<ConfusionCounts>& per_image, std::string method,
                           std::string generator, std::string train_domain, std::string eval_domain,
                           std::uint64_t seed);

// Foreground pixels blended 50/50 with pure blue, integer-floor arithmetic.
ImageU8 overlay(const ImageU8& image, const MaskU8& mask);

// CSV with a fixed header, two decimal places, rows sorted by
// (method, eval_domain). Deterministic for identical inputs.
std::string write_report(std::vector<EvalRecord> records);

} // namespace pseg
