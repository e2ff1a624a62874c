#include "pseg/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include "pseg/errors.hpp"

namespace pseg {

ConfusionCounts confusion(const MaskU8& pred, const MaskU8& gt) {
    if (pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("confusion: prediction is " + std::to_string(pred.w) + "x" + std::to_string(pred.h) +
                         ", ground truth is " + std::to_string(gt.w) + "x" + std::to_string(gt.h));
    }
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool p = pred.v[i] != 0;
        const bool g = gt.v[i] != 0;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

namespace {

void require_nonempty(const ConfusionCounts& c, const char* what) {
    if (c.total() == 0) throw ShapeError(std::string(what) + ": no pixels counted");
}

} // namespace

double miou(const ConfusionCounts& c) {
    require_nonempty(c, "miou");
    double sum = 0.0;
    int classes = 0;
    if (c.tp + c.fp + c.fn > 0) {
        sum += (double)c.tp / (double)(c.tp + c.fp + c.fn);
        ++classes;
    }
    if (c.tn + c.fn + c.fp > 0) {
        sum += (double)c.tn / (double)(c.tn + c.fn + c.fp);
        ++classes;
    }
    return 100.0 * sum / classes;
}

double mpa(const ConfusionCounts& c) {
    require_nonempty(c, "mpa");
    double sum = 0.0;
    int classes = 0;
    if (c.tp + c.fn > 0) {
        sum += (double)c.tp / (double)(c.tp + c.fn);
        ++classes;
    }
    if (c.tn + c.fp > 0) {
        sum += (double)c.tn / (double)(c.tn + c.fp);
        ++classes;
    }
    return 100.0 * sum / classes;
}

double acc(const ConfusionCounts& c) {
    require_nonempty(c, "acc");
    return 100.0 * (double)(c.tp + c.tn) / (double)c.total();
}

EvalRecord aggregate_micro(const std::vector<ConfusionCounts>& per_image, std::string method,
                           std::string generator, std::string train_domain, std::string eval_domain,
                           std::uint64_t seed) {
    if (per_image.empty()) throw ShapeError("aggregate: no images");
    ConfusionCounts pooled;
    for (const auto& c : per_image) pooled += c;
    EvalRecord r;
    r.method = std::move(method);
    r.generator = std::move(generator);
    r.train_domain = std::move(train_domain);
    r.eval_domain = std::move(eval_domain);
    r.miou = miou(pooled);
    r.mpa = mpa(pooled);
    r.acc = acc(pooled);
    r.seed = seed;
    r.n = (int)per_image.size();
    return r;
}

ImageU8 overlay(const ImageU8& image, const MaskU8& mask) {
    if (image.h != mask.h || image.w != mask.w) {
        throw ShapeError("overlay: image is " + std::to_string(image.w) + "x" + std::to_string(image.h) +
                         ", mask is " + std::to_string(mask.w) + "x" + std::to_string(mask.h));
    }
    ImageU8 out = image;
    for (std::size_t i = 0; i < mask.v.size(); ++i) {
        if (!mask.v[i]) continue;
        out.rgb[i * 3 + 0] = (std::uint8_t)(image.rgb[i * 3 + 0] / 2);
        out.rgb[i * 3 + 1] = (std::uint8_t)(image.rgb[i * 3 + 1] / 2);
        out.rgb[i * 3 + 2] = (std::uint8_t)((image.rgb[i * 3 + 2] + 255) / 2);
    }
    return out;
}

std::string write_report(std::vector<EvalRecord> records) {
    std::stable_sort(records.begin(), records.end(), [](const EvalRecord& a, const EvalRecord& b) {
        if (a.method != b.method) return a.method < b.method;
        return a.eval_domain < b.eval_domain;
    });
    std::string out = "method,generator,train_domain,eval_domain,miou,mpa,acc,seed,n\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%.2f,%.2f,%.2f,%llu,%d\n", r.method.c_str(),
                      r.generator.c_str(), r.train_domain.c_str(), r.eval_domain.c_str(), r.miou, r.mpa, r.acc,
                      (unsigned long long)r.seed, r.n);
        out += buf;
    }
    return out;
}

} // namespace pseg
