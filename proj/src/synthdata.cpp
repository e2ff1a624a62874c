#include "pseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pseg/pnm.hpp"

namespace pseg {

namespace fs = std::filesystem;

DomainSpec DomainSpec::domain(char id, int image_size) {
    DomainSpec s;
    s.image_size = image_size;
    s.id = id;
    switch (id) {
        case 'A':
            break; // defaults: standardized capture, centered object
        case 'B':
            s.center_lo = 0.35;
            s.center_hi = 0.65;
            s.ax_lo = 0.16;
            s.ax_hi = 0.38;
            s.aspect_lo = 0.70;
            s.aspect_hi = 1.20;
            s.rot_lo = -0.35;
            s.rot_hi = 0.35;
            s.bg_r = 76;
            s.bg_g = 62;
            s.bg_b = 72;
            s.bg_noise = 6.0;
            s.gain_lo = 0.55;
            s.gain_hi = 1.35;
            s.bias_lo = -18.0;
            s.bias_hi = 18.0;
            break;
        case 'C':
            s.center_lo = 0.35;
            s.center_hi = 0.65;
            s.ax_lo = 0.18;
            s.ax_hi = 0.36;
            s.aspect_lo = 0.70;
            s.aspect_hi = 1.20;
            s.rot_lo = -0.35;
            s.rot_hi = 0.35;
            s.cluttered_bg = true;
            s.bg_noise = 8.0;
            s.distractors_lo = 1;
            s.distractors_hi = 3;
            break;
        default:
            throw UsageError(std::string("domain: unknown id '") + id + "' (expected A, B, or C)");
    }
    return s;
}

void DomainSpec::validate() const {
    auto range_ok = [](double lo, double hi) { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; };
    if (image_size < 32 || image_size % 16 != 0) {
        throw ConfigError("domain: image_size must be >= 32 and a multiple of 16");
    }
    if (!range_ok(center_lo, center_hi) || !range_ok(ax_lo, ax_hi) || !range_ok(aspect_lo, aspect_hi) ||
        !range_ok(rot_lo, rot_hi) || !range_ok(cut_lo, cut_hi) || !range_ok(gain_lo, gain_hi) ||
        !range_ok(bias_lo, bias_hi) || !range_ok(color_r_lo, color_r_hi) || !range_ok(color_g_lo, color_g_hi) ||
        !range_ok(color_b_lo, color_b_hi)) {
        throw ConfigError("domain: a parameter range is inverted or non-finite");
    }
    if (ax_lo <= 0.0 || aspect_lo <= 0.0) throw ConfigError("domain: axes must be positive");
    if (distractors_lo < 0 || distractors_hi < distractors_lo) throw ConfigError("domain: bad distractor counts");
    if (!(min_coverage > 0.0 && min_coverage < max_coverage && max_coverage <= 1.0)) {
        throw ConfigError("domain: coverage bounds must satisfy 0 < min < max <= 1");
    }
    if (!(max_distractor_overlap >= 0.0 && max_distractor_overlap <= 1.0)) {
        throw ConfigError("domain: distractor overlap cap must lie in [0,1]");
    }
}

std::uint64_t DomainSpec::hash() const {
    std::vector<double> fields = {(double)id, (double)image_size, center_lo, center_hi, ax_lo, ax_hi,
                                  aspect_lo, aspect_hi, rot_lo, rot_hi, cut_lo, cut_hi,
                                  color_r_lo, color_r_hi, color_g_lo, color_g_hi, color_b_lo, color_b_hi,
                                  texture_amp, bg_r, bg_g, bg_b, bg_noise, cluttered_bg ? 1.0 : 0.0,
                                  (double)distractors_lo, (double)distractors_hi, gain_lo, gain_hi,
                                  bias_lo, bias_hi, max_distractor_overlap, min_coverage, max_coverage};
    return fnv1a64(fields.data(), fields.size() * sizeof(double));
}

namespace {

struct Blob {
    double cx, cy, ax, ay, rot, cut; // cut < -1 disables the top cutoff
};

// Fills region/rho2 for a rotated ellipse with an optional flat top edge.
// Returns the pixel count.
std::size_t rasterize_blob(const Blob& b, int s, std::vector<std::uint8_t>& region, std::vector<double>& rho2) {
    const double cos_t = std::cos(b.rot), sin_t = std::sin(b.rot);
    const double y_cut = b.cy - b.cut * b.ay;
    std::size_t count = 0;
    for (int py = 0; py < s; ++py) {
        const double y = (py + 0.5) / s;
        for (int px = 0; px < s; ++px) {
            const double x = (px + 0.5) / s;
            const double dx = x - b.cx, dy = y - b.cy;
            const double u = (dx * cos_t + dy * sin_t) / b.ax;
            const double v = (-dx * sin_t + dy * cos_t) / b.ay;
            const double r2 = u * u + v * v;
            const std::size_t i = (std::size_t)py * s + px;
            if (r2 <= 1.0 && y >= y_cut) {
                region[i] = 1;
                rho2[i] = r2;
                ++count;
            } else {
                region[i] = 0;
            }
        }
    }
    return count;
}

std::size_t overlap_count(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += (a[i] & b[i]) ? 1 : 0;
    return n;
}

} // namespace

Sample render_sample(const DomainSpec& spec, std::uint64_t substream_seed, RenderStats* stats) {
    spec.validate();
    const int s = spec.image_size;
    const std::size_t npix = (std::size_t)s * s;
    Rng rng(substream_seed);

    // Object geometry; resample until the coverage invariant holds, with a
    // deterministic safe fallback if the ranges conspire against us.
    std::vector<std::uint8_t> obj_region(npix);
    std::vector<double> obj_rho2(npix, 0.0);
    std::size_t obj_count = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        Blob b;
        b.ax = rng.uniform(spec.ax_lo, spec.ax_hi);
        b.ay = b.ax * rng.uniform(spec.aspect_lo, spec.aspect_hi);
        b.cx = rng.uniform(spec.center_lo, spec.center_hi);
        b.cy = rng.uniform(spec.center_lo, spec.center_hi);
        b.rot = rng.uniform(spec.rot_lo, spec.rot_hi);
        b.cut = rng.uniform(spec.cut_lo, spec.cut_hi);
        obj_count = rasterize_blob(b, s, obj_region, obj_rho2);
        const double cov = (double)obj_count / (double)npix;
        ok = cov >= spec.min_coverage && cov <= spec.max_coverage;
    }
    if (!ok) {
        Blob fallback{0.5, 0.5, 0.25, 0.25, 0.0, 0.4};
        obj_count = rasterize_blob(fallback, s, obj_region, obj_rho2);
    }

    const double obj_r = rng.uniform(spec.color_r_lo, spec.color_r_hi);
    const double obj_g = rng.uniform(spec.color_g_lo, spec.color_g_hi);
    const double obj_b = rng.uniform(spec.color_b_lo, spec.color_b_hi);
    const double gain = rng.uniform(spec.gain_lo, spec.gain_hi);
    const double bias = rng.uniform(spec.bias_lo, spec.bias_hi);

    // Cluttered backgrounds interpolate a coarse grid of random grays.
    constexpr int kNodes = 9;
    std::array<double, kNodes * kNodes> nodes{};
    if (spec.cluttered_bg) {
        for (auto& v : nodes) v = rng.uniform(70.0, 180.0);
    }

    struct Distractor {
        std::vector<std::uint8_t> region;
        std::vector<double> rho2;
        double r, g, b;
    };
    std::vector<Distractor> distractors;
    const int want = spec.distractors_hi > 0
                         ? spec.distractors_lo + (int)rng.below((std::uint64_t)(spec.distractors_hi - spec.distractors_lo + 1))
                         : 0;
    const std::size_t overlap_budget = (std::size_t)(spec.max_distractor_overlap * (double)obj_count);
    for (int d = 0; d < want; ++d) {
        Distractor dis;
        dis.region.resize(npix);
        dis.rho2.assign(npix, 0.0);
        dis.r = rng.uniform(spec.color_r_lo, spec.color_r_hi);
        dis.g = rng.uniform(spec.color_g_lo, spec.color_g_hi);
        dis.b = rng.uniform(spec.color_b_lo, spec.color_b_hi);
        Blob b{};
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            b.cx = rng.uniform(0.08, 0.92);
            b.cy = rng.uniform(0.08, 0.92);
            b.ax = rng.uniform(0.06, 0.16);
            b.ay = b.ax * rng.uniform(0.6, 1.3);
            b.rot = rng.uniform(-1.2, 1.2);
            b.cut = -2.0; // plain ellipse
            rasterize_blob(b, s, dis.region, dis.rho2);
            placed = overlap_count(dis.region, obj_region) <= overlap_budget;
        }
        // Shrinking always lands under the overlap cap eventually.
        for (int halving = 0; halving < 8 && !placed; ++halving) {
            b.ax *= 0.5;
            b.ay *= 0.5;
            rasterize_blob(b, s, dis.region, dis.rho2);
            placed = overlap_count(dis.region, obj_region) <= overlap_budget;
        }
        if (placed) distractors.push_back(std::move(dis));
    }

    if (stats) {
        stats->distractor_count = (int)distractors.size();
        stats->distractor_colors.clear();
        for (const auto& d : distractors) stats->distractor_colors.push_back({d.r, d.g, d.b});
    }

    Sample out;
    out.image.h = s;
    out.image.w = s;
    out.image.rgb.resize(npix * 3);
    out.mask.h = s;
    out.mask.w = s;
    out.mask.v.assign(npix, 0);

    for (int py = 0; py < s; ++py) {
        for (int px = 0; px < s; ++px) {
            const std::size_t i = (std::size_t)py * s + px;
            const double tex_u = rng.uniform();
            const double bg_u = rng.uniform();
            double r, g, b;
            if (spec.cluttered_bg) {
                const double fy = (py + 0.5) / s * (kNodes - 1);
                const double fx = (px + 0.5) / s * (kNodes - 1);
                const int y0 = std::min((int)fy, kNodes - 2), x0 = std::min((int)fx, kNodes - 2);
                const double wy = fy - y0, wx = fx - x0;
                const double v = (1 - wy) * ((1 - wx) * nodes[(std::size_t)y0 * kNodes + x0] + wx * nodes[(std::size_t)y0 * kNodes + x0 + 1]) +
                                 wy * ((1 - wx) * nodes[(std::size_t)(y0 + 1) * kNodes + x0] + wx * nodes[(std::size_t)(y0 + 1) * kNodes + x0 + 1]);
                const double speck = (bg_u * 2.0 - 1.0) * spec.bg_noise;
                r = v + speck;
                g = v * 0.92 + speck;
                b = v * 0.9 + speck;
            } else {
                const double speck = (bg_u * 2.0 - 1.0) * spec.bg_noise;
                r = spec.bg_r + speck;
                g = spec.bg_g + speck;
                b = spec.bg_b + speck;
            }
            for (const auto& dis : distractors) {
                if (!dis.region[i]) continue;
                const double shade = (1.0 - 0.25 * dis.rho2[i]) * (1.0 + spec.texture_amp * (tex_u * 2.0 - 1.0));
                r = dis.r * shade;
                g = dis.g * shade;
                b = dis.b * shade;
            }
            if (obj_region[i]) {
                const double shade = (1.0 - 0.25 * obj_rho2[i]) * (1.0 + spec.texture_amp * (tex_u * 2.0 - 1.0));
                r = obj_r * shade;
                g = obj_g * shade;
                b = obj_b * shade;
                out.mask.v[i] = 1;
            }
            out.image.rgb[i * 3 + 0] = (std::uint8_t)std::lround(std::clamp(r * gain + bias, 0.0, 255.0));
            out.image.rgb[i * 3 + 1] = (std::uint8_t)std::lround(std::clamp(g * gain + bias, 0.0, 255.0));
            out.image.rgb[i * 3 + 2] = (std::uint8_t)std::lround(std::clamp(b * gain + bias, 0.0, 255.0));
        }
    }

    out.box = box_from_mask(out.mask);
    return out;
}

namespace {

std::string entry_name(char domain, int index, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c_%05d.%s", domain, index, ext);
    return buf;
}

} // namespace

Manifest generate_dataset(const DomainSpec& spec, int n, std::uint64_t seed, const fs::path& out_dir) {
    spec.validate();
    if (n < 1) throw UsageError("generate: sample count must be >= 1");
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");

    Manifest m;
    m.root = out_dir;
    m.seed = seed;
    m.spec_hash = spec.hash();
    m.image_size = spec.image_size;
    m.domain = spec.id;
    for (int i = 0; i < n; ++i) {
        const Sample sample = render_sample(spec, mix_seed(seed, (std::uint64_t)i));
        ManifestEntry e;
        e.image_rel = "images/" + entry_name(spec.id, i, "ppm");
        e.mask_rel = "masks/" + entry_name(spec.id, i, "pgm");
        e.domain = spec.id;
        e.index = i;
        save_sample(sample, out_dir / e.image_rel, out_dir / e.mask_rel);
        m.entries.push_back(std::move(e));
    }
    save_manifest(m);
    return m;
}

void save_manifest(const Manifest& manifest) {
    const fs::path path = manifest.root / "manifest.tsv";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("manifest: cannot create " + path.string());
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", (unsigned long long)manifest.spec_hash);
    out << "#seed\t" << manifest.seed << "\n";
    out << "#spec_hash\t" << hex << "\n";
    out << "#image_size\t" << manifest.image_size << "\n";
    out << "#domain\t" << manifest.domain << "\n";
    for (const auto& e : manifest.entries) {
        out << e.image_rel << "\t" << e.mask_rel << "\t" << e.domain << "\t" << e.index << "\n";
    }
    if (!out) throw DataError("manifest: write failed for " + path.string());
}

Manifest load_manifest(const fs::path& manifest_path) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw DataError("manifest: cannot open " + manifest_path.string());
    Manifest m;
    m.root = manifest_path.parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                cols.push_back(line.substr(start));
                break;
            }
            cols.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        try {
            if (line[0] == '#') {
                if (cols.size() != 2) continue;
                if (cols[0] == "#seed") m.seed = std::stoull(cols[1]);
                else if (cols[0] == "#spec_hash") m.spec_hash = std::stoull(cols[1], nullptr, 16);
                else if (cols[0] == "#image_size") m.image_size = std::stoi(cols[1]);
                else if (cols[0] == "#domain") m.domain = cols[1].empty() ? '?' : cols[1][0];
                continue;
            }
            if (cols.size() != 4 || cols[2].size() != 1) {
                throw DataError("manifest: malformed record at " + manifest_path.string() + ":" +
                                std::to_string(lineno));
            }
            ManifestEntry e;
            e.image_rel = cols[0];
            e.mask_rel = cols[1];
            e.domain = cols[2][0];
            e.index = std::stoi(cols[3]);
            m.entries.push_back(std::move(e));
        } catch (const std::invalid_argument&) {
            throw DataError("manifest: unparsable number at " + manifest_path.string() + ":" + std::to_string(lineno));
        } catch (const std::out_of_range&) {
            throw DataError("manifest: number out of range at " + manifest_path.string() + ":" + std::to_string(lineno));
        }
    }
    if (m.entries.empty()) throw DataError("manifest: no records in " + manifest_path.string());
    return m;
}

std::pair<Manifest, Manifest> split_manifest(const Manifest& manifest, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw UsageError("split: train fraction must lie strictly between 0 and 1");
    }
    std::vector<std::size_t> order(manifest.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x511));
    rng.shuffle(order);
    const std::size_t n_train = (std::size_t)(train_fraction * (double)order.size() + 1e-9);
    if (n_train == 0 || n_train >= order.size()) {
        throw UsageError("split: fraction " + std::to_string(train_fraction) + " leaves an empty side for " +
                         std::to_string(order.size()) + " samples");
    }
    Manifest train = manifest, test = manifest;
    train.entries.clear();
    test.entries.clear();
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? train : test).entries.push_back(manifest.entries[order[i]]);
    }
    return {train, test};
}

void save_sample(const Sample& sample, const fs::path& image_path, const fs::path& mask_path) {
    write_ppm(image_path.string(), sample.image);
    GrayU8 mask;
    mask.h = sample.mask.h;
    mask.w = sample.mask.w;
    mask.v.resize(sample.mask.v.size());
    for (std::size_t i = 0; i < mask.v.size(); ++i) mask.v[i] = sample.mask.v[i] ? 255 : 0;
    write_pgm(mask_path.string(), mask);
}

Sample load_sample(const fs::path& image_path, const fs::path& mask_path) {
    Sample s;
    s.image = read_ppm(image_path.string());
    const GrayU8 raw = read_pgm(mask_path.string());
    if (raw.h != s.image.h || raw.w != s.image.w) {
        throw DataError("sample: mask " + mask_path.string() + " is " + std::to_string(raw.w) + "x" +
                        std::to_string(raw.h) + " but image " + image_path.string() + " is " +
                        std::to_string(s.image.w) + "x" + std::to_string(s.image.h));
    }
    s.mask.h = raw.h;
    s.mask.w = raw.w;
    s.mask.v.resize(raw.v.size());
    for (std::size_t i = 0; i < raw.v.size(); ++i) {
        if (raw.v[i] != 0 && raw.v[i] != 255) {
            throw DataError("sample: mask " + mask_path.string() + " holds value " + std::to_string(raw.v[i]) +
                            "; only 0 and 255 are allowed");
        }
        s.mask.v[i] = raw.v[i] ? 1 : 0;
    }
    s.box = box_from_mask(s.mask); // also rejects empty masks
    return s;
}

Sample load_entry(const Manifest& manifest, std::size_t i) {
    if (i >= manifest.entries.size()) throw DataError("manifest: entry index out of range");
    return load_sample(manifest.root / manifest.entries[i].image_rel, manifest.root / manifest.entries[i].mask_rel);
}

std::vector<Sample> load_all(const Manifest& manifest) {
    std::vector<Sample> out;
    out.reserve(manifest.entries.size());
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) out.push_back(load_entry(manifest, i));
    return out;
}

Sample ingest_external(const fs::path& image_path, const fs::path& mask_path, int target_size) {
    if (target_size < 16) throw UsageError("ingest: target size must be >= 16");
    Sample s;
    const ImageU8 img = read_ppm(image_path.string());
    const GrayU8 raw = read_pgm(mask_path.string());
    MaskU8 mask;
    mask.h = raw.h;
    mask.w = raw.w;
    mask.v.resize(raw.v.size());
    for (std::size_t i = 0; i < raw.v.size(); ++i) mask.v[i] = raw.v[i] >= 128 ? 1 : 0;
    s.image = bilinear_resize(img, target_size, target_size);
    s.mask = nearest_resize(mask, target_size, target_size);
    if (s.mask.foreground_count() == 0) {
        throw EmptyMaskError("ingest: mask " + mask_path.string() + " is empty after resizing to " +
                             std::to_string(target_size));
    }
    s.box = box_from_mask(s.mask);
    return s;
}

} // namespace pseg
