#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pseg/prompt_generator.hpp"
#include "pseg/raster.hpp"
#include "pseg/rng.hpp"

namespace pseg {

// Generative model for one synthetic domain. The target object is a filled
// rotated ellipse with a flattened top edge and multiplicative texture; the
// three stock domains shift background, illumination, placement, and add
// object-colored distractor blobs:
//   A - fixed dark background, centered object, small jitter
//   B - illumination gain/bias, wider scale range, off-center placement
//   C - cluttered textured background plus 1-3 distractors drawn from the
//       same color distribution as the object
struct DomainSpec {
    char id = 'A';
    int image_size = 128;

    // geometry, fractions of the image side
    double center_lo = 0.46, center_hi = 0.54;
    double ax_lo = 0.22, ax_hi = 0.32;
    double aspect_lo = 0.75, aspect_hi = 1.1;
    double rot_lo = -0.15, rot_hi = 0.15;
    double cut_lo = 0.25, cut_hi = 0.55; // top cut, fraction of the y semi-axis

    // object color (shared by distractors in domain C)
    double color_r_lo = 150, color_r_hi = 215;
    double color_g_lo = 70, color_g_hi = 120;
    double color_b_lo = 105, color_b_hi = 160;
    double texture_amp = 0.07;

    // background + illumination
    double bg_r = 42, bg_g = 44, bg_b = 58;
    double bg_noise = 5.0;
    bool cluttered_bg = false;
    int distractors_lo = 0, distractors_hi = 0;
    double gain_lo = 1.0, gain_hi = 1.0;
    double bias_lo = 0.0, bias_hi = 0.0;

    // invariant knobs
    double max_distractor_overlap = 0.20; // of object area
    double min_coverage = 0.01, max_coverage = 0.60;

    static DomainSpec domain(char id, int image_size = 128);
    void validate() const;
    std::uint64_t hash() const;
};

// One dataset element. The mask is exactly the rendered object region and the
// box is its tight bounding box (single source of truth: box_from_mask).
struct Sample {
    ImageU8 image;
    MaskU8 mask;
    BoxPrompt box;
};

struct RenderStats {
    int distractor_count = 0;
    std::vector<std::array<double, 3>> distractor_colors;
};

Sample render_sample(const DomainSpec& spec, std::uint64_t substream_seed, RenderStats* stats = nullptr);

struct ManifestEntry {
    std::string image_rel;
    std::string mask_rel;
    char domain = 'A';
    int index = 0;
};

struct Manifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;
    std::uint64_t seed = 0;
    std::uint64_t spec_hash = 0;
    int image_size = 0;
    char domain = '?';
};

// Renders n samples (per-sample substream = mix(seed, index)), writes P6/P5
// files and the manifest under out_dir, and returns the manifest.
Manifest generate_dataset(const DomainSpec& spec, int n, std::uint64_t seed, const std::filesystem::path& out_dir);

Manifest load_manifest(const std::filesystem::path& manifest_path);
void save_manifest(const Manifest& manifest);

// Seeded shuffle, then prefix split. Both sides must be nonempty.
std::pair<Manifest, Manifest> split_manifest(const Manifest& manifest, double train_fraction, std::uint64_t seed);

void save_sample(const Sample& sample, const std::filesystem::path& image_path,
                 const std::filesystem::path& mask_path);
// Strict load: mask bytes must be exactly 0 or 255; box is re-derived.
Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path);
Sample load_entry(const Manifest& manifest, std::size_t i);
std::vector<Sample> load_all(const Manifest& manifest);

// Lenient ingestion of externally produced rasters: bilinear image resize,
// nearest-neighbor mask resize, re-binarized at 128.
Sample ingest_external(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                       int target_size);

} // namespace pseg
