#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pseg/image_encoder.hpp"
#include "pseg/mask_decoder.hpp"
#include "pseg/metrics.hpp"
#include "pseg/prompt_encoder.hpp"
#include "pseg/prompt_generator.hpp"
#include "pseg/synthdata.hpp"

namespace pseg {

enum class Stage { pretrain, finetune, detector, segmenter };

std::string stage_name(Stage stage);

struct TrainConfig {
    Stage stage = Stage::pretrain;
    double lr = 1e-4;
    int epochs = 30;
    int batch_size = 32;
    std::uint64_t seed = 0;
    bool freeze_encoder = false;
    bool freeze_prompt_encoder = false;
    double validation_fraction = 0.1;

    static TrainConfig defaults(Stage stage);
    void validate() const;
};

struct StageRecord {
    Stage stage = Stage::pretrain;
    std::uint64_t seed = 0;
    char domain = '?';
    int epochs = 0;
};

// All sub-model configurations plus the dataset split convention. The shared
// geometry (input size, embedding channels) must agree across components.
struct BundleConfig {
    EncoderConfig encoder;
    PromptEncoderConfig prompt_encoder;
    DecoderConfig decoder;
    DetectorConfig detector;
    SegmenterConfig segmenter;
    double train_fraction = 0.8;

    static BundleConfig defaults();
    void validate() const;
};

// The full model: encoder, prompt encoder, decoder, and the optional prompt
// generators, together with training provenance. Serializes to a single
// checkpoint file.
class ModelBundle {
public:
    ModelBundle(BundleConfig cfg, std::uint64_t seed);

    const BundleConfig& config() const { return cfg_; }
    ImageEncoder& encoder() { return encoder_; }
    const ImageEncoder& encoder() const { return encoder_; }
    PromptEncoder& prompt_encoder() { return prompt_encoder_; }
    const PromptEncoder& prompt_encoder() const { return prompt_encoder_; }
    MaskDecoder& decoder() { return decoder_; }
    const MaskDecoder& decoder() const { return decoder_; }
    std::optional<Detector>& detector() { return detector_; }
    const std::optional<Detector>& detector() const { return detector_; }
    std::optional<TinySegmenter>& segmenter() { return segmenter_; }
    const std::optional<TinySegmenter>& segmenter() const { return segmenter_; }

    std::vector<StageRecord>& provenance() { return provenance_; }
    const std::vector<StageRecord>& provenance() const { return provenance_; }
    std::vector<char> trained_domains() const;

    ImageEmbedding embed(const Tensor& image) const { return encoder_.encode(image, prompt_encoder_); }

    void save(const std::filesystem::path& path) const;
    static ModelBundle load(const std::filesystem::path& path);

private:
    BundleConfig cfg_;
    ImageEncoder encoder_;
    PromptEncoder prompt_encoder_;
    MaskDecoder decoder_;
    std::optional<Detector> detector_;
    std::optional<TinySegmenter> segmenter_;
    std::vector<StageRecord> provenance_;
};

// Prompt construction for one experiment arm. gt_* kinds need the sample's
// ground-truth mask; gt_points additionally needs the sampling stream.
PromptSet make_prompts(const ModelBundle& bundle, const Tensor& image, const GeneratorKind& kind,
                       const MaskU8* gt_mask, Rng* point_rng);

MaskU8 segment_end_to_end(const ModelBundle& bundle, const Tensor& image, const GeneratorKind& kind,
                          const MaskU8* gt_mask = nullptr, Rng* point_rng = nullptr);

// Stage drivers. Each carves a validation split off the given training split
// (validation_fraction, seeded by cfg.seed), trains, restores the best
// validation snapshot, and appends one provenance record.
void pretrain_base(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg);
void finetune_decoder(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg);
void train_detector_stage(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg);
void train_segmenter_stage(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg);

// Shared evaluation: one embedding per image, many prompt arms.
struct EvalArm {
    std::string method;
    GeneratorKind kind;
    std::uint64_t point_seed = 0;
};
std::vector<EvalRecord> evaluate_arms(const ModelBundle& bundle, const std::vector<Sample>& samples,
                                      const std::vector<EvalArm>& arms, const std::string& train_domain,
                                      const std::string& eval_domain, std::uint64_t record_seed);

EvalRecord evaluate_generator(const ModelBundle& bundle, const std::vector<Sample>& samples, GeneratorKind kind,
                              const std::string& eval_domain, std::uint64_t seed);

// Experiment harnesses. All return records ready for write_report().
std::vector<EvalRecord> run_prompt_sweep(const ModelBundle& bundle, const Manifest& domain_b,
                                         const Manifest& domain_c, const std::vector<int>& k_set,
                                         int point_seeds, std::uint64_t seed);
std::vector<EvalRecord> run_generator_table(const ModelBundle& bundle, const Manifest& domain_a,
                                            const Manifest& domain_b, const Manifest& domain_c,
                                            std::uint64_t seed);
std::vector<EvalRecord> run_zeroshot_table(const ModelBundle& bundle, const Manifest& domain_b,
                                           const Manifest& domain_c, std::uint64_t seed);

// The 80/20 dataset convention: split by the manifest's own generation seed
// so every stage and harness derives the identical test side.
std::pair<Manifest, Manifest> dataset_split(const Manifest& manifest, double train_fraction);

// Line-oriented `key = value` config files; '#' starts a comment.
std::map<std::string, std::string> parse_key_value_file(const std::filesystem::path& path);
// Applies overrides; throws UsageError on unknown keys or malformed values.
void apply_overrides(BundleConfig& bundle_cfg, TrainConfig& train_cfg,
                     const std::map<std::string, std::string>& kv);

} // namespace pseg
