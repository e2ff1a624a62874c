#include "pseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

#include "pseg/adam.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/ops.hpp"

namespace pseg {

std::string stage_name(Stage stage) {
    switch (stage) {
        case Stage::pretrain: return "pretrain";
        case Stage::finetune: return "finetune";
        case Stage::detector: return "detector";
        case Stage::segmenter: return "segmenter";
    }
    return "?";
}

TrainConfig TrainConfig::defaults(Stage stage) {
    TrainConfig cfg;
    cfg.stage = stage;
    switch (stage) {
        case Stage::pretrain:
            // From-scratch joint pretraining; the fine-tuning stages keep the
            // 1e-4 rate, but ~270 Adam steps at 1e-4 cannot move freshly
            // initialized weights far enough to converge.
            cfg.lr = 1e-3;
            cfg.epochs = 30;
            cfg.batch_size = 32;
            break;
        case Stage::finetune:
            cfg.epochs = 20;
            cfg.batch_size = 32;
            cfg.freeze_encoder = true;
            cfg.freeze_prompt_encoder = true;
            break;
        case Stage::detector:
            cfg.epochs = 100;
            cfg.batch_size = 16;
            break;
        case Stage::segmenter:
            cfg.epochs = 100;
            cfg.batch_size = 8;
            break;
    }
    return cfg;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: learning rate must be positive");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction < 0.5)) {
        throw ConfigError("train: validation fraction must lie in (0, 0.5)");
    }
    if (stage == Stage::finetune && !(freeze_encoder && freeze_prompt_encoder)) {
        throw ConfigError("train: the finetune stage requires both freeze flags");
    }
    if (stage == Stage::pretrain && (freeze_encoder || freeze_prompt_encoder)) {
        throw ConfigError("train: the pretrain stage trains everything; freeze flags must be off");
    }
}

BundleConfig BundleConfig::defaults() { return BundleConfig{}; }

void BundleConfig::validate() const {
    encoder.validate();
    prompt_encoder.validate();
    decoder.validate();
    detector.validate();
    segmenter.validate();
    if (prompt_encoder.input_size != encoder.input_size || detector.input_size != encoder.input_size ||
        segmenter.input_size != encoder.input_size) {
        throw ConfigError("bundle: all components must share the encoder input size");
    }
    if (prompt_encoder.channels != encoder.neck_channels || decoder.token_dim != encoder.neck_channels) {
        throw ConfigError("bundle: prompt encoder and decoder channels must equal the neck channels");
    }
    if (prompt_encoder.grid_side() != encoder.grid_side()) {
        throw ConfigError("bundle: prompt encoder grid side " + std::to_string(prompt_encoder.grid_side()) +
                          " does not match the encoder grid side " + std::to_string(encoder.grid_side()));
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("bundle: train fraction must lie strictly between 0 and 1");
    }
}

ModelBundle::ModelBundle(BundleConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      encoder_(cfg_.encoder, mix_seed(seed, 11)),
      prompt_encoder_(cfg_.prompt_encoder, mix_seed(seed, 12)),
      decoder_(cfg_.decoder, mix_seed(seed, 13)) {
    cfg_.validate();
}

std::vector<char> ModelBundle::trained_domains() const {
    std::vector<char> out;
    for (const auto& rec : provenance_) {
        if (std::find(out.begin(), out.end(), rec.domain) == out.end()) out.push_back(rec.domain);
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

void push_scalar(std::vector<CheckpointEntry>& entries, const std::string& name, double v) {
    entries.push_back({name, {1}, {v}});
}

void push_int_vec(std::vector<CheckpointEntry>& entries, const std::string& name, const std::vector<int>& v) {
    CheckpointEntry e{name, {(int)v.size()}, {}};
    for (int x : v) e.data.push_back((double)x);
    entries.push_back(std::move(e));
}

void push_params(std::vector<CheckpointEntry>& entries, const std::string& prefix, const ParamSet& params) {
    for (const auto& item : params.items()) {
        entries.push_back({prefix + item.name, item.tensor.shape(), item.tensor.vec()});
    }
}

class EntryMap {
public:
    EntryMap(std::vector<CheckpointEntry> entries, std::string path) : path_(std::move(path)) {
        for (auto& e : entries) {
            if (!map_.emplace(e.name, std::move(e)).second) {
                throw DataError("checkpoint: duplicate parameter " + map_.find(e.name)->first + " in " + path_);
            }
        }
    }

    double scalar(const std::string& name) {
        const CheckpointEntry& e = get(name);
        if (e.data.size() != 1) throw DataError("checkpoint: " + name + " is not a scalar in " + path_);
        return e.data[0];
    }

    std::vector<int> int_vec(const std::string& name) {
        const CheckpointEntry& e = get(name);
        std::vector<int> out;
        for (double d : e.data) out.push_back((int)std::llround(d));
        return out;
    }

    void fill_tensor(const std::string& name, Tensor t) {
        const CheckpointEntry& e = get(name);
        if (e.shape != t.shape()) {
            throw DataError("checkpoint: " + name + " has shape mismatch in " + path_);
        }
        std::copy(e.data.begin(), e.data.end(), t.vec().begin());
    }

    bool contains(const std::string& name) const { return map_.count(name) != 0; }

    void finish() const {
        for (const auto& [name, entry] : map_) {
            if (!used_.count(name)) {
                throw DataError("checkpoint: unknown parameter " + name + " in " + path_);
            }
        }
    }

private:
    const CheckpointEntry& get(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw DataError("checkpoint: missing parameter " + name + " in " + path_);
        used_.insert(name);
        return it->second;
    }

    std::map<std::string, CheckpointEntry> map_;
    std::set<std::string> used_;
    std::string path_;
};

} // namespace

void ModelBundle::save(const std::filesystem::path& path) const {
    std::vector<CheckpointEntry> entries;
    push_scalar(entries, "config.encoder.input_size", cfg_.encoder.input_size);
    push_scalar(entries, "config.encoder.patch_size", cfg_.encoder.patch_size);
    push_scalar(entries, "config.encoder.embed_dim", cfg_.encoder.embed_dim);
    push_scalar(entries, "config.encoder.num_blocks", cfg_.encoder.num_blocks);
    push_scalar(entries, "config.encoder.num_heads", cfg_.encoder.num_heads);
    push_scalar(entries, "config.encoder.window_size", cfg_.encoder.window_size);
    push_int_vec(entries, "config.encoder.global_block_indices", cfg_.encoder.global_block_indices);
    push_scalar(entries, "config.encoder.neck_channels", cfg_.encoder.neck_channels);
    push_scalar(entries, "config.prompt_encoder.mask_c1", cfg_.prompt_encoder.mask_c1);
    push_scalar(entries, "config.prompt_encoder.mask_c2", cfg_.prompt_encoder.mask_c2);
    push_scalar(entries, "config.prompt_encoder.grid_side_override", cfg_.prompt_encoder.grid_side_override);
    push_scalar(entries, "config.decoder.num_heads", cfg_.decoder.num_heads);
    push_scalar(entries, "config.decoder.mlp_hidden", cfg_.decoder.mlp_hidden);
    push_int_vec(entries, "config.detector.channels", cfg_.detector.channels);
    push_int_vec(entries, "config.segmenter.channels", cfg_.segmenter.channels);
    push_scalar(entries, "config.train_fraction", cfg_.train_fraction);
    push_scalar(entries, "config.has_detector", detector_ ? 1.0 : 0.0);
    push_scalar(entries, "config.has_segmenter", segmenter_ ? 1.0 : 0.0);

    push_scalar(entries, "provenance.count", (double)provenance_.size());
    for (std::size_t i = 0; i < provenance_.size(); ++i) {
        const std::string pre = "provenance." + std::to_string(i) + ".";
        const StageRecord& rec = provenance_[i];
        push_scalar(entries, pre + "stage", (double)(int)rec.stage);
        push_scalar(entries, pre + "seed_hi", (double)(rec.seed >> 32));
        push_scalar(entries, pre + "seed_lo", (double)(rec.seed & 0xffffffffULL));
        push_scalar(entries, pre + "domain", (double)rec.domain);
        push_scalar(entries, pre + "epochs", (double)rec.epochs);
    }

    push_params(entries, "encoder.", encoder_.params());
    push_params(entries, "prompt_encoder.", prompt_encoder_.params());
    push_params(entries, "decoder.", decoder_.params());
    if (detector_) push_params(entries, "detector.", detector_->params());
    if (segmenter_) push_params(entries, "segmenter.", segmenter_->params());

    write_checkpoint(path, entries);
}

ModelBundle ModelBundle::load(const std::filesystem::path& path) {
    EntryMap em(read_checkpoint(path), path.string());

    BundleConfig cfg;
    cfg.encoder.input_size = (int)em.scalar("config.encoder.input_size");
    cfg.encoder.patch_size = (int)em.scalar("config.encoder.patch_size");
    cfg.encoder.embed_dim = (int)em.scalar("config.encoder.embed_dim");
    cfg.encoder.num_blocks = (int)em.scalar("config.encoder.num_blocks");
    cfg.encoder.num_heads = (int)em.scalar("config.encoder.num_heads");
    cfg.encoder.window_size = (int)em.scalar("config.encoder.window_size");
    cfg.encoder.global_block_indices = em.int_vec("config.encoder.global_block_indices");
    cfg.encoder.neck_channels = (int)em.scalar("config.encoder.neck_channels");
    cfg.prompt_encoder.input_size = cfg.encoder.input_size;
    cfg.prompt_encoder.channels = cfg.encoder.neck_channels;
    cfg.prompt_encoder.mask_c1 = (int)em.scalar("config.prompt_encoder.mask_c1");
    cfg.prompt_encoder.mask_c2 = (int)em.scalar("config.prompt_encoder.mask_c2");
    cfg.prompt_encoder.grid_side_override = (int)em.scalar("config.prompt_encoder.grid_side_override");
    cfg.decoder.num_heads = (int)em.scalar("config.decoder.num_heads");
    cfg.decoder.mlp_hidden = (int)em.scalar("config.decoder.mlp_hidden");
    cfg.decoder.token_dim = cfg.encoder.neck_channels;
    cfg.detector.input_size = cfg.encoder.input_size;
    cfg.detector.channels = em.int_vec("config.detector.channels");
    cfg.segmenter.input_size = cfg.encoder.input_size;
    cfg.segmenter.channels = em.int_vec("config.segmenter.channels");
    cfg.train_fraction = em.scalar("config.train_fraction");

    ModelBundle bundle(cfg, 0);
    if (em.scalar("config.has_detector") != 0.0) bundle.detector_.emplace(cfg.detector, 0);
    if (em.scalar("config.has_segmenter") != 0.0) bundle.segmenter_.emplace(cfg.segmenter, 0);

    const int prov_count = (int)em.scalar("provenance.count");
    for (int i = 0; i < prov_count; ++i) {
        const std::string pre = "provenance." + std::to_string(i) + ".";
        StageRecord rec;
        rec.stage = (Stage)(int)em.scalar(pre + "stage");
        rec.seed = ((std::uint64_t)em.scalar(pre + "seed_hi") << 32) | (std::uint64_t)em.scalar(pre + "seed_lo");
        rec.domain = (char)(int)em.scalar(pre + "domain");
        rec.epochs = (int)em.scalar(pre + "epochs");
        bundle.provenance_.push_back(rec);
    }

    auto fill = [&](const std::string& prefix, ParamSet& params) {
        for (auto& item : params.items()) em.fill_tensor(prefix + item.name, item.tensor);
    };
    fill("encoder.", bundle.encoder_.params());
    fill("prompt_encoder.", bundle.prompt_encoder_.params());
    fill("decoder.", bundle.decoder_.params());
    if (bundle.detector_) fill("detector.", bundle.detector_->params());
    if (bundle.segmenter_) fill("segmenter.", bundle.segmenter_->params());
    bundle.prompt_encoder_.sync_pe_from_params();

    em.finish();
    return bundle;
}

PromptSet make_prompts(const ModelBundle& bundle, const Tensor& image, const GeneratorKind& kind,
                       const MaskU8* gt_mask, Rng* point_rng) {
    PromptSet out;
    switch (kind.type) {
        case GeneratorKind::Type::none:
            break;
        case GeneratorKind::Type::gt_box:
            if (!gt_mask) throw UsageError("prompts: gt_box requires a ground-truth mask");
            out.box = box_from_mask(*gt_mask);
            break;
        case GeneratorKind::Type::gt_points:
            if (!gt_mask) throw UsageError("prompts: gt_points requires a ground-truth mask");
            if (!point_rng) throw UsageError("prompts: gt_points requires a sampling stream");
            out.points = sample_points(*gt_mask, kind.point_count, *point_rng);
            break;
        case GeneratorKind::Type::detector_box:
            if (!bundle.detector()) throw ConfigError("prompts: the bundle has no detector weights");
            out.box = bundle.detector()->detect(image).box;
            break;
        case GeneratorKind::Type::segmenter_box:
            if (!bundle.segmenter()) throw ConfigError("prompts: the bundle has no segmenter weights");
            out.box = box_from_predicted_mask(bundle.segmenter()->predict(image));
            break;
    }
    return out;
}

MaskU8 segment_end_to_end(const ModelBundle& bundle, const Tensor& image, const GeneratorKind& kind,
                          const MaskU8* gt_mask, Rng* point_rng) {
    const ImageEmbedding emb = bundle.embed(image);
    const PromptSet prompts = make_prompts(bundle, image, kind, gt_mask, point_rng);
    Rng eval_rng(0);
    const MaskLogits logits = bundle.decoder().decode(emb, prompts, bundle.prompt_encoder(), false, eval_rng);
    return binarize(logits, bundle.config().encoder.input_size);
}

namespace {

struct TrainItem {
    Tensor image;
    Tensor targets; // [4G,4G] loss targets
    MaskU8 gt_mask;
    BoxPrompt gt_box;
    ImageEmbedding cached_emb; // finetune only
    std::optional<BoxPrompt> generated_box;
};

std::vector<TrainItem> load_items(const Manifest& m, int logit_side) {
    std::vector<TrainItem> items;
    items.reserve(m.entries.size());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const Sample s = load_entry(m, i);
        TrainItem it;
        it.image = image_to_tensor(s.image);
        it.targets = downsample_mask_to_targets(s.mask, logit_side);
        it.gt_mask = s.mask;
        it.gt_box = s.box;
        items.push_back(std::move(it));
    }
    return items;
}

std::vector<std::vector<double>> snapshot_params(const std::vector<ParamSet*>& sets) {
    std::vector<std::vector<double>> snap;
    for (const ParamSet* set : sets) {
        for (const auto& item : set->items()) snap.push_back(item.tensor.vec());
    }
    return snap;
}

void restore_params(const std::vector<ParamSet*>& sets, const std::vector<std::vector<double>>& snap) {
    std::size_t k = 0;
    for (ParamSet* set : sets) {
        for (const auto& item : set->items()) {
            Tensor t = item.tensor; // shared-storage handle
            t.vec() = snap[k++];
        }
    }
}

Tensor promptable_loss(const ModelBundle& bundle, const ImageEmbedding& emb, const PromptSet& prompts,
                       const Tensor& targets, Rng& dropout_rng) {
    const MaskLogits out = bundle.decoder().decode(emb, prompts, bundle.prompt_encoder(), true, dropout_rng);
    return add(bce_with_logits_mean(out.logits, targets), dice_loss_with_logits(out.logits, targets));
}

double validation_miou(const ModelBundle& bundle, const std::vector<TrainItem>& val, GeneratorKind kind,
                       bool use_cached_emb) {
    ConfusionCounts pooled;
    Rng eval_rng(0);
    const int image_size = bundle.config().encoder.input_size;
    for (const auto& item : val) {
        const ImageEmbedding emb = use_cached_emb ? item.cached_emb : bundle.embed(item.image);
        PromptSet prompts;
        if (kind.type == GeneratorKind::Type::gt_box) {
            prompts.box = item.gt_box;
        } else if (kind.type == GeneratorKind::Type::detector_box) {
            prompts.box = item.generated_box ? *item.generated_box : bundle.detector()->detect(item.image).box;
        }
        const MaskLogits logits = bundle.decoder().decode(emb, prompts, bundle.prompt_encoder(), false, eval_rng);
        pooled += confusion(binarize(logits, image_size), item.gt_mask);
    }
    return miou(pooled);
}

// Per-batch prompt curriculum for joint pretraining: GT box with p=0.5,
// 1..5 GT points with p=0.25, no prompt otherwise.
struct CurriculumDraw {
    enum class Kind { box, points, none } kind;
    int k = 0;
};

CurriculumDraw draw_curriculum(Rng& rng) {
    const double u = rng.uniform();
    if (u < 0.5) return {CurriculumDraw::Kind::box, 0};
    if (u < 0.75) return {CurriculumDraw::Kind::points, 1 + (int)rng.below(5)};
    return {CurriculumDraw::Kind::none, 0};
}

// Pretraining augmentations. The joint stage stands in for large-scale
// promptable pretraining, so it has to manufacture what that data would
// provide: ambiguity (the prompt must pick the object), photometric
// variation, and imperfect boxes.

// Global gain/bias jitter in [0,1] image units.
Tensor photometric_jitter(const Tensor& image, Rng& rng) {
    const double gain = rng.uniform(0.65, 1.35);
    const double bias = rng.uniform(-0.07, 0.07);
    Tensor out = image.clone();
    for (auto& v : out.vec()) v = std::clamp(v * gain + bias, 0.0, 1.0);
    return out;
}

// Corner noise proportional to the box side, so the decoder treats prompt
// boxes as approximate localization rather than exact extent.
BoxPrompt jitter_box(const BoxPrompt& box, Rng& rng) {
    const double w = box.x1 - box.x0, h = box.y1 - box.y0;
    auto noise = [&](double side) { return std::clamp(rng.normal(0.0, 0.025 * side), -0.075 * side, 0.075 * side); };
    BoxPrompt out;
    out.x0 = std::clamp(box.x0 + noise(w), 0.0, 1.0);
    out.x1 = std::clamp(box.x1 + noise(w), 0.0, 1.0);
    out.y0 = std::clamp(box.y0 + noise(h), 0.0, 1.0);
    out.y1 = std::clamp(box.y1 + noise(h), 0.0, 1.0);
    if (!(out.x0 < out.x1)) {
        out.x0 = box.x0;
        out.x1 = box.x1;
    }
    if (!(out.y0 < out.y1)) {
        out.y0 = box.y0;
        out.y1 = box.y1;
    }
    return out;
}

// Copy-paste ambiguity augmentation for joint pretraining. Pastes the object
// region of other training images as same-colored distractors (ground truth
// unchanged), so the target is no longer a function of the image alone and
// the decoder has to condition on the prompts. Uses training images only.
Tensor paste_distractor_augment(const TrainItem& item, const std::vector<TrainItem>& pool, Rng& rng) {
    const int s = item.image.dim(0);
    Tensor img = item.image.clone();
    const std::size_t gt_area = item.gt_mask.foreground_count();
    const std::size_t overlap_budget = (std::size_t)(0.2 * (double)gt_area);

    const int count = 1 + (int)rng.below(2);
    for (int d = 0; d < count; ++d) {
        const TrainItem& donor = pool[(std::size_t)rng.below(pool.size())];
        const int r0 = (int)std::lround(donor.gt_box.y0 * s), r1 = (int)std::lround(donor.gt_box.y1 * s);
        const int c0 = (int)std::lround(donor.gt_box.x0 * s), c1 = (int)std::lround(donor.gt_box.x1 * s);
        const int h = r1 - r0, w = c1 - c0;
        if (h <= 0 || w <= 0 || h > s || w > s) continue;
        for (int attempt = 0; attempt < 16; ++attempt) {
            const int ty = (int)rng.below((std::uint64_t)(s - h + 1));
            const int tx = (int)rng.below((std::uint64_t)(s - w + 1));
            std::size_t overlap = 0;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (donor.gt_mask.v[(std::size_t)(r0 + y) * s + (c0 + x)] &&
                        item.gt_mask.v[(std::size_t)(ty + y) * s + (tx + x)]) {
                        ++overlap;
                    }
                }
            }
            if (overlap > overlap_budget) continue;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    if (!donor.gt_mask.v[(std::size_t)(r0 + y) * s + (c0 + x)]) continue;
                    const std::size_t src = ((std::size_t)(r0 + y) * s + (c0 + x)) * 3;
                    const std::size_t dst = ((std::size_t)(ty + y) * s + (tx + x)) * 3;
                    img.data()[dst] = donor.image.data()[src];
                    img.data()[dst + 1] = donor.image.data()[src + 1];
                    img.data()[dst + 2] = donor.image.data()[src + 2];
                }
            }
            break;
        }
    }
    return img;
}

} // namespace

void pretrain_base(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.stage = Stage::pretrain;
    cfg.validate();
    if (train_split.entries.empty()) throw DataError("pretrain: empty training split");

    const auto [train_m, val_m] = split_manifest(train_split, 1.0 - cfg.validation_fraction, cfg.seed);
    const int logit_side = bundle.config().encoder.grid_side() * bundle.config().decoder.upscale_factor;
    std::vector<TrainItem> train = load_items(train_m, logit_side);
    std::vector<TrainItem> val = load_items(val_m, logit_side);

    bundle.encoder().params().set_requires_grad(true);
    bundle.prompt_encoder().params().set_requires_grad(true);
    bundle.decoder().params().set_requires_grad(true);
    std::vector<ParamSet*> sets = {&bundle.encoder().params(), &bundle.prompt_encoder().params(),
                                   &bundle.decoder().params()};
    std::vector<Tensor> params;
    for (ParamSet* s : sets) {
        auto t = s->trainable_tensors();
        params.insert(params.end(), t.begin(), t.end());
    }
    AdamState adam;
    adam.init(params);

    Rng curriculum_rng(mix_seed(cfg.seed, 21));
    Rng dropout_rng(mix_seed(cfg.seed, 22));
    Rng shuffle_rng(mix_seed(cfg.seed, 23));

    double best_miou = -1.0;
    std::vector<std::vector<double>> best_snap = snapshot_params(sets);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t base = 0; base < order.size(); base += (std::size_t)cfg.batch_size) {
            const std::size_t nb = std::min((std::size_t)cfg.batch_size, order.size() - base);
            for (ParamSet* s : sets) s->zero_grads();
            const CurriculumDraw draw = draw_curriculum(curriculum_rng);
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const TrainItem& item = train[order[base + bi]];
                PromptSet prompts;
                if (draw.kind == CurriculumDraw::Kind::box) {
                    prompts.box = jitter_box(item.gt_box, curriculum_rng);
                } else if (draw.kind == CurriculumDraw::Kind::points) {
                    prompts.points = sample_points(item.gt_mask, draw.k, curriculum_rng);
                }
                Tensor image = curriculum_rng.uniform() < 0.5
                                   ? paste_distractor_augment(item, train, curriculum_rng)
                                   : item.image;
                if (curriculum_rng.uniform() < 0.5) image = photometric_jitter(image, curriculum_rng);
                Tape tape;
                TapeGuard guard(tape);
                const ImageEmbedding emb = bundle.embed(image);
                Tensor loss = promptable_loss(bundle, emb, prompts, item.targets, dropout_rng);
                epoch_loss += loss.data()[0];
                Tensor scaled = mul_scalar(loss, 1.0 / (double)nb);
                tape.backward(scaled);
            }
            adam_step(params, adam, cfg.lr);
        }
        const double vm = validation_miou(bundle, val, GeneratorKind::gt_box(), false);
        const bool improved = vm > best_miou;
        if (improved) {
            best_miou = vm;
            best_snap = snapshot_params(sets);
        }
        std::printf("pretrain epoch %3d/%d  loss %.4f  val mIoU %6.2f%s\n", epoch + 1, cfg.epochs,
                    epoch_loss / (double)train.size(), vm, improved ? "  *" : "");
        std::fflush(stdout);
    }
    restore_params(sets, best_snap);
    bundle.provenance().push_back({Stage::pretrain, cfg.seed, train_split.domain, cfg.epochs});
}

void finetune_decoder(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.stage = Stage::finetune;
    if (bundle.provenance().empty()) throw ConfigError("finetune: bundle has no pretraining provenance");
    cfg.validate();

    const auto [train_m, val_m] = split_manifest(train_split, 1.0 - cfg.validation_fraction, cfg.seed);
    const int logit_side = bundle.config().encoder.grid_side() * bundle.config().decoder.upscale_factor;
    std::vector<TrainItem> train = load_items(train_m, logit_side);
    std::vector<TrainItem> val = load_items(val_m, logit_side);

    // Freeze contract: encoder and prompt-encoder parameters take no updates.
    bundle.encoder().params().set_requires_grad(false);
    bundle.prompt_encoder().params().set_requires_grad(false);
    bundle.decoder().params().set_requires_grad(true);

    // Frozen towers mean the embedding and the prompt boxes are constants;
    // compute them once.
    const bool have_detector = bundle.detector().has_value();
    const GeneratorKind prompt_kind = have_detector ? GeneratorKind::detector_box() : GeneratorKind::gt_box();
    for (auto* items : {&train, &val}) {
        for (auto& item : *items) {
            item.cached_emb = bundle.embed(item.image);
            item.generated_box = have_detector ? bundle.detector()->detect(item.image).box : item.gt_box;
        }
    }

    std::vector<ParamSet*> decoder_set = {&bundle.decoder().params()};
    std::vector<Tensor> params = bundle.decoder().params().trainable_tensors();
    AdamState adam;
    adam.init(params);

    Rng dropout_rng(mix_seed(cfg.seed, 32));
    Rng shuffle_rng(mix_seed(cfg.seed, 33));

    double best_miou = -1.0;
    std::vector<std::vector<double>> best_snap = snapshot_params(decoder_set);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t base = 0; base < order.size(); base += (std::size_t)cfg.batch_size) {
            const std::size_t nb = std::min((std::size_t)cfg.batch_size, order.size() - base);
            bundle.decoder().params().zero_grads();
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const TrainItem& item = train[order[base + bi]];
                PromptSet prompts;
                prompts.box = *item.generated_box;
                Tape tape;
                TapeGuard guard(tape);
                Tensor loss = promptable_loss(bundle, item.cached_emb, prompts, item.targets, dropout_rng);
                epoch_loss += loss.data()[0];
                Tensor scaled = mul_scalar(loss, 1.0 / (double)nb);
                tape.backward(scaled);
            }
            adam_step(params, adam, cfg.lr);
        }
        const double vm = validation_miou(bundle, val, prompt_kind, true);
        const bool improved = vm > best_miou;
        if (improved) {
            best_miou = vm;
            best_snap = snapshot_params(decoder_set);
        }
        std::printf("finetune epoch %3d/%d  loss %.4f  val mIoU %6.2f%s\n", epoch + 1, cfg.epochs,
                    epoch_loss / (double)train.size(), vm, improved ? "  *" : "");
        std::fflush(stdout);
    }
    restore_params(decoder_set, best_snap);
    bundle.encoder().params().set_requires_grad(true);
    bundle.prompt_encoder().params().set_requires_grad(true);
    bundle.provenance().push_back({Stage::finetune, cfg.seed, train_split.domain, cfg.epochs});
}

void train_detector_stage(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.stage = Stage::detector;
    cfg.validate();
    if (train_split.entries.empty()) throw DataError("train-detector: empty training split");

    const auto [train_m, val_m] = split_manifest(train_split, 1.0 - cfg.validation_fraction, cfg.seed);
    std::vector<TrainItem> train = load_items(train_m, bundle.config().encoder.grid_side() * 4);
    std::vector<TrainItem> val = load_items(val_m, bundle.config().encoder.grid_side() * 4);

    bundle.detector().emplace(bundle.config().detector, cfg.seed);
    Detector& det = *bundle.detector();
    std::vector<Tensor> params = det.params().trainable_tensors();
    AdamState adam;
    adam.init(params);

    Rng shuffle_rng(mix_seed(cfg.seed, 43));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto mean_val_loss = [&]() {
        double sum = 0.0;
        for (const auto& item : val) sum += det.loss(item.image, item.gt_box).data()[0];
        return sum / (double)val.size();
    };

    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<ParamSet*> det_set = {&det.params()};
    std::vector<std::vector<double>> best_snap = snapshot_params(det_set);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t base = 0; base < order.size(); base += (std::size_t)cfg.batch_size) {
            const std::size_t nb = std::min((std::size_t)cfg.batch_size, order.size() - base);
            det.params().zero_grads();
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const TrainItem& item = train[order[base + bi]];
                Tape tape;
                TapeGuard guard(tape);
                Tensor loss = det.loss(item.image, item.gt_box);
                Tensor scaled = mul_scalar(loss, 1.0 / (double)nb);
                tape.backward(scaled);
            }
            adam_step(params, adam, cfg.lr);
        }
        const double vl = mean_val_loss();
        const bool improved = vl < best_loss;
        if (improved) {
            best_loss = vl;
            best_snap = snapshot_params(det_set);
        }
        if ((epoch + 1) % 10 == 0 || epoch == 0 || improved) {
            std::printf("detector epoch %3d/%d  val loss %.4f%s\n", epoch + 1, cfg.epochs, vl,
                        improved ? "  *" : "");
            std::fflush(stdout);
        }
    }
    restore_params(det_set, best_snap);
    bundle.provenance().push_back({Stage::detector, cfg.seed, train_split.domain, cfg.epochs});
}

void train_segmenter_stage(ModelBundle& bundle, const Manifest& train_split, const TrainConfig& cfg_in) {
    TrainConfig cfg = cfg_in;
    cfg.stage = Stage::segmenter;
    cfg.validate();
    if (train_split.entries.empty()) throw DataError("train-segmenter: empty training split");

    const auto [train_m, val_m] = split_manifest(train_split, 1.0 - cfg.validation_fraction, cfg.seed);
    const int s = bundle.config().encoder.input_size;

    struct SegItem {
        Tensor image;
        Tensor targets; // [S,S]
    };
    auto load_seg = [&](const Manifest& m) {
        std::vector<SegItem> items;
        for (std::size_t i = 0; i < m.entries.size(); ++i) {
            const Sample sample = load_entry(m, i);
            items.push_back({image_to_tensor(sample.image), reshape(mask_to_tensor(sample.mask), {s, s})});
        }
        return items;
    };
    std::vector<SegItem> train = load_seg(train_m);
    std::vector<SegItem> val = load_seg(val_m);

    bundle.segmenter().emplace(bundle.config().segmenter, cfg.seed);
    TinySegmenter& seg = *bundle.segmenter();
    std::vector<Tensor> params = seg.params().trainable_tensors();
    AdamState adam;
    adam.init(params);

    Rng shuffle_rng(mix_seed(cfg.seed, 53));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto mean_val_loss = [&]() {
        double sum = 0.0;
        for (const auto& item : val) sum += seg.loss(item.image, item.targets).data()[0];
        return sum / (double)val.size();
    };

    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<ParamSet*> seg_set = {&seg.params()};
    std::vector<std::vector<double>> best_snap = snapshot_params(seg_set);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t base = 0; base < order.size(); base += (std::size_t)cfg.batch_size) {
            const std::size_t nb = std::min((std::size_t)cfg.batch_size, order.size() - base);
            seg.params().zero_grads();
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const SegItem& item = train[order[base + bi]];
                Tape tape;
                TapeGuard guard(tape);
                Tensor loss = seg.loss(item.image, item.targets);
                Tensor scaled = mul_scalar(loss, 1.0 / (double)nb);
                tape.backward(scaled);
            }
            adam_step(params, adam, cfg.lr);
        }
        const double vl = mean_val_loss();
        const bool improved = vl < best_loss;
        if (improved) {
            best_loss = vl;
            best_snap = snapshot_params(seg_set);
        }
        if ((epoch + 1) % 10 == 0 || epoch == 0 || improved) {
            std::printf("segmenter epoch %3d/%d  val loss %.4f%s\n", epoch + 1, cfg.epochs, vl,
                        improved ? "  *" : "");
            std::fflush(stdout);
        }
    }
    restore_params(seg_set, best_snap);
    bundle.provenance().push_back({Stage::segmenter, cfg.seed, train_split.domain, cfg.epochs});
}

std::vector<EvalRecord> evaluate_arms(const ModelBundle& bundle, const std::vector<Sample>& samples,
                                      const std::vector<EvalArm>& arms, const std::string& train_domain,
                                      const std::string& eval_domain, std::uint64_t record_seed) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    const int image_size = bundle.config().encoder.input_size;
    std::vector<std::vector<ConfusionCounts>> counts(arms.size());
    Rng eval_rng(0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor image = image_to_tensor(samples[i].image);
        const ImageEmbedding emb = bundle.embed(image);
        for (std::size_t a = 0; a < arms.size(); ++a) {
            Rng point_rng(mix_seed(arms[a].point_seed, i));
            const PromptSet prompts = make_prompts(bundle, image, arms[a].kind, &samples[i].mask, &point_rng);
            const MaskLogits logits = bundle.decoder().decode(emb, prompts, bundle.prompt_encoder(), false, eval_rng);
            counts[a].push_back(confusion(binarize(logits, image_size), samples[i].mask));
        }
    }
    std::vector<EvalRecord> records;
    for (std::size_t a = 0; a < arms.size(); ++a) {
        records.push_back(aggregate_micro(counts[a], arms[a].method, arms[a].kind.label(), train_domain,
                                          eval_domain, record_seed));
    }
    return records;
}

EvalRecord evaluate_generator(const ModelBundle& bundle, const std::vector<Sample>& samples, GeneratorKind kind,
                              const std::string& eval_domain, std::uint64_t seed) {
    std::string train_domain;
    for (char d : bundle.trained_domains()) train_domain += d;
    return evaluate_arms(bundle, samples, {{kind.label(), kind, seed}}, train_domain, eval_domain, seed)[0];
}

namespace {

std::string trained_domains_string(const ModelBundle& bundle) {
    std::string out;
    for (char d : bundle.trained_domains()) out += d;
    return out.empty() ? "-" : out;
}

void require_zero_shot(const ModelBundle& bundle, const Manifest& eval_manifest) {
    for (char d : bundle.trained_domains()) {
        if (d == eval_manifest.domain) {
            throw DataError(std::string("zero-shot violation: domain ") + eval_manifest.domain +
                            " appears in the bundle's training provenance");
        }
    }
}

} // namespace

std::vector<EvalRecord> run_prompt_sweep(const ModelBundle& bundle, const Manifest& domain_b,
                                         const Manifest& domain_c, const std::vector<int>& k_set,
                                         int point_seeds, std::uint64_t seed) {
    if (point_seeds < 3) throw UsageError("sweep: point arms need at least 3 sampling seeds");
    require_zero_shot(bundle, domain_b);
    require_zero_shot(bundle, domain_c);
    const std::string train_domain = trained_domains_string(bundle);

    std::vector<EvalRecord> out;
    for (const Manifest* m : {&domain_b, &domain_c}) {
        const std::vector<Sample> samples = load_all(*m);
        const std::string eval_domain(1, m->domain);

        std::vector<EvalArm> arms;
        arms.push_back({"no_prompt", GeneratorKind::none(), seed});
        arms.push_back({"gt_box", GeneratorKind::gt_box(), seed});
        for (int k : k_set) {
            for (int si = 0; si < point_seeds; ++si) {
                char method[32];
                std::snprintf(method, sizeof(method), "points_%02d", k);
                arms.push_back({method, GeneratorKind::gt_points(k), mix_seed(seed, (std::uint64_t)(k * 100 + si))});
            }
        }
        const std::vector<EvalRecord> records = evaluate_arms(bundle, samples, arms, train_domain, eval_domain, seed);

        out.push_back(records[0]);
        out.push_back(records[1]);
        std::size_t r = 2;
        for (std::size_t ki = 0; ki < k_set.size(); ++ki) {
            EvalRecord avg = records[r];
            for (int si = 1; si < point_seeds; ++si) {
                avg.miou += records[r + si].miou;
                avg.mpa += records[r + si].mpa;
                avg.acc += records[r + si].acc;
            }
            avg.miou /= point_seeds;
            avg.mpa /= point_seeds;
            avg.acc /= point_seeds;
            avg.seed = seed;
            out.push_back(avg);
            r += (std::size_t)point_seeds;
        }
    }
    return out;
}

std::vector<EvalRecord> run_generator_table(const ModelBundle& bundle, const Manifest& domain_a,
                                            const Manifest& domain_b, const Manifest& domain_c,
                                            std::uint64_t seed) {
    if (!bundle.detector()) throw ConfigError("gen-table: the bundle has no detector weights");
    if (!bundle.segmenter()) throw ConfigError("gen-table: the bundle has no segmenter weights");
    const std::string train_domain = trained_domains_string(bundle);

    std::vector<EvalRecord> out;
    const auto [a_train, a_test] = dataset_split(domain_a, bundle.config().train_fraction);
    (void)a_train;
    const std::vector<EvalArm> arms = {{"detector_box", GeneratorKind::detector_box(), seed},
                                       {"segmenter_box", GeneratorKind::segmenter_box(), seed}};
    struct EvalSet {
        const Manifest* m;
        std::vector<Sample> samples;
    };
    std::vector<EvalSet> sets;
    sets.push_back({&a_test, load_all(a_test)});
    sets.push_back({&domain_b, load_all(domain_b)});
    sets.push_back({&domain_c, load_all(domain_c)});
    for (const auto& set : sets) {
        const std::string eval_domain(1, set.m->domain);
        auto records = evaluate_arms(bundle, set.samples, arms, train_domain, eval_domain, seed);
        out.insert(out.end(), records.begin(), records.end());
    }
    return out;
}

std::vector<EvalRecord> run_zeroshot_table(const ModelBundle& bundle, const Manifest& domain_b,
                                           const Manifest& domain_c, std::uint64_t seed) {
    if (!bundle.detector()) throw ConfigError("zeroshot-table: the bundle has no detector weights");
    require_zero_shot(bundle, domain_b);
    require_zero_shot(bundle, domain_c);
    const std::string train_domain = trained_domains_string(bundle);

    const std::vector<EvalArm> arms = {{"no_prompt", GeneratorKind::none(), seed},
                                       {"gt_box", GeneratorKind::gt_box(), seed},
                                       {"detector_box", GeneratorKind::detector_box(), seed}};
    std::vector<EvalRecord> out;
    for (const Manifest* m : {&domain_b, &domain_c}) {
        const std::vector<Sample> samples = load_all(*m);
        const std::string eval_domain(1, m->domain);
        auto records = evaluate_arms(bundle, samples, arms, train_domain, eval_domain, seed);
        out.insert(out.end(), records.begin(), records.end());
    }
    return out;
}

std::pair<Manifest, Manifest> dataset_split(const Manifest& manifest, double train_fraction) {
    return split_manifest(manifest, train_fraction, manifest.seed);
}

std::map<std::string, std::string> parse_key_value_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("config: cannot open " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const char* ws = " \t\r\n";
        const auto a = s.find_first_not_of(ws);
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(ws);
        return s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config: missing '=' at " + path.string() + ":" + std::to_string(lineno));
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw UsageError("config: empty key or value at " + path.string() + ":" + std::to_string(lineno));
        }
        if (!out.emplace(key, value).second) {
            throw UsageError("config: duplicate key '" + key + "' at " + path.string() + ":" + std::to_string(lineno));
        }
    }
    return out;
}

namespace {

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config: key '" + key + "' wants an integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config: key '" + key + "' wants a number, got '" + value + "'");
    }
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        const std::size_t comma = value.find(',', start);
        const std::string part = value.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        out.push_back(to_int(key, part));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

} // namespace

void apply_overrides(BundleConfig& bundle_cfg, TrainConfig& train_cfg,
                     const std::map<std::string, std::string>& kv) {
    bool mlp_hidden_set = false;
    for (const auto& [key, value] : kv) {
        if (key == "train.lr") train_cfg.lr = to_double(key, value);
        else if (key == "train.epochs") train_cfg.epochs = to_int(key, value);
        else if (key == "train.batch_size") train_cfg.batch_size = to_int(key, value);
        else if (key == "train.validation_fraction") train_cfg.validation_fraction = to_double(key, value);
        else if (key == "data.train_fraction") bundle_cfg.train_fraction = to_double(key, value);
        else if (key == "encoder.input_size") bundle_cfg.encoder.input_size = to_int(key, value);
        else if (key == "encoder.patch_size") bundle_cfg.encoder.patch_size = to_int(key, value);
        else if (key == "encoder.embed_dim") bundle_cfg.encoder.embed_dim = to_int(key, value);
        else if (key == "encoder.num_blocks") bundle_cfg.encoder.num_blocks = to_int(key, value);
        else if (key == "encoder.num_heads") bundle_cfg.encoder.num_heads = to_int(key, value);
        else if (key == "encoder.window_size") bundle_cfg.encoder.window_size = to_int(key, value);
        else if (key == "encoder.global_block_indices") bundle_cfg.encoder.global_block_indices = to_int_list(key, value);
        else if (key == "encoder.neck_channels") bundle_cfg.encoder.neck_channels = to_int(key, value);
        else if (key == "prompt_encoder.mask_c1") bundle_cfg.prompt_encoder.mask_c1 = to_int(key, value);
        else if (key == "prompt_encoder.mask_c2") bundle_cfg.prompt_encoder.mask_c2 = to_int(key, value);
        else if (key == "decoder.num_heads") bundle_cfg.decoder.num_heads = to_int(key, value);
        else if (key == "decoder.mlp_hidden") {
            bundle_cfg.decoder.mlp_hidden = to_int(key, value);
            mlp_hidden_set = true;
        } else if (key == "detector.channels") bundle_cfg.detector.channels = to_int_list(key, value);
        else if (key == "segmenter.channels") bundle_cfg.segmenter.channels = to_int_list(key, value);
        else throw UsageError("config: unknown key '" + key + "'");
    }
    // Shared geometry propagates from the encoder.
    bundle_cfg.prompt_encoder.input_size = bundle_cfg.encoder.input_size;
    bundle_cfg.prompt_encoder.channels = bundle_cfg.encoder.neck_channels;
    if (bundle_cfg.encoder.input_size / 16 != bundle_cfg.encoder.grid_side()) {
        bundle_cfg.prompt_encoder.grid_side_override = bundle_cfg.encoder.grid_side();
    }
    bundle_cfg.decoder.token_dim = bundle_cfg.encoder.neck_channels;
    if (!mlp_hidden_set) bundle_cfg.decoder.mlp_hidden = 4 * bundle_cfg.decoder.token_dim;
    bundle_cfg.detector.input_size = bundle_cfg.encoder.input_size;
    bundle_cfg.segmenter.input_size = bundle_cfg.encoder.input_size;
}

} // namespace pseg
