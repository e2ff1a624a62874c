// pseg: promptable segmentation pipeline CLI.
//
// Subcommands cover dataset generation, the staged training recipe
// (pretrain -> train-detector -> finetune, plus the segmenter baseline),
// single-image inference, and the three evaluation harnesses. Exit codes:
// 0 success, 1 usage/config error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pseg/metrics.hpp"
#include "pseg/pipeline.hpp"
#include "pseg/pnm.hpp"

namespace fs = std::filesystem;
using namespace pseg;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create " + path.string());
    out.write(text.data(), (std::streamsize)text.size());
    if (!out) throw DataError("write failed for " + path.string());
}

struct CommonTrainArgs {
    std::string data;
    std::string config_file;
    std::uint64_t seed = 0;
    std::string out;
};

void add_train_flags(CLI::App* cmd, CommonTrainArgs& args) {
    cmd->add_option("--data", args.data, "dataset directory (holds manifest.tsv)")->required();
    cmd->add_option("--config", args.config_file, "key = value overrides");
    cmd->add_option("--seed", args.seed, "training seed")->required();
    cmd->add_option("--out", args.out, "output bundle path")->required();
}

// Loads overrides (if any) on top of the stage defaults.
TrainConfig make_train_config(Stage stage, const CommonTrainArgs& args, BundleConfig& bundle_cfg) {
    TrainConfig cfg = TrainConfig::defaults(stage);
    if (!args.config_file.empty()) {
        apply_overrides(bundle_cfg, cfg, parse_key_value_file(args.config_file));
    }
    cfg.seed = args.seed;
    return cfg;
}

Manifest training_split(const std::string& data_dir, const BundleConfig& cfg) {
    const Manifest full = load_manifest(fs::path(data_dir) / "manifest.tsv");
    return dataset_split(full, cfg.train_fraction).first;
}

int run(int argc, char** argv) {
    CLI::App app{"promptable segmentation pipeline"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "render a synthetic domain to disk");
    std::string gen_domain;
    int gen_n = 0;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    int gen_image_size = 128;
    gen->add_option("--domain", gen_domain, "A, B, or C")->required();
    gen->add_option("--n", gen_n, "sample count")->required();
    gen->add_option("--seed", gen_seed, "generation seed")->required();
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--image-size", gen_image_size, "square image side (default 128)");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "jointly train encoder, prompt encoder, and decoder");
    CommonTrainArgs pre_args;
    add_train_flags(pre, pre_args);

    // finetune
    auto* fine = app.add_subcommand("finetune", "freeze towers and fine-tune the decoder");
    CommonTrainArgs fine_args;
    std::string fine_bundle;
    fine->add_option("--bundle", fine_bundle, "input bundle")->required();
    add_train_flags(fine, fine_args);

    // train-detector / train-segmenter
    auto* tdet = app.add_subcommand("train-detector", "train the box-prompt detector");
    CommonTrainArgs tdet_args;
    std::string tdet_bundle;
    tdet->add_option("--bundle", tdet_bundle, "input bundle")->required();
    add_train_flags(tdet, tdet_args);

    auto* tseg = app.add_subcommand("train-segmenter", "train the segmentation-box baseline");
    CommonTrainArgs tseg_args;
    std::string tseg_bundle;
    tseg->add_option("--bundle", tseg_bundle, "input bundle")->required();
    add_train_flags(tseg, tseg_args);

    // segment
    auto* seg = app.add_subcommand("segment", "segment one image and write mask + overlay");
    std::string seg_bundle, seg_image, seg_generator = "detector_box", seg_out = ".";
    seg->add_option("--bundle", seg_bundle, "bundle path")->required();
    seg->add_option("--image", seg_image, "input P6 pixmap")->required();
    seg->add_option("--generator", seg_generator, "detector_box, segmenter_box, or none");
    seg->add_option("--out", seg_out, "output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate one generator arm over a dataset");
    std::string ev_bundle, ev_data, ev_generator = "detector_box", ev_csv, ev_split = "full";
    std::uint64_t ev_seed = 1;
    ev->add_option("--bundle", ev_bundle)->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--generator", ev_generator, "gt_box, gt_points:<k>, detector_box, segmenter_box, none");
    ev->add_option("--split", ev_split, "full or test (the dataset's 20% side)");
    ev->add_option("--seed", ev_seed, "point-sampling seed");
    ev->add_option("--out-csv", ev_csv, "report path")->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "prompt-type sweep over zero-shot domains");
    std::string sw_bundle, sw_b, sw_c, sw_csv;
    std::uint64_t sw_seed = 1;
    int sw_point_seeds = 3;
    sw->add_option("--bundle", sw_bundle)->required();
    sw->add_option("--data-b", sw_b)->required();
    sw->add_option("--data-c", sw_c)->required();
    sw->add_option("--seed", sw_seed, "base seed for point sampling");
    sw->add_option("--point-seeds", sw_point_seeds, "sampling seeds per point arm (>= 3)");
    sw->add_option("--out-csv", sw_csv)->required();

    // gen-table
    auto* gt = app.add_subcommand("gen-table", "compare detector and segmenter prompt generators");
    std::string gt_bundle, gt_a, gt_b, gt_c, gt_csv;
    std::uint64_t gt_seed = 1;
    gt->add_option("--bundle", gt_bundle)->required();
    gt->add_option("--data-a", gt_a)->required();
    gt->add_option("--data-b", gt_b)->required();
    gt->add_option("--data-c", gt_c)->required();
    gt->add_option("--seed", gt_seed);
    gt->add_option("--out-csv", gt_csv)->required();

    // zeroshot-table
    auto* zs = app.add_subcommand("zeroshot-table", "zero-shot comparison of prompt arms");
    std::string zs_bundle, zs_b, zs_c, zs_csv;
    std::uint64_t zs_seed = 1;
    zs->add_option("--bundle", zs_bundle)->required();
    zs->add_option("--data-b", zs_b)->required();
    zs->add_option("--data-c", zs_c)->required();
    zs->add_option("--seed", zs_seed);
    zs->add_option("--out-csv", zs_csv)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e); // help text, success
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints the offending flag
        return 1;
    }

    if (gen->parsed()) {
        const DomainSpec spec = DomainSpec::domain(gen_domain.size() == 1 ? gen_domain[0] : '?', gen_image_size);
        const Manifest m = generate_dataset(spec, gen_n, gen_seed, gen_out);
        std::printf("generated %zu samples for domain %c under %s\n", m.entries.size(), m.domain,
                    gen_out.c_str());
        return 0;
    }

    if (pre->parsed()) {
        BundleConfig bcfg = BundleConfig::defaults();
        TrainConfig cfg = make_train_config(Stage::pretrain, pre_args, bcfg);
        ModelBundle bundle(bcfg, pre_args.seed);
        pretrain_base(bundle, training_split(pre_args.data, bcfg), cfg);
        bundle.save(pre_args.out);
        std::printf("pretrained bundle written to %s\n", pre_args.out.c_str());
        return 0;
    }

    if (fine->parsed()) {
        ModelBundle bundle = ModelBundle::load(fine_bundle);
        BundleConfig bcfg = bundle.config();
        TrainConfig cfg = make_train_config(Stage::finetune, fine_args, bcfg);
        finetune_decoder(bundle, training_split(fine_args.data, bundle.config()), cfg);
        bundle.save(fine_args.out);
        std::printf("fine-tuned bundle written to %s\n", fine_args.out.c_str());
        return 0;
    }

    if (tdet->parsed()) {
        ModelBundle bundle = ModelBundle::load(tdet_bundle);
        BundleConfig bcfg = bundle.config();
        TrainConfig cfg = make_train_config(Stage::detector, tdet_args, bcfg);
        train_detector_stage(bundle, training_split(tdet_args.data, bundle.config()), cfg);
        bundle.save(tdet_args.out);
        std::printf("bundle with detector written to %s\n", tdet_args.out.c_str());
        return 0;
    }

    if (tseg->parsed()) {
        ModelBundle bundle = ModelBundle::load(tseg_bundle);
        BundleConfig bcfg = bundle.config();
        TrainConfig cfg = make_train_config(Stage::segmenter, tseg_args, bcfg);
        train_segmenter_stage(bundle, training_split(tseg_args.data, bundle.config()), cfg);
        bundle.save(tseg_args.out);
        std::printf("bundle with segmenter written to %s\n", tseg_args.out.c_str());
        return 0;
    }

    if (seg->parsed()) {
        const GeneratorKind kind = GeneratorKind::parse(seg_generator);
        if (kind.type == GeneratorKind::Type::gt_box || kind.type == GeneratorKind::Type::gt_points) {
            throw UsageError("segment: ground-truth generators need a mask; use detector_box, segmenter_box, or none");
        }
        ModelBundle bundle = ModelBundle::load(seg_bundle);
        const ImageU8 raw = read_ppm(seg_image);
        const int s = bundle.config().encoder.input_size;
        const ImageU8 sized = (raw.h == s && raw.w == s) ? raw : bilinear_resize(raw, s, s);
        const MaskU8 mask = segment_end_to_end(bundle, image_to_tensor(sized), kind);
        fs::create_directories(seg_out);
        GrayU8 out_mask;
        out_mask.h = mask.h;
        out_mask.w = mask.w;
        out_mask.v.resize(mask.v.size());
        for (std::size_t i = 0; i < mask.v.size(); ++i) out_mask.v[i] = mask.v[i] ? 255 : 0;
        write_pgm((fs::path(seg_out) / "mask.pgm").string(), out_mask);
        write_ppm((fs::path(seg_out) / "overlay.ppm").string(), overlay(sized, mask));
        std::printf("wrote %s/mask.pgm and %s/overlay.ppm\n", seg_out.c_str(), seg_out.c_str());
        return 0;
    }

    if (ev->parsed()) {
        ModelBundle bundle = ModelBundle::load(ev_bundle);
        const Manifest full = load_manifest(fs::path(ev_data) / "manifest.tsv");
        Manifest chosen = full;
        if (ev_split == "test") {
            chosen = dataset_split(full, bundle.config().train_fraction).second;
        } else if (ev_split != "full") {
            throw UsageError("eval: --split must be 'full' or 'test'");
        }
        const GeneratorKind kind = GeneratorKind::parse(ev_generator);
        const EvalRecord rec =
            evaluate_generator(bundle, load_all(chosen), kind, std::string(1, chosen.domain), ev_seed);
        write_text(ev_csv, write_report({rec}));
        std::printf("%s", write_report({rec}).c_str());
        return 0;
    }

    if (sw->parsed()) {
        ModelBundle bundle = ModelBundle::load(sw_bundle);
        const Manifest mb = load_manifest(fs::path(sw_b) / "manifest.tsv");
        const Manifest mc = load_manifest(fs::path(sw_c) / "manifest.tsv");
        const auto records = run_prompt_sweep(bundle, mb, mc, {1, 2, 3, 5, 10}, sw_point_seeds, sw_seed);
        write_text(sw_csv, write_report(records));
        std::printf("prompt sweep written to %s\n", sw_csv.c_str());
        return 0;
    }

    if (gt->parsed()) {
        ModelBundle bundle = ModelBundle::load(gt_bundle);
        const Manifest ma = load_manifest(fs::path(gt_a) / "manifest.tsv");
        const Manifest mb = load_manifest(fs::path(gt_b) / "manifest.tsv");
        const Manifest mc = load_manifest(fs::path(gt_c) / "manifest.tsv");
        const auto records = run_generator_table(bundle, ma, mb, mc, gt_seed);
        write_text(gt_csv, write_report(records));
        std::printf("generator table written to %s\n", gt_csv.c_str());
        return 0;
    }

    if (zs->parsed()) {
        ModelBundle bundle = ModelBundle::load(zs_bundle);
        const Manifest mb = load_manifest(fs::path(zs_b) / "manifest.tsv");
        const Manifest mc = load_manifest(fs::path(zs_c) / "manifest.tsv");
        const auto records = run_zeroshot_table(bundle, mb, mc, zs_seed);
        write_text(zs_csv, write_report(records));
        std::printf("zero-shot table written to %s\n", zs_csv.c_str());
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
