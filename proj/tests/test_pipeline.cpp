#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pseg/checkpoint.hpp"
#include "pseg/ops.hpp"
#include "pseg/pipeline.hpp"

using namespace pseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pseg_pipe_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Small geometry so training-path tests stay fast.
BundleConfig tiny_bundle_config() {
    BundleConfig cfg;
    cfg.encoder.input_size = 32;
    cfg.encoder.patch_size = 16;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.num_blocks = 2;
    cfg.encoder.num_heads = 2;
    cfg.encoder.window_size = 2;
    cfg.encoder.global_block_indices = {1};
    cfg.encoder.neck_channels = 8;
    cfg.prompt_encoder.input_size = 32;
    cfg.prompt_encoder.channels = 8;
    cfg.decoder.token_dim = 8;
    cfg.decoder.mlp_hidden = 32;
    cfg.detector.input_size = 32;
    cfg.detector.channels = {4, 8};
    cfg.segmenter.input_size = 32;
    cfg.segmenter.channels = {4, 4};
    return cfg;
}

const Manifest& tiny_dataset() {
    static Manifest m = [] {
        const fs::path d = temp_dir("data_a");
        return generate_dataset(DomainSpec::domain('A', 32), 16, 5, d);
    }();
    return m;
}

} // namespace

TEST_CASE("checkpoint round-trip is byte-identical and validates") {
    const fs::path d = temp_dir("ckpt");
    ModelBundle bundle(tiny_bundle_config(), 7);
    bundle.provenance().push_back({Stage::pretrain, 0x1234567890abcdefULL, 'A', 3});

    bundle.save(d / "a.ckpt");
    ModelBundle loaded = ModelBundle::load(d / "a.ckpt");
    loaded.save(d / "b.ckpt");
    CHECK(slurp(d / "a.ckpt") == slurp(d / "b.ckpt"));

    CHECK(loaded.provenance().size() == 1);
    CHECK(loaded.provenance()[0].seed == 0x1234567890abcdefULL);
    CHECK(loaded.provenance()[0].domain == 'A');
    CHECK(loaded.encoder().params().payload_hash() == bundle.encoder().params().payload_hash());
    CHECK(loaded.decoder().params().payload_hash() == bundle.decoder().params().payload_hash());

    // Corrupt one payload byte: the checksum must catch it.
    {
        std::string bytes = slurp(d / "a.ckpt");
        bytes[bytes.size() / 2] ^= 0x40;
        std::ofstream out(d / "corrupt.ckpt", std::ios::binary);
        out.write(bytes.data(), (std::streamsize)bytes.size());
    }
    CHECK_THROWS_AS((void)ModelBundle::load(d / "corrupt.ckpt"), DataError);

    // Truncation is a structural error.
    {
        std::string bytes = slurp(d / "a.ckpt");
        bytes.resize(bytes.size() - 13);
        std::ofstream out(d / "short.ckpt", std::ios::binary);
        out.write(bytes.data(), (std::streamsize)bytes.size());
    }
    CHECK_THROWS_AS((void)ModelBundle::load(d / "short.ckpt"), DataError);

    // Unknown parameter names are rejected against the expected inventory.
    {
        auto entries = read_checkpoint(d / "a.ckpt");
        entries.push_back({"encoder.mystery.w", {2, 2}, {1, 2, 3, 4}});
        write_checkpoint(d / "extra.ckpt", entries);
    }
    try {
        (void)ModelBundle::load(d / "extra.ckpt");
        FAIL("expected an unknown-parameter error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("mystery") != std::string::npos);
    }

    // Missing parameters are rejected too.
    {
        auto entries = read_checkpoint(d / "a.ckpt");
        entries.pop_back();
        write_checkpoint(d / "missing.ckpt", entries);
    }
    CHECK_THROWS_AS((void)ModelBundle::load(d / "missing.ckpt"), DataError);
}

TEST_CASE("key=value config files parse and apply") {
    const fs::path d = temp_dir("cfg");
    {
        std::ofstream out(d / "ok.cfg");
        out << "# comment line\n"
            << "train.lr = 0.0005\n"
            << "train.epochs= 3\n"
            << "encoder.input_size =32\n"
            << "encoder.patch_size = 16\n"
            << "encoder.embed_dim = 16\n"
            << "encoder.num_blocks = 2\n"
            << "encoder.window_size = 2\n"
            << "encoder.global_block_indices = 1\n"
            << "encoder.neck_channels = 8   # trailing comment\n"
            << "detector.channels = 4,8\n";
    }
    BundleConfig bcfg = BundleConfig::defaults();
    TrainConfig tcfg = TrainConfig::defaults(Stage::pretrain);
    apply_overrides(bcfg, tcfg, parse_key_value_file(d / "ok.cfg"));
    CHECK(tcfg.lr == 0.0005);
    CHECK(tcfg.epochs == 3);
    CHECK(bcfg.encoder.input_size == 32);
    CHECK(bcfg.prompt_encoder.input_size == 32);   // propagated
    CHECK(bcfg.decoder.token_dim == 8);            // synced to neck channels
    CHECK(bcfg.decoder.mlp_hidden == 32);          // derived 4x token_dim
    CHECK(bcfg.detector.channels == std::vector<int>{4, 8});
    CHECK_NOTHROW(bcfg.validate());

    {
        std::ofstream out(d / "bad_key.cfg");
        out << "encoder.colour = 3\n";
    }
    BundleConfig b2 = BundleConfig::defaults();
    TrainConfig t2 = TrainConfig::defaults(Stage::pretrain);
    CHECK_THROWS_AS(apply_overrides(b2, t2, parse_key_value_file(d / "bad_key.cfg")), UsageError);

    {
        std::ofstream out(d / "bad_val.cfg");
        out << "train.epochs = banana\n";
    }
    CHECK_THROWS_AS(apply_overrides(b2, t2, parse_key_value_file(d / "bad_val.cfg")), UsageError);

    {
        std::ofstream out(d / "no_eq.cfg");
        out << "train.epochs 3\n";
    }
    CHECK_THROWS_AS((void)parse_key_value_file(d / "no_eq.cfg"), UsageError);
}

TEST_CASE("train config stage invariants") {
    TrainConfig ft = TrainConfig::defaults(Stage::finetune);
    CHECK(ft.freeze_encoder);
    CHECK(ft.freeze_prompt_encoder);
    CHECK(ft.epochs == 20);
    CHECK(ft.batch_size == 32);
    ft.freeze_encoder = false;
    CHECK_THROWS_AS(ft.validate(), ConfigError);

    TrainConfig pt = TrainConfig::defaults(Stage::pretrain);
    CHECK(pt.epochs == 30);
    pt.freeze_prompt_encoder = true;
    CHECK_THROWS_AS(pt.validate(), ConfigError);

    CHECK(TrainConfig::defaults(Stage::detector).epochs == 100);
    CHECK(TrainConfig::defaults(Stage::detector).batch_size == 16);
    CHECK(TrainConfig::defaults(Stage::segmenter).batch_size == 8);
}

TEST_CASE("pretraining is deterministic and selects on validation") {
    const auto [train_split, test_split] = dataset_split(tiny_dataset(), 0.75);
    (void)test_split;

    auto run = [&](std::uint64_t seed) {
        ModelBundle bundle(tiny_bundle_config(), seed);
        TrainConfig cfg = TrainConfig::defaults(Stage::pretrain);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.seed = seed;
        cfg.validation_fraction = 0.25;
        pretrain_base(bundle, train_split, cfg);
        return bundle;
    };
    ModelBundle b1 = run(11);
    ModelBundle b2 = run(11);
    const fs::path d = temp_dir("det_runs");
    b1.save(d / "r1.ckpt");
    b2.save(d / "r2.ckpt");
    CHECK(slurp(d / "r1.ckpt") == slurp(d / "r2.ckpt"));

    REQUIRE(b1.provenance().size() == 1);
    CHECK(b1.provenance()[0].stage == Stage::pretrain);
    CHECK(b1.provenance()[0].domain == 'A');
    CHECK(b1.trained_domains() == std::vector<char>{'A'});
}

TEST_CASE("finetune freezes the encoder and prompt encoder bit-exactly") {
    const auto [train_split, test_split] = dataset_split(tiny_dataset(), 0.75);
    (void)test_split;

    ModelBundle bundle(tiny_bundle_config(), 13);
    TrainConfig pre = TrainConfig::defaults(Stage::pretrain);
    pre.epochs = 1;
    pre.batch_size = 4;
    pre.seed = 13;
    pre.validation_fraction = 0.25;
    pretrain_base(bundle, train_split, pre);

    const std::uint64_t enc_hash = bundle.encoder().params().payload_hash();
    const std::uint64_t penc_hash = bundle.prompt_encoder().params().payload_hash();
    const std::uint64_t dec_hash = bundle.decoder().params().payload_hash();

    TrainConfig ft = TrainConfig::defaults(Stage::finetune);
    ft.epochs = 2;
    ft.batch_size = 4;
    ft.seed = 14;
    ft.validation_fraction = 0.25;
    finetune_decoder(bundle, train_split, ft);

    CHECK(bundle.encoder().params().payload_hash() == enc_hash);
    CHECK(bundle.prompt_encoder().params().payload_hash() == penc_hash);
    CHECK(bundle.decoder().params().payload_hash() != dec_hash);
    REQUIRE(bundle.provenance().size() == 2);
    CHECK(bundle.provenance()[1].stage == Stage::finetune);
}

TEST_CASE("segment_end_to_end: generator arms and the manual-box identity") {
    const Manifest& data = tiny_dataset();
    ModelBundle bundle(tiny_bundle_config(), 17);
    const Sample s = load_entry(data, 0);
    const Tensor image = image_to_tensor(s.image);

    // gt_box equals manually passing box_from_mask(gt).
    const MaskU8 via_gt = segment_end_to_end(bundle, image, GeneratorKind::gt_box(), &s.mask);
    PromptSet manual;
    manual.box = box_from_mask(s.mask);
    const ImageEmbedding emb = bundle.embed(image);
    Rng er(0);
    const MaskU8 direct = binarize(bundle.decoder().decode(emb, manual, bundle.prompt_encoder(), false, er), 32);
    CHECK(via_gt.v == direct.v);

    // The no-prompt path produces a valid mask and is deterministic.
    const MaskU8 none1 = segment_end_to_end(bundle, image, GeneratorKind::none());
    const MaskU8 none2 = segment_end_to_end(bundle, image, GeneratorKind::none());
    CHECK(none1.v == none2.v);
    CHECK(none1.h == 32);

    // gt_* arms without ground truth are refused.
    CHECK_THROWS_AS((void)segment_end_to_end(bundle, image, GeneratorKind::gt_box()), UsageError);
    // Generator arms without their weights are refused.
    CHECK_THROWS_AS((void)segment_end_to_end(bundle, image, GeneratorKind::detector_box()), ConfigError);
}

TEST_CASE("zero-shot hygiene is enforced from provenance") {
    const fs::path db = temp_dir("data_b");
    const fs::path dc = temp_dir("data_c");
    const Manifest mb = generate_dataset(DomainSpec::domain('B', 32), 4, 6, db);
    const Manifest mc = generate_dataset(DomainSpec::domain('C', 32), 4, 7, dc);

    ModelBundle bundle(tiny_bundle_config(), 19);
    bundle.detector().emplace(tiny_bundle_config().detector, 19);
    bundle.provenance().push_back({Stage::pretrain, 1, 'A', 1});
    CHECK_NOTHROW((void)run_zeroshot_table(bundle, mb, mc, 1));

    bundle.provenance().push_back({Stage::finetune, 2, 'B', 1});
    CHECK_THROWS_AS((void)run_zeroshot_table(bundle, mb, mc, 1), DataError);
}

TEST_CASE("evaluate_arms aggregates per arm with shared embeddings") {
    const Manifest& data = tiny_dataset();
    ModelBundle bundle(tiny_bundle_config(), 23);
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < 4; ++i) samples.push_back(load_entry(data, i));

    const std::vector<EvalArm> arms = {{"no_prompt", GeneratorKind::none(), 1},
                                       {"gt_box", GeneratorKind::gt_box(), 1},
                                       {"points_03", GeneratorKind::gt_points(3), 9}};
    const auto records = evaluate_arms(bundle, samples, arms, "A", "A", 1);
    REQUIRE(records.size() == 3);
    for (const auto& r : records) {
        CHECK(r.n == 4);
        CHECK(r.miou >= 0.0);
        CHECK(r.miou <= 100.0);
        CHECK(r.train_domain == "A");
        CHECK(r.eval_domain == "A");
    }
    CHECK(records[0].method == "no_prompt");
    CHECK(records[2].generator == "gt_points:3");

    // Identical inputs reproduce identical records.
    const auto again = evaluate_arms(bundle, samples, arms, "A", "A", 1);
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(records[i].miou == again[i].miou);
        CHECK(records[i].acc == again[i].acc);
    }
}
