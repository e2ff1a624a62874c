#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "pseg/pnm.hpp"

using namespace pseg;
namespace fs = std::filesystem;

namespace {

const char* cli() { return PSEG_CLI_PATH; }

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("pseg_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(cli()) + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("gen-data writes pixmaps, graymaps, and a manifest") {
    const fs::path d = temp_dir("gen");
    const int code = run_cli("gen-data --domain A --n 4 --seed 1 --out " + (d / "data").string() +
                                 " --image-size 32",
                             d / "log.txt");
    CHECK(code == 0);
    CHECK(fs::exists(d / "data" / "manifest.tsv"));
    int ppm = 0, pgm = 0;
    for (const auto& e : fs::directory_iterator(d / "data" / "images")) ppm += e.path().extension() == ".ppm";
    for (const auto& e : fs::directory_iterator(d / "data" / "masks")) pgm += e.path().extension() == ".pgm";
    CHECK(ppm == 4);
    CHECK(pgm == 4);
}

TEST_CASE("missing --seed on a training subcommand exits 1 naming the flag") {
    const fs::path d = temp_dir("noseed");
    const int code = run_cli("pretrain --data somewhere --out x.ckpt", d / "log.txt");
    CHECK(code == 1);
    CHECK(slurp(d / "log.txt").find("--seed") != std::string::npos);
}

TEST_CASE("unknown flags exit 1 with guidance") {
    const fs::path d = temp_dir("badflag");
    const int code = run_cli("gen-data --domain A --n 1 --seed 1 --out x --frobnicate", d / "log.txt");
    CHECK(code == 1);
    CHECK(slurp(d / "log.txt").find("--help") != std::string::npos);
}

TEST_CASE("segmenting a corrupt pixmap exits 2 naming the file") {
    const fs::path d = temp_dir("corrupt");

    // A tiny but valid bundle first.
    {
        std::ofstream cfg(d / "tiny.cfg");
        cfg << "train.epochs = 1\ntrain.batch_size = 4\ntrain.validation_fraction = 0.25\n"
            << "encoder.input_size = 32\nencoder.patch_size = 16\nencoder.embed_dim = 8\n"
            << "encoder.num_blocks = 1\nencoder.num_heads = 2\nencoder.window_size = 2\n"
            << "encoder.global_block_indices = 0\nencoder.neck_channels = 8\n";
    }
    REQUIRE(run_cli("gen-data --domain A --n 8 --seed 3 --out " + (d / "data").string() + " --image-size 32",
                    d / "g.txt") == 0);
    REQUIRE(run_cli("pretrain --data " + (d / "data").string() + " --config " + (d / "tiny.cfg").string() +
                        " --seed 5 --out " + (d / "b.ckpt").string(),
                    d / "p.txt") == 0);

    std::ofstream bad(d / "bad.ppm", std::ios::binary);
    bad << "P6\n32 32\n255\n";
    bad.write("short", 5);
    bad.close();

    const int code = run_cli("segment --bundle " + (d / "b.ckpt").string() + " --image " + (d / "bad.ppm").string() +
                                 " --generator none --out " + (d / "out").string(),
                             d / "log.txt");
    CHECK(code == 2);
    CHECK(slurp(d / "log.txt").find("bad.ppm") != std::string::npos);

    // And the valid path works end to end.
    const fs::path image = d / "data" / "images" / "A_00000.ppm";
    const int ok = run_cli("segment --bundle " + (d / "b.ckpt").string() + " --image " + image.string() +
                               " --generator none --out " + (d / "out").string(),
                           d / "log2.txt");
    CHECK(ok == 0);
    CHECK(fs::exists(d / "out" / "mask.pgm"));
    CHECK(fs::exists(d / "out" / "overlay.ppm"));
    const GrayU8 mask = read_pgm((d / "out" / "mask.pgm").string());
    CHECK(mask.h == 32);
    for (auto v : mask.v) CHECK((v == 0 || v == 255));
}

TEST_CASE("checkpoint checksum corruption exits 2") {
    const fs::path d = temp_dir("ckpt2");
    {
        std::ofstream cfg(d / "tiny.cfg");
        cfg << "train.epochs = 1\ntrain.batch_size = 4\ntrain.validation_fraction = 0.25\n"
            << "encoder.input_size = 32\nencoder.patch_size = 16\nencoder.embed_dim = 8\n"
            << "encoder.num_blocks = 1\nencoder.num_heads = 2\nencoder.window_size = 2\n"
            << "encoder.global_block_indices = 0\nencoder.neck_channels = 8\n";
    }
    REQUIRE(run_cli("gen-data --domain A --n 8 --seed 3 --out " + (d / "data").string() + " --image-size 32",
                    d / "g.txt") == 0);
    REQUIRE(run_cli("pretrain --data " + (d / "data").string() + " --config " + (d / "tiny.cfg").string() +
                        " --seed 5 --out " + (d / "b.ckpt").string(),
                    d / "p.txt") == 0);

    std::string bytes = slurp(d / "b.ckpt");
    bytes[bytes.size() / 3] ^= 0x01;
    {
        std::ofstream out(d / "evil.ckpt", std::ios::binary);
        out.write(bytes.data(), (std::streamsize)bytes.size());
    }
    const int code = run_cli("eval --bundle " + (d / "evil.ckpt").string() + " --data " + (d / "data").string() +
                                 " --generator none --out-csv " + (d / "r.csv").string(),
                             d / "log.txt");
    CHECK(code == 2);
    CHECK(slurp(d / "log.txt").find("checksum") != std::string::npos);
}
