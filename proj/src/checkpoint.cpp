#include "pseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "pseg/rng.hpp"

namespace pseg {

namespace {

constexpr char kMagic[5] = {'P', 'S', 'E', 'G', '1'};

void push_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back((char)((v >> (8 * i)) & 0xff));
}

void push_f64(std::string& buf, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    push_u64(buf, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("checkpoint: truncated file " + path);
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= (std::uint64_t)(std::uint8_t)buf[pos + i] << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
    std::string buf(kMagic, sizeof(kMagic));
    for (const auto& e : entries) {
        push_u64(buf, e.name.size());
        buf.append(e.name);
        push_u64(buf, e.shape.size());
        std::size_t numel = 1;
        for (int ext : e.shape) {
            if (ext <= 0) throw DataError("checkpoint: non-positive extent for " + e.name);
            push_u64(buf, (std::uint64_t)ext);
            numel *= (std::size_t)ext;
        }
        if (numel != e.data.size()) {
            throw DataError("checkpoint: payload of " + e.name + " has " + std::to_string(e.data.size()) +
                            " values but shape wants " + std::to_string(numel));
        }
        for (double d : e.data) push_f64(buf, d);
    }
    push_u64(buf, fnv1a64(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot create " + path.string());
    out.write(buf.data(), (std::streamsize)buf.size());
    if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    const std::string pstr = path.string();
    if (buf.size() < sizeof(kMagic) + 8) throw DataError("checkpoint: truncated file " + pstr);
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw DataError("checkpoint: " + pstr + " does not start with the PSEG1 magic");
    }
    const std::size_t body = buf.size() - 8;
    std::uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) stored |= (std::uint64_t)(std::uint8_t)buf[body + i] << (8 * i);
    const std::uint64_t computed = fnv1a64(buf.data(), body);
    if (stored != computed) throw DataError("checkpoint: checksum mismatch in " + pstr);

    Reader r{buf, sizeof(kMagic), pstr};
    std::vector<CheckpointEntry> entries;
    while (r.pos < body) {
        CheckpointEntry e;
        const std::uint64_t name_len = r.u64();
        if (name_len == 0 || name_len > 4096) throw DataError("checkpoint: bad name length in " + pstr);
        e.name = r.bytes((std::size_t)name_len);
        const std::uint64_t rank = r.u64();
        if (rank > 8) throw DataError("checkpoint: bad rank for " + e.name + " in " + pstr);
        std::size_t numel = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            const std::uint64_t ext = r.u64();
            if (ext == 0 || ext > (1u << 30)) throw DataError("checkpoint: bad extent for " + e.name + " in " + pstr);
            e.shape.push_back((int)ext);
            numel *= (std::size_t)ext;
        }
        if (r.pos + numel * 8 > body) throw DataError("checkpoint: truncated payload for " + e.name + " in " + pstr);
        e.data.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) e.data[i] = r.f64();
        entries.push_back(std::move(e));
    }
    if (r.pos != body) throw DataError("checkpoint: trailing bytes in " + pstr);
    return entries;
}

} // namespace pseg
