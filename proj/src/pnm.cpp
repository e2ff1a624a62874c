#include "pseg/pnm.hpp"

#include <fstream>

namespace pseg {

namespace {

// Consumes whitespace and '#' comment lines between header fields.
void skip_separators(std::istream& in, const std::string& path) {
    for (;;) {
        const int c = in.peek();
        if (c == EOF) throw DataError("pnm: truncated header in " + path);
        if (c == '#') {
            std::string line;
            std::getline(in, line);
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            in.get();
            continue;
        }
        return;
    }
}

int read_header_int(std::istream& in, const std::string& path) {
    skip_separators(in, path);
    int value = 0;
    bool any = false;
    for (;;) {
        const int c = in.peek();
        if (c < '0' || c > '9') break;
        in.get();
        value = value * 10 + (c - '0');
        any = true;
        if (value > 1 << 24) throw DataError("pnm: absurd header value in " + path);
    }
    if (!any) throw DataError("pnm: malformed header in " + path);
    return value;
}

std::vector<std::uint8_t> read_payload(std::istream& in, std::size_t expected, const std::string& path) {
    // Exactly one whitespace byte separates maxval from the payload.
    const int sep = in.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        throw DataError("pnm: missing payload separator in " + path);
    }
    std::vector<std::uint8_t> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)expected);
    if ((std::size_t)in.gcount() != expected) {
        throw DataError("pnm: truncated payload in " + path + " (expected " + std::to_string(expected) +
                        " bytes, got " + std::to_string(in.gcount()) + ")");
    }
    if (in.get() != EOF) throw DataError("pnm: trailing bytes after payload in " + path);
    return buf;
}

void check_magic(std::istream& in, const char* magic, const std::string& path) {
    char m[2] = {0, 0};
    in.read(m, 2);
    if (in.gcount() != 2 || m[0] != magic[0] || m[1] != magic[1]) {
        throw DataError("pnm: " + path + " is not a " + magic + " file");
    }
}

} // namespace

ImageU8 read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("pnm: cannot open " + path);
    check_magic(in, "P6", path);
    ImageU8 img;
    img.w = read_header_int(in, path);
    img.h = read_header_int(in, path);
    const int maxval = read_header_int(in, path);
    if (img.w <= 0 || img.h <= 0) throw DataError("pnm: non-positive dimensions in " + path);
    if (maxval != 255) throw DataError("pnm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    img.rgb = read_payload(in, (std::size_t)img.w * img.h * 3, path);
    return img;
}

GrayU8 read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("pnm: cannot open " + path);
    check_magic(in, "P5", path);
    GrayU8 img;
    img.w = read_header_int(in, path);
    img.h = read_header_int(in, path);
    const int maxval = read_header_int(in, path);
    if (img.w <= 0 || img.h <= 0) throw DataError("pnm: non-positive dimensions in " + path);
    if (maxval != 255) throw DataError("pnm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    img.v = read_payload(in, (std::size_t)img.w * img.h, path);
    return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    if (img.rgb.size() != (std::size_t)img.w * img.h * 3) {
        throw DataError("pnm: image buffer does not match dimensions for " + path);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("pnm: cannot create " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), (std::streamsize)img.rgb.size());
    if (!out) throw DataError("pnm: write failed for " + path);
}

void write_pgm(const std::string& path, const GrayU8& img) {
    if (img.v.size() != (std::size_t)img.w * img.h) {
        throw DataError("pnm: image buffer does not match dimensions for " + path);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("pnm: cannot create " + path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.v.data()), (std::streamsize)img.v.size());
    if (!out) throw DataError("pnm: write failed for " + path);
}

} // namespace pseg
