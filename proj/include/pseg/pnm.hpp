#pragma once

#include <string>

#include "pseg/errors.hpp"
#include "pseg/raster.hpp"

namespace pseg {

struct GrayU8 {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> v;
};

// Binary portable pixmap / graymap IO, 8-bit, maxval 255 only. Readers are
// strict: bad magic, short payloads, and trailing bytes are all rejected with
// the offending path in the message.
ImageU8 read_ppm(const std::string& path);
GrayU8 read_pgm(const std::string& path);
void write_ppm(const std::string& path, const ImageU8& img);
void write_pgm(const std::string& path, const GrayU8& img);

} // namespace pseg
