#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// Versioned binary tensor store:
//   magic "PSEG1"
//   per entry: u64 name length, UTF-8 name, u64 rank, u64 extents...,
//              row-major f64 payload
//   trailing u64 FNV-1a checksum of all preceding bytes
// All integers and float bit patterns are little-endian.
struct CheckpointEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);

// Validates the checksum and the structural framing; throws DataError with
// the path on any mismatch.
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

} // namespace pseg
