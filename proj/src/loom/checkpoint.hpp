#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "loom/tensor.hpp"

namespace loom {

// Single-file training snapshot. On disk:
//   byte 0        version (0x01)
//   bytes 1..8    little-endian uint64 header length H
//   bytes 9..9+H  JSON header {blocks, config, meta, stage}
//   then          raw little-endian float64 block data, in block-table order
// Blocks are sorted by name before writing and each carries an FNV-1a
// checksum of its raw bytes, so save -> load -> save is byte identical.
struct Checkpoint {
    int stage = 0;
    nlohmann::json config;
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> blocks;
};

void put_block(Checkpoint& ckpt, const std::string& name, Tensor value);
bool has_block(const Checkpoint& ckpt, const std::string& name);
const Tensor& get_block(const Checkpoint& ckpt, const std::string& name);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace loom
