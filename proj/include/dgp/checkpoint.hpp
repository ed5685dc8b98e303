#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "dgp/nets.hpp"

namespace dgp {

// JSON conversions shared by checkpoints and experiment configs.
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Model checkpoint: config echo + seed + flat parameter vector + alive mask.
//
// Byte layout (all integers and floats little-endian):
//   magic   8 bytes   "DGPCKPT\x01"
//   hlen    u32       header length in bytes
//   header  hlen      JSON: {"format_version":1,"model":{...},"seed":N}
//   pcount  u64       number of parameters
//   params  8*pcount  float64 values in registry order
//   mcount  u64       mask bit count (== pcount)
//   mask    ceil/8    packed bits, LSB first; bit i = parameter i alive
struct Checkpoint {
  ModelConfig model;
  std::uint64_t seed = 0;
  std::vector<double> params;
  std::vector<std::uint8_t> mask;  // one byte per parameter, 1 = alive
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dgp
