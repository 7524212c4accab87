#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "n3d/dit.hpp"
#include "n3d/flow.hpp"

namespace n3d {

// Little-endian layout:
//   "N3DC", version u32 = 1
//   header: u64 byte length, then UTF-8 "key=value\n" lines (model config,
//           opt.step / opt.skipped, and free-form meta.* provenance lines)
//   tensor table: u32 count, then per tensor in name order:
//           name (u16 length + UTF-8), rank u8, dims u32 each, float32 data
//   u8 optimizer flag; when 1 a second tensor table of m.<name> / v.<name> moments
inline constexpr std::uint32_t kCheckpointVersion = 1;

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct Checkpoint {
  Model<float> model;
  std::optional<OptimizerState<float>> optimizer;
  KeyValues meta;  // meta.* lines, prefix stripped
};

std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model, const OptimizerState<float>* opt,
                                            const KeyValues& meta = {});
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Model<float>& model, const OptimizerState<float>* opt,
                     const KeyValues& meta = {});
Checkpoint load_checkpoint(const std::string& path);
// ConfigError when the stored model is not of the required stage.
Checkpoint load_checkpoint(const std::string& path, Stage required);

}  // namespace n3d
