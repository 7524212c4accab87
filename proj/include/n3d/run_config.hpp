#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "n3d/dit.hpp"
#include "n3d/flow.hpp"
#include "n3d/forge.hpp"

namespace n3d {

// Effective settings for one CLI run. Precedence: built-in defaults, then the
// config file, then command-line flags.
struct RunConfig {
  ModelConfig model;
  std::optional<bool> segment_embedding;  // unset: on for token-concat, off for cross-attn
  TrainConfig train;
  ForgeSpec forge;
  std::size_t per_op = 256;
  std::size_t sample_steps = 32;
  std::uint64_t seed = 0;

  // Throws ConfigError for unknown keys and unparsable or out-of-range values.
  void set(const std::string& key, const std::string& value);
  // Model config with the segment default resolved and the vocabulary filled in.
  ModelConfig model_config(std::size_t vocab_size) const;
  TrainConfig train_config() const;

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  std::string echo() const;  // "key=value" lines
};

// key=value lines; '#' starts a comment; blank lines ignored. Errors name the line.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig parse_config_file(const std::string& path, RunConfig base = {});

}  // namespace n3d
