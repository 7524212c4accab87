#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "n3d/codec.hpp"
#include "n3d/grad_check.hpp"
#include "n3d/rng.hpp"
#include "n3d/tensor.hpp"

namespace n3d {

enum class Strategy { CrossAttn, TokenConcat };
enum class Stage { Structure, Local };

std::string to_string(Strategy s);
std::string to_string(Stage s);
Strategy parse_strategy(const std::string& s);  // "token-concat" | "cross-attn"
Stage parse_stage(const std::string& s);        // "structure" | "local"

inline constexpr std::size_t kMaxTextTokens = 32;
inline constexpr double kTimestepScale = 1000.0;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 4;
  std::size_t d_text = 32;
  Strategy strategy = Strategy::TokenConcat;
  Stage stage = Stage::Structure;
  bool segment_embedding = true;
  std::size_t vocab_size = 0;

  // Segment embedding defaults to on for TokenConcat and off for CrossAttn.
  static ModelConfig make(Strategy strategy, Stage stage, std::size_t vocab_size);

  void validate() const;
  std::size_t in_dim() const { return stage == Stage::Structure ? kStructureInputDim : kLatentChannels; }
  std::size_t out_dim() const { return in_dim(); }

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static ModelConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
  bool operator==(const ModelConfig&) const = default;
};

// Parameter names and shapes as a pure function of the config.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg);

template <typename T>
struct BlockWeights {
  Tensor<T> adaln_w, adaln_b;
  Tensor<T> attn_wq, attn_wk, attn_wv, attn_wo;
  Tensor<T> text_wq, text_wk, text_wv, text_wo;
  Tensor<T> src_wk, src_wv;  // CrossAttn only
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
class Model {
 public:
  // Takes ownership of a complete parameter set; names and shapes must match the config.
  Model(ModelConfig cfg, std::map<std::string, Tensor<T>> params);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  const Tensor<T>& param(const std::string& name) const;
  std::vector<NamedTensor<T>> named_parameters() const;

  const BlockWeights<T>& block(std::size_t i) const { return blocks_.at(i); }
  Projection<T> input_projection() const { return {params_.at("in_proj.weight"), params_.at("in_proj.bias")}; }

  void zero_grad();
  Model clone() const;
  template <typename U>
  Model<U> cast() const;

 private:
  void bind();

  ModelConfig cfg_;
  std::map<std::string, Tensor<T>> params_;
  std::vector<BlockWeights<T>> blocks_;
};

// Initialization, in sorted-name order from one Rng stream:
//   biases, AdaLN modulation weights, text-path output projections -> 0
//   text / segment embedding tables -> N(0, 0.02^2)
//   other projections -> U(-1/sqrt(fan_in), 1/sqrt(fan_in))
template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng);

// Sinusoid of 1000*t through fc1 -> silu -> fc2. Returns [1, d_model].
template <typename T>
Tensor<T> embed_timestep(T t, const Model<T>& model);

// Token embeddings plus a fixed 1-D sinusoidal position code. Returns [m, d_text].
template <typename T>
Tensor<T> encode_text(const Model<T>& model, std::span<const int> ids);

// softmax(Q K_text^T / sqrt(d_head)) V_text, projected by W_o. h: [n, d_model].
template <typename T>
Tensor<T> text_cross_attention(const Tensor<T>& h, const Tensor<T>& c_text, const BlockWeights<T>& w,
                               const ModelConfig& cfg);

// Same query projection as the text path, keys/values from source tokens via
// W'_k / W'_v, projected by the shared W_o. CrossAttn only.
template <typename T>
Tensor<T> source_cross_attention(const Tensor<T>& h, const Tensor<T>& source_tokens, const BlockWeights<T>& w,
                                 const ModelConfig& cfg);

template <typename T>
Tensor<T> fuse_decoupled(const Tensor<T>& text_out, const Tensor<T>& source_out);

// Velocity for every target token: [n_target, cfg.out_dim()].
template <typename T>
Tensor<T> forward_velocity(const Model<T>& model, const TokenSequence<T>& target, const TokenSequence<T>& source,
                           std::span<const int> text, T t);

struct ParamCount {
  std::size_t backbone = 0;
  std::size_t text_path = 0;
  std::size_t source_path = 0;  // W'_k, W'_v (CrossAttn) or the segment table (TokenConcat)
  std::size_t heads = 0;
  std::size_t total() const { return backbone + text_path + source_path + heads; }
};

std::string param_component(const std::string& name);
ParamCount param_count(const ModelConfig& cfg);
template <typename T>
ParamCount param_count(const Model<T>& model);

}  // namespace n3d
