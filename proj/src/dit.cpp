#include "n3d/dit.hpp"

#include <cmath>
#include <sstream>

#include "n3d/errors.hpp"

namespace n3d {

std::string to_string(Strategy s) { return s == Strategy::CrossAttn ? "cross-attn" : "token-concat"; }
std::string to_string(Stage s) { return s == Stage::Structure ? "structure" : "local"; }

Strategy parse_strategy(const std::string& s) {
  if (s == "token-concat") return Strategy::TokenConcat;
  if (s == "cross-attn") return Strategy::CrossAttn;
  throw ConfigError("unknown strategy '" + s + "' (expected token-concat or cross-attn)");
}

Stage parse_stage(const std::string& s) {
  if (s == "structure") return Stage::Structure;
  if (s == "local") return Stage::Local;
  throw ConfigError("unknown stage '" + s + "' (expected structure or local)");
}

ModelConfig ModelConfig::make(Strategy strategy, Stage stage, std::size_t vocab_size) {
  ModelConfig c;
  c.strategy = strategy;
  c.stage = stage;
  c.segment_embedding = strategy == Strategy::TokenConcat;
  c.vocab_size = vocab_size;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
  if (n_heads == 0) fail("n_heads must be positive");
  if (d_model == 0 || d_model % n_heads != 0)
    fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  if (d_model < 6 || d_model % 2 != 0) fail("d_model must be even and at least 6");
  if (n_blocks == 0) fail("n_blocks must be positive");
  if (d_text == 0 || d_text % 2 != 0) fail("d_text must be even and positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (segment_embedding && strategy != Strategy::TokenConcat) fail("segment_embedding requires strategy token-concat");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  return {{"d_model", std::to_string(d_model)},
          {"n_heads", std::to_string(n_heads)},
          {"n_blocks", std::to_string(n_blocks)},
          {"d_text", std::to_string(d_text)},
          {"strategy", to_string(strategy)},
          {"stage", to_string(stage)},
          {"segment_embedding", segment_embedding ? "1" : "0"},
          {"vocab_size", std::to_string(vocab_size)}};
}

ModelConfig ModelConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
  ModelConfig c;
  auto num = [](const std::string& k, const std::string& v) -> std::size_t {
    std::size_t pos = 0;
    unsigned long long x = 0;
    try {
      x = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty() || v[0] == '-') throw ConfigError("bad value for " + k + ": '" + v + "'");
    return static_cast<std::size_t>(x);
  };
  for (const auto& [k, v] : kv) {
    if (k == "d_model") c.d_model = num(k, v);
    else if (k == "n_heads") c.n_heads = num(k, v);
    else if (k == "n_blocks") c.n_blocks = num(k, v);
    else if (k == "d_text") c.d_text = num(k, v);
    else if (k == "strategy") c.strategy = parse_strategy(v);
    else if (k == "stage") c.stage = parse_stage(v);
    else if (k == "segment_embedding") {
      if (v != "0" && v != "1") throw ConfigError("bad value for segment_embedding: '" + v + "'");
      c.segment_embedding = v == "1";
    } else if (k == "vocab_size") c.vocab_size = num(k, v);
    else throw ConfigError("unknown model key '" + k + "'");
  }
  return c;
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, dt = cfg.d_text;
  std::map<std::string, Shape> s;
  s["in_proj.weight"] = {cfg.in_dim(), d};
  s["in_proj.bias"] = {d};
  s["t_embed.fc1.weight"] = {d, d};
  s["t_embed.fc1.bias"] = {d};
  s["t_embed.fc2.weight"] = {d, d};
  s["t_embed.fc2.bias"] = {d};
  s["text_embed.weight"] = {cfg.vocab_size, dt};
  s["head.weight"] = {d, cfg.out_dim()};
  s["head.bias"] = {cfg.out_dim()};
  if (cfg.segment_embedding) s["segment_embed.weight"] = {2, d};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    s[p + "adaln.weight"] = {d, 6 * d};
    s[p + "adaln.bias"] = {6 * d};
    for (const char* w : {"wq", "wk", "wv", "wo"}) s[p + "attn." + w] = {d, d};
    s[p + "text.wq"] = {d, d};
    s[p + "text.wk"] = {dt, d};
    s[p + "text.wv"] = {dt, d};
    s[p + "text.wo"] = {d, d};
    if (cfg.strategy == Strategy::CrossAttn) {
      s[p + "source.wk"] = {d, d};
      s[p + "source.wv"] = {d, d};
    }
    s[p + "mlp.fc1.weight"] = {d, 4 * d};
    s[p + "mlp.fc1.bias"] = {4 * d};
    s[p + "mlp.fc2.weight"] = {4 * d, d};
    s[p + "mlp.fc2.bias"] = {d};
  }
  return s;
}

// ---- Model --------------------------------------------------------------------

template <typename T>
Model<T>::Model(ModelConfig cfg, std::map<std::string, Tensor<T>> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  const auto shapes = parameter_shapes(cfg_);
  if (shapes.size() != params_.size()) {
    for (const auto& [name, _] : shapes)
      if (!params_.count(name)) throw ConfigError("missing parameter '" + name + "'");
    for (const auto& [name, _] : params_)
      if (!shapes.count(name)) throw ConfigError("unexpected parameter '" + name + "'");
  }
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    if (!it->second.defined() || it->second.shape() != shape)
      throw ConfigError("parameter '" + name + "' has shape " +
                        (it->second.defined() ? shape_str(it->second.shape()) : std::string("<undefined>")) +
                        ", expected " + shape_str(shape));
  }
  bind();
}

template <typename T>
void Model<T>::bind() {
  blocks_.clear();
  for (std::size_t i = 0; i < cfg_.n_blocks; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto at = [&](const std::string& n) { return params_.at(p + n); };
    BlockWeights<T> b;
    b.adaln_w = at("adaln.weight");
    b.adaln_b = at("adaln.bias");
    b.attn_wq = at("attn.wq");
    b.attn_wk = at("attn.wk");
    b.attn_wv = at("attn.wv");
    b.attn_wo = at("attn.wo");
    b.text_wq = at("text.wq");
    b.text_wk = at("text.wk");
    b.text_wv = at("text.wv");
    b.text_wo = at("text.wo");
    if (cfg_.strategy == Strategy::CrossAttn) {
      b.src_wk = at("source.wk");
      b.src_wv = at("source.wv");
    }
    b.mlp_w1 = at("mlp.fc1.weight");
    b.mlp_b1 = at("mlp.fc1.bias");
    b.mlp_w2 = at("mlp.fc2.weight");
    b.mlp_b2 = at("mlp.fc2.bias");
    blocks_.push_back(std::move(b));
  }
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back({name, t});
  return out;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

template <typename T>
Model<T> Model<T>::clone() const {
  std::map<std::string, Tensor<T>> copy;
  for (const auto& [name, t] : params_) {
    Tensor<T> c = t.detach();
    c.set_requires_grad(t.requires_grad());
    copy.emplace(name, std::move(c));
  }
  return Model(cfg_, std::move(copy));
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  std::map<std::string, Tensor<U>> out;
  for (const auto& [name, t] : params_) {
    std::vector<U> v(t.values().begin(), t.values().end());
    Tensor<U> c = Tensor<U>::from(t.shape(), std::move(v));
    c.set_requires_grad(t.requires_grad());
    out.emplace(name, std::move(c));
  }
  return Model<U>(cfg_, std::move(out));
}

namespace {

enum class InitRule { Zero, Normal, Uniform };

InitRule init_rule(const std::string& name) {
  auto ends_with = [&](const std::string& suf) {
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".bias") || ends_with("adaln.weight") || ends_with("text.wo")) return InitRule::Zero;
  if (name == "text_embed.weight" || name == "segment_embed.weight") return InitRule::Normal;
  return InitRule::Uniform;
}

}  // namespace

template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  const auto shapes = parameter_shapes(cfg);
  std::map<std::string, Tensor<T>> params;
  for (const auto& [name, shape] : shapes) {
    std::vector<T> v(shape_numel(shape), T(0));
    switch (init_rule(name)) {
      case InitRule::Zero:
        break;
      case InitRule::Normal:
        for (auto& x : v) x = static_cast<T>(0.02 * rng.normal());
        break;
      case InitRule::Uniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
    }
    Tensor<T> t = Tensor<T>::from(shape, std::move(v));
    t.set_requires_grad(true);
    params.emplace(name, std::move(t));
  }
  return Model<T>(cfg, std::move(params));
}

// ---- forward pieces -------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale_) {
  return add(mul(x, add_scalar(scale_, T(1))), shift);
}

template <typename T>
void check_hidden(const Tensor<T>& h, const ModelConfig& cfg, const char* what) {
  if (h.rank() != 2 || h.dim(1) != cfg.d_model)
    throw DimensionError(std::string(what) + ": expected hidden states [n, " + std::to_string(cfg.d_model) + "], got " +
                         shape_str(h.shape()));
}

// Shared query path: softmax(Q K^T / sqrt(d_head)) V with K, V projected from `kv`.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& kv, const Tensor<T>& wk, const Tensor<T>& wv, std::size_t heads) {
  return multi_head_attention(q, matmul(kv, wk), matmul(kv, wv), heads);
}

}  // namespace

template <typename T>
Tensor<T> embed_timestep(T t, const Model<T>& model) {
  if (!(t >= T(0) && t <= T(1))) throw ContractError("embed_timestep: t must lie in [0, 1]");
  const std::size_t d = model.config().d_model, half = d / 2;
  const double s = kTimestepScale * static_cast<double>(t);
  std::vector<T> e(d, T(0));
  for (std::size_t j = 0; j < half; ++j) {
    const double w = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
    e[j] = static_cast<T>(std::cos(s * w));
    e[half + j] = static_cast<T>(std::sin(s * w));
  }
  Tensor<T> x = Tensor<T>::from({1, d}, std::move(e));
  x = silu(linear(x, model.param("t_embed.fc1.weight"), model.param("t_embed.fc1.bias")));
  return linear(x, model.param("t_embed.fc2.weight"), model.param("t_embed.fc2.bias"));
}

template <typename T>
Tensor<T> encode_text(const Model<T>& model, std::span<const int> ids) {
  if (ids.empty()) throw ContractError("instruction may not be empty");
  if (ids.size() > kMaxTextTokens)
    throw ContractError("instruction has " + std::to_string(ids.size()) + " tokens (max " +
                        std::to_string(kMaxTextTokens) + ")");
  const std::size_t m = ids.size(), dt = model.config().d_text;
  std::vector<T> pe(m * dt);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < dt / 2; ++j) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(dt));
      pe[i * dt + 2 * j] = static_cast<T>(std::sin(static_cast<double>(i) * w));
      pe[i * dt + 2 * j + 1] = static_cast<T>(std::cos(static_cast<double>(i) * w));
    }
  return add(embedding(model.param("text_embed.weight"), ids), Tensor<T>::from({m, dt}, std::move(pe)));
}

template <typename T>
Tensor<T> text_cross_attention(const Tensor<T>& h, const Tensor<T>& c_text, const BlockWeights<T>& w,
                               const ModelConfig& cfg) {
  check_hidden(h, cfg, "text_cross_attention");
  if (c_text.rank() != 2 || c_text.dim(1) != cfg.d_text)
    throw DimensionError("text_cross_attention: expected text features [m, " + std::to_string(cfg.d_text) + "], got " +
                         shape_str(c_text.shape()));
  if (c_text.dim(0) == 0) throw ContractError("instruction may not be empty");
  return matmul(attend(matmul(h, w.text_wq), c_text, w.text_wk, w.text_wv, cfg.n_heads), w.text_wo);
}

template <typename T>
Tensor<T> source_cross_attention(const Tensor<T>& h, const Tensor<T>& source_tokens, const BlockWeights<T>& w,
                                 const ModelConfig& cfg) {
  if (cfg.strategy != Strategy::CrossAttn) throw ContractError("source_cross_attention requires strategy cross-attn");
  check_hidden(h, cfg, "source_cross_attention");
  check_hidden(source_tokens, cfg, "source_cross_attention");
  if (source_tokens.dim(0) == 0) throw ContractError("source_cross_attention: no source tokens");
  return matmul(attend(matmul(h, w.text_wq), source_tokens, w.src_wk, w.src_wv, cfg.n_heads), w.text_wo);
}

template <typename T>
Tensor<T> fuse_decoupled(const Tensor<T>& text_out, const Tensor<T>& source_out) {
  if (text_out.shape() != source_out.shape())
    throw DimensionError("fuse_decoupled: shapes " + shape_str(text_out.shape()) + " and " +
                         shape_str(source_out.shape()) + " differ");
  return add(text_out, source_out);
}

template <typename T>
Tensor<T> forward_velocity(const Model<T>& model, const TokenSequence<T>& target, const TokenSequence<T>& source,
                           std::span<const int> text, T t) {
  const ModelConfig& cfg = model.config();
  const std::size_t d = cfg.d_model;
  check_hidden(target.tokens, cfg, "forward_velocity (target)");
  check_hidden(source.tokens, cfg, "forward_velocity (source)");
  const std::size_t n_t = target.tokens.dim(0), n_s = source.tokens.dim(0);
  if (target.size() != n_t || source.size() != n_s || target.segment.size() != n_t || source.segment.size() != n_s)
    throw ContractError("forward_velocity: token sequence metadata does not match its tensor");
  for (auto s : target.segment)
    if (s != Segment::Target) throw ContractError("forward_velocity: target sequence carries source-segment tokens");
  for (auto s : source.segment)
    if (s != Segment::Source) throw ContractError("forward_velocity: source sequence carries target-segment tokens");
  if (n_t == 0) throw ContractError("forward_velocity: no target tokens");
  if (cfg.strategy == Strategy::CrossAttn && n_s == 0) throw ContractError("forward_velocity: no source tokens");

  const Tensor<T> temb = silu(embed_timestep(t, model));
  const Tensor<T> c_text = encode_text(model, text);

  Tensor<T> h;
  if (cfg.strategy == Strategy::TokenConcat) {
    h = concat_seq(target.tokens, source.tokens);
    if (cfg.segment_embedding) {
      std::vector<int> seg(n_t + n_s, 0);
      for (std::size_t i = n_t; i < seg.size(); ++i) seg[i] = 1;
      h = add(h, embedding(model.param("segment_embed.weight"), seg));
    }
  } else {
    h = target.tokens;
  }

  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const BlockWeights<T>& w = model.block(b);
    const Tensor<T> mod = linear(temb, w.adaln_w, w.adaln_b);
    auto chunk = [&](std::size_t k) { return slice_cols(mod, k * d, d); };

    Tensor<T> x = modulate(layer_norm(h), chunk(0), chunk(1));
    Tensor<T> a = matmul(multi_head_attention(matmul(x, w.attn_wq), matmul(x, w.attn_wk), matmul(x, w.attn_wv),
                                              cfg.n_heads),
                         w.attn_wo);
    h = add(h, mul(a, chunk(2)));

    x = layer_norm(h);
    if (cfg.strategy == Strategy::TokenConcat) {
      h = add(h, text_cross_attention(x, c_text, w, cfg));
    } else {
      // Both paths share Q and W_o, so W_o is applied once to the fused sum.
      const Tensor<T> q = matmul(x, w.text_wq);
      const Tensor<T> z_text = attend(q, c_text, w.text_wk, w.text_wv, cfg.n_heads);
      const Tensor<T> z_src = attend(q, source.tokens, w.src_wk, w.src_wv, cfg.n_heads);
      h = add(h, matmul(fuse_decoupled(z_text, z_src), w.text_wo));
    }

    x = modulate(layer_norm(h), chunk(3), chunk(4));
    Tensor<T> m = linear(gelu(linear(x, w.mlp_w1, w.mlp_b1)), w.mlp_w2, w.mlp_b2);
    h = add(h, mul(m, chunk(5)));
  }

  if (cfg.strategy == Strategy::TokenConcat) h = split_seq(h, n_t).first;
  return linear(layer_norm(h), model.param("head.weight"), model.param("head.bias"));
}

// ---- parameter accounting -------------------------------------------------------

std::string param_component(const std::string& name) {
  if (name.rfind("head.", 0) == 0) return "heads";
  if (name.rfind("text_embed.", 0) == 0 || name.find(".text.") != std::string::npos) return "text_path";
  if (name.rfind("segment_embed.", 0) == 0 || name.find(".source.") != std::string::npos) return "source_path";
  return "backbone";
}

namespace {
void tally(ParamCount& c, const std::string& name, std::size_t n) {
  const std::string comp = param_component(name);
  if (comp == "heads") c.heads += n;
  else if (comp == "text_path") c.text_path += n;
  else if (comp == "source_path") c.source_path += n;
  else c.backbone += n;
}
}  // namespace

ParamCount param_count(const ModelConfig& cfg) {
  ParamCount c;
  for (const auto& [name, shape] : parameter_shapes(cfg)) tally(c, name, shape_numel(shape));
  return c;
}

template <typename T>
ParamCount param_count(const Model<T>& model) {
  ParamCount c;
  for (const auto& [name, t] : model.params())
    if (t.requires_grad()) tally(c, name, t.numel());
  return c;
}

#define N3D_INSTANTIATE(T)                                                                                         \
  template class Model<T>;                                                                                         \
  template Model<T> build_model<T>(const ModelConfig&, Rng&);                                                      \
  template Tensor<T> embed_timestep<T>(T, const Model<T>&);                                                        \
  template Tensor<T> encode_text<T>(const Model<T>&, std::span<const int>);                                        \
  template Tensor<T> text_cross_attention<T>(const Tensor<T>&, const Tensor<T>&, const BlockWeights<T>&,           \
                                             const ModelConfig&);                                                  \
  template Tensor<T> source_cross_attention<T>(const Tensor<T>&, const Tensor<T>&, const BlockWeights<T>&,         \
                                               const ModelConfig&);                                                \
  template Tensor<T> fuse_decoupled<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> forward_velocity<T>(const Model<T>&, const TokenSequence<T>&, const TokenSequence<T>&,       \
                                         std::span<const int>, T);                                                 \
  template ParamCount param_count<T>(const Model<T>&);

N3D_INSTANTIATE(float)
N3D_INSTANTIATE(double)
#undef N3D_INSTANTIATE

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template Model<double> Model<double>::cast<double>() const;

}  // namespace n3d
