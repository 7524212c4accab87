#include "n3d/run_config.hpp"

#include <cmath>
#include <sstream>

#include "n3d/errors.hpp"

namespace n3d {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] != '-') x = std::stoull(v, &pos, 0);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size()) throw ConfigError("bad value for " + key + ": '" + v + "' (expected a non-negative integer)");
  return x;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size() || !std::isfinite(x)) throw ConfigError("bad value for " + key + ": '" + v + "' (expected a number)");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("bad value for " + key + ": '" + v + "' (expected 0 or 1)");
}

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& v) {
  auto positive = [&](double x) {
    if (!(x > 0)) throw ConfigError(key + " must be > 0, got '" + v + "'");
    return x;
  };
  if (key == "d_model") model.d_model = parse_u64(key, v);
  else if (key == "n_heads") model.n_heads = parse_u64(key, v);
  else if (key == "n_blocks") model.n_blocks = parse_u64(key, v);
  else if (key == "d_text") model.d_text = parse_u64(key, v);
  else if (key == "strategy") model.strategy = parse_strategy(v);
  else if (key == "stage") model.stage = parse_stage(v);
  else if (key == "segment_embedding") {
    if (v == "auto") segment_embedding.reset();
    else segment_embedding = parse_bool(key, v);
  } else if (key == "learning_rate") train.learning_rate = positive(parse_double(key, v));
  else if (key == "batch_size") train.batch_size = static_cast<std::size_t>(positive(static_cast<double>(parse_u64(key, v))));
  else if (key == "steps") train.steps = static_cast<std::size_t>(positive(static_cast<double>(parse_u64(key, v))));
  else if (key == "weight_decay") train.weight_decay = parse_double(key, v);
  else if (key == "beta1") train.beta1 = parse_double(key, v);
  else if (key == "beta2") train.beta2 = parse_double(key, v);
  else if (key == "adam_eps") train.adam_eps = positive(parse_double(key, v));
  else if (key == "grad_clip_norm") train.grad_clip_norm = positive(parse_double(key, v));
  else if (key == "checkpoint_every") train.checkpoint_every = parse_u64(key, v);
  else if (key == "resolution") forge.resolution = static_cast<int>(parse_u64(key, v));
  else if (key == "min_parts") forge.min_parts = static_cast<int>(parse_u64(key, v));
  else if (key == "max_parts") forge.max_parts = static_cast<int>(parse_u64(key, v));
  else if (key == "retry_budget") forge.retry_budget = static_cast<int>(parse_u64(key, v));
  else if (key == "per_op") per_op = parse_u64(key, v);
  else if (key == "sample_steps") sample_steps = static_cast<std::size_t>(positive(static_cast<double>(parse_u64(key, v))));
  else if (key == "seed") seed = parse_u64(key, v);
  else throw ConfigError("unknown key '" + key + "'");
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig c = model;
  c.segment_embedding = segment_embedding.value_or(c.strategy == Strategy::TokenConcat);
  c.vocab_size = vocab_size;
  c.validate();
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  t.validate();
  return t;
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_kv() const {
  return {
      {"d_model", std::to_string(model.d_model)},
      {"n_heads", std::to_string(model.n_heads)},
      {"n_blocks", std::to_string(model.n_blocks)},
      {"d_text", std::to_string(model.d_text)},
      {"strategy", to_string(model.strategy)},
      {"stage", to_string(model.stage)},
      {"segment_embedding", segment_embedding ? (*segment_embedding ? "1" : "0") : "auto"},
      {"learning_rate", num(train.learning_rate)},
      {"batch_size", std::to_string(train.batch_size)},
      {"steps", std::to_string(train.steps)},
      {"weight_decay", num(train.weight_decay)},
      {"beta1", num(train.beta1)},
      {"beta2", num(train.beta2)},
      {"adam_eps", num(train.adam_eps)},
      {"grad_clip_norm", num(train.grad_clip_norm)},
      {"checkpoint_every", std::to_string(train.checkpoint_every)},
      {"resolution", std::to_string(forge.resolution)},
      {"min_parts", std::to_string(forge.min_parts)},
      {"max_parts", std::to_string(forge.max_parts)},
      {"retry_budget", std::to_string(forge.retry_budget)},
      {"per_op", std::to_string(per_op)},
      {"sample_steps", std::to_string(sample_steps)},
      {"seed", std::to_string(seed)},
  };
}

std::string RunConfig::echo() const {
  std::string s;
  for (const auto& [k, v] : to_kv()) s += k + "=" + v + "\n";
  return s;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string l = trim(line);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    try {
      base.set(trim(l.substr(0, eq)), trim(l.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (end == text.size()) break;
  }
  return base;
}

RunConfig parse_config_file(const std::string& path, RunConfig base) {
  const auto bytes = read_file(path);
  return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), std::move(base));
}

}  // namespace n3d
