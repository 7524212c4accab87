#include "n3d/checkpoint.hpp"

#include <map>
#include <span>

#include "n3d/bytes.hpp"
#include "n3d/errors.hpp"

namespace n3d {

namespace {

constexpr char kMagic[4] = {'N', '3', 'D', 'C'};

void write_table(ByteWriter& out, const std::map<std::string, std::pair<Shape, std::span<const float>>>& table) {
  out.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, entry] : table) {
    const auto& [shape, data] = entry;
    out.str16(name);
    out.u8(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) out.u32(static_cast<std::uint32_t>(d));
    for (float v : data) out.f32(v);
  }
}

struct RawTensor {
  Shape shape;
  std::vector<float> data;
};

std::map<std::string, RawTensor> read_table(ByteReader& in) {
  std::map<std::string, RawTensor> table;
  const std::uint32_t count = in.u32();
  std::string prev;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = in.offset();
    std::string name = in.str16();
    if (k > 0 && name <= prev) in.fail("tensor '" + name + "' out of order", at);
    RawTensor t;
    const std::uint8_t rank = in.u8();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.shape.push_back(in.u32());
      n *= t.shape.back();
    }
    if (n * 4 > in.remaining()) in.fail("truncated tensor '" + name + "'");
    t.data.resize(n);
    for (auto& v : t.data) v = in.f32();
    prev = name;
    table.emplace(std::move(name), std::move(t));
  }
  return table;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model, const OptimizerState<float>* opt,
                                            const KeyValues& meta) {
  ByteWriter out;
  out.raw(std::string(kMagic, 4));
  out.u32(kCheckpointVersion);

  std::string header;
  for (const auto& [k, v] : model.config().to_kv()) header += k + "=" + v + "\n";
  if (opt) {
    header += "opt.step=" + std::to_string(opt->step) + "\n";
    header += "opt.skipped=" + std::to_string(opt->skipped) + "\n";
  }
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ContractError("checkpoint meta entry '" + k + "' is not a single key=value line");
    header += "meta." + k + "=" + v + "\n";
  }
  out.u64(header.size());
  out.raw(header);

  std::map<std::string, std::pair<Shape, std::span<const float>>> params;
  for (const auto& [name, t] : model.params()) params[name] = {t.shape(), t.data()};
  write_table(out, params);

  out.u8(opt ? 1 : 0);
  if (opt) {
    std::map<std::string, std::pair<Shape, std::span<const float>>> moments;
    for (const auto& [name, t] : model.params()) {
      auto m = opt->m.find(name), v = opt->v.find(name);
      if (m == opt->m.end() || v == opt->v.end()) continue;
      if (m->second.size() != t.numel() || v->second.size() != t.numel())
        throw ContractError("optimizer moments for '" + name + "' do not match the parameter");
      moments["m." + name] = {t.shape(), m->second};
      moments["v." + name] = {t.shape(), v->second};
    }
    write_table(out, moments);
  }
  return out.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (in.raw(4) != std::string(kMagic, 4)) in.fail("bad checkpoint magic", 0);
  const std::size_t ver_at = in.offset();
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion)
    in.fail("unsupported checkpoint version " + std::to_string(version) + " (supported: " +
                std::to_string(kCheckpointVersion) + ")",
            ver_at);

  const std::size_t header_at = in.offset();
  const std::uint64_t header_len = in.u64();
  if (header_len > in.remaining()) in.fail("truncated header", header_at);
  const std::string header = in.raw(static_cast<std::size_t>(header_len));

  KeyValues model_kv, meta;
  std::optional<OptimizerState<float>> opt;
  std::uint64_t step = 0, skipped = 0;
  std::size_t pos = 0;
  while (pos < header.size()) {
    std::size_t end = header.find('\n', pos);
    if (end == std::string::npos) end = header.size();
    const std::string line = header.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) in.fail("malformed header line '" + line + "'", header_at + 8);
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    try {
      if (k == "opt.step") step = std::stoull(v);
      else if (k == "opt.skipped") skipped = std::stoull(v);
      else if (k.rfind("meta.", 0) == 0) meta.emplace_back(k.substr(5), v);
      else model_kv.emplace_back(k, v);
    } catch (const std::exception&) {
      in.fail("bad header value '" + line + "'", header_at + 8);
    }
  }
  ModelConfig cfg;
  std::map<std::string, Shape> shapes;
  try {
    cfg = ModelConfig::from_kv(model_kv);
    shapes = parameter_shapes(cfg);
  } catch (const ConfigError& e) {
    in.fail(std::string("checkpoint header: ") + e.what(), header_at + 8);
  }

  const std::size_t table_at = in.offset();
  auto table = read_table(in);
  std::map<std::string, Tensor<float>> params;
  for (auto& [name, raw] : table) {
    auto it = shapes.find(name);
    if (it == shapes.end()) in.fail("unknown parameter '" + name + "' for this config", table_at);
    if (it->second != raw.shape)
      in.fail("parameter '" + name + "' has shape " + shape_str(raw.shape) + ", config implies " + shape_str(it->second),
              table_at);
    Tensor<float> t = Tensor<float>::from(raw.shape, std::move(raw.data));
    t.set_requires_grad(true);
    params.emplace(name, std::move(t));
  }
  for (const auto& [name, _] : shapes)
    if (!params.count(name)) in.fail("missing parameter '" + name + "'", table_at);

  const std::size_t flag_at = in.offset();
  const std::uint8_t flag = in.u8();
  if (flag > 1) in.fail("bad optimizer flag", flag_at);
  if (flag == 1) {
    OptimizerState<float> st;
    st.step = step;
    st.skipped = skipped;
    const std::size_t moments_at = in.offset();
    for (auto& [name, raw] : read_table(in)) {
      const bool is_m = name.rfind("m.", 0) == 0, is_v = name.rfind("v.", 0) == 0;
      const std::string pname = name.size() > 2 ? name.substr(2) : "";
      auto it = shapes.find(pname);
      if ((!is_m && !is_v) || it == shapes.end() || it->second != raw.shape)
        in.fail("unexpected optimizer tensor '" + name + "'", moments_at);
      (is_m ? st.m : st.v)[pname] = std::move(raw.data);
    }
    opt = std::move(st);
  }
  if (!in.done()) in.fail("trailing bytes after checkpoint");
  return Checkpoint{Model<float>(cfg, std::move(params)), std::move(opt), std::move(meta)};
}

void save_checkpoint(const std::string& path, const Model<float>& model, const OptimizerState<float>* opt,
                     const KeyValues& meta) {
  write_file(path, encode_checkpoint(model, opt, meta));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

Checkpoint load_checkpoint(const std::string& path, Stage required) {
  Checkpoint c = load_checkpoint(path);
  if (c.model.config().stage != required)
    throw ConfigError("'" + path + "' holds a " + to_string(c.model.config().stage) + "-stage model; a " +
                      to_string(required) + "-stage model is required");
  return c;
}

}  // namespace n3d
