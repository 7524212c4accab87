#include <fstream>
#include <iterator>

#include "n3d/bytes.hpp"
#include "n3d/errors.hpp"
#include "n3d/forge.hpp"

namespace n3d {

namespace {

constexpr char kDatasetMagic[4] = {'N', '3', 'D', 'D'};
constexpr char kObjectMagic[4] = {'N', '3', 'D', 'O'};
constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::uint32_t kObjectVersion = 1;

std::vector<std::uint8_t> occupancy_bits(const OccupancyGrid& g) {
  std::vector<std::uint8_t> f(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) f[i] = g.occupied(i);
  return f;
}

void check_magic(ByteReader& in, const char (&magic)[4], const char* what) {
  const std::string m = in.raw(4);
  if (m != std::string(magic, 4)) in.fail(std::string("bad magic for ") + what, 0);
}

void check_version(ByteReader& in, std::uint32_t supported) {
  const std::size_t at = in.offset();
  const std::uint32_t v = in.u32();
  if (v != supported)
    in.fail("unsupported version " + std::to_string(v) + " (supported: " + std::to_string(supported) + ")", at);
}

std::size_t read_resolution(ByteReader& in) {
  const std::size_t at = in.offset();
  const int r = in.u16();
  if (r < 1 || r > 1024) in.fail("resolution " + std::to_string(r) + " out of range", at);
  return static_cast<std::size_t>(r);
}

OccupancyGrid read_materials(ByteReader& in, int r, const std::vector<std::uint8_t>* occ) {
  OccupancyGrid g(r);
  const std::size_t at = in.offset();
  auto m = in.bytes(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (m[i] > kMaxMaterial) in.fail("material id " + std::to_string(m[i]) + " out of range", at + i);
    if (occ && ((*occ)[i] != 0) != (m[i] != 0)) in.fail("occupancy bit disagrees with material", at + i);
    g.set(i, m[i]);
  }
  return g;
}

}  // namespace

std::vector<std::uint8_t> encode_dataset(const std::vector<EditTriplet>& triplets) {
  ByteWriter out;
  out.raw(std::string(kDatasetMagic, 4));
  out.u32(kDatasetVersion);
  out.u64(triplets.size());
  for (const auto& t : triplets) {
    const int r = t.source.resolution();
    if (t.target.resolution() != r || t.edit_mask.size() != t.source.size())
      throw DimensionError("triplet grids and edit mask must share one resolution");
    if (r > 0xFFFF || t.part_id < 0 || t.part_id > 0xFFFF) throw ContractError("triplet field out of range");
    out.u16(static_cast<std::uint16_t>(r));
    out.u8(static_cast<std::uint8_t>(t.op));
    out.u16(static_cast<std::uint16_t>(t.part_id));
    out.str16(t.instruction);
    out.bits(occupancy_bits(t.source));
    out.bits(occupancy_bits(t.target));
    out.bits(t.edit_mask);
    out.bytes(t.source.materials());
    out.bytes(t.target.materials());
  }
  return out.take();
}

std::vector<EditTriplet> decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  check_magic(in, kDatasetMagic, "dataset");
  check_version(in, kDatasetVersion);
  const std::uint64_t count = in.u64();
  std::vector<EditTriplet> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    EditTriplet t;
    const int r = static_cast<int>(read_resolution(in));
    const std::size_t n = static_cast<std::size_t>(r) * r * r;
    const std::size_t op_at = in.offset();
    const std::uint8_t op = in.u8();
    if (op > 2) in.fail("unknown edit op " + std::to_string(op), op_at);
    t.op = static_cast<EditOp>(op);
    t.part_id = in.u16();
    t.instruction = in.str16();
    const auto src_occ = in.bits(n);
    const auto tgt_occ = in.bits(n);
    t.edit_mask = in.bits(n);
    t.source = read_materials(in, r, &src_occ);
    t.target = read_materials(in, r, &tgt_occ);
    out.push_back(std::move(t));
  }
  if (!in.done()) in.fail("trailing bytes after " + std::to_string(count) + " triplets");
  return out;
}

std::vector<std::uint8_t> encode_object(const VoxelObject& obj) {
  ByteWriter out;
  out.raw(std::string(kObjectMagic, 4));
  out.u32(kObjectVersion);
  out.u16(static_cast<std::uint16_t>(obj.grid.resolution()));
  out.bytes(obj.grid.materials());
  out.u16(static_cast<std::uint16_t>(obj.parts.size()));
  for (const auto& [name, mask] : obj.parts) {
    if (mask.size() != obj.grid.size()) throw DimensionError("part mask size does not match the grid");
    out.str16(name);
    out.bits(mask);
  }
  return out.take();
}

VoxelObject decode_object(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  check_magic(in, kObjectMagic, "object");
  check_version(in, kObjectVersion);
  const int r = static_cast<int>(read_resolution(in));
  VoxelObject obj{read_materials(in, r, nullptr), {}};
  const std::uint16_t parts = in.u16();
  for (std::uint16_t k = 0; k < parts; ++k) {
    std::string name = in.str16();
    obj.parts.emplace_back(std::move(name), in.bits(obj.grid.size()));
  }
  if (!in.done()) in.fail("trailing bytes after object");
  return obj;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ConfigError("write to '" + path + "' failed");
}

void write_dataset(const std::vector<EditTriplet>& triplets, const std::string& path) {
  write_file(path, encode_dataset(triplets));
}

std::vector<EditTriplet> read_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

void write_object(const VoxelObject& obj, const std::string& path) { write_file(path, encode_object(obj)); }

VoxelObject read_object(const std::string& path) { return decode_object(read_file(path)); }

}  // namespace n3d
