#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "n3d/codec.hpp"
#include "n3d/lexicon.hpp"
#include "n3d/rng.hpp"

namespace n3d {

enum class Primitive : std::uint8_t { Box, Sphere, Cylinder };
enum class EditOp : std::uint8_t { Delete = 0, Add = 1, Modify = 2 };

std::string to_string(EditOp op);
std::string to_string(Primitive p);

// Sites, indexed like words::sites(): top, bottom, left side, right side, front, back.
enum class Site : std::uint8_t { Top, Bottom, Left, Right, Front, Back, None };

struct Part {
  std::string name;
  Primitive primitive = Primitive::Box;
  Int3 origin;  // min corner of the bounding box
  Int3 size;    // bounding box extent
  int axis = 1;  // cylinder axis (0 x, 1 y, 2 z)
  std::uint8_t material = 1;
  Site site = Site::None;  // None for the body
};

// Voxels covered by one part, as grid indices in ascending order.
std::vector<std::size_t> rasterize(const Part& part, int resolution);

struct PartAssembly {
  int resolution = kDefaultResolution;
  std::string body_noun;
  std::string body_adjective;
  std::vector<Part> parts;  // parts[0] is the body

  const Part* find(std::string_view name) const;
  // Body first, then the others in order; a voxel belongs to the first part covering it.
  OccupancyGrid grid() const;
  // Voxels owned by exactly this part (covered by no other part).
  std::vector<std::uint8_t> exclusive_mask(std::string_view name) const;
};

struct ForgeSpec {
  int resolution = kDefaultResolution;
  int min_parts = 2;  // attached parts, body excluded
  int max_parts = 5;
  int retry_budget = 64;
  void validate() const;
};

struct EditTriplet {
  OccupancyGrid source;
  OccupancyGrid target;
  std::string instruction;
  EditOp op = EditOp::Delete;
  std::vector<std::uint8_t> edit_mask;  // R^3, 1 = allowed to change
  int part_id = 0;                      // lexicon id of the edited part

  bool operator==(const EditTriplet&) const = default;
};

// A source object with named per-part voxel masks.
struct VoxelObject {
  OccupancyGrid grid;
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> parts;
};

VoxelObject to_object(const PartAssembly& a);

PartAssembly gen_assembly(Rng& rng, const ForgeSpec& spec = {});

EditTriplet make_delete_pair(const PartAssembly& a, Rng& rng);
EditTriplet make_add_pair(const PartAssembly& a, Rng& rng);
EditTriplet make_modify_pair(const PartAssembly& a, Rng& rng);

// "a <adjective> <noun> with p1, p2 and p3", parts sorted by name.
std::string caption_assembly(const PartAssembly& a);

// delete: "delete the P, C"; add: "add a P on the SITE, C"; modify: "change the P to COLOR, C".
// `detail` is the site (add) or color (modify). Every word must be in the lexicon.
std::string format_instruction(EditOp op, std::string_view part, std::string_view caption, std::string_view detail = {});

struct ParsedInstruction {
  EditOp op = EditOp::Delete;
  std::string part;
  std::string detail;
  std::vector<std::string> caption_parts;
};
// Inverse of format_instruction; nullopt when the text does not follow a template.
std::optional<ParsedInstruction> parse_instruction(std::string_view text);

struct CurationResult {
  bool accept = true;
  std::vector<std::string> reasons;  // subset of {"fidelity", "consistency", "quality"}
  bool has(std::string_view reason) const;
};

inline constexpr double kConsistencyIou = 0.98;
inline constexpr double kLargestComponentFraction = 0.95;
inline constexpr std::size_t kMinOccupied = 32;

CurationResult curate(const EditTriplet& t);

// Occupancy IoU over voxels with mask == 0 (all voxels when mask is empty). 1.0 when both are empty there.
double masked_iou(const OccupancyGrid& a, const OccupancyGrid& b, const std::vector<std::uint8_t>& mask);
// Size of the largest 6-connected occupied component.
std::size_t largest_component(const OccupancyGrid& g);

// One triplet per (op, index); deterministic in (seed, op, index).
struct GeneratedTriplet {
  EditTriplet triplet;
  VoxelObject source_object;
};
GeneratedTriplet generate_triplet(std::uint64_t seed, EditOp op, std::size_t index, const ForgeSpec& spec = {});
// per_op triplets of each op, ordered delete, add, modify.
std::vector<GeneratedTriplet> generate_dataset(std::uint64_t seed, std::size_t per_op, const ForgeSpec& spec = {});

// ---- serialization ------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const std::vector<EditTriplet>& triplets);
std::vector<EditTriplet> decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::vector<EditTriplet>& triplets, const std::string& path);
std::vector<EditTriplet> read_dataset(const std::string& path);

std::vector<std::uint8_t> encode_object(const VoxelObject& obj);
VoxelObject decode_object(std::span<const std::uint8_t> bytes);
void write_object(const VoxelObject& obj, const std::string& path);
VoxelObject read_object(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace n3d
