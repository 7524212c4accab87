#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "n3d/tensor.hpp"

namespace n3d {

struct Int3 {
  int x = 0, y = 0, z = 0;
  auto operator<=>(const Int3&) const = default;
};

inline constexpr int kMaxMaterial = 15;
inline constexpr int kDefaultResolution = 32;
inline constexpr int kDefaultPatch = 4;
inline constexpr std::size_t kStructureChannels = 8;   // C_s
inline constexpr std::size_t kLatentChannels = 16;     // C_l
inline constexpr std::size_t kStructureInputDim = kStructureChannels + 1;  // features + activity

// Dense R^3 voxel object. Storage is a material id per voxel (0 = empty), so
// occupancy and material can never disagree. Index order: x fastest, then y, then z.
class OccupancyGrid {
 public:
  explicit OccupancyGrid(int resolution = kDefaultResolution);

  int resolution() const { return r_; }
  std::size_t size() const { return mat_.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) + static_cast<std::size_t>(r_) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(r_) * static_cast<std::size_t>(z));
  }
  Int3 coords(std::size_t i) const;
  bool in_bounds(int x, int y, int z) const { return x >= 0 && y >= 0 && z >= 0 && x < r_ && y < r_ && z < r_; }

  bool occupied(std::size_t i) const { return mat_[i] != 0; }
  bool occupied(int x, int y, int z) const { return mat_[index(x, y, z)] != 0; }
  std::uint8_t material(std::size_t i) const { return mat_[i]; }
  std::uint8_t material(int x, int y, int z) const { return mat_[index(x, y, z)]; }
  // material 0 clears the voxel.
  void set(std::size_t i, std::uint8_t material);
  void set(int x, int y, int z, std::uint8_t material) { set(index(x, y, z), material); }

  std::size_t count() const;
  std::span<const std::uint8_t> materials() const { return mat_; }

  bool operator==(const OccupancyGrid&) const = default;

 private:
  int r_;
  std::vector<std::uint8_t> mat_;
};

// Coarse grid S: one cell per patch^3 block of voxels.
struct SparseStructure {
  int grid_res = 0;
  int patch = 0;
  std::vector<std::uint8_t> active;  // grid_res^3, x fastest
  std::vector<float> features;       // grid_res^3 * kStructureChannels

  std::size_t cells() const { return active.size(); }
  std::size_t cell_index(Int3 p) const {
    return static_cast<std::size_t>(p.x) + static_cast<std::size_t>(grid_res) * (static_cast<std::size_t>(p.y) + static_cast<std::size_t>(grid_res) * static_cast<std::size_t>(p.z));
  }
  Int3 cell_pos(std::size_t i) const;
  std::span<const float> feature(std::size_t cell) const {
    return std::span<const float>(features).subspan(cell * kStructureChannels, kStructureChannels);
  }
  std::size_t active_count() const;
  // Sorted lexicographically by (x, y, z).
  std::vector<Int3> active_positions() const;

  bool operator==(const SparseStructure&) const = default;
};

struct LatentEntry {
  Int3 pos;
  std::array<float, kLatentChannels> z{};
  // Per-voxel material ids of the patch (x fastest). Present on codec output and
  // absent on model output; when present, decode restores materials exactly.
  std::optional<std::array<std::uint8_t, 64>> residual;

  bool operator==(const LatentEntry&) const = default;
};

// z = (z_i, p_i): one entry per active cell, sorted lexicographically by position.
struct StructuredLatent {
  std::vector<LatentEntry> entries;
  bool operator==(const StructuredLatent&) const = default;
};

void canonicalize(StructuredLatent& lat);

// Per-cell descriptor, each channel in [-1, 1]:
//   0     occupied fraction of the patch
//   1..3  centroid offset of occupied voxel centres from the patch centre, / (patch-1)/2
//   4..6  per-axis variance of occupied voxel centres, / ((patch-1)/2)^2
//   7     mean material id mapped linearly from [1, 15] to [-1, 1]
// Inactive cells are all-zero.
SparseStructure extract_sparse_structure(const OccupancyGrid& obj, int patch = kDefaultPatch);

// Local latent codec. Channel c of a cell covers the 4 voxels (lx, ly, lz) with
// ly + 4*lz == c, weighted by 2^lx: z_c = (2/15) * sum_lx 2^lx * occ(lx, ly, lz).
// As a matrix over flatten(patch bits, patch material / 15) this is A = [B | 0]
// with B 16x64 of full row rank. Codewords per channel are k * kLatentLevelGap,
// k = 0..15. Materials travel in the residual.
inline constexpr float kLatentLevelGap = 2.0f / 15.0f;
StructuredLatent encode_local(const OccupancyGrid& obj, const SparseStructure& s);

// Inverse of encode_local. Each channel is projected to its nearest codeword
// (ties toward the codeword with fewer occupied voxels, then the smaller one).
// Materials come from the residual when present, otherwise from the cell's
// mean-material channel in s rounded to the nearest palette id.
OccupancyGrid decode(const StructuredLatent& lat, const SparseStructure& s);

// Nearest codeword index in [0, 15] for one channel value.
int nearest_level(float value);

// ---- tokenization ------------------------------------------------------------

enum class Segment : std::uint8_t { Target = 0, Source = 1 };

template <typename T>
struct Projection {
  Tensor<T> weight;  // [f_in, d_model]
  Tensor<T> bias;    // [d_model]
};

template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [n, d_model]
  std::vector<Int3> positions;
  std::vector<Segment> segment;
  std::size_t size() const { return positions.size(); }
};

// Every cell of the coarse grid, in lexicographic order.
std::vector<Int3> dense_positions(int grid_res);
std::vector<Int3> latent_positions(const StructuredLatent& lat);

// [grid_res^3, 9]: the 8 descriptor channels plus activity (+1 active / -1 inactive).
template <typename T>
Tensor<T> structure_inputs(const SparseStructure& s);
// [n, 16] latent channels in entry order.
template <typename T>
Tensor<T> latent_inputs(const StructuredLatent& lat);

// Fixed 3D sinusoidal embedding. d_model is split into x/y/z bands of
// 2*floor(d/6), 2*floor(d/6) and the remainder; band of width m holds
// sin(p*w_i), cos(p*w_i) with w_i = 10000^(-2i/m).
template <typename T>
Tensor<T> positional_embedding(std::span<const Int3> positions, std::size_t d_model);

// Proj(features) + E_pos.
template <typename T>
TokenSequence<T> tokenize(const Tensor<T>& features, std::span<const Int3> positions, const Projection<T>& proj,
                          Segment segment);
template <typename T>
TokenSequence<T> tokenize(const SparseStructure& s, const Projection<T>& proj, Segment segment);
template <typename T>
TokenSequence<T> tokenize(const StructuredLatent& lat, const Projection<T>& proj, Segment segment);

}  // namespace n3d
