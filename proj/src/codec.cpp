#include "n3d/codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "n3d/errors.hpp"

namespace n3d {

OccupancyGrid::OccupancyGrid(int resolution) : r_(resolution) {
  if (resolution <= 0 || resolution > 1024) throw ConfigError("grid resolution " + std::to_string(resolution) + " out of range");
  mat_.assign(static_cast<std::size_t>(resolution) * resolution * resolution, 0);
}

Int3 OccupancyGrid::coords(std::size_t i) const {
  const auto r = static_cast<std::size_t>(r_);
  return {static_cast<int>(i % r), static_cast<int>((i / r) % r), static_cast<int>(i / (r * r))};
}

void OccupancyGrid::set(std::size_t i, std::uint8_t material) {
  if (material > kMaxMaterial) throw ContractError("material id " + std::to_string(material) + " exceeds palette");
  mat_.at(i) = material;
}

std::size_t OccupancyGrid::count() const {
  return static_cast<std::size_t>(std::count_if(mat_.begin(), mat_.end(), [](std::uint8_t m) { return m != 0; }));
}

Int3 SparseStructure::cell_pos(std::size_t i) const {
  const auto g = static_cast<std::size_t>(grid_res);
  return {static_cast<int>(i % g), static_cast<int>((i / g) % g), static_cast<int>(i / (g * g))};
}

std::size_t SparseStructure::active_count() const {
  return static_cast<std::size_t>(std::count(active.begin(), active.end(), std::uint8_t{1}));
}

std::vector<Int3> SparseStructure::active_positions() const {
  std::vector<Int3> out;
  for (std::size_t i = 0; i < active.size(); ++i)
    if (active[i]) out.push_back(cell_pos(i));
  std::sort(out.begin(), out.end());
  return out;
}

void canonicalize(StructuredLatent& lat) {
  std::sort(lat.entries.begin(), lat.entries.end(),
            [](const LatentEntry& a, const LatentEntry& b) { return a.pos < b.pos; });
}

SparseStructure extract_sparse_structure(const OccupancyGrid& obj, int patch) {
  const int r = obj.resolution();
  if (patch <= 1 || r % patch != 0)
    throw ConfigError("resolution " + std::to_string(r) + " is not divisible into patches of " + std::to_string(patch));
  SparseStructure s;
  s.grid_res = r / patch;
  s.patch = patch;
  const std::size_t cells = static_cast<std::size_t>(s.grid_res) * s.grid_res * s.grid_res;
  s.active.assign(cells, 0);
  s.features.assign(cells * kStructureChannels, 0.0f);

  const double half = (patch - 1) / 2.0;
  const double vol = static_cast<double>(patch) * patch * patch;
  for (std::size_t c = 0; c < cells; ++c) {
    const Int3 cp = s.cell_pos(c);
    double n = 0, sx = 0, sy = 0, sz = 0, sxx = 0, syy = 0, szz = 0, smat = 0;
    for (int lz = 0; lz < patch; ++lz)
      for (int ly = 0; ly < patch; ++ly)
        for (int lx = 0; lx < patch; ++lx) {
          const std::uint8_t m = obj.material(cp.x * patch + lx, cp.y * patch + ly, cp.z * patch + lz);
          if (!m) continue;
          n += 1;
          sx += lx, sy += ly, sz += lz;
          sxx += lx * lx, syy += ly * ly, szz += lz * lz;
          smat += m;
        }
    if (n == 0) continue;
    s.active[c] = 1;
    const double mx = sx / n, my = sy / n, mz = sz / n;
    float* f = s.features.data() + c * kStructureChannels;
    f[0] = static_cast<float>(n / vol);
    f[1] = static_cast<float>((mx - half) / half);
    f[2] = static_cast<float>((my - half) / half);
    f[3] = static_cast<float>((mz - half) / half);
    f[4] = static_cast<float>(std::max(0.0, sxx / n - mx * mx) / (half * half));
    f[5] = static_cast<float>(std::max(0.0, syy / n - my * my) / (half * half));
    f[6] = static_cast<float>(std::max(0.0, szz / n - mz * mz) / (half * half));
    f[7] = static_cast<float>(2.0 * (smat / n - 1.0) / (kMaxMaterial - 1) - 1.0);
  }
  return s;
}

namespace {

constexpr int kLocalPatch = 4;

void check_local_patch(const SparseStructure& s) {
  if (s.patch != kLocalPatch)
    throw ConfigError("local latent codec needs patch " + std::to_string(kLocalPatch) + ", structure has patch " +
                      std::to_string(s.patch));
}

std::uint8_t material_from_feature(float f) {
  const double id = (static_cast<double>(f) + 1.0) / 2.0 * (kMaxMaterial - 1) + 1.0;
  return static_cast<std::uint8_t>(std::clamp<long>(std::lround(id), 1, kMaxMaterial));
}

}  // namespace

StructuredLatent encode_local(const OccupancyGrid& obj, const SparseStructure& s) {
  check_local_patch(s);
  if (s.grid_res * s.patch != obj.resolution())
    throw ContractError("structure grid " + std::to_string(s.grid_res) + "x" + std::to_string(s.patch) +
                        " does not cover resolution " + std::to_string(obj.resolution()));
  StructuredLatent lat;
  for (std::size_t c = 0; c < s.cells(); ++c) {
    const Int3 cp = s.cell_pos(c);
    LatentEntry e;
    e.pos = cp;
    std::array<std::uint8_t, 64> mats{};
    bool any = false;
    for (int lz = 0; lz < kLocalPatch; ++lz)
      for (int ly = 0; ly < kLocalPatch; ++ly) {
        int level = 0;
        for (int lx = 0; lx < kLocalPatch; ++lx) {
          const std::uint8_t m =
              obj.material(cp.x * kLocalPatch + lx, cp.y * kLocalPatch + ly, cp.z * kLocalPatch + lz);
          mats[static_cast<std::size_t>(lx + kLocalPatch * (ly + kLocalPatch * lz))] = m;
          if (m) level |= 1 << lx;
        }
        any = any || level != 0;
        e.z[static_cast<std::size_t>(ly + kLocalPatch * lz)] = static_cast<float>(level) * kLatentLevelGap;
      }
    if (any != static_cast<bool>(s.active[c]))
      throw ContractError("structure is inconsistent with the object at cell (" + std::to_string(cp.x) + "," +
                          std::to_string(cp.y) + "," + std::to_string(cp.z) + ")");
    if (!any) continue;
    e.residual = mats;
    lat.entries.push_back(e);
  }
  canonicalize(lat);
  return lat;
}

int nearest_level(float value) {
  const double u = static_cast<double>(value) / static_cast<double>(kLatentLevelGap);
  if (!(u > 0.0)) return 0;  // also maps NaN to empty
  if (u >= 15.0) return 15;
  const int lo = static_cast<int>(std::floor(u));
  const double frac = u - lo;
  if (frac < 0.5) return lo;
  if (frac > 0.5) return lo + 1;
  return std::popcount(static_cast<unsigned>(lo + 1)) < std::popcount(static_cast<unsigned>(lo)) ? lo + 1 : lo;
}

OccupancyGrid decode(const StructuredLatent& lat, const SparseStructure& s) {
  check_local_patch(s);
  OccupancyGrid out(s.grid_res * s.patch);
  for (const auto& e : lat.entries) {
    const Int3 p = e.pos;
    if (p.x < 0 || p.y < 0 || p.z < 0 || p.x >= s.grid_res || p.y >= s.grid_res || p.z >= s.grid_res ||
        !s.active[s.cell_index(p)])
      throw ContractError("latent position (" + std::to_string(p.x) + "," + std::to_string(p.y) + "," +
                          std::to_string(p.z) + ") is not an active structure cell");
    const std::uint8_t fallback = material_from_feature(s.feature(s.cell_index(p))[7]);
    for (int lz = 0; lz < kLocalPatch; ++lz)
      for (int ly = 0; ly < kLocalPatch; ++ly) {
        const int level = nearest_level(e.z[static_cast<std::size_t>(ly + kLocalPatch * lz)]);
        for (int lx = 0; lx < kLocalPatch; ++lx) {
          if (!(level & (1 << lx))) continue;
          std::uint8_t m = fallback;
          if (e.residual) {
            const std::uint8_t r = (*e.residual)[static_cast<std::size_t>(lx + kLocalPatch * (ly + kLocalPatch * lz))];
            if (r) m = r;
          }
          out.set(p.x * kLocalPatch + lx, p.y * kLocalPatch + ly, p.z * kLocalPatch + lz, m);
        }
      }
  }
  return out;
}

// ---- tokenization ------------------------------------------------------------

std::vector<Int3> dense_positions(int grid_res) {
  std::vector<Int3> out;
  out.reserve(static_cast<std::size_t>(grid_res) * grid_res * grid_res);
  for (int x = 0; x < grid_res; ++x)
    for (int y = 0; y < grid_res; ++y)
      for (int z = 0; z < grid_res; ++z) out.push_back({x, y, z});
  return out;
}

std::vector<Int3> latent_positions(const StructuredLatent& lat) {
  std::vector<Int3> out;
  out.reserve(lat.entries.size());
  for (const auto& e : lat.entries) out.push_back(e.pos);
  return out;
}

template <typename T>
Tensor<T> structure_inputs(const SparseStructure& s) {
  const auto positions = dense_positions(s.grid_res);
  std::vector<T> v;
  v.reserve(positions.size() * kStructureInputDim);
  for (const Int3& p : positions) {
    const std::size_t c = s.cell_index(p);
    for (float f : s.feature(c)) v.push_back(static_cast<T>(f));
    v.push_back(s.active[c] ? T(1) : T(-1));
  }
  return Tensor<T>::from({positions.size(), kStructureInputDim}, std::move(v));
}

template <typename T>
Tensor<T> latent_inputs(const StructuredLatent& lat) {
  std::vector<T> v;
  v.reserve(lat.entries.size() * kLatentChannels);
  for (const auto& e : lat.entries)
    for (float f : e.z) v.push_back(static_cast<T>(f));
  return Tensor<T>::from({lat.entries.size(), kLatentChannels}, std::move(v));
}

template <typename T>
Tensor<T> positional_embedding(std::span<const Int3> positions, std::size_t d_model) {
  if (d_model < 6 || d_model % 2 != 0)
    throw ConfigError("positional embedding needs an even d_model >= 6, got " + std::to_string(d_model));
  const std::size_t band = 2 * (d_model / 6);
  const std::size_t widths[3] = {band, band, d_model - 2 * band};
  std::vector<double> freqs[3];
  for (int axis = 0; axis < 3; ++axis)
    for (std::size_t j = 0; j < widths[axis] / 2; ++j)
      freqs[axis].push_back(std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(widths[axis])));
  std::vector<T> out(positions.size() * d_model);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int coord[3] = {positions[i].x, positions[i].y, positions[i].z};
    std::size_t off = 0;
    for (int axis = 0; axis < 3; ++axis) {
      const std::size_t m = widths[axis];
      for (std::size_t j = 0; j < m / 2; ++j) {
        const double a = coord[axis] * freqs[axis][j];
        out[i * d_model + off + 2 * j] = static_cast<T>(std::sin(a));
        out[i * d_model + off + 2 * j + 1] = static_cast<T>(std::cos(a));
      }
      off += m;
    }
  }
  return Tensor<T>::from({positions.size(), d_model}, std::move(out));
}

template <typename T>
TokenSequence<T> tokenize(const Tensor<T>& features, std::span<const Int3> positions, const Projection<T>& proj,
                          Segment segment) {
  if (features.rank() != 2 || features.dim(0) != positions.size())
    throw ConfigError("tokenize: features " + shape_str(features.shape()) + " do not match " +
                      std::to_string(positions.size()) + " positions");
  if (proj.weight.rank() != 2 || proj.weight.dim(0) != features.dim(1) || proj.bias.numel() != proj.weight.dim(1))
    throw ConfigError("tokenize: projection " + shape_str(proj.weight.shape()) + " cannot map features " +
                      shape_str(features.shape()));
  const std::size_t d = proj.weight.dim(1);
  TokenSequence<T> out;
  out.tokens = add(add(matmul(features, proj.weight), proj.bias), positional_embedding<T>(positions, d));
  out.positions.assign(positions.begin(), positions.end());
  out.segment.assign(positions.size(), segment);
  return out;
}

template <typename T>
TokenSequence<T> tokenize(const SparseStructure& s, const Projection<T>& proj, Segment segment) {
  const auto positions = dense_positions(s.grid_res);
  return tokenize(structure_inputs<T>(s), positions, proj, segment);
}

template <typename T>
TokenSequence<T> tokenize(const StructuredLatent& lat, const Projection<T>& proj, Segment segment) {
  StructuredLatent sorted = lat;
  canonicalize(sorted);
  const auto positions = latent_positions(sorted);
  return tokenize(latent_inputs<T>(sorted), positions, proj, segment);
}

#define N3D_INSTANTIATE(T)                                                                                   \
  template Tensor<T> structure_inputs<T>(const SparseStructure&);                                            \
  template Tensor<T> latent_inputs<T>(const StructuredLatent&);                                              \
  template Tensor<T> positional_embedding<T>(std::span<const Int3>, std::size_t);                            \
  template TokenSequence<T> tokenize(const Tensor<T>&, std::span<const Int3>, const Projection<T>&, Segment); \
  template TokenSequence<T> tokenize(const SparseStructure&, const Projection<T>&, Segment);                 \
  template TokenSequence<T> tokenize(const StructuredLatent&, const Projection<T>&, Segment);

N3D_INSTANTIATE(float)
N3D_INSTANTIATE(double)
#undef N3D_INSTANTIATE

}  // namespace n3d
