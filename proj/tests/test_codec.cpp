#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "n3d/codec.hpp"
#include "n3d/errors.hpp"
#include "n3d/rng.hpp"

using namespace n3d;

namespace {

OccupancyGrid random_grid(Rng& rng, double density, int r = 32) {
  OccupancyGrid g(r);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (rng.uniform() < density) g.set(i, static_cast<std::uint8_t>(rng.range(1, kMaxMaterial)));
  return g;
}

// Random blobs: a few boxes so that many cells are empty and some are full.
OccupancyGrid random_boxes(Rng& rng) {
  OccupancyGrid g(32);
  const int n = rng.range(1, 5);
  for (int b = 0; b < n; ++b) {
    const int x0 = rng.range(0, 28), y0 = rng.range(0, 28), z0 = rng.range(0, 28);
    const int sx = rng.range(1, 10), sy = rng.range(1, 10), sz = rng.range(1, 10);
    const auto m = static_cast<std::uint8_t>(rng.range(1, kMaxMaterial));
    for (int z = z0; z < std::min(32, z0 + sz); ++z)
      for (int y = y0; y < std::min(32, y0 + sy); ++y)
        for (int x = x0; x < std::min(32, x0 + sx); ++x) g.set(x, y, z, m);
  }
  return g;
}

Projection<double> zero_projection(std::size_t f_in, std::size_t d) {
  return {Tensor<double>::zeros({f_in, d}), Tensor<double>::zeros({d})};
}

}  // namespace

// ---- grid --------------------------------------------------------------------------

TEST(Grid, MaterialZeroIffUnoccupied) {
  Rng rng(1);
  auto g = random_grid(rng, 0.3);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.material(i) == 0, !g.occupied(i));
  g.set(5, 0);
  EXPECT_FALSE(g.occupied(5));
}

TEST(Grid, IndexAndCoordsAreInverse) {
  OccupancyGrid g(8);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Int3 c = g.coords(i);
    EXPECT_EQ(g.index(c.x, c.y, c.z), i);
  }
  EXPECT_EQ(g.index(1, 0, 0), 1u);
  EXPECT_EQ(g.index(0, 1, 0), 8u);
  EXPECT_EQ(g.index(0, 0, 1), 64u);
}

// ---- extract_sparse_structure -------------------------------------------------------------

TEST(Extract, EmptyGridIsInactiveWithZeroFeatures) {
  auto s = extract_sparse_structure(OccupancyGrid(32), 4);
  EXPECT_EQ(s.grid_res, 8);
  EXPECT_EQ(s.active_count(), 0u);
  EXPECT_TRUE(std::all_of(s.features.begin(), s.features.end(), [](float f) { return f == 0.0f; }));
}

TEST(Extract, FullGridIsActiveWithUnitFractionAndCentredMass) {
  OccupancyGrid g(32);
  for (std::size_t i = 0; i < g.size(); ++i) g.set(i, 1);
  auto s = extract_sparse_structure(g, 4);
  EXPECT_EQ(s.active_count(), 512u);
  for (std::size_t c = 0; c < s.cells(); ++c) {
    auto f = s.feature(c);
    EXPECT_EQ(f[0], 1.0f);
    EXPECT_EQ(f[1], 0.0f);
    EXPECT_EQ(f[2], 0.0f);
    EXPECT_EQ(f[3], 0.0f);
    EXPECT_EQ(f[7], -1.0f);  // material 1 is the bottom of the palette range
  }
}

TEST(Extract, SingleCornerVoxel) {
  OccupancyGrid g(32);
  g.set(0, 0, 0, 3);
  auto s = extract_sparse_structure(g, 4);
  ASSERT_EQ(s.active_count(), 1u);
  EXPECT_EQ(s.active_positions().front(), (Int3{0, 0, 0}));
  auto f = s.feature(0);
  EXPECT_FLOAT_EQ(f[0], 1.0f / 64.0f);
  // Voxel centre 0 against patch centre 1.5, scaled by 1.5.
  EXPECT_FLOAT_EQ(f[1], -1.0f);
  EXPECT_FLOAT_EQ(f[4], 0.0f);
  EXPECT_FLOAT_EQ(f[7], 2.0f * (3.0f - 1.0f) / 14.0f - 1.0f);
}

TEST(Extract, FeaturesStayInUnitRange) {
  Rng rng(2);
  for (int it = 0; it < 20; ++it) {
    auto s = extract_sparse_structure(random_grid(rng, rng.uniform()), 4);
    for (float f : s.features) {
      EXPECT_GE(f, -1.0f);
      EXPECT_LE(f, 1.0f);
    }
  }
}

TEST(Extract, ActiveIffPatchHasVoxel) {
  Rng rng(3);
  auto g = random_grid(rng, 0.005);
  auto s = extract_sparse_structure(g, 4);
  for (std::size_t c = 0; c < s.cells(); ++c) {
    const Int3 p = s.cell_pos(c);
    bool any = false;
    for (int z = 0; z < 4; ++z)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) any = any || g.occupied(p.x * 4 + x, p.y * 4 + y, p.z * 4 + z);
    EXPECT_EQ(static_cast<bool>(s.active[c]), any);
    if (!s.active[c]) {
      for (float f : s.feature(c)) EXPECT_EQ(f, 0.0f);
    }
  }
}

TEST(Extract, IndivisibleResolutionIsConfigError) {
  EXPECT_THROW(extract_sparse_structure(OccupancyGrid(30), 4), ConfigError);
}

TEST(Extract, OneVoxelChangeTouchesAtMostOneCell) {
  Rng rng(4);
  for (int it = 0; it < 50; ++it) {
    auto g = random_grid(rng, 0.2);
    auto before = extract_sparse_structure(g, 4);
    const auto i = static_cast<std::size_t>(rng.below(g.size()));
    g.set(i, g.occupied(i) ? 0 : 7);
    auto after = extract_sparse_structure(g, 4);
    int changed = 0;
    for (std::size_t c = 0; c < before.cells(); ++c) {
      const bool diff = before.active[c] != after.active[c] ||
                        !std::equal(before.feature(c).begin(), before.feature(c).end(), after.feature(c).begin());
      changed += diff;
    }
    EXPECT_LE(changed, 1);
  }
}

// ---- encode / decode ----------------------------------------------------------------

TEST(Codec, RoundTripIsExactOnRandomObjects) {
  Rng rng(5);
  for (int it = 0; it < 100; ++it) {
    auto g = it % 2 ? random_grid(rng, rng.uniform(0.0, 0.6)) : random_boxes(rng);
    auto s = extract_sparse_structure(g, 4);
    auto lat = encode_local(g, s);
    ASSERT_EQ(decode(lat, s), g) << "object " << it;
  }
}

TEST(Codec, EntriesMatchActiveSetInCanonicalOrder) {
  Rng rng(6);
  auto g = random_boxes(rng);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  EXPECT_EQ(latent_positions(lat), s.active_positions());
  EXPECT_TRUE(std::is_sorted(lat.entries.begin(), lat.entries.end(),
                             [](const LatentEntry& a, const LatentEntry& b) { return a.pos < b.pos; }));
}

TEST(Codec, EmptyObjectHasNoEntries) {
  OccupancyGrid g(32);
  EXPECT_TRUE(encode_local(g, extract_sparse_structure(g, 4)).entries.empty());
}

TEST(Codec, CanonicalizeSortsShuffledEntries) {
  Rng rng(7);
  auto g = random_boxes(rng);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  auto shuffled = lat;
  std::reverse(shuffled.entries.begin(), shuffled.entries.end());
  canonicalize(shuffled);
  EXPECT_EQ(shuffled, lat);
}

TEST(Codec, InconsistentStructureIsContractError) {
  Rng rng(8);
  auto g = random_boxes(rng);
  auto s = extract_sparse_structure(OccupancyGrid(32), 4);
  EXPECT_THROW(encode_local(g, s), ContractError);
}

TEST(Codec, PositionOutsideActiveSetIsContractError) {
  OccupancyGrid g(32);
  g.set(0, 0, 0, 1);
  auto s = extract_sparse_structure(g, 4);
  StructuredLatent lat;
  lat.entries.push_back(LatentEntry{{1, 0, 0}, {}, std::nullopt});
  EXPECT_THROW(decode(lat, s), ContractError);
}

TEST(Codec, ZeroFeatureDecodesToEmptyPatch) {
  OccupancyGrid g(32);
  g.set(0, 0, 0, 1);
  auto s = extract_sparse_structure(g, 4);
  StructuredLatent lat;
  lat.entries.push_back(LatentEntry{{0, 0, 0}, {}, std::nullopt});
  EXPECT_EQ(decode(lat, s).count(), 0u);
}

TEST(Codec, ChannelIsBinaryWeightedRowOfFourVoxels) {
  OccupancyGrid g(32);
  // Row ly=1, lz=2 of cell (0,0,0): voxels at lx = 0 and 2 -> level 1 + 4 = 5, channel 1 + 4*2 = 9.
  g.set(0, 1, 2, 4);
  g.set(2, 1, 2, 4);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  ASSERT_EQ(lat.entries.size(), 1u);
  for (std::size_t c = 0; c < kLatentChannels; ++c)
    EXPECT_FLOAT_EQ(lat.entries[0].z[c], c == 9 ? 5.0f * 2.0f / 15.0f : 0.0f);
}

TEST(Codec, NoiseBelowHalfGapDecodesIdentically) {
  Rng rng(9);
  const float half_gap = kLatentLevelGap / 2.0f;
  for (int it = 0; it < 20; ++it) {
    auto g = random_boxes(rng);
    auto s = extract_sparse_structure(g, 4);
    auto lat = encode_local(g, s);
    for (auto& e : lat.entries)
      for (auto& z : e.z) z += static_cast<float>(rng.uniform(-0.999, 0.999)) * half_gap;
    ASSERT_EQ(decode(lat, s), g);
  }
}

TEST(Codec, WithoutResidualMaterialComesFromStructure) {
  OccupancyGrid g(32);
  for (int x = 0; x < 4; ++x) g.set(x, 0, 0, 9);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  for (auto& e : lat.entries) e.residual.reset();
  EXPECT_EQ(decode(lat, s), g);
}

TEST(Codec, NearestLevelTiesFavourFewerVoxels) {
  EXPECT_EQ(nearest_level(0.0f), 0);
  EXPECT_EQ(nearest_level(-1.0f), 0);
  EXPECT_EQ(nearest_level(std::nanf("")), 0);
  EXPECT_EQ(nearest_level(100.0f), 15);
  EXPECT_EQ(nearest_level(3.0f * kLatentLevelGap), 3);
  // Between 3 (two voxels) and 4 (one voxel) the midpoint resolves to 4.
  EXPECT_EQ(nearest_level(3.5f * kLatentLevelGap), 4);
  // Between 0 and 1 the midpoint resolves to empty.
  EXPECT_EQ(nearest_level(0.5f * kLatentLevelGap), 0);
  for (int k = 0; k <= 15; ++k) EXPECT_EQ(nearest_level(static_cast<float>(k) * kLatentLevelGap), k);
}

// ---- tokenization -------------------------------------------------------------------

TEST(Tokenize, StructureGivesOneTokenPerCoarseCell) {
  Rng rng(10);
  auto s = extract_sparse_structure(random_boxes(rng), 4);
  auto seq = tokenize<double>(s, zero_projection(kStructureInputDim, 16), Segment::Target);
  EXPECT_EQ(seq.size(), 512u);
  EXPECT_EQ(seq.tokens.shape(), (Shape{512, 16}));
  EXPECT_EQ(seq.segment.size(), 512u);
  EXPECT_TRUE(std::all_of(seq.segment.begin(), seq.segment.end(), [](Segment g) { return g == Segment::Target; }));
}

TEST(Tokenize, LatentGivesOneTokenPerEntry) {
  Rng rng(11);
  auto g = random_boxes(rng);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  auto seq = tokenize<double>(lat, zero_projection(kLatentChannels, 12), Segment::Source);
  EXPECT_EQ(seq.size(), lat.entries.size());
  EXPECT_EQ(seq.positions, latent_positions(lat));
}

TEST(Tokenize, ZeroFeaturesAndBiasGivePositionalEmbedding) {
  std::vector<Int3> pos{{0, 0, 0}, {1, 2, 3}, {7, 0, 5}};
  auto seq = tokenize<double>(Tensor<double>::zeros({3, 4}), pos, zero_projection(4, 24), Segment::Target);
  auto pe = positional_embedding<double>(pos, 24);
  EXPECT_TRUE(std::equal(seq.tokens.data().begin(), seq.tokens.data().end(), pe.data().begin()));
}

TEST(Tokenize, SameFeatureDifferentPositionDiffers) {
  std::vector<Int3> pos{{1, 0, 0}, {0, 1, 0}};
  auto feats = Tensor<double>::from({2, 2}, std::vector<double>{0.3, -0.2, 0.3, -0.2});
  Projection<double> proj{Tensor<double>::full({2, 12}, 0.5), Tensor<double>::full({12}, 0.1)};
  auto seq = tokenize(feats, pos, proj, Segment::Target);
  auto t = seq.tokens.data();
  EXPECT_FALSE(std::equal(t.begin(), t.begin() + 12, t.begin() + 12));
}

TEST(Tokenize, PositionalEmbeddingMatchesSinusoidOracle) {
  // d = 20: bands 6, 6, 8.
  const Int3 p{3, 5, 7};
  auto pe = positional_embedding<double>(std::span<const Int3>(&p, 1), 20);
  const int coord[3] = {3, 5, 7};
  const int widths[3] = {6, 6, 8};
  std::size_t off = 0;
  for (int a = 0; a < 3; ++a) {
    for (int j = 0; j < widths[a] / 2; ++j) {
      const double w = 1.0 / std::pow(10000.0, 2.0 * j / widths[a]);
      EXPECT_NEAR(pe.data()[off + 2 * j], std::sin(coord[a] * w), 1e-15);
      EXPECT_NEAR(pe.data()[off + 2 * j + 1], std::cos(coord[a] * w), 1e-15);
    }
    off += static_cast<std::size_t>(widths[a]);
  }
}

TEST(Tokenize, PositionalEmbeddingIsInjectiveOnSmallGrids) {
  for (int res : {8, 16}) {
    auto pos = dense_positions(res + 1);  // coordinates 0..res inclusive
    auto pe = positional_embedding<double>(pos, 64);
    const auto v = pe.data();
    double min_d = 1e9;
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = i + 1; j < pos.size(); ++j) {
        double d = 0.0;
        for (std::size_t c = 0; c < 64; ++c) d += (v[i * 64 + c] - v[j * 64 + c]) * (v[i * 64 + c] - v[j * 64 + c]);
        min_d = std::min(min_d, d);
      }
    EXPECT_GT(min_d, 0.0) << "grid " << res;
  }
}

TEST(Tokenize, EntryOrderDoesNotMatter) {
  Rng rng(12);
  auto g = random_boxes(rng);
  auto s = extract_sparse_structure(g, 4);
  auto lat = encode_local(g, s);
  auto rev = lat;
  std::reverse(rev.entries.begin(), rev.entries.end());
  Projection<double> proj{Tensor<double>::full({kLatentChannels, 12}, 0.25), Tensor<double>::full({12}, -0.5)};
  auto a = tokenize(lat, proj, Segment::Target), b = tokenize(rev, proj, Segment::Target);
  EXPECT_EQ(a.positions, b.positions);
  EXPECT_TRUE(std::equal(a.tokens.data().begin(), a.tokens.data().end(), b.tokens.data().begin()));
}

TEST(Tokenize, ProjectionMismatchIsConfigError) {
  OccupancyGrid g(32);
  auto s = extract_sparse_structure(g, 4);
  EXPECT_THROW(tokenize<double>(s, zero_projection(5, 16), Segment::Target), ConfigError);
}
