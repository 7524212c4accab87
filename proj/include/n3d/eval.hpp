#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "n3d/codec.hpp"
#include "n3d/dit.hpp"
#include "n3d/forge.hpp"

namespace n3d {

// ---- metrics ------------------------------------------------------------------

// Occupancy IoU outside the mask; 1.0 when both grids are empty there.
double preservation_iou(const OccupancyGrid& pred, const OccupancyGrid& source, const std::vector<std::uint8_t>& mask);
// Fraction of mask voxels where pred matches target in occupancy and material.
double edit_region_accuracy(const OccupancyGrid& pred, const OccupancyGrid& target, const std::vector<std::uint8_t>& mask);
// Fraction of all voxels with matching occupancy.
double occupancy_accuracy(const OccupancyGrid& pred, const OccupancyGrid& target);

inline constexpr double kSuccessFraction = 0.8;
// delete: every mask voxel empty; add: >= 80% of the mask occupied;
// modify: >= 80% of the mask carries the target material.
bool instruction_success(const OccupancyGrid& pred, const EditTriplet& t);

// ---- evaluation ---------------------------------------------------------------

struct SampleResult {
  std::size_t id = 0;
  EditOp op = EditOp::Delete;
  std::string error;  // empty on success
  double preservation_iou = 0.0;
  double edit_region_accuracy = 0.0;
  double occupancy_accuracy = 0.0;
  bool success = false;
  double seconds = 0.0;
};

struct MetricSummary {
  std::size_t count = 0;
  std::size_t failures = 0;
  double preservation_iou = 0.0;
  double edit_region_accuracy = 0.0;
  double occupancy_accuracy = 0.0;
  double success_rate = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  std::vector<SampleResult> samples;  // sorted by id
  std::map<EditOp, MetricSummary> per_op;
  MetricSummary overall;
  std::string strategy;
  std::optional<ParamCount> stage1_params, stage2_params;
  std::size_t n_steps = 0;
  std::uint64_t seed = 0;

  std::string table() const;
  // One row per sample: id,op,preservation_iou,edit_region_accuracy,occupancy_accuracy,success,seconds,error
  std::string csv() const;
};

MetricSummary summarize(const std::vector<SampleResult>& samples);

// Produces the prediction for triplet `index`; exceptions become recorded failures.
using Editor = std::function<OccupancyGrid(const EditTriplet& t, std::size_t index)>;

EvalReport evaluate(const Editor& editor, const std::vector<EditTriplet>& testset);
// Runs edit_object per triplet with Rng(seed).fork(index).
EvalReport evaluate(const Model<float>& stage1, const Model<float>& stage2, const std::vector<EditTriplet>& testset,
                    std::size_t n_steps, std::uint64_t seed);

// ---- rendering ----------------------------------------------------------------

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, top row first

  std::array<std::uint8_t, 3> pixel(int u, int v) const {
    const std::size_t i = 3 * (static_cast<std::size_t>(v) * static_cast<std::size_t>(width) + static_cast<std::size_t>(u));
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  bool operator==(const Image&) const = default;
};

enum class View { Front, Back, Left, Right, Top };
inline constexpr std::array<View, 5> kViews{View::Front, View::Back, View::Left, View::Right, View::Top};
std::string view_name(View v);

// Entry m is the base color of material m (entry 0 unused).
const std::array<std::array<std::uint8_t, 3>, 16>& material_palette();
inline constexpr std::array<std::uint8_t, 3> kHighlightColor{160, 32, 240};

// Orthographic march along the view axis. Hit color = palette * (1 - 0.6 * depth / R),
// rounded per channel; highlighted voxels are drawn unshaded in kHighlightColor.
//   front: looks along -z, pixel (x, R-1-y), depth R-1-z
//   back:  looks along +z, pixel (R-1-x, R-1-y), depth z
//   left:  looks along +x, pixel (z, R-1-y), depth x
//   right: looks along -x, pixel (R-1-z, R-1-y), depth R-1-x
//   top:   looks along -y, pixel (x, z), depth R-1-y
Image render_view(const OccupancyGrid& obj, View view, const std::vector<std::uint8_t>* highlight = nullptr);
std::array<Image, 5> render_views(const OccupancyGrid& obj, const std::vector<std::uint8_t>* highlight = nullptr);

std::vector<std::uint8_t> encode_ppm(const Image& img);
void write_ppm(const Image& img, const std::string& path);

}  // namespace n3d
