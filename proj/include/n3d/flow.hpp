#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "n3d/codec.hpp"
#include "n3d/dit.hpp"
#include "n3d/forge.hpp"
#include "n3d/grad_check.hpp"
#include "n3d/lexicon.hpp"
#include "n3d/rng.hpp"
#include "n3d/tensor.hpp"

namespace n3d {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t steps = 2000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  void validate() const;
};

template <typename T>
struct OptimizerState {
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
  std::uint64_t step = 0;
  std::uint64_t skipped = 0;
};

// One training/sampling unit: the clean target features x0 at their positions,
// plus the conditioning (source features and instruction ids).
template <typename T>
struct FlowExample {
  std::size_t feature_dim = 0;
  std::vector<T> x0;  // n_target x feature_dim
  std::vector<Int3> target_positions;
  std::vector<T> source;  // n_source x feature_dim
  std::vector<Int3> source_positions;
  std::vector<int> text;

  std::size_t n_target() const { return target_positions.size(); }
  std::size_t n_source() const { return source_positions.size(); }
};

// Structure stage: dense coarse grids (features + activity) of target and source.
// Local stage: latent channels over the active cells of target and source.
template <typename T>
FlowExample<T> make_example(const EditTriplet& t, Stage stage);

// x(t) = (1 - t) x0 + t eps, exact at both endpoints.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, T t);
// eps - x0; does not depend on t.
template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x0, const Tensor<T>& eps);

// Predicted velocity for noisy target features x_t ([n_target, feature_dim]).
template <typename T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>& x_t, T t, const FlowExample<T>& ex)>;

template <typename T>
VelocityFn<T> model_velocity(const Model<T>& model);

template <typename T>
struct FlowDraw {
  T t = T(0);
  std::vector<T> eps;
};

// t ~ U[0, 1], eps ~ N(0, I) with the example's target shape.
template <typename T>
FlowDraw<T> draw_noise(const FlowExample<T>& ex, Rng& rng);

// Mean squared error between v(x_t, t) and eps - x0 for one example.
template <typename T>
Tensor<T> cfm_sample_loss(const VelocityFn<T>& v, const FlowExample<T>& ex, const FlowDraw<T>& draw);

// Mean over the batch of per-example mean squared errors. Non-finite values
// raise NumericalError naming the batch index.
template <typename T>
Tensor<T> cfm_loss(const VelocityFn<T>& v, std::span<const FlowExample<T>> batch, std::span<const FlowDraw<T>> draws);

// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const NamedTensor<T>> params, double max_norm);

// Decoupled weight decay then a bias-corrected Adam update. Returns false (and
// counts a skip) when any gradient is non-finite.
template <typename T>
bool adamw_step(std::span<const NamedTensor<T>> params, OptimizerState<T>& state, const TrainConfig& cfg);

struct TrainReport {
  std::vector<double> losses;  // mean batch loss per step
  std::size_t steps = 0;
  std::uint64_t skipped = 0;
  double initial_loss = 0.0;  // probe loss before the first step
  double final_loss = 0.0;    // probe loss after the last step
  double seconds = 0.0;
};

template <typename T>
using CheckpointSink = std::function<void(std::size_t step, const Model<T>& model, const OptimizerState<T>& opt)>;

// Loss over a fixed set of draws (4 stratified t per example) so that the
// before/after comparison is free of sampling noise.
template <typename T>
double probe_loss(const Model<T>& model, std::span<const FlowExample<T>> data, std::uint64_t seed);

template <typename T>
TrainReport train(Model<T>& model, OptimizerState<T>& opt, std::span<const FlowExample<T>> data, const TrainConfig& cfg,
                  const CheckpointSink<T>& sink = {}, std::ostream* log = nullptr);

template <typename T>
using VelocityField = std::function<Tensor<T>(const Tensor<T>& x, T t)>;

// Euler integration from t = 1 (x = eps) to t = 0 on t_k = k / n_steps.
template <typename T>
Tensor<T> sample_euler(const VelocityField<T>& v, const Shape& shape, std::size_t n_steps, Rng& rng);
// Samples target features for ex's target positions, conditioned on its source and text.
template <typename T>
Tensor<T> sample_euler(const Model<T>& model, const FlowExample<T>& ex, std::size_t n_steps, Rng& rng);

// Central-difference check of one CFM sample loss through a tiny double model
// (d_model 16, 2 blocks, 2 heads, 12 target + 12 source tokens, vocabulary 8)
// with every parameter drawn from U(-0.5, 0.5) so no gate starts closed.
GradCheckReport check_model_gradients(Strategy strategy, Stage stage = Stage::Structure, std::uint64_t seed = 0,
                                      double eps = 1e-4);

struct EditOutput {
  OccupancyGrid grid;
  SparseStructure structure;
  StructuredLatent latent;
};

EditOutput edit_object_detailed(const Model<float>& stage1, const Model<float>& stage2, const OccupancyGrid& source,
                                const std::string& instruction, std::size_t n_steps, Rng& rng,
                                const Lexicon& lexicon = Lexicon::standard());
OccupancyGrid edit_object(const Model<float>& stage1, const Model<float>& stage2, const OccupancyGrid& source,
                          const std::string& instruction, std::size_t n_steps, Rng& rng,
                          const Lexicon& lexicon = Lexicon::standard());

}  // namespace n3d
