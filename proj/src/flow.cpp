#include "n3d/flow.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>

#include "n3d/errors.hpp"

namespace n3d {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("invalid train config: " + m); };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be > 0");
}

namespace {
template <typename T>
std::vector<T> copy_values(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}
}  // namespace

template <typename T>
FlowExample<T> make_example(const EditTriplet& t, Stage stage) {
  FlowExample<T> ex;
  ex.text = Lexicon::standard().tokenize(t.instruction);
  const SparseStructure st = extract_sparse_structure(t.target);
  const SparseStructure ss = extract_sparse_structure(t.source);
  if (stage == Stage::Structure) {
    ex.feature_dim = kStructureInputDim;
    const Tensor<T> a = structure_inputs<T>(st), b = structure_inputs<T>(ss);
    ex.x0 = copy_values(a);
    ex.source = copy_values(b);
    ex.target_positions = dense_positions(st.grid_res);
    ex.source_positions = dense_positions(ss.grid_res);
  } else {
    ex.feature_dim = kLatentChannels;
    const StructuredLatent lt = encode_local(t.target, st), ls = encode_local(t.source, ss);
    ex.x0 = copy_values(latent_inputs<T>(lt));
    ex.source = copy_values(latent_inputs<T>(ls));
    ex.target_positions = latent_positions(lt);
    ex.source_positions = latent_positions(ls);
  }
  return ex;
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& eps, T t) {
  if (x0.shape() != eps.shape())
    throw DimensionError("interpolate: shapes " + shape_str(x0.shape()) + " and " + shape_str(eps.shape()) + " differ");
  if (!(t >= T(0) && t <= T(1))) throw ContractError("interpolate: t must lie in [0, 1]");
  if (t == T(0)) return x0.detach();
  if (t == T(1)) return eps.detach();
  std::vector<T> v(x0.numel());
  const auto a = x0.data(), b = eps.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (T(1) - t) * a[i] + t * b[i];
  return Tensor<T>::from(x0.shape(), std::move(v));
}

template <typename T>
Tensor<T> target_velocity(const Tensor<T>& x0, const Tensor<T>& eps) {
  if (x0.shape() != eps.shape())
    throw DimensionError("target_velocity: shapes " + shape_str(x0.shape()) + " and " + shape_str(eps.shape()) + " differ");
  std::vector<T> v(x0.numel());
  const auto a = x0.data(), b = eps.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = b[i] - a[i];
  return Tensor<T>::from(x0.shape(), std::move(v));
}

template <typename T>
VelocityFn<T> model_velocity(const Model<T>& model) {
  return [&model](const Tensor<T>& x_t, T t, const FlowExample<T>& ex) {
    const Projection<T> proj = model.input_projection();
    const auto target = tokenize(x_t, ex.target_positions, proj, Segment::Target);
    const auto src = tokenize(Tensor<T>::from({ex.n_source(), ex.feature_dim}, ex.source), ex.source_positions, proj,
                              Segment::Source);
    return forward_velocity(model, target, src, ex.text, t);
  };
}

template <typename T>
FlowDraw<T> draw_noise(const FlowExample<T>& ex, Rng& rng) {
  FlowDraw<T> d;
  d.t = static_cast<T>(rng.uniform());
  d.eps.resize(ex.x0.size());
  for (auto& e : d.eps) e = static_cast<T>(rng.normal());
  return d;
}

template <typename T>
Tensor<T> cfm_sample_loss(const VelocityFn<T>& v, const FlowExample<T>& ex, const FlowDraw<T>& draw) {
  const Shape shape{ex.n_target(), ex.feature_dim};
  if (ex.x0.size() != shape_numel(shape)) throw DimensionError("flow example x0 does not match its positions");
  if (draw.eps.size() != ex.x0.size()) throw DimensionError("noise draw does not match the example shape");
  const Tensor<T> x0 = Tensor<T>::from(shape, ex.x0);
  const Tensor<T> eps = Tensor<T>::from(shape, draw.eps);
  const Tensor<T> pred = v(interpolate(x0, eps, draw.t), draw.t, ex);
  return mse(pred, target_velocity(x0, eps));
}

template <typename T>
Tensor<T> cfm_loss(const VelocityFn<T>& v, std::span<const FlowExample<T>> batch, std::span<const FlowDraw<T>> draws) {
  if (batch.empty()) throw ContractError("cfm_loss: empty batch");
  if (batch.size() != draws.size()) throw DimensionError("cfm_loss: batch and draw counts differ");
  Tensor<T> total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor<T> l = cfm_sample_loss(v, batch[i], draws[i]);
    if (!std::isfinite(static_cast<double>(l.item())))
      throw NumericalError("non-finite loss at batch index " + std::to_string(i));
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, T(1) / static_cast<T>(batch.size()));
}

template <typename T>
double clip_grad_norm(std::span<const NamedTensor<T>> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto p : params)
      if (p.tensor.has_grad())
        for (T& g : p.tensor.mutable_grad()) g *= s;
  }
  return norm;
}

template <typename T>
bool adamw_step(std::span<const NamedTensor<T>> params, OptimizerState<T>& state, const TrainConfig& cfg) {
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad())
        if (!std::isfinite(static_cast<double>(g))) {
          ++state.skipped;
          std::cerr << "warning: non-finite gradient in '" << p.name << "' at step " << state.step + 1
                    << "; update skipped\n";
          return false;
        }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t), bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate;
  for (auto p : params) {
    if (!p.tensor.requires_grad()) continue;
    auto w = p.tensor.data();
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.size() != w.size()) m.assign(w.size(), T(0));
    if (v.size() != w.size()) v.assign(w.size(), T(0));
    const bool has = p.tensor.has_grad();
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? static_cast<double>(g[i]) : 0.0;
      double wi = static_cast<double>(w[i]);
      wi -= lr * cfg.weight_decay * wi;
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps);
      w[i] = static_cast<T>(wi);
    }
  }
  return true;
}

template <typename T>
double probe_loss(const Model<T>& model, std::span<const FlowExample<T>> data, std::uint64_t seed) {
  NoGradGuard ng;
  const VelocityFn<T> v = model_velocity(model);
  constexpr int kDraws = 4;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i)
    for (int k = 0; k < kDraws; ++k) {
      Rng rng = Rng(seed).fork(i * kDraws + static_cast<std::size_t>(k));
      FlowDraw<T> d = draw_noise(data[i], rng);
      d.t = static_cast<T>((k + 0.5) / kDraws);
      total += static_cast<double>(cfm_sample_loss(v, data[i], d).item());
    }
  return data.empty() ? 0.0 : total / static_cast<double>(data.size() * kDraws);
}

template <typename T>
TrainReport train(Model<T>& model, OptimizerState<T>& opt, std::span<const FlowExample<T>> data, const TrainConfig& cfg,
                  const CheckpointSink<T>& sink, std::ostream* log) {
  cfg.validate();
  if (data.empty()) throw ConfigError("training dataset is empty");
  for (const auto& ex : data)
    if (ex.feature_dim != model.config().in_dim())
      throw ConfigError("dataset features have width " + std::to_string(ex.feature_dim) + " but the " +
                        to_string(model.config().stage) + " model expects " + std::to_string(model.config().in_dim()));

  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t probe_seed = splitmix64(cfg.seed ^ 0x70726f6265ULL);
  TrainReport report;
  report.initial_loss = probe_loss(model, data, probe_seed);

  const VelocityFn<T> v = model_velocity(model);
  const auto params = model.named_parameters();
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  const T inv_b = T(1) / static_cast<T>(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    model.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const FlowExample<T>& ex = data[next_index()];
      const FlowDraw<T> d = draw_noise(ex, rng);
      const Tensor<T> l = cfm_sample_loss(v, ex, d);
      const double lv = static_cast<double>(l.item());
      if (!std::isfinite(lv))
        throw NumericalError("non-finite loss at batch index " + std::to_string(b) + " (step " + std::to_string(step) + ")");
      scale(l, inv_b).backward();
      batch_loss += lv / static_cast<double>(cfg.batch_size);
    }
    clip_grad_norm<T>(params, cfg.grad_clip_norm);
    adamw_step<T>(params, opt, cfg);
    report.losses.push_back(batch_loss);
    if (log && (step == 1 || step % 50 == 0 || step == cfg.steps))
      *log << "step " << step << "/" << cfg.steps << " loss " << batch_loss << "\n" << std::flush;
    if (sink && cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.steps) sink(step, model, opt);
  }
  model.zero_grad();
  report.steps = cfg.steps;
  report.skipped = opt.skipped;
  report.final_loss = probe_loss(model, data, probe_seed);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (sink) sink(cfg.steps, model, opt);
  return report;
}

template <typename T>
Tensor<T> sample_euler(const VelocityField<T>& v, const Shape& shape, std::size_t n_steps, Rng& rng) {
  if (n_steps == 0) throw ContractError("sample_euler: n_steps must be >= 1");
  NoGradGuard ng;
  std::vector<T> init(shape_numel(shape));
  for (auto& e : init) e = static_cast<T>(rng.normal());
  Tensor<T> x = Tensor<T>::from(shape, std::move(init));
  const T n = static_cast<T>(n_steps);
  for (std::size_t k = n_steps; k >= 1; --k) {
    const T tk = static_cast<T>(k) / n, tprev = static_cast<T>(k - 1) / n;
    const Tensor<T> vel = v(x, tk);
    if (vel.shape() != shape) throw DimensionError("velocity field returned " + shape_str(vel.shape()));
    auto xd = x.data();
    const auto vd = vel.data();
    const T dt = tprev - tk;
    for (std::size_t i = 0; i < xd.size(); ++i) xd[i] += dt * vd[i];
  }
  return x;
}

template <typename T>
Tensor<T> sample_euler(const Model<T>& model, const FlowExample<T>& ex, std::size_t n_steps, Rng& rng) {
  const VelocityFn<T> v = model_velocity(model);
  return sample_euler<T>([&](const Tensor<T>& x, T t) { return v(x, t, ex); }, Shape{ex.n_target(), ex.feature_dim},
                         n_steps, rng);
}

GradCheckReport check_model_gradients(Strategy strategy, Stage stage, std::uint64_t seed, double eps) {
  ModelConfig cfg = ModelConfig::make(strategy, stage, 8);
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 2;
  cfg.d_text = 8;
  Rng rng(seed);
  Model<double> model = build_model<double>(cfg, rng);
  const auto params = model.named_parameters();
  for (const auto& p : params) {
    Tensor<double> t = p.tensor;
    for (double& x : t.data()) x = rng.uniform(-0.5, 0.5);
  }

  constexpr std::size_t kTokens = 12;
  auto positions = [&] {
    std::vector<Int3> cells;
    for (int i = 0; i < 512; ++i) cells.push_back({i % 8, (i / 8) % 8, i / 64});
    for (std::size_t i = 0; i < kTokens; ++i) std::swap(cells[i], cells[i + rng.below(cells.size() - i)]);
    cells.resize(kTokens);
    std::sort(cells.begin(), cells.end());
    return cells;
  };
  FlowExample<double> ex;
  ex.feature_dim = cfg.out_dim();
  ex.target_positions = positions();
  ex.source_positions = positions();
  ex.x0.resize(kTokens * ex.feature_dim);
  ex.source.resize(kTokens * ex.feature_dim);
  for (double& x : ex.x0) x = rng.uniform(-1.0, 1.0);
  for (double& x : ex.source) x = rng.uniform(-1.0, 1.0);
  // Every vocabulary row appears once, so no embedding gradient is identically zero.
  for (int i = 0; i < 8; ++i) ex.text.push_back(i);
  for (std::size_t i = 0; i + 1 < ex.text.size(); ++i) std::swap(ex.text[i], ex.text[i + rng.below(ex.text.size() - i)]);
  FlowDraw<double> draw = draw_noise(ex, rng);
  draw.t = 0.37;

  const VelocityFn<double> v = model_velocity(model);
  return grad_check([&] { return cfm_sample_loss(v, ex, draw); }, params, eps);
}

EditOutput edit_object_detailed(const Model<float>& stage1, const Model<float>& stage2, const OccupancyGrid& source,
                                const std::string& instruction, std::size_t n_steps, Rng& rng, const Lexicon& lexicon) {
  const ModelConfig &c1 = stage1.config(), &c2 = stage2.config();
  if (c1.stage != Stage::Structure) throw ConfigError("first checkpoint must be a structure-stage model");
  if (c2.stage != Stage::Local) throw ConfigError("second checkpoint must be a local-stage model");
  if (c1.strategy != c2.strategy) throw ConfigError("stage models use different conditioning strategies");

  const std::vector<int> text = lexicon.tokenize(instruction);
  for (int id : text)
    if (static_cast<std::size_t>(id) >= std::min(c1.vocab_size, c2.vocab_size))
      throw VocabError("word '" + lexicon.word(id) + "' is outside the model vocabulary");

  const SparseStructure src_s = extract_sparse_structure(source);

  FlowExample<float> ex1;
  ex1.feature_dim = kStructureInputDim;
  ex1.text = text;
  ex1.target_positions = dense_positions(src_s.grid_res);
  ex1.source_positions = ex1.target_positions;
  ex1.source = copy_values(structure_inputs<float>(src_s));
  const Tensor<float> s_out = sample_euler(stage1, ex1, n_steps, rng);

  EditOutput out{OccupancyGrid(source.resolution()), {}, {}};
  SparseStructure& s = out.structure;
  s.grid_res = src_s.grid_res;
  s.patch = src_s.patch;
  s.active.assign(src_s.cells(), 0);
  s.features.assign(src_s.cells() * kStructureChannels, 0.0f);
  const auto rows = s_out.data();
  for (std::size_t i = 0; i < ex1.target_positions.size(); ++i) {
    const float* r = rows.data() + i * kStructureInputDim;
    if (!(r[kStructureChannels] > 0.0f)) continue;
    const std::size_t c = s.cell_index(ex1.target_positions[i]);
    s.active[c] = 1;
    for (std::size_t k = 0; k < kStructureChannels; ++k)
      s.features[c * kStructureChannels + k] = std::clamp(std::isfinite(r[k]) ? r[k] : 0.0f, -1.0f, 1.0f);
  }
  if (s.active_count() == 0) throw EmptyResultError("structure stage produced no active cells");

  const StructuredLatent src_l = encode_local(source, src_s);
  FlowExample<float> ex2;
  ex2.feature_dim = kLatentChannels;
  ex2.text = text;
  ex2.target_positions = s.active_positions();
  ex2.source_positions = latent_positions(src_l);
  ex2.source = copy_values(latent_inputs<float>(src_l));
  const Tensor<float> l_out = sample_euler(stage2, ex2, n_steps, rng);

  const auto z = l_out.data();
  for (std::size_t i = 0; i < ex2.target_positions.size(); ++i) {
    LatentEntry e;
    e.pos = ex2.target_positions[i];
    std::copy_n(z.data() + i * kLatentChannels, kLatentChannels, e.z.begin());
    out.latent.entries.push_back(e);
  }
  out.grid = decode(out.latent, s);
  return out;
}

OccupancyGrid edit_object(const Model<float>& stage1, const Model<float>& stage2, const OccupancyGrid& source,
                          const std::string& instruction, std::size_t n_steps, Rng& rng, const Lexicon& lexicon) {
  return edit_object_detailed(stage1, stage2, source, instruction, n_steps, rng, lexicon).grid;
}

#define N3D_INSTANTIATE(T)                                                                                           \
  template FlowExample<T> make_example<T>(const EditTriplet&, Stage);                                                \
  template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&, T);                                          \
  template Tensor<T> target_velocity<T>(const Tensor<T>&, const Tensor<T>&);                                         \
  template VelocityFn<T> model_velocity<T>(const Model<T>&);                                                         \
  template FlowDraw<T> draw_noise<T>(const FlowExample<T>&, Rng&);                                                   \
  template Tensor<T> cfm_sample_loss<T>(const VelocityFn<T>&, const FlowExample<T>&, const FlowDraw<T>&);            \
  template Tensor<T> cfm_loss<T>(const VelocityFn<T>&, std::span<const FlowExample<T>>, std::span<const FlowDraw<T>>); \
  template double clip_grad_norm<T>(std::span<const NamedTensor<T>>, double);                                        \
  template bool adamw_step<T>(std::span<const NamedTensor<T>>, OptimizerState<T>&, const TrainConfig&);              \
  template double probe_loss<T>(const Model<T>&, std::span<const FlowExample<T>>, std::uint64_t);                    \
  template TrainReport train<T>(Model<T>&, OptimizerState<T>&, std::span<const FlowExample<T>>, const TrainConfig&,  \
                                const CheckpointSink<T>&, std::ostream*);                                            \
  template Tensor<T> sample_euler<T>(const VelocityField<T>&, const Shape&, std::size_t, Rng&);                      \
  template Tensor<T> sample_euler<T>(const Model<T>&, const FlowExample<T>&, std::size_t, Rng&);

N3D_INSTANTIATE(float)
N3D_INSTANTIATE(double)
#undef N3D_INSTANTIATE

}  // namespace n3d
