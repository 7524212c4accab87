// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "corruptions.hpp"
#include "n3d/checkpoint.hpp"
#include "n3d/errors.hpp"
#include "n3d/eval.hpp"
#include "n3d/flow.hpp"
#include "n3d/lexicon.hpp"

using namespace n3d;

namespace {

constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 120.0;
constexpr double kEulerTol = 1e-5;
constexpr double kOracleTol = 1e-6;
constexpr double kLossRatio = 0.1;
constexpr double kOccupancy = 0.95;
constexpr std::size_t kMinSuccess = 7;
constexpr double kOverfitSeconds = 15 * 60.0;
constexpr std::size_t kCurateCount = 256;
constexpr std::size_t kCorruptMin = 255;
constexpr double kEditSeconds = 10.0;

// Overfit-8 protocol.
constexpr std::uint64_t kDataSeed = 1;
constexpr std::uint64_t kInitSeed = 3;
constexpr std::uint64_t kTrainSeed = 5;
constexpr std::uint64_t kSampleSeed = 9;
constexpr std::size_t kOverfitSteps = 2000;
constexpr std::size_t kSampleSteps = 32;

int failures = 0;
int runtime_shortfalls = 0;
std::FILE* report_file = nullptr;  // acceptance_report.txt in the working directory

// runtime_only: every check passed except a wall-clock bound. Such a line still
// reads FAIL but does not fail the process.
void report(int id, const std::string& name, bool pass, const std::string& detail, bool runtime_only = false) {
  for (std::FILE* f : {stdout, report_file}) {
    if (!f) continue;
    std::fprintf(f, "criterion %2d %s: %s | %s\n", id, pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(f);
  }
  if (pass) return;
  if (runtime_only) ++runtime_shortfalls;
  else ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ------------------------------------------------------------------------

void gradients() {
  bool pass = true;
  std::string detail;
  for (Strategy s : {Strategy::TokenConcat, Strategy::CrossAttn}) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport rep = check_model_gradients(s, Stage::Structure, 0, 1e-4);
    const double sec = since(t0);
    const double err = rep.max_rel_err();
    pass = pass && err < kGradTol && sec < kGradSeconds && !rep.entries.empty();
    detail += to_string(s) + " max rel err " + fmt("%.2e", err) + " over " + std::to_string(rep.entries.size()) +
              " tensors in " + fmt("%.1f", sec) + " s; ";
  }
  report(1, "gradient correctness", pass, detail);
}

// ---- 2 ------------------------------------------------------------------------

void euler_oracle() {
  bool pass = true;
  std::string detail;
  const Shape shape{12, 9};
  for (std::size_t n : {1, 4, 16}) {
    Rng draw(100 + n);
    std::vector<double> x0(shape_numel(shape));
    for (auto& v : x0) v = draw.normal();
    const auto x0t = Tensor<double>::from(shape, x0);
    // On the straight path (x - x0) / t is the constant eps - x0.
    const VelocityField<double> v = [&](const Tensor<double>& x, double t) { return scale(sub(x, x0t), 1.0 / t); };
    Rng rng(7);
    const auto out = sample_euler<double>(v, shape, n, rng);
    double err = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) err = std::max(err, std::abs(out.data()[i] - x0[i]));
    pass = pass && err < kEulerTol;
    detail += "n=" + std::to_string(n) + " " + fmt("%.1e", err) + " ";
  }
  report(2, "Euler on the oracle field", pass, detail);
}

// ---- 3 ------------------------------------------------------------------------

void endpoints() {
  Rng rng(11);
  const Shape shape{16, 9};
  std::vector<float> a(shape_numel(shape)), b(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<float>(rng.normal() * 3.0);
    b[i] = static_cast<float>(rng.normal());
  }
  const auto x0 = Tensor<float>::from(shape, a), eps = Tensor<float>::from(shape, b);
  const auto at0 = interpolate(x0, eps, 0.0f), at1 = interpolate(x0, eps, 1.0f);
  bool exact = true;
  for (std::size_t i = 0; i < a.size(); ++i) exact = exact && at0.data()[i] == a[i] && at1.data()[i] == b[i];
  // Velocity is the same whichever t the pair is drawn at.
  const auto v = target_velocity(x0, eps);
  bool constant = true;
  for (float t : {0.1f, 0.5f, 0.9f}) {
    const auto xt = interpolate(x0, eps, t);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double slope = (static_cast<double>(at1.data()[i]) - static_cast<double>(xt.data()[i])) / (1.0 - t);
      constant = constant && std::abs(slope - v.data()[i]) < 1e-4 * (1.0 + std::abs(v.data()[i]));
    }
  }
  for (std::size_t i = 0; i < a.size(); ++i) constant = constant && v.data()[i] == b[i] - a[i];
  report(3, "interpolation endpoints", exact && constant,
         std::string("endpoints ") + (exact ? "bit-exact" : "differ") + ", velocity " + (constant ? "constant" : "varies"));
}

// ---- 4 ------------------------------------------------------------------------

void param_efficiency() {
  bool pass = true;
  std::string detail;
  const std::size_t vocab = Lexicon::standard().vocab_size();
  for (std::size_t d : {16, 64})
    for (std::size_t n : {2, 4}) {
      ParamCount counted[2];
      int k = 0;
      for (Strategy s : {Strategy::TokenConcat, Strategy::CrossAttn}) {
        ModelConfig cfg = ModelConfig::make(s, Stage::Structure, vocab);
        cfg.d_model = d;
        cfg.n_blocks = n;
        cfg.n_heads = 2;
        Rng rng(1);
        const auto model = build_model<float>(cfg, rng);
        ParamCount c;
        for (const auto& [name, t] : model.params()) {
          const std::string comp = param_component(name);
          (comp == "backbone" ? c.backbone : comp == "text_path" ? c.text_path : comp == "source_path" ? c.source_path : c.heads) += t.numel();
        }
        const ParamCount sym = param_count(cfg);
        pass = pass && sym.total() == c.total() && sym.source_path == c.source_path && sym.backbone == c.backbone;
        counted[k++] = c;
      }
      const auto& tc = counted[0];
      const auto& ca = counted[1];
      pass = pass && tc.source_path <= 2 * d && ca.source_path == 2 * n * d * d && tc.source_path < ca.source_path &&
             tc.backbone == ca.backbone && tc.text_path == ca.text_path;
      detail += "d" + std::to_string(d) + "/N" + std::to_string(n) + ": " + std::to_string(tc.source_path) + " vs " +
                std::to_string(ca.source_path) + "; ";
    }
  report(4, "parameter efficiency", pass, detail);
}

// ---- 5, 6, 11 -----------------------------------------------------------------

struct OverfitRun {
  Strategy strategy;
  std::vector<Model<float>> models;
  double loss_ratio[2] = {0, 0};
  double final_loss[2] = {0, 0};
  double train_seconds = 0.0;
  EvalReport eval;
};

ModelConfig overfit_config(Strategy s, Stage st) {
  ModelConfig cfg = ModelConfig::make(s, st, Lexicon::standard().vocab_size());
  cfg.d_model = 64;
  cfg.n_blocks = 4;
  cfg.n_heads = 1;
  return cfg;
}

OverfitRun overfit(Strategy s, const std::vector<EditTriplet>& trip) {
  OverfitRun run{s, {}, {}, {}, 0.0, {}};
  const auto t0 = std::chrono::steady_clock::now();
  int k = 0;
  for (Stage st : {Stage::Structure, Stage::Local}) {
    std::vector<FlowExample<float>> data;
    for (const auto& t : trip) data.push_back(make_example<float>(t, st));
    Rng rng(kInitSeed);
    auto model = build_model<float>(overfit_config(s, st), rng);
    OptimizerState<float> opt;
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.steps = kOverfitSteps;
    tc.batch_size = 8;
    tc.seed = kTrainSeed;
    const TrainReport rep = train<float>(model, opt, data, tc);
    run.final_loss[k] = rep.final_loss;
    run.loss_ratio[k] = rep.final_loss / rep.initial_loss;
    std::printf("  %s %s: initial %.5f final %.5f (%.1f s)\n", to_string(s).c_str(), to_string(st).c_str(),
                rep.initial_loss, rep.final_loss, rep.seconds);
    std::fflush(stdout);
    run.models.push_back(std::move(model));
    ++k;
  }
  run.train_seconds = since(t0);
  run.eval = evaluate(run.models[0], run.models[1], trip, kSampleSteps, kSampleSeed);
  std::printf("%s\n", run.eval.table().c_str());
  std::fflush(stdout);
  return run;
}

std::size_t successes(const EvalReport& r) {
  return static_cast<std::size_t>(std::count_if(r.samples.begin(), r.samples.end(), [](const auto& s) { return s.success; }));
}

void overfit_suite() {
  std::vector<EditTriplet> trip;
  for (std::size_t i = 0; i < 8; ++i) trip.push_back(generate_triplet(kDataSeed, EditOp::Delete, i).triplet);

  const auto t0 = std::chrono::steady_clock::now();
  OverfitRun tc = overfit(Strategy::TokenConcat, trip);
  const double total = since(t0);
  {
    const double occ = tc.eval.overall.occupancy_accuracy;
    const std::size_t ok = successes(tc.eval);
    const bool loss_ok = tc.loss_ratio[0] < kLossRatio && tc.loss_ratio[1] < kLossRatio;
    const bool quality = loss_ok && occ >= kOccupancy && ok >= kMinSuccess;
    const bool pass = quality && total < kOverfitSeconds;
    report(5, "overfit-8 end to end", pass,
           "loss ratio " + fmt("%.4f", tc.loss_ratio[0]) + " / " + fmt("%.4f", tc.loss_ratio[1]) + ", occupancy " +
               fmt("%.4f", occ) + ", success " + std::to_string(ok) + "/8, runtime " + fmt("%.0f", total) + " s (limit " +
               fmt("%.0f", kOverfitSeconds) + " s)",
           quality);
  }

  // Criterion 11 on the trained pair.
  {
    double worst = 0.0;
    std::string err;
    for (std::size_t i = 0; i < trip.size(); ++i) {
      Rng rng = Rng(kSampleSeed).fork(i);
      const auto s = std::chrono::steady_clock::now();
      try {
        edit_object(tc.models[0], tc.models[1], trip[i].source, trip[i].instruction, kSampleSteps, rng);
      } catch (const Error& e) {
        err = e.what();
      }
      worst = std::max(worst, since(s));
    }
    report(11, "edit latency", worst < kEditSeconds && err.empty(),
           "slowest of 8 edits " + fmt("%.2f", worst) + " s with " + std::to_string(kSampleSteps) + " steps" +
               (err.empty() ? "" : ", error: " + err));
  }

  OverfitRun ca = overfit(Strategy::CrossAttn, trip);
  {
    const double tc_loss = tc.final_loss[0] + tc.final_loss[1];
    const double ca_loss = ca.final_loss[0] + ca.final_loss[1];
    const double tc_iou = tc.eval.overall.preservation_iou, ca_iou = ca.eval.overall.preservation_iou;
    const bool pass = tc_loss <= ca_loss && tc_iou >= ca_iou && ca.eval.samples.size() == trip.size();
    std::printf("  %-12s %12s %12s %14s %9s\n", "strategy", "s1 loss", "s2 loss", "preserve_iou", "success");
    for (const OverfitRun* r : {&tc, &ca})
      std::printf("  %-12s %12.5f %12.5f %14.4f %7zu/8\n", to_string(r->strategy).c_str(), r->final_loss[0],
                  r->final_loss[1], r->eval.overall.preservation_iou, successes(r->eval));
    report(6, "strategy comparison", pass,
           "final loss " + fmt("%.5f", tc_loss) + " vs " + fmt("%.5f", ca_loss) + ", preservation " + fmt("%.4f", tc_iou) +
               " vs " + fmt("%.4f", ca_iou));
  }
}

// ---- 7 ------------------------------------------------------------------------

void pipeline() {
  bool pass = true;
  std::string detail;
  std::size_t accepted = 0, total = 0, delete_exact = 0, deletes = 0;
  struct Case {
    const char* name;
    const char* reason;
    std::size_t rejected[3] = {0, 0, 0};
  };
  Case cases[4] = {{"shift", "consistency"}, {"wrong part", "fidelity"}, {"noise", "consistency"}, {"disconnect", "quality"}};
  const auto data = generate_dataset(2024, kCurateCount);
  for (std::size_t k = 0; k < data.size(); ++k) {
    const EditTriplet& t = data[k].triplet;
    const int op = static_cast<int>(t.op);
    ++total;
    accepted += curate(t).accept;
    if (t.op == EditOp::Delete) {
      ++deletes;
      bool exact = true;
      for (std::size_t i = 0; i < t.source.size(); ++i)
        exact = exact && t.target.material(i) == (t.edit_mask[i] ? 0 : t.source.material(i));
      delete_exact += exact;
    }
    Rng rng = Rng(77).fork(k);
    auto rejected = [](const std::optional<EditTriplet>& c, const char* reason) {
      if (!c) return false;
      const auto r = curate(*c);
      return !r.accept && r.has(reason);
    };
    cases[0].rejected[op] += rejected(corrupt::shift(t), cases[0].reason);
    cases[1].rejected[op] += rejected(corrupt::wrong_part(t), cases[1].reason);
    cases[2].rejected[op] += rejected(corrupt::noise(t, rng), cases[2].reason);
    cases[3].rejected[op] += rejected(corrupt::disconnect(t), cases[3].reason);
  }
  pass = accepted == total && delete_exact == deletes && total == 3 * kCurateCount;
  detail = "curated " + std::to_string(accepted) + "/" + std::to_string(total) + ", delete exact " +
           std::to_string(delete_exact) + "/" + std::to_string(deletes) + "; rejected per op (d/a/m):";
  for (const auto& c : cases) {
    detail += std::string(" ") + c.name + " ";
    for (int op = 0; op < 3; ++op) {
      pass = pass && c.rejected[op] >= kCorruptMin;
      detail += std::to_string(c.rejected[op]) + (op < 2 ? "/" : "");
    }
  }
  report(7, "data pipeline integrity", pass, detail);
}

// ---- 8 ------------------------------------------------------------------------

std::vector<double> loop_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t n, std::size_t k,
                                std::size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

std::vector<double> loop_attention(const std::vector<double>& q, const std::vector<double>& k, const std::vector<double>& v,
                                   std::size_t nq, std::size_t nk, std::size_t d, std::size_t dv) {
  std::vector<double> out(nq * dv, 0.0);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> s(nk);
    double mx = -1e300;
    for (std::size_t j = 0; j < nk; ++j) {
      double dot = 0.0;
      for (std::size_t p = 0; p < d; ++p) dot += q[i * d + p] * k[j * d + p];
      s[j] = dot / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (auto& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < nk; ++j)
      for (std::size_t p = 0; p < dv; ++p) out[i * dv + p] += s[j] / z * v[j * dv + p];
  }
  return out;
}

void numerics() {
  Rng rng(8);
  auto vec = [&](std::size_t n) {
    std::vector<double> x(n);
    for (auto& e : x) e = rng.uniform() * 2.0 - 1.0;
    return x;
  };
  auto dim = [&] { return static_cast<std::size_t>(1 + rng.below(8)); };
  double mm_err = 0.0, at_err = 0.0, sm_err = 0.0;
  for (int it = 0; it < 100; ++it) {
    const std::size_t n = dim(), k = dim(), m = dim();
    const auto a = vec(n * k), b = vec(k * m);
    const auto got = matmul(Tensor<double>::from({n, k}, a), Tensor<double>::from({k, m}, b));
    const auto want = loop_matmul(a, b, n, k, m);
    for (std::size_t i = 0; i < want.size(); ++i) mm_err = std::max(mm_err, std::abs(got.data()[i] - want[i]));

    const std::size_t nq = dim(), nk = dim(), d = dim(), dv = dim();
    const auto q = vec(nq * d), kk = vec(nk * d), v = vec(nk * dv);
    const auto att = attention(Tensor<double>::from({nq, d}, q), Tensor<double>::from({nk, d}, kk), Tensor<double>::from({nk, dv}, v));
    const auto ref = loop_attention(q, kk, v, nq, nk, d, dv);
    for (std::size_t i = 0; i < ref.size(); ++i) at_err = std::max(at_err, std::abs(att.data()[i] - ref[i]));
  }
  for (double mag : {1.0, 1e2, 1e4}) {
    const std::size_t rows = 16, cols = 10;
    auto x = vec(rows * cols);
    for (auto& e : x) e *= mag;
    x[0] = mag;
    x[1] = -mag;
    for (int prec = 0; prec < 2; ++prec) {
      std::vector<double> sums(rows, 0.0);
      if (prec == 0) {
        const auto s = softmax(Tensor<double>::from({rows, cols}, x));
        for (std::size_t i = 0; i < rows * cols; ++i) sums[i / cols] += s.data()[i];
      } else {
        std::vector<float> xf(x.begin(), x.end());
        const auto s = softmax(Tensor<float>::from({rows, cols}, xf));
        for (std::size_t i = 0; i < rows * cols; ++i) sums[i / cols] += s.data()[i];
      }
      for (double s : sums) sm_err = std::isfinite(s) ? std::max(sm_err, std::abs(s - 1.0)) : 1e9;
    }
  }
  const bool pass = mm_err < kOracleTol && at_err < kOracleTol && sm_err < kOracleTol;
  report(8, "numerics oracles", pass,
         "matmul " + fmt("%.1e", mm_err) + ", attention " + fmt("%.1e", at_err) + ", softmax row sum " + fmt("%.1e", sm_err));
}

// ---- 9 ------------------------------------------------------------------------

bool raises_format(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

std::vector<std::uint8_t> with_u32(std::vector<std::uint8_t> b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  return b;
}

void serialization() {
  std::vector<EditTriplet> set;
  for (const auto& g : generate_dataset(31, 4)) set.push_back(g.triplet);
  const auto ds = encode_dataset(set);
  const bool ds_rt = decode_dataset(ds) == set && encode_dataset(decode_dataset(ds)) == ds;

  Rng rng(4);
  const auto model = build_model<float>(overfit_config(Strategy::CrossAttn, Stage::Local), rng);
  OptimizerState<float> opt;
  opt.step = 3;
  for (const auto& [name, t] : model.params()) {
    opt.m[name] = std::vector<float>(t.numel(), 0.25f);
    opt.v[name] = std::vector<float>(t.numel(), 0.5f);
  }
  const auto ck = encode_checkpoint(model, &opt, {{"seed", "4"}});
  const Checkpoint back = decode_checkpoint(ck);
  bool ck_rt = back.model.config() == model.config() && back.optimizer && back.optimizer->m == opt.m &&
               back.optimizer->v == opt.v && encode_checkpoint(back.model, &*back.optimizer, back.meta) == ck;
  for (const auto& [name, t] : model.params())
    ck_rt = ck_rt && std::equal(t.data().begin(), t.data().end(), back.model.param(name).data().begin());

  int errors = 0;
  for (const auto* bytes : {&ds, &ck}) {
    auto bad_magic = *bytes;
    bad_magic[0] ^= 0xFF;
    const auto bad_version = with_u32(*bytes, 4, 99);
    const std::vector<std::uint8_t> truncated(bytes->begin(), bytes->begin() + static_cast<long>(bytes->size() / 2));
    const bool is_ds = bytes == &ds;
    for (const auto& b : {bad_magic, bad_version, truncated})
      errors += raises_format([&] { is_ds ? (void)decode_dataset(b) : (void)decode_checkpoint(b); });
  }
  const bool pass = ds_rt && ck_rt && errors == 6;
  report(9, "serialization", pass,
         std::string("dataset ") + (ds_rt ? "bit-exact" : "differs") + ", checkpoint " + (ck_rt ? "bit-exact" : "differs") +
             ", format errors " + std::to_string(errors) + "/6");
}

// ---- 10 -----------------------------------------------------------------------

void render_golden() {
  OccupancyGrid g(8);
  g.set(4, 4, 4, 1);
  struct Expect {
    View view;
    int u, v;
  };
  const Expect where[] = {{View::Front, 4, 3}, {View::Back, 3, 3}, {View::Left, 4, 3}, {View::Right, 3, 3}, {View::Top, 4, 4}};
  bool pass = true;
  int stable = 0;
  for (const auto& e : where) {
    const Image img = render_view(g, e.view);
    int lit = 0;
    for (int v = 0; v < img.height; ++v)
      for (int u = 0; u < img.width; ++u)
        if (img.pixel(u, v) != std::array<std::uint8_t, 3>{0, 0, 0}) lit += (u == e.u && v == e.v) ? 1 : 100;
    const auto bytes = encode_ppm(img);
    const bool same = bytes == read_file(std::string(N3D_FIXTURES) + "/center_" + view_name(e.view) + ".ppm") &&
                      bytes == encode_ppm(render_view(g, e.view));
    stable += same;
    pass = pass && lit == 1 && same;
  }
  report(10, "renderer golden", pass, "views matching fixtures " + std::to_string(stable) + "/5");
}

}  // namespace

int main() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  report_file = std::fopen("acceptance_report.txt", "w");
  const std::vector<std::function<void()>> quick{gradients, euler_oracle, endpoints, param_efficiency,
                                                 pipeline,  numerics,     serialization, render_golden};
  for (const auto& f : quick) {
    try {
      f();
    } catch (const std::exception& e) {
      std::printf("unexpected error: %s\n", e.what());
      ++failures;
    }
  }
  try {
    overfit_suite();
  } catch (const std::exception& e) {
    std::printf("unexpected error in the overfit suite: %s\n", e.what());
    ++failures;
  }
  for (std::FILE* f : {stdout, report_file})
    if (f) std::fprintf(f, "%d criteria failed, %d failed on wall-clock time only\n", failures, runtime_shortfalls);
  if (report_file) std::fclose(report_file);
  return failures == 0 ? 0 : 1;
}
