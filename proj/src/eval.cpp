#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "n3d/errors.hpp"
#include "n3d/eval.hpp"
#include "n3d/flow.hpp"

namespace n3d {

namespace {

void check_same(const OccupancyGrid& a, const OccupancyGrid& b, const std::vector<std::uint8_t>* mask, const char* what) {
  if (a.resolution() != b.resolution())
    throw DimensionError(std::string(what) + ": resolutions " + std::to_string(a.resolution()) + " and " +
                         std::to_string(b.resolution()) + " differ");
  if (mask && mask->size() != a.size()) throw DimensionError(std::string(what) + ": mask size does not match the grid");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

double preservation_iou(const OccupancyGrid& pred, const OccupancyGrid& source, const std::vector<std::uint8_t>& mask) {
  check_same(pred, source, &mask, "preservation_iou");
  return masked_iou(pred, source, mask);
}

double edit_region_accuracy(const OccupancyGrid& pred, const OccupancyGrid& target, const std::vector<std::uint8_t>& mask) {
  check_same(pred, target, &mask, "edit_region_accuracy");
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    hit += pred.material(i) == target.material(i);
  }
  if (n == 0) throw ContractError("edit_region_accuracy: empty edit mask");
  return static_cast<double>(hit) / static_cast<double>(n);
}

double occupancy_accuracy(const OccupancyGrid& pred, const OccupancyGrid& target) {
  check_same(pred, target, nullptr, "occupancy_accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred.occupied(i) == target.occupied(i);
  return pred.size() == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

bool instruction_success(const OccupancyGrid& pred, const EditTriplet& t) {
  if (pred.resolution() != t.target.resolution() || t.edit_mask.size() != pred.size()) return false;
  std::size_t n = 0, good = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!t.edit_mask[i]) continue;
    ++n;
    switch (t.op) {
      case EditOp::Delete: good += !pred.occupied(i); break;
      case EditOp::Add: good += pred.occupied(i); break;
      case EditOp::Modify: good += pred.occupied(i) && pred.material(i) == t.target.material(i); break;
    }
  }
  if (n == 0) return false;
  if (t.op == EditOp::Delete) return good == n;
  return static_cast<double>(good) >= kSuccessFraction * static_cast<double>(n);
}

MetricSummary summarize(const std::vector<SampleResult>& samples) {
  MetricSummary m;
  m.count = samples.size();
  for (const auto& s : samples) {
    m.failures += !s.error.empty();
    m.preservation_iou += s.preservation_iou;
    m.edit_region_accuracy += s.edit_region_accuracy;
    m.occupancy_accuracy += s.occupancy_accuracy;
    m.success_rate += s.success ? 1.0 : 0.0;
    m.seconds += s.seconds;
  }
  if (m.count > 0) {
    const double n = static_cast<double>(m.count);
    m.preservation_iou /= n;
    m.edit_region_accuracy /= n;
    m.occupancy_accuracy /= n;
    m.success_rate /= n;
    m.seconds /= n;
  }
  return m;
}

EvalReport evaluate(const Editor& editor, const std::vector<EditTriplet>& testset) {
  EvalReport rep;
  for (std::size_t i = 0; i < testset.size(); ++i) {
    const EditTriplet& t = testset[i];
    SampleResult s;
    s.id = i;
    s.op = t.op;
    const auto start = std::chrono::steady_clock::now();
    try {
      const OccupancyGrid pred = editor(t, i);
      s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      s.preservation_iou = preservation_iou(pred, t.source, t.edit_mask);
      s.edit_region_accuracy = edit_region_accuracy(pred, t.target, t.edit_mask);
      s.occupancy_accuracy = occupancy_accuracy(pred, t.target);
      s.success = instruction_success(pred, t);
    } catch (const Error& e) {
      s = SampleResult{i, t.op, "error[" + e.tag() + "]: " + e.what(), 0.0, 0.0, 0.0, false,
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    }
    rep.samples.push_back(std::move(s));
  }
  for (EditOp op : {EditOp::Delete, EditOp::Add, EditOp::Modify}) {
    std::vector<SampleResult> sub;
    for (const auto& s : rep.samples)
      if (s.op == op) sub.push_back(s);
    if (!sub.empty()) rep.per_op[op] = summarize(sub);
  }
  rep.overall = summarize(rep.samples);
  return rep;
}

EvalReport evaluate(const Model<float>& stage1, const Model<float>& stage2, const std::vector<EditTriplet>& testset,
                    std::size_t n_steps, std::uint64_t seed) {
  EvalReport rep = evaluate(
      [&](const EditTriplet& t, std::size_t i) {
        Rng rng = Rng(seed).fork(i);
        return edit_object(stage1, stage2, t.source, t.instruction, n_steps, rng);
      },
      testset);
  rep.strategy = to_string(stage1.config().strategy);
  rep.stage1_params = param_count(stage1);
  rep.stage2_params = param_count(stage2);
  rep.n_steps = n_steps;
  rep.seed = seed;
  return rep;
}

std::string EvalReport::table() const {
  std::ostringstream o;
  if (!strategy.empty()) o << "strategy " << strategy << ", sampling steps " << n_steps << ", seed " << seed << "\n";
  auto params = [&](const char* name, const std::optional<ParamCount>& p) {
    if (!p) return;
    o << name << " parameters: backbone " << p->backbone << ", text path " << p->text_path << ", source path "
      << p->source_path << ", heads " << p->heads << ", total " << p->total() << "\n";
  };
  params("stage 1", stage1_params);
  params("stage 2", stage2_params);
  o << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %6s %6s %12s %12s %12s %9s %9s\n", "op", "n", "failed", "preserve_iou",
                "edit_acc", "occ_acc", "success", "sec/edit");
  o << line;
  auto row = [&](const std::string& name, const MetricSummary& m) {
    std::snprintf(line, sizeof line, "%-8s %6zu %6zu %12s %12s %12s %9s %9s\n", name.c_str(), m.count, m.failures,
                  fmt(m.preservation_iou).c_str(), fmt(m.edit_region_accuracy).c_str(),
                  fmt(m.occupancy_accuracy).c_str(), fmt(m.success_rate).c_str(), fmt(m.seconds).c_str());
    o << line;
  };
  for (const auto& [op, m] : per_op) row(to_string(op), m);
  row("all", overall);
  return o.str();
}

std::string EvalReport::csv() const {
  std::ostringstream o;
  o << "id,op,preservation_iou,edit_region_accuracy,occupancy_accuracy,success,seconds,error\n";
  for (const auto& s : samples) {
    std::string err = s.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    o << s.id << "," << to_string(s.op) << "," << fmt(s.preservation_iou) << "," << fmt(s.edit_region_accuracy) << ","
      << fmt(s.occupancy_accuracy) << "," << (s.success ? 1 : 0) << "," << fmt(s.seconds) << "," << err << "\n";
  }
  return o.str();
}

}  // namespace n3d
