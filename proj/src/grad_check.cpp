#include "n3d/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "n3d/errors.hpp"

namespace n3d {

namespace {
constexpr double kRelFloor = 1e-8;
}

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_err);
  return m;
}

const GradCheckEntry* GradCheckReport::worst() const {
  const GradCheckEntry* w = nullptr;
  for (const auto& e : entries)
    if (!w || e.max_rel_err > w->max_rel_err) w = &e;
  return w;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::span<const NamedTensor<double>> params,
                           double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ContractError("grad_check: eps must lie in [1e-6, 1e-3]");

  auto eval = [&](const std::string& name) {
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite objective while perturbing '" + name + "'");
    return v;
  };

  std::vector<NamedTensor<double>> active;
  for (const auto& p : params)
    if (p.tensor.requires_grad()) active.push_back(p);

  for (auto& p : active) p.tensor.zero_grad();
  {
    Tensor<double> loss = f();
    if (!std::isfinite(loss.item())) throw NumericalError("grad_check: non-finite objective at base point");
    loss.backward();
  }

  GradCheckReport report;
  for (auto& p : active) {
    GradCheckEntry entry{p.name, p.tensor.numel(), 0.0, 0.0};
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    auto data = p.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + eps;
      const double fp = eval(p.name);
      data[i] = x0 - eps;
      const double fm = eval(p.name);
      data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), kRelFloor});
      entry.max_rel_err = std::max(entry.max_rel_err, std::abs(a - numeric) / denom);
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(a));
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace n3d
