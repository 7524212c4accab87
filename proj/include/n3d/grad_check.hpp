#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "n3d/tensor.hpp"

namespace n3d {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_err = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err() const;
  const GradCheckEntry* worst() const;
};

// Compares analytic gradients of the scalar f() against central differences
// (f(x+eps) - f(x-eps)) / 2eps for every element of every parameter that
// requires grad. Relative error is |a - n| / max(|a|, |n|, 1e-8).
// eps must lie in [1e-6, 1e-3]; f must be deterministic.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::span<const NamedTensor<double>> params,
                           double eps = 1e-4);

}  // namespace n3d
