#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "acfpipe/nn/tape.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::nn {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Eigen::Index checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
  bool pass(double tolerance) const { return worst() < tolerance; }
};

// Central finite differences against the analytic gradients. `run(true)` must
// zero the parameter gradients, execute a fresh forward and backward pass and
// return the loss; `run(false)` runs forward only. Stochastic layers have to
// reseed identically inside `run` so every invocation sees the same masks.
// When max_elements is positive, larger parameters are spot-checked on a
// seeded sample of entries.
template <typename Scalar>
GradCheckReport gradient_check(const std::vector<Parameter<Scalar>*>& params,
                               const std::function<double(bool)>& run, double eps = 1e-5,
                               Eigen::Index max_elements = -1,
                               std::uint64_t sample_seed = 1234) {
  static_assert(std::is_same_v<Scalar, double>,
                "gradient checking needs 64-bit parameters");
  run(true);
  std::vector<typename Tensor<Scalar>::Array> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad.values);

  GradCheckReport report;
  Rng rng(sample_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<Scalar>& p = *params[pi];
    std::vector<Eigen::Index> indices;
    if (max_elements > 0 && p.value.numel() > max_elements) {
      std::vector<Eigen::Index> all(static_cast<std::size_t>(p.value.numel()));
      for (Eigen::Index i = 0; i < p.value.numel(); ++i) all[static_cast<std::size_t>(i)] = i;
      rng.shuffle(all);
      indices.assign(all.begin(), all.begin() + max_elements);
    } else {
      indices.resize(static_cast<std::size_t>(p.value.numel()));
      for (Eigen::Index i = 0; i < p.value.numel(); ++i) indices[static_cast<std::size_t>(i)] = i;
    }
    GradCheckEntry entry;
    entry.name = p.name;
    entry.checked = static_cast<Eigen::Index>(indices.size());
    for (Eigen::Index idx : indices) {
      const Scalar saved = p.value.values[idx];
      p.value.values[idx] = saved + static_cast<Scalar>(eps);
      const double up = run(false);
      p.value.values[idx] = saved - static_cast<Scalar>(eps);
      const double down = run(false);
      p.value.values[idx] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[pi][idx]);
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace acfpipe::nn
