#pragma once

#include <cmath>

#include "acfpipe/nn/tensor.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::nn {

template <typename Scalar>
void uniform_init(Tensor<Scalar>& t, double limit, Rng& rng) {
  for (Eigen::Index i = 0; i < t.numel(); ++i) {
    t.values[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
  }
}

// For weights feeding ReLU-family activations.
template <typename Scalar>
void he_uniform_init(Tensor<Scalar>& t, Eigen::Index fan_in, Rng& rng) {
  uniform_init(t, std::sqrt(6.0 / static_cast<double>(fan_in)), rng);
}

template <typename Scalar>
void glorot_uniform_init(Tensor<Scalar>& t, Eigen::Index fan_in, Eigen::Index fan_out,
                         Rng& rng) {
  uniform_init(t, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

}  // namespace acfpipe::nn
