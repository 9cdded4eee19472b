#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "acfpipe/errors.hpp"
#include "acfpipe/nn/tape.hpp"

namespace acfpipe::nn {

// Adam with bias correction. L2 decay enters as an extra gradient term
// l2 * theta for parameters carrying a positive coefficient.
template <typename Scalar>
struct AdamState {
  struct Slot {
    typename Tensor<Scalar>::Array m, v;
  };
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Slot> slots;
};

template <typename Scalar>
void adam_step(const std::vector<Parameter<Scalar>*>& params, AdamState<Scalar>& state,
               double learning_rate) {
  if (!(learning_rate > 0)) throw ArgumentError("adam_step: learning rate must be positive");
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m = Tensor<Scalar>::Array::Zero(params[i]->value.numel());
      state.slots[i].v = Tensor<Scalar>::Array::Zero(params[i]->value.numel());
    }
  }
  if (state.slots.size() != params.size()) {
    throw ArgumentError("adam_step: optimizer state does not match the parameter list");
  }
  state.step += 1;
  const Scalar b1 = static_cast<Scalar>(state.beta1);
  const Scalar b2 = static_cast<Scalar>(state.beta2);
  const Scalar eps = static_cast<Scalar>(state.epsilon);
  const Scalar bc1 = Scalar(1) - static_cast<Scalar>(std::pow(state.beta1, state.step));
  const Scalar bc2 = Scalar(1) - static_cast<Scalar>(std::pow(state.beta2, state.step));
  const Scalar lr = static_cast<Scalar>(learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<Scalar>& p = *params[i];
    if (!p.grad.values.allFinite()) {
      throw NumericError("non-finite gradient for parameter " + p.name);
    }
    auto& slot = state.slots[i];
    if (slot.m.size() != p.value.numel()) {
      throw ArgumentError("adam_step: state size mismatch for parameter " + p.name);
    }
    typename Tensor<Scalar>::Array g = p.grad.values;
    if (p.l2 > Scalar(0)) g += p.l2 * p.value.values;
    slot.m = b1 * slot.m + (Scalar(1) - b1) * g;
    slot.v = b2 * slot.v + (Scalar(1) - b2) * g.square();
    p.value.values -= lr * (slot.m / bc1) / ((slot.v / bc2).sqrt() + eps);
  }
}

}  // namespace acfpipe::nn
