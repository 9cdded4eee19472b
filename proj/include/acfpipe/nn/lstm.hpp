#pragma once

#include <string>
#include <vector>

#include "acfpipe/nn/tape.hpp"

namespace acfpipe::nn {

// One LSTM layer with a fused gate kernel. Gate order along the 4U axis is
// input, forget, cell candidate, output; the forget-gate bias initializes
// to 1.
template <typename Scalar>
struct LstmLayer {
  Parameter<Scalar> w;  // [F, 4U]
  Parameter<Scalar> r;  // [U, 4U]
  Parameter<Scalar> b;  // [4U]
  Eigen::Index units = 0;
  double recurrent_dropout = 0.0;

  LstmLayer() = default;
  LstmLayer(const std::string& name, Eigen::Index input_size, Eigen::Index u, double rec_drop)
      : w(name + ".w", {input_size, 4 * u}),
        r(name + ".r", {u, 4 * u}),
        b(name + ".b", {4 * u}),
        units(u),
        recurrent_dropout(rec_drop) {
    b.value.values.segment(u, u).setOnes();
  }

  std::vector<Parameter<Scalar>*> parameters() {
    return {&w, &r, &b};
  }
};

// Runs the recurrence over xs (one [B,F] tensor per timestep). step_mask[t]
// holds 1 for live rows and 0 for padded ones; masked rows carry the previous
// state forward. Recurrent dropout uses one mask per sequence applied to the
// recurrent input, train mode only. Returns the hidden state at every step.
template <typename Scalar>
std::vector<Var<Scalar>> lstm_forward(Tape<Scalar>& tape, LstmLayer<Scalar>& layer,
                                      const std::vector<Var<Scalar>>& xs,
                                      const std::vector<std::vector<Scalar>>& step_mask) {
  if (xs.empty()) throw ArgumentError("lstm_forward: empty sequence");
  if (step_mask.size() != xs.size()) {
    throw ArgumentError("lstm_forward: one mask per timestep required");
  }
  const Eigen::Index batch = xs[0].value().dim(0);
  const Eigen::Index features = xs[0].value().dim(1);
  if (layer.w.value.dim(0) != features) {
    throw ShapeError("lstm_forward: input width " + std::to_string(features) +
                     " does not match kernel " + layer.w.value.shape_string());
  }
  const Eigen::Index u = layer.units;

  Var<Scalar> wk = tape.param(layer.w);
  Var<Scalar> rk = tape.param(layer.r);
  Var<Scalar> bk = tape.param(layer.b);

  Var<Scalar> drop_mask{};
  const bool use_rec_drop = tape.training() && layer.recurrent_dropout > 0.0;
  if (use_rec_drop) {
    Tensor<Scalar> mask({batch, u});
    const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - layer.recurrent_dropout));
    for (Eigen::Index i = 0; i < mask.numel(); ++i) {
      mask.values[i] = tape.rng().uniform() >= layer.recurrent_dropout ? scale : Scalar(0);
    }
    drop_mask = tape.input(std::move(mask));
  }

  Var<Scalar> h = tape.input(Tensor<Scalar>({batch, u}));
  Var<Scalar> c = tape.input(Tensor<Scalar>({batch, u}));

  std::vector<Var<Scalar>> states;
  states.reserve(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (xs[t].value().dim(0) != batch || xs[t].value().dim(1) != features) {
      throw ShapeError("lstm_forward: inconsistent timestep shapes");
    }
    Var<Scalar> h_rec = use_rec_drop ? mul(h, drop_mask) : h;
    Var<Scalar> z = add_bias(add(matmul(xs[t], wk), matmul(h_rec, rk)), bk);
    Var<Scalar> gi = sigmoid(slice_cols(z, 0, u));
    Var<Scalar> gf = sigmoid(slice_cols(z, u, u));
    Var<Scalar> gg = tanh_op(slice_cols(z, 2 * u, u));
    Var<Scalar> go = sigmoid(slice_cols(z, 3 * u, u));
    Var<Scalar> c_new = add(mul(gf, c), mul(gi, gg));
    Var<Scalar> h_new = mul(go, tanh_op(c_new));

    const auto& m = step_mask[t];
    if (static_cast<Eigen::Index>(m.size()) != batch) {
      throw ArgumentError("lstm_forward: mask length mismatch");
    }
    bool all_live = true;
    for (Scalar v : m) all_live = all_live && v != Scalar(0);
    if (all_live) {
      c = c_new;
      h = h_new;
    } else {
      c = where_rows(m, c_new, c);
      h = where_rows(m, h_new, h);
    }
    states.push_back(h);
  }
  return states;
}

}  // namespace acfpipe::nn
