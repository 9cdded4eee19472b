#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "acfpipe/errors.hpp"
#include "acfpipe/nn/tensor.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::nn {

// Trainable array with persistent gradient accumulator. l2 > 0 adds a decay
// term to the gradient inside the optimizer step.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Scalar l2 = Scalar(0);

  Parameter() = default;
  Parameter(std::string n, std::vector<Eigen::Index> shape, Scalar l2_coeff = Scalar(0))
      : name(std::move(n)), value(shape), grad(shape), l2(l2_coeff) {}

  void zero_grad() { grad.values.setZero(); }
};

// Running batch-norm statistics; owned by the model, updated by the tape op
// in training mode and read in eval mode.
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;

  explicit BatchNormState(Eigen::Index channels = 0)
      : running_mean({channels}), running_var({channels}) {
    running_var.values.setOnes();
  }
};

enum class Padding { Same, Valid };
enum class Activation { None, ReLU, LeakyReLU };

inline constexpr double kLeakySlope = 0.01;

template <typename Scalar>
class Tape;

// Handle to a tape node.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int idx = -1;

  const Tensor<Scalar>& value() const { return tape->node(idx).value; }
  const Tensor<Scalar>& grad() const { return tape->node(idx).grad; }
};

// Reverse-mode tape. Ops append nodes with backward closures; backward() runs
// the closures in reverse creation order. One tape instance per forward pass.
template <typename Scalar>
class Tape {
 public:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;  // allocated lazily during backward
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  explicit Tape(std::uint64_t seed = 0, bool training_mode = true)
      : rng_(seed), training_(training_mode) {}

  bool training() const { return training_; }
  Rng& rng() { return rng_; }

  Node& node(int idx) { return nodes_[static_cast<std::size_t>(idx)]; }
  const Node& node(int idx) const { return nodes_[static_cast<std::size_t>(idx)]; }
  std::size_t size() const { return nodes_.size(); }

  Var<Scalar> input(Tensor<Scalar> t) {
    return push(std::move(t), false, nullptr);
  }

  Var<Scalar> param(Parameter<Scalar>& p) {
    Parameter<Scalar>* ptr = &p;
    Var<Scalar> v = push(p.value, true, nullptr);
    const int idx = v.idx;
    node(idx).backward = [idx, ptr](Tape& t) {
      ptr->grad.values += t.node(idx).grad.values;
    };
    return v;
  }

  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw ArgumentError("backward: variable from another tape");
    Node& top = node(loss.idx);
    if (top.value.numel() != 1) throw ArgumentError("backward: loss must be scalar");
    grad_of(loss.idx).values.setConstant(Scalar(1));
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = node(i);
      if (n.backward && n.grad.numel() > 0) n.backward(*this);
    }
  }

  Tensor<Scalar>& grad_of(int idx) {
    Node& n = node(idx);
    if (n.grad.numel() == 0 && n.value.numel() > 0) n.grad = Tensor<Scalar>(n.value.shape);
    return n.grad;
  }

  Var<Scalar> push(Tensor<Scalar> value, bool needs_grad, std::function<void(Tape&)> backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

 private:
  std::vector<Node> nodes_;
  Rng rng_;
  bool training_;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& tape_of(Var<Scalar> a) {
  if (!a.tape) throw ArgumentError("op on detached variable");
  return *a.tape;
}

template <typename Scalar>
void check_same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape != b.tape) throw ArgumentError("op mixes variables from different tapes");
}

}  // namespace detail

// ---- element-wise ----------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = detail::tape_of(a);
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("add: shape mismatch " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
  }
  Tensor<Scalar> out = a.value();
  out.values += b.value().values;
  const bool needs = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, bi = b.idx, yi = y.idx;
    t.node(yi).backward = [ai, bi, yi](Tape<Scalar>& tp) {
      const auto& g = tp.node(yi).grad.values;
      if (tp.node(ai).needs_grad) tp.grad_of(ai).values += g;
      if (tp.node(bi).needs_grad) tp.grad_of(bi).values += g;
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = detail::tape_of(a);
  if (!a.value().same_shape(b.value())) {
    throw ShapeError("mul: shape mismatch " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
  }
  Tensor<Scalar> out = a.value();
  out.values *= b.value().values;
  const bool needs = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, bi = b.idx, yi = y.idx;
    t.node(yi).backward = [ai, bi, yi](Tape<Scalar>& tp) {
      const auto& g = tp.node(yi).grad.values;
      if (tp.node(ai).needs_grad) tp.grad_of(ai).values += g * tp.node(bi).value.values;
      if (tp.node(bi).needs_grad) tp.grad_of(bi).values += g * tp.node(ai).value.values;
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Tape<Scalar>& t = detail::tape_of(a);
  Tensor<Scalar> out = a.value();
  out.values = Scalar(1) / (Scalar(1) + (-out.values).exp());
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi](Tape<Scalar>& tp) {
      const auto& yv = tp.node(yi).value.values;
      tp.grad_of(ai).values += tp.node(yi).grad.values * yv * (Scalar(1) - yv);
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> tanh_op(Var<Scalar> a) {
  Tape<Scalar>& t = detail::tape_of(a);
  Tensor<Scalar> out = a.value();
  out.values = out.values.tanh();
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi](Tape<Scalar>& tp) {
      const auto& yv = tp.node(yi).value.values;
      tp.grad_of(ai).values += tp.node(yi).grad.values * (Scalar(1) - yv * yv);
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tape<Scalar>& t = detail::tape_of(a);
  Tensor<Scalar> out = a.value();
  out.values = out.values.max(Scalar(0));
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi](Tape<Scalar>& tp) {
      const auto& xv = tp.node(ai).value.values;
      tp.grad_of(ai).values +=
          tp.node(yi).grad.values * (xv > Scalar(0)).template cast<Scalar>();
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> leaky_relu(Var<Scalar> a, Scalar slope = Scalar(kLeakySlope)) {
  Tape<Scalar>& t = detail::tape_of(a);
  Tensor<Scalar> out = a.value();
  out.values = (out.values > Scalar(0)).select(out.values, out.values * slope);
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi, slope](Tape<Scalar>& tp) {
      using Arr = typename Tensor<Scalar>::Array;
      const auto& xv = tp.node(ai).value.values;
      tp.grad_of(ai).values += tp.node(yi).grad.values *
                               (xv > Scalar(0)).select(Arr::Ones(xv.size()),
                                                       Arr::Constant(xv.size(), slope));
    };
  }
  return y;
}

template <typename Scalar>
Var<Scalar> activate(Var<Scalar> a, Activation act) {
  switch (act) {
    case Activation::ReLU:
      return relu(a);
    case Activation::LeakyReLU:
      return leaky_relu(a);
    case Activation::None:
      return a;
  }
  throw ArgumentError("unknown activation");
}

// ---- linear algebra --------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = detail::tape_of(a);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + av.shape_string() + " x " +
                     bv.shape_string());
  }
  Tensor<Scalar> out({av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const bool needs = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, bi = b.idx, yi = y.idx;
    t.node(yi).backward = [ai, bi, yi](Tape<Scalar>& tp) {
      const auto gy = tp.node(yi).grad.matrix();
      if (tp.node(ai).needs_grad) {
        tp.grad_of(ai).matrix().noalias() += gy * tp.node(bi).value.matrix().transpose();
      }
      if (tp.node(bi).needs_grad) {
        tp.grad_of(bi).matrix().noalias() += tp.node(ai).value.matrix().transpose() * gy;
      }
    };
  }
  return y;
}

// a: [m,n], bias: [n]; adds the bias to every row.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> a, Var<Scalar> bias) {
  detail::check_same_tape(a, bias);
  Tape<Scalar>& t = detail::tape_of(a);
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (av.rank() != 2 || bv.numel() != av.dim(1)) {
    throw ShapeError("add_bias: bias length " + std::to_string(bv.numel()) +
                     " does not match columns of " + av.shape_string());
  }
  Tensor<Scalar> out = av;
  out.matrix().rowwise() +=
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bv.values.data(), bv.numel());
  const bool needs = t.node(a.idx).needs_grad || t.node(bias.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, bi = bias.idx, yi = y.idx;
    t.node(yi).backward = [ai, bi, yi](Tape<Scalar>& tp) {
      if (tp.node(ai).needs_grad) tp.grad_of(ai).values += tp.node(yi).grad.values;
      if (tp.node(bi).needs_grad) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(tp.grad_of(bi).values.data(),
                                                             tp.grad_of(bi).values.size()) +=
            tp.node(yi).grad.matrix().colwise().sum().transpose();
      }
    };
  }
  return y;
}

// Columns [from, from+width) of a rank-2 tensor.
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index from, Eigen::Index width) {
  Tape<Scalar>& t = detail::tape_of(a);
  const auto& av = a.value();
  if (av.rank() != 2 || from < 0 || width < 1 || from + width > av.dim(1)) {
    throw ShapeError("slice_cols: [" + std::to_string(from) + "," +
                     std::to_string(from + width) + ") out of " + av.shape_string());
  }
  Tensor<Scalar> out({av.dim(0), width});
  out.matrix() = av.matrix().middleCols(from, width);
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi, from, width](Tape<Scalar>& tp) {
      tp.grad_of(ai).matrix().middleCols(from, width) += tp.node(yi).grad.matrix();
    };
  }
  return y;
}

// Rows of a where mask is nonzero, rows of b elsewhere. The mask is a
// per-row constant, used to carry LSTM state across padded timesteps.
template <typename Scalar>
Var<Scalar> where_rows(const std::vector<Scalar>& mask, Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_tape(a, b);
  Tape<Scalar>& t = detail::tape_of(a);
  const auto& av = a.value();
  if (!av.same_shape(b.value()) || av.rank() != 2 ||
      static_cast<Eigen::Index>(mask.size()) != av.dim(0)) {
    throw ShapeError("where_rows: mask/operand shape mismatch");
  }
  Tensor<Scalar> out = av;
  for (Eigen::Index r = 0; r < av.dim(0); ++r) {
    if (mask[static_cast<std::size_t>(r)] == Scalar(0)) {
      out.matrix().row(r) = b.value().matrix().row(r);
    }
  }
  const bool needs = t.node(a.idx).needs_grad || t.node(b.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, bi = b.idx, yi = y.idx;
    t.node(yi).backward = [ai, bi, yi, mask](Tape<Scalar>& tp) {
      const auto gy = tp.node(yi).grad.matrix();
      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
        const bool keep = mask[static_cast<std::size_t>(r)] != Scalar(0);
        if (keep && tp.node(ai).needs_grad) tp.grad_of(ai).matrix().row(r) += gy.row(r);
        if (!keep && tp.node(bi).needs_grad) tp.grad_of(bi).matrix().row(r) += gy.row(r);
      }
    };
  }
  return y;
}

// [B, ...] -> [B, inner]; flat storage is already row-major so this is a
// shape relabel.
template <typename Scalar>
Var<Scalar> flatten(Var<Scalar> a) {
  Tape<Scalar>& t = detail::tape_of(a);
  const auto& av = a.value();
  if (av.rank() < 2) throw ShapeError("flatten: need at least rank 2");
  Tensor<Scalar> out = av.reshaped({av.dim(0), av.inner()});
  const bool needs = t.node(a.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int ai = a.idx, yi = y.idx;
    t.node(yi).backward = [ai, yi](Tape<Scalar>& tp) {
      tp.grad_of(ai).values += tp.node(yi).grad.values;
    };
  }
  return y;
}

// Concatenation of [B,C_k,H,W] tensors along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_channels: empty input");
  Tape<Scalar>& t = detail::tape_of(parts[0]);
  const auto& first = parts[0].value();
  if (first.rank() != 4) throw ShapeError("concat_channels: rank-4 input required");
  const Eigen::Index b = first.dim(0), h = first.dim(2), w = first.dim(3);
  Eigen::Index total_c = 0;
  bool needs = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    const auto& v = p.value();
    if (v.rank() != 4 || v.dim(0) != b || v.dim(2) != h || v.dim(3) != w) {
      throw ShapeError("concat_channels: mismatched shapes");
    }
    total_c += v.dim(1);
    needs = needs || t.node(p.idx).needs_grad;
  }
  Tensor<Scalar> out({b, total_c, h, w});
  const Eigen::Index plane = h * w;
  Eigen::Index c_at = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    const Eigen::Index pc = v.dim(1);
    for (Eigen::Index bi = 0; bi < b; ++bi) {
      out.values.segment((bi * total_c + c_at) * plane, pc * plane) =
          v.values.segment(bi * pc * plane, pc * plane);
    }
    c_at += pc;
  }
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    std::vector<int> srcs;
    std::vector<Eigen::Index> widths;
    for (const auto& p : parts) {
      srcs.push_back(p.idx);
      widths.push_back(p.value().dim(1));
    }
    const int yi = y.idx;
    t.node(yi).backward = [srcs, widths, yi, b, plane, total_c](Tape<Scalar>& tp) {
      const auto& g = tp.node(yi).grad.values;
      Eigen::Index c_at = 0;
      for (std::size_t k = 0; k < srcs.size(); ++k) {
        const Eigen::Index pc = widths[k];
        if (tp.node(srcs[k]).needs_grad) {
          auto& gsrc = tp.grad_of(srcs[k]).values;
          for (Eigen::Index bi = 0; bi < b; ++bi) {
            gsrc.segment(bi * pc * plane, pc * plane) +=
                g.segment((bi * total_c + c_at) * plane, pc * plane);
          }
        }
        c_at += pc;
      }
    };
  }
  return y;
}

// ---- convolution -----------------------------------------------------------

struct Conv2dSpec {
  int stride_h = 1;
  int stride_w = 1;
  int dilation_h = 1;
  int dilation_w = 1;
  Padding padding = Padding::Valid;
};

namespace detail {

struct ConvGeometry {
  Eigen::Index h_out, w_out, pad_top, pad_left;
};

inline ConvGeometry conv_geometry(Eigen::Index h, Eigen::Index w, Eigen::Index kh,
                                  Eigen::Index kw, const Conv2dSpec& spec) {
  const Eigen::Index eff_kh = (kh - 1) * spec.dilation_h + 1;
  const Eigen::Index eff_kw = (kw - 1) * spec.dilation_w + 1;
  ConvGeometry g{};
  if (spec.padding == Padding::Valid) {
    if (eff_kh > h || eff_kw > w) {
      throw ShapeError("conv2d: receptive field " + std::to_string(eff_kh) + "x" +
                       std::to_string(eff_kw) + " exceeds input " + std::to_string(h) + "x" +
                       std::to_string(w));
    }
    g.h_out = (h - eff_kh) / spec.stride_h + 1;
    g.w_out = (w - eff_kw) / spec.stride_w + 1;
    g.pad_top = g.pad_left = 0;
  } else {
    g.h_out = (h + spec.stride_h - 1) / spec.stride_h;
    g.w_out = (w + spec.stride_w - 1) / spec.stride_w;
    const Eigen::Index pad_h = std::max<Eigen::Index>(0, (g.h_out - 1) * spec.stride_h + eff_kh - h);
    const Eigen::Index pad_w = std::max<Eigen::Index>(0, (g.w_out - 1) * spec.stride_w + eff_kw - w);
    g.pad_top = pad_h / 2;  // the larger half goes to the bottom
    g.pad_left = pad_w / 2;
  }
  return g;
}

// col(ci*kh*kw + r*kw + s, ho*w_out + wo) = x_pad(ci, ho*sh + r*dh, wo*sw + s*dw)
template <typename Scalar>
void im2col(const Scalar* x, Eigen::Index c_in, Eigen::Index h, Eigen::Index w,
            Eigen::Index kh, Eigen::Index kw, const Conv2dSpec& spec, const ConvGeometry& g,
            Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& col) {
  col.setZero(c_in * kh * kw, g.h_out * g.w_out);
  for (Eigen::Index ci = 0; ci < c_in; ++ci) {
    const Scalar* plane = x + ci * h * w;
    for (Eigen::Index r = 0; r < kh; ++r) {
      for (Eigen::Index s = 0; s < kw; ++s) {
        const Eigen::Index row = (ci * kh + r) * kw + s;
        for (Eigen::Index ho = 0; ho < g.h_out; ++ho) {
          const Eigen::Index hi = ho * spec.stride_h + r * spec.dilation_h - g.pad_top;
          if (hi < 0 || hi >= h) continue;
          for (Eigen::Index wo = 0; wo < g.w_out; ++wo) {
            const Eigen::Index wi = wo * spec.stride_w + s * spec.dilation_w - g.pad_left;
            if (wi < 0 || wi >= w) continue;
            col(row, ho * g.w_out + wo) = plane[hi * w + wi];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& col, Scalar* gx,
                Eigen::Index c_in, Eigen::Index h, Eigen::Index w, Eigen::Index kh,
                Eigen::Index kw, const Conv2dSpec& spec, const ConvGeometry& g) {
  for (Eigen::Index ci = 0; ci < c_in; ++ci) {
    Scalar* plane = gx + ci * h * w;
    for (Eigen::Index r = 0; r < kh; ++r) {
      for (Eigen::Index s = 0; s < kw; ++s) {
        const Eigen::Index row = (ci * kh + r) * kw + s;
        for (Eigen::Index ho = 0; ho < g.h_out; ++ho) {
          const Eigen::Index hi = ho * spec.stride_h + r * spec.dilation_h - g.pad_top;
          if (hi < 0 || hi >= h) continue;
          for (Eigen::Index wo = 0; wo < g.w_out; ++wo) {
            const Eigen::Index wi = wo * spec.stride_w + s * spec.dilation_w - g.pad_left;
            if (wi < 0 || wi >= w) continue;
            plane[hi * w + wi] += col(row, ho * g.w_out + wo);
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: [B, C_in, H, W]; kernels: [C_out, C_in, kH, kW]; bias: [C_out].
// Cross-correlation with TF-style same/valid padding.
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> kernels, Var<Scalar> bias,
                   const Conv2dSpec& spec) {
  detail::check_same_tape(x, kernels);
  detail::check_same_tape(x, bias);
  Tape<Scalar>& t = detail::tape_of(x);
  const auto& xv = x.value();
  const auto& kv = kernels.value();
  if (xv.rank() != 4 || kv.rank() != 4) throw ShapeError("conv2d: rank-4 tensors required");
  const Eigen::Index b = xv.dim(0), c_in = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const Eigen::Index c_out = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  if (kv.dim(1) != c_in) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kv.dim(1)) +
                     " input channels, got " + std::to_string(c_in));
  }
  if (bias.value().numel() != c_out) throw ShapeError("conv2d: bias length mismatch");
  if (spec.stride_h < 1 || spec.stride_w < 1 || spec.dilation_h < 1 || spec.dilation_w < 1) {
    throw ArgumentError("conv2d: stride and dilation must be positive");
  }
  const auto g = detail::conv_geometry(h, w, kh, kw, spec);

  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Tensor<Scalar> out({b, c_out, g.h_out, g.w_out});
  // kernel as [C_out, C_in*kH*kW] row-major
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wmat(
      kv.values.data(), c_out, c_in * kh * kw);
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bvec(bias.value().values.data(),
                                                                  c_out);
  Mat col;
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    detail::im2col(xv.values.data() + bi * c_in * h * w, c_in, h, w, kh, kw, spec, g, col);
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> yview(
        out.values.data() + bi * c_out * g.h_out * g.w_out, c_out, g.h_out * g.w_out);
    yview.noalias() = wmat * col;
    yview.colwise() += bvec;
  }

  const bool needs = t.node(x.idx).needs_grad || t.node(kernels.idx).needs_grad ||
                     t.node(bias.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int xi = x.idx, ki = kernels.idx, bi_ = bias.idx, yi = y.idx;
    t.node(yi).backward = [xi, ki, bi_, yi, b, c_in, h, w, c_out, kh, kw, spec, g](
                              Tape<Scalar>& tp) {
      const auto& xv = tp.node(xi).value;
      const auto& kv = tp.node(ki).value;
      const auto& gy = tp.node(yi).grad;
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
          wmat(kv.values.data(), c_out, c_in * kh * kw);
      Mat col;
      const bool need_x = tp.node(xi).needs_grad;
      const bool need_k = tp.node(ki).needs_grad;
      const bool need_b = tp.node(bi_).needs_grad;
      for (Eigen::Index bb = 0; bb < b; ++bb) {
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            gyview(gy.values.data() + bb * c_out * g.h_out * g.w_out, c_out, g.h_out * g.w_out);
        if (need_k) {
          detail::im2col(xv.values.data() + bb * c_in * h * w, c_in, h, w, kh, kw, spec, g, col);
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
              gw(tp.grad_of(ki).values.data(), c_out, c_in * kh * kw);
          gw.noalias() += gyview * col.transpose();
        }
        if (need_b) {
          Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gb(tp.grad_of(bi_).values.data(),
                                                                  c_out);
          gb.noalias() += gyview.rowwise().sum();
        }
        if (need_x) {
          Mat gcol = wmat.transpose() * gyview;
          detail::col2im_add<Scalar>(gcol, tp.grad_of(xi).values.data() + bb * c_in * h * w,
                                     c_in, h, w, kh, kw, spec, g);
        }
      }
    };
  }
  return y;
}

// ---- batch norm ------------------------------------------------------------

struct BatchNormSpec {
  double momentum = 0.99;
  double epsilon = 1e-5;
};

// Per-channel normalization. Rank-4 input normalizes each C over B*H*W;
// rank-2 input normalizes each feature over B. Training mode uses batch
// statistics and updates the running state; eval mode is a fixed affine map.
template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta,
                       BatchNormState<Scalar>& state, const BatchNormSpec& spec = {}) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  Tape<Scalar>& t = detail::tape_of(x);
  const auto& xv = x.value();
  Eigen::Index channels, reduce;
  if (xv.rank() == 4) {
    channels = xv.dim(1);
    reduce = xv.dim(0) * xv.dim(2) * xv.dim(3);
  } else if (xv.rank() == 2) {
    channels = xv.dim(1);
    reduce = xv.dim(0);
  } else {
    throw ShapeError("batch_norm: rank-2 or rank-4 input required");
  }
  if (gamma.value().numel() != channels || beta.value().numel() != channels ||
      state.running_mean.numel() != channels) {
    throw ShapeError("batch_norm: parameter width does not match channels");
  }
  if (t.training() && xv.dim(0) < 2) {
    throw ArgumentError("batch_norm: training batch must hold at least 2 samples");
  }

  const Scalar eps = static_cast<Scalar>(spec.epsilon);
  using Arr = typename Tensor<Scalar>::Array;

  // gather per-channel element lists via strided views
  const Eigen::Index b = xv.dim(0);
  const Eigen::Index plane = (xv.rank() == 4) ? xv.dim(2) * xv.dim(3) : 1;
  auto channel_segment = [&](const Arr& flat, Eigen::Index bi, Eigen::Index c) {
    return flat.segment((bi * channels + c) * plane, plane);
  };

  Arr mean(channels), var(channels);
  if (t.training()) {
    for (Eigen::Index c = 0; c < channels; ++c) {
      Scalar acc = 0;
      for (Eigen::Index bi = 0; bi < b; ++bi) acc += channel_segment(xv.values, bi, c).sum();
      mean[c] = acc / static_cast<Scalar>(reduce);
      Scalar sq = 0;
      for (Eigen::Index bi = 0; bi < b; ++bi) {
        sq += (channel_segment(xv.values, bi, c) - mean[c]).square().sum();
      }
      var[c] = sq / static_cast<Scalar>(reduce);
    }
    const Scalar mom = static_cast<Scalar>(spec.momentum);
    state.running_mean.values = mom * state.running_mean.values + (Scalar(1) - mom) * mean;
    state.running_var.values = mom * state.running_var.values + (Scalar(1) - mom) * var;
  } else {
    mean = state.running_mean.values;
    var = state.running_var.values;
  }
  Arr inv_std = (var + eps).rsqrt();

  Tensor<Scalar> out(xv.shape);
  for (Eigen::Index c = 0; c < channels; ++c) {
    const Scalar g_ = gamma.value().values[c];
    const Scalar b_ = beta.value().values[c];
    for (Eigen::Index bi = 0; bi < b; ++bi) {
      out.values.segment((bi * channels + c) * plane, plane) =
          (channel_segment(xv.values, bi, c) - mean[c]) * inv_std[c] * g_ + b_;
    }
  }

  const bool training = t.training();
  const bool needs = t.node(x.idx).needs_grad || t.node(gamma.idx).needs_grad ||
                     t.node(beta.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int xi = x.idx, gi = gamma.idx, bi_ = beta.idx, yi = y.idx;
    t.node(yi).backward = [xi, gi, bi_, yi, mean, inv_std, channels, plane, b, reduce,
                           training](Tape<Scalar>& tp) {
      const auto& xv = tp.node(xi).value.values;
      const auto& gy = tp.node(yi).grad.values;
      const auto& gam = tp.node(gi).value.values;
      auto seg = [&](const Arr& flat, Eigen::Index bi2, Eigen::Index c) {
        return flat.segment((bi2 * channels + c) * plane, plane);
      };
      for (Eigen::Index c = 0; c < channels; ++c) {
        // per-channel reductions
        Scalar sum_gy = 0, sum_gy_xhat = 0;
        for (Eigen::Index bi2 = 0; bi2 < b; ++bi2) {
          const auto gseg = seg(gy, bi2, c);
          sum_gy += gseg.sum();
          sum_gy_xhat += (gseg * (seg(xv, bi2, c) - mean[c]) * inv_std[c]).sum();
        }
        if (tp.node(gi).needs_grad) tp.grad_of(gi).values[c] += sum_gy_xhat;
        if (tp.node(bi_).needs_grad) tp.grad_of(bi_).values[c] += sum_gy;
        if (tp.node(xi).needs_grad) {
          auto& gx = tp.grad_of(xi).values;
          const Scalar m_inv = Scalar(1) / static_cast<Scalar>(reduce);
          for (Eigen::Index bi2 = 0; bi2 < b; ++bi2) {
            auto xhat = (seg(xv, bi2, c) - mean[c]) * inv_std[c];
            if (training) {
              gx.segment((bi2 * channels + c) * plane, plane) +=
                  gam[c] * inv_std[c] *
                  (seg(gy, bi2, c) - sum_gy * m_inv - xhat * (sum_gy_xhat * m_inv));
            } else {
              gx.segment((bi2 * channels + c) * plane, plane) +=
                  gam[c] * inv_std[c] * seg(gy, bi2, c);
            }
          }
        }
      }
    };
  }
  return y;
}

// ---- pooling and dropout ---------------------------------------------------

// Non-overlapping max pooling over [B,C,H,W]; remainder rows/cols dropped.
// Gradient goes to the first maximal element of each window.
template <typename Scalar>
Var<Scalar> max_pool(Var<Scalar> x, Eigen::Index pool_h, Eigen::Index pool_w) {
  Tape<Scalar>& t = detail::tape_of(x);
  const auto& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("max_pool: rank-4 input required");
  if (pool_h < 1 || pool_w < 1) throw ArgumentError("max_pool: pool dims must be positive");
  const Eigen::Index b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (pool_h > h || pool_w > w) {
    throw ShapeError("max_pool: pool " + std::to_string(pool_h) + "x" + std::to_string(pool_w) +
                     " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  }
  const Eigen::Index ho = h / pool_h, wo = w / pool_w;
  Tensor<Scalar> out({b, c, ho, wo});
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(out.numel()));
  Eigen::Index oi = 0;
  for (Eigen::Index bi = 0; bi < b; ++bi) {
    for (Eigen::Index ci = 0; ci < c; ++ci) {
      const Scalar* plane = xv.values.data() + (bi * c + ci) * h * w;
      for (Eigen::Index yh = 0; yh < ho; ++yh) {
        for (Eigen::Index yw = 0; yw < wo; ++yw) {
          Scalar best = plane[(yh * pool_h) * w + yw * pool_w];
          Eigen::Index best_at = (yh * pool_h) * w + yw * pool_w;
          for (Eigen::Index r = 0; r < pool_h; ++r) {
            for (Eigen::Index s = 0; s < pool_w; ++s) {
              const Eigen::Index at = (yh * pool_h + r) * w + yw * pool_w + s;
              if (plane[at] > best) {
                best = plane[at];
                best_at = at;
              }
            }
          }
          out.values[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = (bi * c + ci) * h * w + best_at;
          ++oi;
        }
      }
    }
  }
  const bool needs = t.node(x.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int xi = x.idx, yi = y.idx;
    t.node(yi).backward = [xi, yi, argmax](Tape<Scalar>& tp) {
      auto& gx = tp.grad_of(xi).values;
      const auto& gy = tp.node(yi).grad.values;
      for (Eigen::Index i = 0; i < gy.size(); ++i) {
        gx[argmax[static_cast<std::size_t>(i)]] += gy[i];
      }
    };
  }
  return y;
}

// Inverted dropout: train mode zeroes with probability p and scales survivors
// by 1/(1-p); eval mode is the identity.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, double p) {
  Tape<Scalar>& t = detail::tape_of(x);
  if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout: probability must be in [0,1)");
  if (!t.training() || p == 0.0) return x;
  const auto& xv = x.value();
  typename Tensor<Scalar>::Array mask(xv.numel());
  const Scalar scale = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask[i] = t.rng().uniform() >= p ? scale : Scalar(0);
  }
  Tensor<Scalar> out = xv;
  out.values *= mask;
  const bool needs = t.node(x.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int xi = x.idx, yi = y.idx;
    t.node(yi).backward = [xi, yi, mask](Tape<Scalar>& tp) {
      tp.grad_of(xi).values += tp.node(yi).grad.values * mask;
    };
  }
  return y;
}

// ---- dense and loss --------------------------------------------------------

// x: [B, F_in]; weights: [F_in, F_out]; bias: [F_out].
template <typename Scalar>
Var<Scalar> dense(Var<Scalar> x, Var<Scalar> weights, Var<Scalar> bias, Activation act) {
  return activate(add_bias(matmul(x, weights), bias), act);
}

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> softmax_rows(
    const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: rank-2 logits required");
  auto m = logits.matrix();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> p(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    p.row(r) = (m.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// Mean over the batch of w_target * (-log softmax(logits)[target]).
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(Var<Scalar> logits, const std::vector<int>& targets,
                                  const std::vector<Scalar>& class_weights) {
  Tape<Scalar>& t = detail::tape_of(logits);
  const auto& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: rank-2 logits required");
  const Eigen::Index b = lv.dim(0), k = lv.dim(1);
  if (static_cast<Eigen::Index>(targets.size()) != b) {
    throw ArgumentError("softmax_cross_entropy: one target per row required");
  }
  if (static_cast<Eigen::Index>(class_weights.size()) != k) {
    throw ArgumentError("softmax_cross_entropy: one weight per class required");
  }
  for (Scalar w : class_weights) {
    if (!(w > Scalar(0))) throw ArgumentError("softmax_cross_entropy: weights must be positive");
  }
  for (int tgt : targets) {
    if (tgt < 0 || tgt >= k) {
      throw ArgumentError("softmax_cross_entropy: target " + std::to_string(tgt) +
                          " outside 0.." + std::to_string(k - 1));
    }
  }
  auto probs = softmax_rows(lv);
  Scalar loss = 0;
  for (Eigen::Index r = 0; r < b; ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    const Scalar p = std::max(probs(r, tgt), std::numeric_limits<Scalar>::min());
    loss -= class_weights[static_cast<std::size_t>(tgt)] * std::log(p);
  }
  loss /= static_cast<Scalar>(b);
  Tensor<Scalar> out({1});
  out.values[0] = loss;
  const bool needs = t.node(logits.idx).needs_grad;
  Var<Scalar> y = t.push(std::move(out), needs, nullptr);
  if (needs) {
    const int li = logits.idx, yi = y.idx;
    t.node(yi).backward = [li, yi, probs, targets, class_weights, b](Tape<Scalar>& tp) {
      const Scalar seed = tp.node(yi).grad.values[0];
      auto gl = tp.grad_of(li).matrix();
      for (Eigen::Index r = 0; r < b; ++r) {
        const int tgt = targets[static_cast<std::size_t>(r)];
        const Scalar w = class_weights[static_cast<std::size_t>(tgt)];
        gl.row(r) += seed * (w / static_cast<Scalar>(b)) * probs.row(r);
        gl(r, tgt) -= seed * (w / static_cast<Scalar>(b));
      }
    };
  }
  return y;
}

}  // namespace acfpipe::nn
