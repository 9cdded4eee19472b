#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "acfpipe/acf.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/nn/init.hpp"
#include "acfpipe/nn/lstm.hpp"
#include "acfpipe/nn/tape.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::models {

using nlohmann::json;

// ---- configs ----------------------------------------------------------------

// Segment-level dilated CNN over a stack of delayed-correlation vectors.
// Input layout is [channels = M^2, delay bins = D+1, 1].
struct DilatedCnnConfig {
  int input_channels = 64;
  int input_delay_bins = 51;
  int parallel_filters = 16;        // O1, one value per parallel branch
  std::array<int, 4> dilation_rates = {1, 3, 7, 15};
  int parallel_kernel = 15;
  int c5_filters = 16;
  int c5_kernel = 3;
  int c5_stride = 2;
  int c6_filters = 8;               // O2
  int c6_kernel = 4;                // K1 (height; width is always 1)
  int d1_units = 64;
  int d2_units = 16;                // O3
  double dropout = 0.5;             // DP
  int num_classes = 3;

  int bins_after_c5() const { return (input_delay_bins + c5_stride - 1) / c5_stride; }
  int bins_after_c6() const { return bins_after_c5() - c6_kernel + 1; }
  int flatten_width() const { return c6_filters * bins_after_c6(); }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (input_channels < 1) v.push_back("input_channels must be positive");
    if (input_delay_bins < 1) v.push_back("input_delay_bins must be positive");
    if (dilation_rates != std::array<int, 4>{1, 3, 7, 15}) {
      v.push_back("dilation_rates must be {1,3,7,15}");
    }
    if (parallel_filters != 16 && parallel_filters != 32) {
      v.push_back("parallel_filters (O1) must be 16 or 32");
    }
    if (c6_filters != 8 && c6_filters != 16) v.push_back("c6_filters (O2) must be 8 or 16");
    if (c6_kernel != 3 && c6_kernel != 4) v.push_back("c6_kernel (K1) must be 3 or 4");
    if (d2_units != 8 && d2_units != 16) v.push_back("d2_units (O3) must be 8 or 16");
    if (dropout != 0.4 && dropout != 0.5) v.push_back("dropout (DP) must be 0.4 or 0.5");
    if (d1_units < 1) v.push_back("d1_units must be positive");
    if (num_classes != 3) v.push_back("num_classes must be 3");
    if (bins_after_c6() < 1) {
      v.push_back("c6 kernel leaves no delay bins (input too short)");
    }
    return v;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) {
      std::string msg = "invalid dilated CNN config:";
      for (const auto& s : v) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }

  static DilatedCnnConfig tv_preset() {
    DilatedCnnConfig c;
    c.input_channels = 64;  // M = 8
    c.parallel_filters = 16;
    c.c6_filters = 8;
    c.c6_kernel = 4;
    c.d2_units = 16;
    c.dropout = 0.5;
    return c;
  }
  static DilatedCnnConfig mfcc_preset() {
    DilatedCnnConfig c;
    c.input_channels = 144;  // M = 12
    c.parallel_filters = 32;
    c.c6_filters = 16;
    c.c6_kernel = 3;
    c.d2_units = 8;
    c.dropout = 0.5;
    return c;
  }
  static DilatedCnnConfig formant_preset() {
    DilatedCnnConfig c;
    c.input_channels = 9;  // M = 3
    c.parallel_filters = 32;
    c.c6_filters = 8;
    c.c6_kernel = 4;
    c.d2_units = 16;
    c.dropout = 0.4;
    return c;
  }
};

inline void to_json(json& j, const DilatedCnnConfig& c) {
  j = json{{"input_channels", c.input_channels},
           {"input_delay_bins", c.input_delay_bins},
           {"parallel_filters", c.parallel_filters},
           {"dilation_rates", c.dilation_rates},
           {"parallel_kernel", c.parallel_kernel},
           {"c5_filters", c.c5_filters},
           {"c5_kernel", c.c5_kernel},
           {"c5_stride", c.c5_stride},
           {"c6_filters", c.c6_filters},
           {"c6_kernel", c.c6_kernel},
           {"d1_units", c.d1_units},
           {"d2_units", c.d2_units},
           {"dropout", c.dropout},
           {"num_classes", c.num_classes}};
}
inline void from_json(const json& j, DilatedCnnConfig& c) {
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_delay_bins").get_to(c.input_delay_bins);
  j.at("parallel_filters").get_to(c.parallel_filters);
  j.at("dilation_rates").get_to(c.dilation_rates);
  j.at("parallel_kernel").get_to(c.parallel_kernel);
  j.at("c5_filters").get_to(c.c5_filters);
  j.at("c5_kernel").get_to(c.c5_kernel);
  j.at("c5_stride").get_to(c.c5_stride);
  j.at("c6_filters").get_to(c.c6_filters);
  j.at("c6_kernel").get_to(c.c6_kernel);
  j.at("d1_units").get_to(c.d1_units);
  j.at("d2_units").get_to(c.d2_units);
  j.at("dropout").get_to(c.dropout);
  j.at("num_classes").get_to(c.num_classes);
}

// Baseline CNN over a 23-channel acoustic feature block of 1000 frames.
struct BaselineCnnConfig {
  int input_channels = 23;
  int input_frames = 1000;
  int conv1_filters = 256;
  int conv1_kernel = 8;
  int conv2_filters = 128;
  int conv2_kernel = 8;
  int pool = 8;
  double dropout1 = 0.5;
  double dropout2 = 0.7;
  int dense1_units = 64;
  int num_classes = 3;

  int frames_after_pool1() const { return input_frames / pool; }
  int frames_after_pool2() const { return frames_after_pool1() / pool; }
  int flatten_width() const { return conv2_filters * frames_after_pool2(); }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    const std::pair<int, const char*> positives[] = {
        {input_channels, "input_channels"}, {input_frames, "input_frames"},
        {conv1_filters, "conv1_filters"},   {conv1_kernel, "conv1_kernel"},
        {conv2_filters, "conv2_filters"},   {conv2_kernel, "conv2_kernel"},
        {pool, "pool"},                     {dense1_units, "dense1_units"}};
    for (auto [val, name] : positives) {
      if (val < 1) v.push_back(std::string(name) + " must be positive");
    }
    if (dropout1 < 0 || dropout1 >= 1) v.push_back("dropout1 must be in [0,1)");
    if (dropout2 < 0 || dropout2 >= 1) v.push_back("dropout2 must be in [0,1)");
    if (num_classes != 3) v.push_back("num_classes must be 3");
    if (frames_after_pool2() < 1) v.push_back("pooling leaves no frames");
    return v;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) {
      std::string msg = "invalid baseline CNN config:";
      for (const auto& s : v) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }
};

inline void to_json(json& j, const BaselineCnnConfig& c) {
  j = json{{"input_channels", c.input_channels}, {"input_frames", c.input_frames},
           {"conv1_filters", c.conv1_filters},   {"conv1_kernel", c.conv1_kernel},
           {"conv2_filters", c.conv2_filters},   {"conv2_kernel", c.conv2_kernel},
           {"pool", c.pool},                     {"dropout1", c.dropout1},
           {"dropout2", c.dropout2},             {"dense1_units", c.dense1_units},
           {"num_classes", c.num_classes}};
}
inline void from_json(const json& j, BaselineCnnConfig& c) {
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_frames").get_to(c.input_frames);
  j.at("conv1_filters").get_to(c.conv1_filters);
  j.at("conv1_kernel").get_to(c.conv1_kernel);
  j.at("conv2_filters").get_to(c.conv2_filters);
  j.at("conv2_kernel").get_to(c.conv2_kernel);
  j.at("pool").get_to(c.pool);
  j.at("dropout1").get_to(c.dropout1);
  j.at("dropout2").get_to(c.dropout2);
  j.at("dense1_units").get_to(c.dense1_units);
  j.at("num_classes").get_to(c.num_classes);
}

// Session-level LSTM over ordered segment embeddings.
struct SessionLstmConfig {
  int input_size = 64;  // d1_units of the upstream CNN
  int lstm1_units = 64;
  int lstm2_units = 64;
  double recurrent_dropout1 = 0.4;
  double recurrent_dropout2 = 0.3;
  int d3_units = 32;
  int num_classes = 3;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (input_size < 1) v.push_back("input_size must be positive");
    if (lstm1_units < 1) v.push_back("lstm1_units must be positive");
    if (lstm2_units < 1) v.push_back("lstm2_units must be positive");
    if (d3_units < 1) v.push_back("d3_units must be positive");
    if (recurrent_dropout1 < 0 || recurrent_dropout1 >= 1) {
      v.push_back("recurrent_dropout1 must be in [0,1)");
    }
    if (recurrent_dropout2 < 0 || recurrent_dropout2 >= 1) {
      v.push_back("recurrent_dropout2 must be in [0,1)");
    }
    if (num_classes != 3) v.push_back("num_classes must be 3");
    return v;
  }
  void validate() const {
    const auto v = violations();
    if (!v.empty()) {
      std::string msg = "invalid session LSTM config:";
      for (const auto& s : v) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
  }

  static SessionLstmConfig tv_preset(int input_size = 64) {
    return SessionLstmConfig{input_size, 64, 64, 0.4, 0.3, 32, 3};
  }
  static SessionLstmConfig mfcc_preset(int input_size = 64) {
    return SessionLstmConfig{input_size, 128, 64, 0.6, 0.4, 64, 3};
  }
  static SessionLstmConfig formant_preset(int input_size = 64) {
    return SessionLstmConfig{input_size, 128, 64, 0.7, 0.7, 16, 3};
  }
};

inline void to_json(json& j, const SessionLstmConfig& c) {
  j = json{{"input_size", c.input_size},
           {"lstm1_units", c.lstm1_units},
           {"lstm2_units", c.lstm2_units},
           {"recurrent_dropout1", c.recurrent_dropout1},
           {"recurrent_dropout2", c.recurrent_dropout2},
           {"d3_units", c.d3_units},
           {"num_classes", c.num_classes}};
}
inline void from_json(const json& j, SessionLstmConfig& c) {
  j.at("input_size").get_to(c.input_size);
  j.at("lstm1_units").get_to(c.lstm1_units);
  j.at("lstm2_units").get_to(c.lstm2_units);
  j.at("recurrent_dropout1").get_to(c.recurrent_dropout1);
  j.at("recurrent_dropout2").get_to(c.recurrent_dropout2);
  j.at("d3_units").get_to(c.d3_units);
  j.at("num_classes").get_to(c.num_classes);
}

// ---- models ------------------------------------------------------------------

struct SegmentPrediction {
  Eigen::Vector3d probabilities = Eigen::Vector3d::Zero();
  int predicted = 0;
  double confidence = 0.0;
  Eigen::VectorXd embedding;
};

template <typename Scalar>
struct SegmentForward {
  nn::Var<Scalar> logits;
  nn::Var<Scalar> embedding;  // D1 activations
};

namespace detail {

template <typename Scalar>
struct ConvBlock {
  nn::Parameter<Scalar> k, b, gamma, beta;
  nn::BatchNormState<Scalar> bn;

  ConvBlock() = default;
  ConvBlock(const std::string& name, int c_out, int c_in, int kh, Rng& rng)
      : k(name + ".k", {c_out, c_in, kh, 1}),
        b(name + ".b", {c_out}),
        gamma(name + ".gamma", {c_out}),
        beta(name + ".beta", {c_out}),
        bn(c_out) {
    nn::he_uniform_init(k.value, static_cast<Eigen::Index>(c_in) * kh, rng);
    gamma.value.values.setOnes();
  }

  void collect(std::vector<nn::Parameter<Scalar>*>& out) {
    out.push_back(&k);
    out.push_back(&b);
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

}  // namespace detail

template <typename Scalar>
class DilatedCnn {
 public:
  DilatedCnnConfig cfg;

  DilatedCnn(const DilatedCnnConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(mix_seed(seed, "dilated_cnn"));
    for (int i = 0; i < 4; ++i) {
      parallel_[static_cast<std::size_t>(i)] = detail::ConvBlock<Scalar>(
          "c" + std::to_string(i + 1), cfg.parallel_filters, cfg.input_channels,
          cfg.parallel_kernel, rng);
    }
    c5_ = detail::ConvBlock<Scalar>("c5", cfg.c5_filters, 4 * cfg.parallel_filters,
                                    cfg.c5_kernel, rng);
    c6_ = detail::ConvBlock<Scalar>("c6", cfg.c6_filters, cfg.c5_filters, cfg.c6_kernel, rng);
    const int flat = cfg.flatten_width();
    d1_w_ = nn::Parameter<Scalar>("d1.w", {flat, cfg.d1_units}, Scalar(0.01));
    d1_b_ = nn::Parameter<Scalar>("d1.b", {cfg.d1_units});
    d2_w_ = nn::Parameter<Scalar>("d2.w", {cfg.d1_units, cfg.d2_units}, Scalar(0.01));
    d2_b_ = nn::Parameter<Scalar>("d2.b", {cfg.d2_units});
    out_w_ = nn::Parameter<Scalar>("out.w", {cfg.d2_units, cfg.num_classes});
    out_b_ = nn::Parameter<Scalar>("out.b", {cfg.num_classes});
    nn::he_uniform_init(d1_w_.value, flat, rng);
    nn::he_uniform_init(d2_w_.value, cfg.d1_units, rng);
    nn::glorot_uniform_init(out_w_.value, cfg.d2_units, cfg.num_classes, rng);
  }

  // x: [B, M^2, D+1, 1]
  SegmentForward<Scalar> forward(nn::Tape<Scalar>& tape, nn::Var<Scalar> x) {
    const auto& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != cfg.input_channels ||
        xv.dim(2) != cfg.input_delay_bins || xv.dim(3) != 1) {
      throw ShapeError("dilated CNN expects [B," + std::to_string(cfg.input_channels) + "," +
                       std::to_string(cfg.input_delay_bins) + ",1], got " + xv.shape_string());
    }
    std::vector<nn::Var<Scalar>> branches;
    for (std::size_t i = 0; i < 4; ++i) {
      auto& blk = parallel_[i];
      auto y = nn::conv2d(x, tape.param(blk.k), tape.param(blk.b),
                          {.stride_h = 1,
                           .dilation_h = cfg.dilation_rates[i],
                           .padding = nn::Padding::Same});
      y = nn::leaky_relu(nn::batch_norm(y, tape.param(blk.gamma), tape.param(blk.beta), blk.bn));
      branches.push_back(y);
    }
    auto y = nn::concat_channels(branches);
    y = nn::conv2d(y, tape.param(c5_.k), tape.param(c5_.b),
                   {.stride_h = cfg.c5_stride, .padding = nn::Padding::Same});
    y = nn::leaky_relu(nn::batch_norm(y, tape.param(c5_.gamma), tape.param(c5_.beta), c5_.bn));
    y = nn::conv2d(y, tape.param(c6_.k), tape.param(c6_.b), {.padding = nn::Padding::Valid});
    y = nn::leaky_relu(nn::batch_norm(y, tape.param(c6_.gamma), tape.param(c6_.beta), c6_.bn));
    auto d1 = nn::dense(nn::flatten(y), tape.param(d1_w_), tape.param(d1_b_),
                        nn::Activation::ReLU);
    auto d = nn::dropout(d1, cfg.dropout);
    d = nn::dense(d, tape.param(d2_w_), tape.param(d2_b_), nn::Activation::ReLU);
    d = nn::dropout(d, cfg.dropout);
    auto logits = nn::dense(d, tape.param(out_w_), tape.param(out_b_), nn::Activation::None);
    return {logits, d1};
  }

  std::vector<nn::Parameter<Scalar>*> parameters() {
    std::vector<nn::Parameter<Scalar>*> out;
    for (auto& blk : parallel_) blk.collect(out);
    c5_.collect(out);
    c6_.collect(out);
    for (auto* p : {&d1_w_, &d1_b_, &d2_w_, &d2_b_, &out_w_, &out_b_}) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, nn::BatchNormState<Scalar>*>> bn_states() {
    std::vector<std::pair<std::string, nn::BatchNormState<Scalar>*>> out;
    for (std::size_t i = 0; i < 4; ++i) {
      out.emplace_back("c" + std::to_string(i + 1), &parallel_[i].bn);
    }
    out.emplace_back("c5", &c5_.bn);
    out.emplace_back("c6", &c6_.bn);
    return out;
  }

 private:
  std::array<detail::ConvBlock<Scalar>, 4> parallel_;
  detail::ConvBlock<Scalar> c5_, c6_;
  nn::Parameter<Scalar> d1_w_, d1_b_, d2_w_, d2_b_, out_w_, out_b_;
};

template <typename Scalar>
class BaselineCnn {
 public:
  BaselineCnnConfig cfg;

  BaselineCnn(const BaselineCnnConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(mix_seed(seed, "baseline_cnn"));
    conv1_ = detail::ConvBlock<Scalar>("conv1", cfg.conv1_filters, cfg.input_channels,
                                       cfg.conv1_kernel, rng);
    conv2_ = detail::ConvBlock<Scalar>("conv2", cfg.conv2_filters, cfg.conv1_filters,
                                       cfg.conv2_kernel, rng);
    const int flat = cfg.flatten_width();
    d1_w_ = nn::Parameter<Scalar>("dense1.w", {flat, cfg.dense1_units}, Scalar(0.01));
    d1_b_ = nn::Parameter<Scalar>("dense1.b", {cfg.dense1_units});
    out_w_ = nn::Parameter<Scalar>("out.w", {cfg.dense1_units, cfg.num_classes});
    out_b_ = nn::Parameter<Scalar>("out.b", {cfg.num_classes});
    nn::he_uniform_init(d1_w_.value, flat, rng);
    nn::glorot_uniform_init(out_w_.value, cfg.dense1_units, cfg.num_classes, rng);
  }

  // x: [B, 23, 1000, 1]
  SegmentForward<Scalar> forward(nn::Tape<Scalar>& tape, nn::Var<Scalar> x) {
    const auto& xv = x.value();
    if (xv.rank() != 4 || xv.dim(1) != cfg.input_channels || xv.dim(2) != cfg.input_frames ||
        xv.dim(3) != 1) {
      throw ShapeError("baseline CNN expects [B," + std::to_string(cfg.input_channels) + "," +
                       std::to_string(cfg.input_frames) + ",1], got " + xv.shape_string());
    }
    auto y = nn::conv2d(x, tape.param(conv1_.k), tape.param(conv1_.b),
                        {.padding = nn::Padding::Same});
    y = nn::leaky_relu(
        nn::batch_norm(y, tape.param(conv1_.gamma), tape.param(conv1_.beta), conv1_.bn));
    y = nn::dropout(y, cfg.dropout1);
    y = nn::max_pool(y, cfg.pool, 1);
    y = nn::conv2d(y, tape.param(conv2_.k), tape.param(conv2_.b),
                   {.padding = nn::Padding::Same});
    y = nn::leaky_relu(
        nn::batch_norm(y, tape.param(conv2_.gamma), tape.param(conv2_.beta), conv2_.bn));
    y = nn::dropout(y, cfg.dropout2);
    y = nn::max_pool(y, cfg.pool, 1);
    auto d1 = nn::dense(nn::flatten(y), tape.param(d1_w_), tape.param(d1_b_),
                        nn::Activation::ReLU);
    auto logits = nn::dense(d1, tape.param(out_w_), tape.param(out_b_), nn::Activation::None);
    return {logits, d1};
  }

  std::vector<nn::Parameter<Scalar>*> parameters() {
    std::vector<nn::Parameter<Scalar>*> out;
    conv1_.collect(out);
    conv2_.collect(out);
    for (auto* p : {&d1_w_, &d1_b_, &out_w_, &out_b_}) out.push_back(p);
    return out;
  }

  std::vector<std::pair<std::string, nn::BatchNormState<Scalar>*>> bn_states() {
    return {{"conv1", &conv1_.bn}, {"conv2", &conv2_.bn}};
  }

 private:
  detail::ConvBlock<Scalar> conv1_, conv2_;
  nn::Parameter<Scalar> d1_w_, d1_b_, out_w_, out_b_;
};

template <typename Scalar>
class SessionLstm {
 public:
  SessionLstmConfig cfg;

  SessionLstm(const SessionLstmConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(mix_seed(seed, "session_lstm"));
    lstm1_ = nn::LstmLayer<Scalar>("lstm1", cfg.input_size, cfg.lstm1_units,
                                   cfg.recurrent_dropout1);
    lstm2_ = nn::LstmLayer<Scalar>("lstm2", cfg.lstm1_units, cfg.lstm2_units,
                                   cfg.recurrent_dropout2);
    nn::glorot_uniform_init(lstm1_.w.value, cfg.input_size, 4 * cfg.lstm1_units, rng);
    nn::uniform_init(lstm1_.r.value, std::sqrt(1.0 / cfg.lstm1_units), rng);
    nn::glorot_uniform_init(lstm2_.w.value, cfg.lstm1_units, 4 * cfg.lstm2_units, rng);
    nn::uniform_init(lstm2_.r.value, std::sqrt(1.0 / cfg.lstm2_units), rng);
    d3_w_ = nn::Parameter<Scalar>("d3.w", {cfg.lstm2_units, cfg.d3_units});
    d3_b_ = nn::Parameter<Scalar>("d3.b", {cfg.d3_units});
    out_w_ = nn::Parameter<Scalar>("out.w", {cfg.d3_units, cfg.num_classes});
    out_b_ = nn::Parameter<Scalar>("out.b", {cfg.num_classes});
    nn::he_uniform_init(d3_w_.value, cfg.lstm2_units, rng);
    nn::glorot_uniform_init(out_w_.value, cfg.d3_units, cfg.num_classes, rng);
  }

  // xs: one [B, input_size] tensor per timestep; mask rows flag live samples.
  // Returns logits [B, 3].
  nn::Var<Scalar> forward(nn::Tape<Scalar>& tape, const std::vector<nn::Var<Scalar>>& xs,
                          const std::vector<std::vector<Scalar>>& step_mask) {
    if (xs.empty()) throw ArgumentError("session LSTM: empty sequence");
    if (xs[0].value().dim(1) != cfg.input_size) {
      throw ShapeError("session LSTM expects embeddings of width " +
                       std::to_string(cfg.input_size) + ", got " +
                       std::to_string(xs[0].value().dim(1)));
    }
    auto seq = nn::lstm_forward(tape, lstm1_, xs, step_mask);
    auto states = nn::lstm_forward(tape, lstm2_, seq, step_mask);
    auto d3 = nn::dense(states.back(), tape.param(d3_w_), tape.param(d3_b_),
                        nn::Activation::ReLU);
    return nn::dense(d3, tape.param(out_w_), tape.param(out_b_), nn::Activation::None);
  }

  std::vector<nn::Parameter<Scalar>*> parameters() {
    std::vector<nn::Parameter<Scalar>*> out;
    for (auto* p : lstm1_.parameters()) out.push_back(p);
    for (auto* p : lstm2_.parameters()) out.push_back(p);
    for (auto* p : {&d3_w_, &d3_b_, &out_w_, &out_b_}) out.push_back(p);
    return out;
  }

 private:
  nn::LstmLayer<Scalar> lstm1_, lstm2_;
  nn::Parameter<Scalar> d3_w_, d3_b_, out_w_, out_b_;
};

// ---- shared helpers ----------------------------------------------------------

template <typename Model>
Eigen::Index parameter_count(Model& model) {
  Eigen::Index n = 0;
  for (auto* p : model.parameters()) n += p->value.numel();
  return n;
}

// [1, channels, bins, 1] tensor from one ACF matrix.
template <typename Scalar>
nn::Tensor<Scalar> acf_to_tensor(const acf::AcfMatrix& m) {
  nn::Tensor<Scalar> t({1, m.values.rows(), m.values.cols(), 1});
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
      t.values[r * m.values.cols() + c] = static_cast<Scalar>(m.values(r, c));
    }
  }
  return t;
}

template <typename Scalar>
SegmentPrediction prediction_from(const nn::Tensor<Scalar>& logits,
                                  const nn::Tensor<Scalar>& embedding, Eigen::Index row) {
  auto probs = nn::softmax_rows(logits);
  SegmentPrediction pred;
  for (int k = 0; k < 3; ++k) pred.probabilities[k] = static_cast<double>(probs(row, k));
  Eigen::Index arg;
  pred.confidence = pred.probabilities.maxCoeff(&arg);
  pred.predicted = static_cast<int>(arg);
  pred.embedding.resize(embedding.dim(1));
  for (Eigen::Index c = 0; c < embedding.dim(1); ++c) {
    pred.embedding[c] = static_cast<double>(embedding.matrix()(row, c));
  }
  return pred;
}

// Eval-mode forward of a single standardized ACF matrix.
template <typename Scalar, typename Model>
SegmentPrediction forward_segment(Model& model, const acf::AcfMatrix& m) {
  nn::Tape<Scalar> tape(0, false);
  auto out = model.forward(tape, tape.input(acf_to_tensor<Scalar>(m)));
  return prediction_from<Scalar>(out.logits.value(), out.embedding.value(), 0);
}

// Eval-mode forward of one session's ordered embeddings.
template <typename Scalar>
Eigen::Vector3d forward_session(SessionLstm<Scalar>& model,
                                const std::vector<Eigen::VectorXd>& embeddings) {
  if (embeddings.empty()) throw ArgumentError("forward_session: empty sequence");
  nn::Tape<Scalar> tape(0, false);
  std::vector<nn::Var<Scalar>> xs;
  std::vector<std::vector<Scalar>> mask;
  for (const auto& e : embeddings) {
    nn::Tensor<Scalar> t({1, e.size()});
    for (Eigen::Index i = 0; i < e.size(); ++i) t.values[i] = static_cast<Scalar>(e[i]);
    xs.push_back(tape.input(std::move(t)));
    mask.push_back({Scalar(1)});
  }
  auto logits = model.forward(tape, xs, mask);
  auto probs = nn::softmax_rows(logits.value());
  return Eigen::Vector3d(static_cast<double>(probs(0, 0)), static_cast<double>(probs(0, 1)),
                         static_cast<double>(probs(0, 2)));
}

}  // namespace acfpipe::models
