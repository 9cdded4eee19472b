#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "acfpipe/acf.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/evaluation.hpp"
#include "acfpipe/models.hpp"
#include "acfpipe/nn/optim.hpp"
#include "acfpipe/nn/tape.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::training {

using nlohmann::json;

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_uar = 0.0;
  double learning_rate = 0.0;
};

struct History {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // 1-based epoch with the lowest validation loss
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

void to_json(json& j, const History& h);
void from_json(const json& j, History& h);
void write_history_csv(const std::filesystem::path& path, const History& h);

// w_c = N / (3 * N_c); a class with no examples is an error.
std::vector<double> compute_class_weights(const std::array<long, 3>& counts);
std::vector<double> class_weights_from_labels(const std::vector<int>& labels);

// 2e-4 halved every 10 epochs, clamped below at 2e-5. epoch is 1-based.
double lstm_learning_rate(int epoch);

struct TrainOptions {
  double learning_rate = 2e-5;  // fixed rate; ignored when lstm_schedule is set
  bool lstm_schedule = false;
  int max_epochs = 300;
  int patience = 15;
  int batch_size = 128;
  std::uint64_t seed = 0;
  std::vector<double> class_weights;  // empty: derived from training labels
  std::function<void(const EpochStats&)> on_epoch;  // optional progress hook
};

struct EpochCallbacks {
  std::function<double(int epoch, double lr)> train_epoch;              // returns loss
  std::function<std::pair<double, double>(int epoch)> validate;         // loss, UAR
  std::function<void()> snapshot_best;
  std::function<void()> restore_best;
};

// Epoch loop shared by all trainers: per-epoch lr, early stopping on
// validation loss (patience epochs without strict improvement), best-epoch
// parameter restoration via the callbacks.
History run_epochs(const TrainOptions& opts, const EpochCallbacks& cb);

// ---- datasets --------------------------------------------------------------

struct LabeledMatrices {
  std::vector<acf::AcfMatrix> x;
  std::vector<int> y;
};

struct LabeledSequences {
  std::vector<std::vector<Eigen::VectorXd>> x;
  std::vector<int> y;
};

// Deterministic epoch batching: shuffled index partition in chunks of
// batch_size; a trailing single-sample batch is folded into its predecessor
// when `min_two` is set (batch statistics need two samples).
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                   bool min_two, Rng& rng);

namespace detail {

template <typename Scalar>
nn::Tensor<Scalar> acf_batch(const std::vector<acf::AcfMatrix>& xs,
                             const std::vector<std::size_t>& idx) {
  const auto rows = xs[idx[0]].values.rows();
  const auto cols = xs[idx[0]].values.cols();
  nn::Tensor<Scalar> t({static_cast<Eigen::Index>(idx.size()), rows, cols, 1});
  Eigen::Index at = 0;
  for (auto i : idx) {
    const auto& m = xs[i].values;
    if (m.rows() != rows || m.cols() != cols) {
      throw ShapeError("segment matrices disagree in shape");
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        t.values[at++] = static_cast<Scalar>(m(r, c));
      }
    }
  }
  return t;
}

template <typename Scalar>
std::vector<Scalar> to_scalar(const std::vector<double>& v) {
  std::vector<Scalar> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(),
                 [](double x) { return static_cast<Scalar>(x); });
  return out;
}

template <typename Scalar, typename Model>
class BestSnapshot {
 public:
  explicit BestSnapshot(Model& model) : model_(model) {}

  void take() {
    params_.clear();
    for (auto* p : model_.parameters()) params_.push_back(p->value);
    bn_.clear();
    for (auto& [name, s] : model_.bn_states()) {
      bn_.emplace_back(s->running_mean, s->running_var);
    }
    taken_ = true;
  }

  void restore() {
    if (!taken_) return;
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = params_[i];
    auto bn = model_.bn_states();
    for (std::size_t i = 0; i < bn.size(); ++i) {
      bn[i].second->running_mean = bn_[i].first;
      bn[i].second->running_var = bn_[i].second;
    }
  }

 private:
  Model& model_;
  std::vector<nn::Tensor<Scalar>> params_;
  std::vector<std::pair<nn::Tensor<Scalar>, nn::Tensor<Scalar>>> bn_;
  bool taken_ = false;
};

// the LSTM has no batch-norm state; specialize the snapshot on parameters only
template <typename Scalar>
class BestSnapshot<Scalar, models::SessionLstm<Scalar>> {
 public:
  explicit BestSnapshot(models::SessionLstm<Scalar>& model) : model_(model) {}

  void take() {
    params_.clear();
    for (auto* p : model_.parameters()) params_.push_back(p->value);
    taken_ = true;
  }

  void restore() {
    if (!taken_) return;
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = params_[i];
  }

 private:
  models::SessionLstm<Scalar>& model_;
  std::vector<nn::Tensor<Scalar>> params_;
  bool taken_ = false;
};

inline std::uint64_t batch_salt(int epoch, int batch_no) {
  return static_cast<std::uint64_t>(epoch) * 1000003u + static_cast<std::uint64_t>(batch_no);
}

inline void check_dataset(std::size_t nx, std::size_t ny, const char* what) {
  if (nx == 0) throw ArgumentError(std::string(what) + " set is empty");
  if (nx != ny) throw ArgumentError(std::string(what) + " labels do not match inputs");
}

inline void check_labels(const std::vector<int>& y, const char* what) {
  for (int c : y) {
    if (c < 0 || c > 2) {
      throw ArgumentError(std::string(what) + " label out of range: " + std::to_string(c));
    }
  }
}

}  // namespace detail

// ---- segment-level models (dilated CNN, baseline CNN) -----------------------

template <typename Scalar, typename Model>
History fit_segment_model(Model& model, const LabeledMatrices& train,
                          const LabeledMatrices& val, const TrainOptions& opts) {
  detail::check_dataset(train.x.size(), train.y.size(), "training");
  detail::check_dataset(val.x.size(), val.y.size(), "validation");
  detail::check_labels(train.y, "training");
  detail::check_labels(val.y, "validation");
  if (train.x.size() < 2) {
    throw ArgumentError("segment training needs at least 2 segments for batch statistics");
  }

  const std::vector<double> weights =
      opts.class_weights.empty() ? class_weights_from_labels(train.y) : opts.class_weights;
  const auto w = detail::to_scalar<Scalar>(weights);

  auto params = model.parameters();
  nn::AdamState<Scalar> adam;
  Rng shuffle_rng(mix_seed(opts.seed, "shuffle"));
  detail::BestSnapshot<Scalar, Model> best(model);

  std::vector<std::vector<std::size_t>> val_batches;
  {
    Rng null_rng(0);
    // validation runs in eval mode: fixed order, no minimum batch size
    std::vector<std::size_t> idx(val.x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t at = 0; at < idx.size(); at += static_cast<std::size_t>(opts.batch_size)) {
      const auto end = std::min(idx.size(), at + static_cast<std::size_t>(opts.batch_size));
      val_batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                               idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }

  EpochCallbacks cb;
  cb.train_epoch = [&](int epoch, double lr) {
    const auto batches =
        make_batches(train.x.size(), opts.batch_size, /*min_two=*/true, shuffle_rng);
    double loss_sum = 0.0;
    int batch_no = 0;
    for (const auto& idx : batches) {
      for (auto* p : params) p->zero_grad();
      nn::Tape<Scalar> tape(mix_seed(opts.seed, "batch", detail::batch_salt(epoch, batch_no++)),
                            true);
      auto out = model.forward(tape, tape.input(detail::acf_batch<Scalar>(train.x, idx)));
      std::vector<int> targets;
      targets.reserve(idx.size());
      for (auto i : idx) targets.push_back(train.y[i]);
      auto loss = nn::softmax_cross_entropy(out.logits, targets, w);
      tape.backward(loss);
      nn::adam_step(params, adam, static_cast<Scalar>(lr));
      loss_sum += static_cast<double>(loss.value().values[0]) * static_cast<double>(idx.size());
    }
    return loss_sum / static_cast<double>(train.x.size());
  };
  cb.validate = [&](int) {
    double loss_sum = 0.0;
    std::vector<int> pred;
    pred.reserve(val.x.size());
    for (const auto& idx : val_batches) {
      nn::Tape<Scalar> tape(0, false);
      auto out = model.forward(tape, tape.input(detail::acf_batch<Scalar>(val.x, idx)));
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(val.y[i]);
      auto loss = nn::softmax_cross_entropy(out.logits, targets, w);
      loss_sum += static_cast<double>(loss.value().values[0]) * static_cast<double>(idx.size());
      const auto probs = nn::softmax_rows(out.logits.value());
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        Eigen::Index arg;
        probs.row(r).maxCoeff(&arg);
        pred.push_back(static_cast<int>(arg));
      }
    }
    const auto m = eval::metrics(eval::confusion(val.y, pred));
    return std::make_pair(loss_sum / static_cast<double>(val.x.size()), m.uar);
  };
  cb.snapshot_best = [&] { best.take(); };
  cb.restore_best = [&] { best.restore(); };

  return run_epochs(opts, cb);
}

// ---- session-level model (stacked LSTM over embedding sequences) ------------

template <typename Scalar>
History fit_session_model(models::SessionLstm<Scalar>& model, const LabeledSequences& train,
                          const LabeledSequences& val, const TrainOptions& opts) {
  detail::check_dataset(train.x.size(), train.y.size(), "training");
  detail::check_dataset(val.x.size(), val.y.size(), "validation");
  detail::check_labels(train.y, "training");
  detail::check_labels(val.y, "validation");
  for (const auto& seq : train.x) {
    if (seq.empty()) throw ArgumentError("training session has no embeddings");
  }
  for (const auto& seq : val.x) {
    if (seq.empty()) throw ArgumentError("validation session has no embeddings");
  }

  const std::vector<double> weights =
      opts.class_weights.empty() ? class_weights_from_labels(train.y) : opts.class_weights;
  const auto w = detail::to_scalar<Scalar>(weights);
  const int width = model.cfg.input_size;

  auto params = model.parameters();
  nn::AdamState<Scalar> adam;
  Rng shuffle_rng(mix_seed(opts.seed, "shuffle"));
  detail::BestSnapshot<Scalar, models::SessionLstm<Scalar>> best(model);

  // pads a batch of sequences to its longest member; mask rows flag live steps
  auto run_batch = [&](nn::Tape<Scalar>& tape, const LabeledSequences& data,
                       const std::vector<std::size_t>& idx) {
    std::size_t max_len = 0;
    for (auto i : idx) max_len = std::max(max_len, data.x[i].size());
    const auto b = static_cast<Eigen::Index>(idx.size());

    std::vector<nn::Var<Scalar>> xs;
    std::vector<std::vector<Scalar>> mask(max_len, std::vector<Scalar>(idx.size(), 0));
    for (std::size_t t = 0; t < max_len; ++t) {
      nn::Tensor<Scalar> step({b, width});
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& seq = data.x[idx[k]];
        if (t < seq.size()) {
          if (seq[t].size() != width) {
            throw ShapeError("embedding width " + std::to_string(seq[t].size()) +
                             " does not match LSTM input size " + std::to_string(width));
          }
          for (int f = 0; f < width; ++f) {
            step.values[static_cast<Eigen::Index>(k) * width + f] =
                static_cast<Scalar>(seq[t][f]);
          }
          mask[t][k] = 1;
        }
      }
      xs.push_back(tape.input(std::move(step)));
    }
    return model.forward(tape, xs, mask);
  };

  EpochCallbacks cb;
  cb.train_epoch = [&](int epoch, double lr) {
    const auto batches =
        make_batches(train.x.size(), opts.batch_size, /*min_two=*/false, shuffle_rng);
    double loss_sum = 0.0;
    int batch_no = 0;
    for (const auto& idx : batches) {
      for (auto* p : params) p->zero_grad();
      nn::Tape<Scalar> tape(mix_seed(opts.seed, "batch", detail::batch_salt(epoch, batch_no++)),
                            true);
      auto logits = run_batch(tape, train, idx);
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(train.y[i]);
      auto loss = nn::softmax_cross_entropy(logits, targets, w);
      tape.backward(loss);
      nn::adam_step(params, adam, static_cast<Scalar>(lr));
      loss_sum += static_cast<double>(loss.value().values[0]) * static_cast<double>(idx.size());
    }
    return loss_sum / static_cast<double>(train.x.size());
  };
  cb.validate = [&](int) {
    double loss_sum = 0.0;
    std::vector<int> pred;
    std::size_t at = 0;
    while (at < val.x.size()) {
      const auto end = std::min(val.x.size(), at + static_cast<std::size_t>(opts.batch_size));
      std::vector<std::size_t> idx;
      for (std::size_t i = at; i < end; ++i) idx.push_back(i);
      at = end;

      nn::Tape<Scalar> tape(0, false);
      auto logits = run_batch(tape, val, idx);
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(val.y[i]);
      auto loss = nn::softmax_cross_entropy(logits, targets, w);
      loss_sum += static_cast<double>(loss.value().values[0]) * static_cast<double>(idx.size());
      const auto probs = nn::softmax_rows(logits.value());
      for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        Eigen::Index arg;
        probs.row(r).maxCoeff(&arg);
        pred.push_back(static_cast<int>(arg));
      }
    }
    const auto m = eval::metrics(eval::confusion(val.y, pred));
    return std::make_pair(loss_sum / static_cast<double>(val.x.size()), m.uar);
  };
  cb.snapshot_best = [&] { best.take(); };
  cb.restore_best = [&] { best.restore(); };

  TrainOptions lstm_opts = opts;
  lstm_opts.lstm_schedule = true;
  return run_epochs(lstm_opts, cb);
}

// Eval-mode embeddings for one session's segments, in segment order.
template <typename Scalar, typename Model>
std::vector<Eigen::VectorXd> session_embeddings(Model& model,
                                                const std::vector<acf::AcfMatrix>& segments) {
  std::vector<Eigen::VectorXd> out;
  out.reserve(segments.size());
  for (const auto& m : segments) {
    out.push_back(models::forward_segment<Scalar>(model, m).embedding);
  }
  return out;
}

}  // namespace acfpipe::training
