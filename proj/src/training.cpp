#include "acfpipe/training.hpp"

#include <fstream>

#include "acfpipe/csvio.hpp"

namespace acfpipe::training {

void to_json(json& j, const History& h) {
  j = json::object();
  j["best_epoch"] = h.best_epoch;
  j["best_val_loss"] = h.best_val_loss;
  j["early_stopped"] = h.early_stopped;
  auto rows = json::array();
  for (const auto& e : h.epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_uar", e.val_uar},
                    {"learning_rate", e.learning_rate}});
  }
  j["epochs"] = std::move(rows);
}

void from_json(const json& j, History& h) {
  h.best_epoch = j.at("best_epoch").get<int>();
  h.best_val_loss = j.at("best_val_loss").get<double>();
  h.early_stopped = j.at("early_stopped").get<bool>();
  h.epochs.clear();
  for (const auto& row : j.at("epochs")) {
    EpochStats e;
    e.epoch = row.at("epoch").get<int>();
    e.train_loss = row.at("train_loss").get<double>();
    e.val_loss = row.at("val_loss").get<double>();
    e.val_uar = row.at("val_uar").get<double>();
    e.learning_rate = row.at("learning_rate").get<double>();
    h.epochs.push_back(e);
  }
}

void write_history_csv(const std::filesystem::path& path, const History& h) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# best_epoch=" << h.best_epoch << '\n';
  out << "# early_stopped=" << (h.early_stopped ? 1 : 0) << '\n';
  out << "epoch,learning_rate,train_loss,val_loss,val_uar\n";
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << csv::format_double(e.learning_rate, 12) << ','
        << csv::format_double(e.train_loss, 12) << ','
        << csv::format_double(e.val_loss, 12) << ','
        << csv::format_double(e.val_uar, 12) << '\n';
  }
}

std::vector<double> compute_class_weights(const std::array<long, 3>& counts) {
  long total = 0;
  for (int c = 0; c < 3; ++c) {
    if (counts[static_cast<std::size_t>(c)] <= 0) {
      throw ArgumentError("class " + std::to_string(c) + " has no examples");
    }
    total += counts[static_cast<std::size_t>(c)];
  }
  std::vector<double> w(3);
  for (int c = 0; c < 3; ++c) {
    w[static_cast<std::size_t>(c)] =
        static_cast<double>(total) / (3.0 * static_cast<double>(counts[static_cast<std::size_t>(c)]));
  }
  return w;
}

std::vector<double> class_weights_from_labels(const std::vector<int>& labels) {
  std::array<long, 3> counts{};
  for (int c : labels) {
    if (c < 0 || c > 2) throw ArgumentError("label out of range: " + std::to_string(c));
    counts[static_cast<std::size_t>(c)] += 1;
  }
  return compute_class_weights(counts);
}

double lstm_learning_rate(int epoch) {
  if (epoch < 1) throw ArgumentError("epoch is 1-based");
  const double lr = 2e-4 * std::pow(0.5, (epoch - 1) / 10);
  return std::max(lr, 2e-5);
}

History run_epochs(const TrainOptions& opts, const EpochCallbacks& cb) {
  if (opts.max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
  if (opts.patience < 1) throw ArgumentError("patience must be >= 1");
  if (opts.patience >= opts.max_epochs) {
    throw ArgumentError("patience must be smaller than max_epochs");
  }
  if (opts.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!cb.train_epoch || !cb.validate) throw ArgumentError("missing training callbacks");

  History h;
  for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    const double lr =
        opts.lstm_schedule ? lstm_learning_rate(epoch) : opts.learning_rate;
    EpochStats e;
    e.epoch = epoch;
    e.learning_rate = lr;
    e.train_loss = cb.train_epoch(epoch, lr);
    std::tie(e.val_loss, e.val_uar) = cb.validate(epoch);
    h.epochs.push_back(e);

    if (e.val_loss < h.best_val_loss) {
      h.best_val_loss = e.val_loss;
      h.best_epoch = epoch;
      if (cb.snapshot_best) cb.snapshot_best();
    }
    if (opts.on_epoch) opts.on_epoch(e);
    if (epoch - h.best_epoch >= opts.patience) {
      h.early_stopped = true;
      break;
    }
  }
  if (cb.restore_best) cb.restore_best();
  return h;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size,
                                                   bool min_two, Rng& rng) {
  if (n == 0) throw ArgumentError("no samples to batch");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Fisher-Yates from the shared rng so epochs draw distinct shuffles
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i)));
    std::swap(idx[i], idx[j]);
  }

  std::vector<std::vector<std::size_t>> batches;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t at = 0; at < n; at += bs) {
    const auto end = std::min(n, at + bs);
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                         idx.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (min_two && batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  if (min_two && batches.size() == 1 && batches[0].size() == 1) {
    throw ArgumentError("cannot form a batch of at least 2 samples");
  }
  return batches;
}

}  // namespace acfpipe::training
