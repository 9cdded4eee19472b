// Release gate: every criterion prints one [PASS]/[FAIL] line; the process
// exits nonzero if any fail. `--only <k>` runs a single criterion.
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "acfpipe/acf.hpp"
#include "acfpipe/corpus.hpp"
#include "acfpipe/csvio.hpp"
#include "acfpipe/dsp.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/evaluation.hpp"
#include "acfpipe/models.hpp"
#include "acfpipe/pipeline.hpp"
#include "acfpipe/rng.hpp"
#include "acfpipe/synth.hpp"
#include "acfpipe/training.hpp"

using namespace acfpipe;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream note;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (note.tellp() > 0) note << "; ";
      note << what;
    }
  }
};

// ---- 1: delayed-correlation matrices vs a naive oracle ------------------------

bool criterion_acf_oracle(std::ostream& out) {
  Rng rng(2026);
  double worst_rel = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = static_cast<int>(rng.uniform_int(1, 4));
    const int d = static_cast<int>(rng.uniform_int(1, 10));
    const int n = static_cast<int>(rng.uniform_int(d + 2 > 12 ? d + 2 : 12, 100));

    dsp::ChannelSeries cs;
    cs.frame_rate_hz = 100.0;
    cs.data.resize(m, n);
    for (int i = 0; i < m; ++i) {
      for (int t = 0; t < n; ++t) cs.data(i, t) = rng.normal();
    }
    cs = dsp::standardize_channels(cs);

    std::vector<std::string> warnings;
    const acf::AcfMatrix got = acf::acf_matrix(cs, d, &warnings);
    if (got.values.rows() != m * m || got.values.cols() != d + 1) {
      out << "case " << trial << ": shape " << got.values.rows() << "x" << got.values.cols()
          << " instead of " << m * m << "x" << d + 1;
      return false;
    }

    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j) {
        for (int dd = 0; dd <= d; ++dd) {
          double sum = 0.0;
          for (int t = 0; t + dd < n; ++t) sum += cs.data(i, t) * cs.data(j, t + dd);
          const double want = sum / (n - dd);
          const double have = got.values(i * m + j, dd);
          const double scale = std::max(std::abs(want), std::abs(have));
          const double rel = scale > 0.0 ? std::abs(want - have) / scale : 0.0;
          worst_rel = std::max(worst_rel, rel);
        }
      }
    }
  }
  out << "100 cases, worst relative error " << worst_rel;
  return worst_rel < 1e-12;
}

// ---- 2: finite-difference gradient checks -------------------------------------

bool criterion_gradients(std::ostream& out) {
  std::ostringstream lines;
  const int failures = pipeline::run_gradcheck(lines);
  if (failures > 0) {
    out << failures << " failing check(s):\n" << lines.str();
    return false;
  }
  int count = 0;
  for (char c : lines.str()) count += c == '\n';
  out << count << " checks under tolerance";
  return true;
}

// ---- 3: documented configurations build and forward ---------------------------

bool criterion_shapes(std::ostream& out) {
  Check c;

  const auto tv = models::DilatedCnnConfig::tv_preset();
  const auto mfcc = models::DilatedCnnConfig::mfcc_preset();
  const auto formant = models::DilatedCnnConfig::formant_preset();
  c.expect(tv.flatten_width() == 184,
           "tv flatten " + std::to_string(tv.flatten_width()) + " != 184");
  c.expect(mfcc.flatten_width() == 384,
           "mfcc flatten " + std::to_string(mfcc.flatten_width()) + " != 384");
  c.expect(formant.flatten_width() == 184,
           "formant flatten " + std::to_string(formant.flatten_width()) + " != 184");

  int built = 0;
  for (const auto& [name, cfg] : std::vector<std::pair<const char*, models::DilatedCnnConfig>>{
           {"tv", tv}, {"mfcc", mfcc}, {"formant", formant}}) {
    try {
      models::DilatedCnn<float> model(cfg, 1);
      nn::Tensor<float> x({2, cfg.input_channels, cfg.input_delay_bins, 1});
      Rng rng(3);
      for (Eigen::Index i = 0; i < x.numel(); ++i) {
        x.values[i] = static_cast<float>(rng.normal());
      }
      nn::Tape<float> tape(0, false);
      const auto fwd = model.forward(tape, tape.input(x));
      c.expect(fwd.logits.value().dim(0) == 2 && fwd.logits.value().dim(1) == 3,
               std::string(name) + " cnn logits shape off");
      c.expect(fwd.embedding.value().dim(1) == cfg.d1_units,
               std::string(name) + " cnn embedding width off");
      ++built;
    } catch (const std::exception& e) {
      c.expect(false, std::string(name) + " cnn: " + e.what());
    }
  }

  for (const auto& [name, cfg] : std::vector<std::pair<const char*, models::SessionLstmConfig>>{
           {"tv", models::SessionLstmConfig::tv_preset()},
           {"mfcc", models::SessionLstmConfig::mfcc_preset()},
           {"formant", models::SessionLstmConfig::formant_preset()}}) {
    try {
      models::SessionLstm<float> model(cfg, 1);
      std::vector<Eigen::VectorXd> seq(4, Eigen::VectorXd::Zero(cfg.input_size));
      Rng rng(5);
      for (auto& v : seq) {
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.normal();
      }
      const Eigen::Vector3d probs = models::forward_session<float>(model, seq);
      c.expect(std::abs(probs.sum() - 1.0) < 1e-5,
               std::string(name) + " lstm probabilities do not normalize");
      ++built;
    } catch (const std::exception& e) {
      c.expect(false, std::string(name) + " lstm: " + e.what());
    }
  }

  if (c.ok) out << "tv flatten width 184, all " << built << " configurations forward";
  else out << c.note.str();
  return c.ok;
}

// ---- 4: the segment model can overfit a miniature corpus ----------------------

acf::AcfMatrix overfit_matrix(int label, std::uint64_t seed) {
  acf::AcfMatrix m;
  m.channels = 8;
  m.max_delay = 50;
  m.values.resize(64, 51);
  Rng rng(seed);
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
      m.values(r, c) = 0.4 * rng.normal() + 1.2 * label * std::sin(0.3 * (c + 1) * (r % 5));
    }
  }
  return m;
}

bool criterion_overfit(std::ostream& out) {
  training::LabeledMatrices data;
  const int counts[3] = {11, 11, 10};
  for (int label = 0; label < 3; ++label) {
    for (int i = 0; i < counts[label]; ++i) {
      data.x.push_back(overfit_matrix(label, mix_seed(7, "m", label * 100 + i)));
      data.y.push_back(label);
    }
  }

  models::DilatedCnn<double> model(models::DilatedCnnConfig::tv_preset(), 11);
  training::TrainOptions opts;
  opts.learning_rate = 2e-5;
  opts.max_epochs = 300;
  opts.patience = 299;
  opts.batch_size = 8;
  opts.seed = 3;
  const auto history = training::fit_segment_model<double>(model, data, data, opts);

  int correct = 0;
  for (std::size_t i = 0; i < data.x.size(); ++i) {
    const auto pred = models::forward_segment<double>(model, data.x[i]);
    correct += pred.predicted == data.y[i];
  }
  out << correct << "/32 training segments correct after "
      << history.epochs.size() << " epochs at lr 2e-5";
  return correct == 32 && history.epochs.size() <= 300;
}

// ---- 5: two-stage pipeline on the default synthetic corpus --------------------

bool criterion_end_to_end(std::ostream& out) {
  const fs::path root = fs::temp_directory_path() / "acfpipe_accept_e2e";
  fs::remove_all(root);
  synth::SynthSpec spec;  // the documented default corpus
  synth::generate_corpus(spec, root / "corpus");

  pipeline::PipelineConfig cfg;
  cfg.manifest = root / "corpus" / "manifest.csv";
  cfg.work_dir = root / "work";
  cfg.seed = 0;
  cfg.precision = 32;
  cfg.segment_train.batch_size = 16;

  pipeline::run_features(cfg, 2);
  pipeline::run_acf(cfg, 2);
  pipeline::run_train_segment(cfg);
  pipeline::run_embed(cfg, 2);
  pipeline::run_train_session(cfg);
  const auto ev = pipeline::run_evaluate(cfg);
  const auto vote = pipeline::run_vote(cfg);
  fs::remove_all(root);

  out << "session UAR " << ev.session.uar << " (need >= 0.85), vote UAR " << vote.uar
      << " on " << ev.session.total << " held-out sessions";
  return ev.session.uar >= 0.85 && ev.session.uar >= vote.uar;
}

// ---- 6: metric oracles ----------------------------------------------------------

bool criterion_metrics(std::ostream& out) {
  using eval::ConfusionMatrix;
  Check c;
  const auto cm = [](std::initializer_list<long> v) {
    ConfusionMatrix m;
    auto it = v.begin();
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) m(r, col) = *it++;
    }
    return m;
  };
  const auto f1 = [](double precision, double recall) {
    return 2.0 * precision * recall / (precision + recall);
  };

  // 1: perfect diagonal
  auto m = eval::metrics(cm({5, 0, 0, 0, 5, 0, 0, 0, 5}));
  c.expect(m.accuracy == 1.0 && m.uar == 1.0 && m.per_class[0].f1 == 1.0, "perfect matrix");

  // 2: mixed errors
  m = eval::metrics(cm({3, 1, 1, 0, 4, 1, 1, 0, 4}));
  c.expect(m.accuracy == 11.0 / 15.0, "mixed accuracy");
  c.expect(m.uar == (3.0 / 5.0 + 4.0 / 5.0 + 4.0 / 5.0) / 3.0, "mixed uar");
  c.expect(m.per_class[0].f1 == f1(3.0 / 4.0, 3.0 / 5.0), "mixed f1 normal");
  c.expect(m.per_class[1].f1 == f1(4.0 / 5.0, 4.0 / 5.0), "mixed f1 moderate");
  c.expect(m.per_class[2].f1 == f1(4.0 / 6.0, 4.0 / 5.0), "mixed f1 severe");

  // 3: zero-support class drops out of the recall average
  m = eval::metrics(cm({2, 0, 1, 0, 3, 0, 0, 0, 0}));
  c.expect(m.uar == (2.0 / 3.0 + 1.0) / 2.0, "zero-support uar");
  c.expect(!m.per_class[2].f1_defined && m.per_class[2].f1 == 0.0, "zero-support f1 flag");

  // 4: a class that is never predicted has no defined f1
  m = eval::metrics(cm({2, 1, 0, 1, 3, 0, 0, 2, 0}));
  c.expect(!m.per_class[2].f1_defined && m.per_class[2].f1 == 0.0, "zero-predicted f1 flag");
  c.expect(m.per_class[1].f1_defined, "predicted class keeps f1");

  // 5: everything wrong
  m = eval::metrics(cm({0, 5, 0, 0, 0, 5, 5, 0, 0}));
  c.expect(m.accuracy == 0.0 && m.uar == 0.0, "all-wrong matrix");

  // 6: single populated class
  m = eval::metrics(cm({7, 0, 0, 0, 0, 0, 0, 0, 0}));
  c.expect(m.accuracy == 1.0 && m.uar == 1.0, "single-class matrix");

  // 7: imbalanced
  m = eval::metrics(cm({90, 5, 5, 10, 30, 10, 2, 3, 15}));
  c.expect(m.accuracy == 135.0 / 170.0, "imbalanced accuracy");
  c.expect(m.uar == (90.0 / 100.0 + 30.0 / 50.0 + 15.0 / 20.0) / 3.0, "imbalanced uar");
  c.expect(m.per_class[2].f1 == f1(15.0 / 30.0, 15.0 / 20.0), "imbalanced f1 severe");

  // 8: uniform confusion
  m = eval::metrics(cm({4, 4, 4, 4, 4, 4, 4, 4, 4}));
  c.expect(m.accuracy == 12.0 / 36.0, "uniform accuracy");
  c.expect(m.uar == (4.0 / 12.0 + 4.0 / 12.0 + 4.0 / 12.0) / 3.0, "uniform uar");

  // 9: one sample total
  m = eval::metrics(cm({0, 0, 0, 0, 0, 0, 0, 0, 1}));
  c.expect(m.accuracy == 1.0 && m.uar == 1.0 && m.total == 1, "single-sample matrix");

  // 10: recall-precision asymmetry
  m = eval::metrics(cm({8, 2, 0, 4, 6, 0, 0, 0, 10}));
  c.expect(m.accuracy == 24.0 / 30.0, "asymmetric accuracy");
  c.expect(m.uar == (8.0 / 10.0 + 6.0 / 10.0 + 1.0) / 3.0, "asymmetric uar");
  c.expect(m.per_class[0].f1 == f1(8.0 / 12.0, 8.0 / 10.0), "asymmetric f1 normal");

  // duplicating every sample k times must not move the UAR at all
  Rng rng(88);
  for (int trial = 0; trial < 100; ++trial) {
    ConfusionMatrix base;
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) base(r, col) = rng.uniform_int(0, 20);
    }
    const long k = rng.uniform_int(2, 9);
    const ConfusionMatrix scaled = base * k;
    if (eval::metrics(base).uar != eval::metrics(scaled).uar) {
      c.expect(false, "duplication trial " + std::to_string(trial));
      break;
    }
  }

  if (c.ok) out << "10 hand oracles exact, duplication invariance over 100 trials";
  else out << c.note.str();
  return c.ok;
}

// ---- 7: learning-rate staircase and early stopping ------------------------------

bool criterion_schedule(std::ostream& out) {
  Check c;
  for (int epoch = 1; epoch <= 60; ++epoch) {
    const double want = epoch <= 10   ? 2e-4
                        : epoch <= 20 ? 1e-4
                        : epoch <= 30 ? 5e-5
                        : epoch <= 40 ? 2.5e-5
                                      : 2e-5;
    if (training::lstm_learning_rate(epoch) != want) {
      c.expect(false, "epoch " + std::to_string(epoch) + " rate off");
      break;
    }
  }

  training::TrainOptions opts;
  opts.max_epochs = 300;
  opts.patience = 15;
  training::EpochCallbacks cb;
  cb.train_epoch = [](int, double) { return 1.0; };
  cb.validate = [](int epoch) { return std::make_pair(1.0 + epoch, 0.0); };
  cb.snapshot_best = [] {};
  cb.restore_best = [] {};
  const auto h = training::run_epochs(opts, cb);
  c.expect(h.epochs.size() == 16,
           "worsening loss ran " + std::to_string(h.epochs.size()) + " epochs, not 16");
  c.expect(h.best_epoch == 1 && h.early_stopped, "stop bookkeeping off");

  if (c.ok) out << "staircase exact over 60 epochs, worsening loss stops after epoch 16";
  else out << c.note.str();
  return c.ok;
}

// ---- 8: severity boundaries and two-scale agreement ------------------------------

bool criterion_severity(std::ostream& out) {
  using corpus::Scale;
  using corpus::ScaleScore;
  using corpus::SeverityClass;
  Check c;

  const std::pair<int, int> hamd_cases[] = {{0, 1}, {7, 1},  {8, 2},  {13, 2}, {14, 3},
                                            {18, 3}, {19, 4}, {22, 4}, {23, 5}, {52, 5}};
  for (const auto& [score, level] : hamd_cases) {
    const int got = corpus::severity_from_scale({Scale::HAMD, score});
    c.expect(got == level, "hamd " + std::to_string(score) + " -> level " +
                               std::to_string(got) + ", want " + std::to_string(level));
  }
  const std::pair<int, int> qids_cases[] = {{0, 1},  {5, 1},  {6, 2},  {10, 2}, {11, 3},
                                            {15, 3}, {16, 4}, {20, 4}, {21, 5}, {27, 5}};
  for (const auto& [score, level] : qids_cases) {
    const int got = corpus::severity_from_scale({Scale::QIDS, score});
    c.expect(got == level, "qids " + std::to_string(score) + " -> level " +
                               std::to_string(got) + ", want " + std::to_string(level));
  }

  c.expect(corpus::class_from_level(1) == SeverityClass::Normal, "level 1 class");
  c.expect(corpus::class_from_level(2) == SeverityClass::Moderate, "level 2 class");
  c.expect(corpus::class_from_level(3) == SeverityClass::Moderate, "level 3 class");
  c.expect(corpus::class_from_level(4) == SeverityClass::Severe, "level 4 class");
  c.expect(corpus::class_from_level(5) == SeverityClass::Severe, "level 5 class");

  // both scales at the same level: admitted with that class
  const auto agree = corpus::admit_session({{Scale::HAMD, 8}, {Scale::QIDS, 6}});
  c.expect(agree.has_value() && *agree == SeverityClass::Moderate, "agreeing pair admitted");
  // levels 2 vs 3: same class, still excluded by the level rule
  const auto level_clash = corpus::admit_session({{Scale::HAMD, 8}, {Scale::QIDS, 11}});
  c.expect(!level_clash.has_value(), "level 2/3 pair excluded");
  const auto class_clash = corpus::admit_session({{Scale::HAMD, 7}, {Scale::QIDS, 27}});
  c.expect(!class_clash.has_value(), "level 1/5 pair excluded");
  const auto single = corpus::admit_session({{Scale::QIDS, 21}});
  c.expect(single.has_value() && *single == SeverityClass::Severe, "single scale admitted");

  if (c.ok) out << "20 boundary scores, class collapse and agreement rule hold";
  else out << c.note.str();
  return c.ok;
}

// ---- 9: bit-identical reruns ------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    out[fs::relative(e.path(), root).generic_string()] = os.str();
  }
  return out;
}

bool criterion_determinism(std::ostream& out) {
  const fs::path root = fs::temp_directory_path() / "acfpipe_accept_det";
  fs::remove_all(root);
  synth::SynthSpec spec;
  spec.speakers_per_class = 5;
  spec.sessions_per_speaker = 2;
  spec.min_duration_s = 25;
  spec.max_duration_s = 45;
  spec.seed = 4;
  synth::generate_corpus(spec, root / "corpus");

  auto run_all = [&](const fs::path& work) {
    pipeline::PipelineConfig cfg;
    cfg.manifest = root / "corpus" / "manifest.csv";
    cfg.work_dir = work;
    cfg.seed = 1;
    cfg.segment_train.max_epochs = 6;
    cfg.segment_train.patience = 5;
    cfg.segment_train.batch_size = 16;
    cfg.session_train.max_epochs = 6;
    cfg.session_train.patience = 5;
    cfg.baseline_train.max_epochs = 2;
    cfg.baseline_train.patience = 1;
    cfg.baseline_train.batch_size = 16;
    cfg.baseline_cnn.input_frames = 900;
    cfg.baseline_cnn.conv1_filters = 16;
    cfg.baseline_cnn.conv2_filters = 8;
    cfg.baseline_cnn.dense1_units = 8;

    pipeline::run_features(cfg, 2);
    pipeline::run_acf(cfg, 2);
    pipeline::run_train_segment(cfg);
    pipeline::run_embed(cfg, 2);
    pipeline::run_train_session(cfg);
    pipeline::run_train_baseline(cfg);
    pipeline::run_evaluate(cfg);
    pipeline::run_vote(cfg);
  };

  run_all(root / "work_a");
  run_all(root / "work_b");

  const auto a = tree_bytes(root / "work_a");
  const auto b = tree_bytes(root / "work_b");
  if (a != b) {
    int diffs = 0;
    for (const auto& [rel, bytes] : a) {
      const auto it = b.find(rel);
      if (it == b.end() || it->second != bytes) {
        if (++diffs <= 3) out << (diffs > 1 ? ", " : "") << rel << " differs";
      }
    }
    for (const auto& [rel, bytes] : b) {
      if (!a.count(rel) && ++diffs <= 3) out << (diffs > 1 ? ", " : "") << rel << " only in b";
    }
    out << " (" << diffs << " mismatched files)";
    return false;
  }
  fs::remove_all(root);
  out << a.size() << " checkpoint/report/feature files bit-identical across reruns";
  return true;
}

struct Criterion {
  int number;
  const char* name;
  std::function<bool(std::ostream&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--only <criterion>]\n";
      return 2;
    }
  }

  const std::vector<Criterion> criteria = {
      {1, "delayed-correlation oracle", criterion_acf_oracle},
      {2, "gradient checks", criterion_gradients},
      {3, "configuration shape parity", criterion_shapes},
      {4, "overfit smoke test", criterion_overfit},
      {5, "synthetic end-to-end pipeline", criterion_end_to_end},
      {6, "metric oracles", criterion_metrics},
      {7, "schedule and early stopping", criterion_schedule},
      {8, "severity mapping", criterion_severity},
      {9, "determinism", criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.number != only) continue;
    const auto start = std::chrono::steady_clock::now();
    std::ostringstream note;
    bool ok = false;
    try {
      ok = c.run(note);
    } catch (const std::exception& e) {
      note << "exception: " << e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << c.number << " " << c.name << ": "
              << note.str() << " (" << std::fixed << std::setprecision(1) << seconds
              << " s)\n"
              << std::defaultfloat << std::setprecision(6);
    std::cout.flush();
    if (!ok) ++failures;
  }
  if (failures > 0) {
    std::cout << failures << " criterion(s) failed\n";
    return 1;
  }
  return 0;
}
