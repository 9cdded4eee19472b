#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "acfpipe/checkpoint.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/training.hpp"

using namespace acfpipe;
using namespace acfpipe::training;

namespace {

acf::AcfMatrix class_matrix(int label, std::uint64_t seed, int channels = 4, int delays = 10) {
  // class-dependent mean shift on top of noise so a small model can separate
  acf::AcfMatrix m;
  m.channels = channels;
  m.max_delay = delays;
  m.values.resize(channels * channels, delays + 1);
  Rng rng(seed);
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
      m.values(r, c) = 0.6 * rng.normal() + 0.8 * label * std::sin(0.3 * (c + 1) * (r % 5));
    }
  }
  return m;
}

LabeledMatrices make_set(int per_class, std::uint64_t seed) {
  LabeledMatrices out;
  for (int label = 0; label < 3; ++label) {
    for (int i = 0; i < per_class; ++i) {
      out.x.push_back(class_matrix(label, mix_seed(seed, "m", label * 1000 + i)));
      out.y.push_back(label);
    }
  }
  return out;
}

models::DilatedCnnConfig tiny_cnn_config() {
  models::DilatedCnnConfig cfg;
  cfg.input_channels = 16;  // 4 channels
  cfg.input_delay_bins = 11;
  cfg.parallel_filters = 16;
  cfg.c6_filters = 8;
  cfg.c6_kernel = 3;
  cfg.d1_units = 8;
  cfg.d2_units = 8;
  cfg.dropout = 0.4;
  return cfg;
}

}  // namespace

TEST_CASE("class weights") {
  const auto paper = compute_class_weights({560, 2259, 2398});
  CHECK(paper[0] == doctest::Approx(3.105).epsilon(1e-3));
  CHECK(paper[1] == doctest::Approx(0.770).epsilon(1e-3));
  CHECK(paper[2] == doctest::Approx(0.725).epsilon(1e-3));

  const auto equal = compute_class_weights({7, 7, 7});
  for (double w : equal) CHECK(w == doctest::Approx(1.0));

  const auto hand = compute_class_weights({1, 1, 4});
  CHECK(hand[0] == doctest::Approx(2.0));
  CHECK(hand[1] == doctest::Approx(2.0));
  CHECK(hand[2] == doctest::Approx(0.5));

  CHECK_THROWS_AS(compute_class_weights({3, 0, 3}), ArgumentError);

  const auto from_labels = class_weights_from_labels({0, 1, 1, 2, 2, 2, 2});
  CHECK(from_labels[0] == doctest::Approx(7.0 / 3.0));
  CHECK_THROWS_AS(class_weights_from_labels({0, 1, 7}), ArgumentError);
}

TEST_CASE("lstm learning rate schedule") {
  CHECK(lstm_learning_rate(1) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lstm_learning_rate(10) == doctest::Approx(2e-4).epsilon(1e-12));
  CHECK(lstm_learning_rate(11) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lstm_learning_rate(31) == doctest::Approx(2.5e-5).epsilon(1e-12));
  CHECK(lstm_learning_rate(41) == doctest::Approx(2e-5).epsilon(1e-12));
  CHECK(lstm_learning_rate(1000) == doctest::Approx(2e-5).epsilon(1e-12));

  // exact staircase: ten of each plateau, then the clamp
  for (int e = 1; e <= 50; ++e) {
    double expected;
    if (e <= 10) {
      expected = 2e-4;
    } else if (e <= 20) {
      expected = 1e-4;
    } else if (e <= 30) {
      expected = 5e-5;
    } else if (e <= 40) {
      expected = 2.5e-5;
    } else {
      expected = 2e-5;
    }
    CHECK(lstm_learning_rate(e) == doctest::Approx(expected).epsilon(1e-12));
  }

  // non-increasing
  for (int e = 2; e <= 120; ++e) {
    CHECK(lstm_learning_rate(e) <= lstm_learning_rate(e - 1));
    CHECK(lstm_learning_rate(e) >= 2e-5);
  }

  CHECK_THROWS_AS(lstm_learning_rate(0), ArgumentError);
}

TEST_CASE("epoch loop stops after patience exhausted") {
  TrainOptions opts;
  opts.max_epochs = 300;
  opts.patience = 15;

  int snapshots = 0, restores = 0;
  EpochCallbacks cb;
  cb.train_epoch = [](int, double) { return 1.0; };
  cb.validate = [](int epoch) { return std::make_pair(1.0 + epoch, 0.4); };  // worsening
  cb.snapshot_best = [&] { ++snapshots; };
  cb.restore_best = [&] { ++restores; };

  const auto h = run_epochs(opts, cb);
  CHECK(h.epochs.size() == 16);
  CHECK(h.best_epoch == 1);
  CHECK(h.early_stopped);
  CHECK(snapshots == 1);
  CHECK(restores == 1);

  // improving loss runs to the limit
  opts.max_epochs = 20;
  cb.validate = [](int epoch) { return std::make_pair(100.0 - epoch, 0.4); };
  const auto full = run_epochs(opts, cb);
  CHECK(full.epochs.size() == 20);
  CHECK(full.best_epoch == 20);
  CHECK(!full.early_stopped);

  // best epoch always carries the minimum validation loss
  cb.validate = [](int epoch) {
    const double losses[] = {5, 4, 6, 3, 7, 8, 9, 8, 7, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9, 9};
    return std::make_pair(losses[(epoch - 1) % 20], 0.0);
  };
  const auto dip = run_epochs(opts, cb);
  CHECK(dip.best_epoch == 4);
  double best = 1e18;
  for (const auto& e : dip.epochs) best = std::min(best, e.val_loss);
  CHECK(dip.best_val_loss == doctest::Approx(best));
  CHECK(dip.early_stopped);
  CHECK(dip.epochs.size() == 19);  // epochs 5..19 fail to improve on epoch 4

  // plateau (ties) does not count as improvement
  opts.max_epochs = 40;
  opts.patience = 5;
  cb.validate = [](int) { return std::make_pair(2.0, 0.0); };
  const auto flat = run_epochs(opts, cb);
  CHECK(flat.best_epoch == 1);
  CHECK(flat.epochs.size() == 6);

  opts.patience = 40;
  CHECK_THROWS_AS(run_epochs(opts, cb), ArgumentError);
  opts.patience = 0;
  CHECK_THROWS_AS(run_epochs(opts, cb), ArgumentError);
}

TEST_CASE("batch partition") {
  Rng rng(11);
  const auto batches = make_batches(300, 128, true, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size() == 128);
  CHECK(batches[2].size() == 44);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 300);

  // trailing singleton folds into the previous batch
  Rng rng2(11);
  const auto folded = make_batches(129, 128, true, rng2);
  REQUIRE(folded.size() == 1);
  CHECK(folded[0].size() == 129);

  // without the minimum the singleton stays
  Rng rng3(11);
  const auto loose = make_batches(129, 128, false, rng3);
  REQUIRE(loose.size() == 2);
  CHECK(loose[1].size() == 1);

  Rng rng4(11);
  CHECK_THROWS_AS(make_batches(1, 128, true, rng4), ArgumentError);
  Rng rng5(11);
  CHECK(make_batches(1, 128, false, rng5).size() == 1);
  Rng rng6(11);
  CHECK_THROWS_AS(make_batches(0, 128, true, rng6), ArgumentError);

  // distinct shuffles across epochs from one rng
  Rng rng7(11);
  const auto first = make_batches(50, 64, true, rng7);
  const auto second = make_batches(50, 64, true, rng7);
  CHECK(first[0] != second[0]);
}

TEST_CASE("segment model training overfits a small set") {
  const auto train = make_set(6, 1);  // 18 segments
  TrainOptions opts;
  opts.learning_rate = 1e-3;
  opts.max_epochs = 150;
  opts.patience = 149;
  opts.batch_size = 18;
  opts.seed = 5;

  models::DilatedCnn<double> model(tiny_cnn_config(), 3);
  const auto h = fit_segment_model<double>(model, train, train, opts);
  CHECK(!h.epochs.empty());
  CHECK(h.epochs.back().train_loss < h.epochs.front().train_loss);

  // the restored model classifies its training set well
  int correct = 0;
  for (std::size_t i = 0; i < train.x.size(); ++i) {
    const auto pred = models::forward_segment<double>(model, train.x[i]);
    correct += pred.predicted == train.y[i];
  }
  CHECK(correct >= 16);

  // weighted validation loss with unit weights equals the balanced auto weights
  TrainOptions unit = opts;
  unit.max_epochs = 3;
  unit.patience = 2;
  unit.class_weights = {1.0, 1.0, 1.0};
  models::DilatedCnn<double> m1(tiny_cnn_config(), 3);
  const auto h1 = fit_segment_model<double>(m1, train, train, unit);
  TrainOptions autow = unit;
  autow.class_weights.clear();  // balanced set: auto weights are all 1
  models::DilatedCnn<double> m2(tiny_cnn_config(), 3);
  const auto h2 = fit_segment_model<double>(m2, train, train, autow);
  for (std::size_t e = 0; e < h1.epochs.size(); ++e) {
    CHECK(h1.epochs[e].val_loss == doctest::Approx(h2.epochs[e].val_loss).epsilon(1e-9));
  }
}

TEST_CASE("segment model training is deterministic") {
  const auto train = make_set(4, 2);
  const auto val = make_set(2, 9);
  TrainOptions opts;
  opts.learning_rate = 5e-4;
  opts.max_epochs = 8;
  opts.patience = 7;
  opts.batch_size = 6;
  opts.seed = 42;

  models::DilatedCnn<double> a(tiny_cnn_config(), 7);
  models::DilatedCnn<double> b(tiny_cnn_config(), 7);
  const auto ha = fit_segment_model<double>(a, train, val, opts);
  const auto hb = fit_segment_model<double>(b, train, val, opts);

  REQUIRE(ha.epochs.size() == hb.epochs.size());
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    CHECK(ha.epochs[e].train_loss == hb.epochs[e].train_loss);
    CHECK(ha.epochs[e].val_loss == hb.epochs[e].val_loss);
  }
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK((pa[i]->value.values == pb[i]->value.values).all());
  }

  CHECK_THROWS_AS(fit_segment_model<double>(a, {}, val, opts), ArgumentError);
  LabeledMatrices single;
  single.x.push_back(train.x[0]);
  single.y.push_back(0);
  CHECK_THROWS_AS(fit_segment_model<double>(a, single, val, opts), ArgumentError);
}

TEST_CASE("embedding export") {
  models::DilatedCnn<float> model(tiny_cnn_config(), 13);
  std::vector<acf::AcfMatrix> segments;
  for (int i = 0; i < 4; ++i) segments.push_back(class_matrix(i % 3, 100 + i));

  const auto embs = session_embeddings<float>(model, segments);
  REQUIRE(embs.size() == 4);
  for (const auto& e : embs) CHECK(e.size() == 8);

  // repeated export is identical, and order follows the input
  const auto again = session_embeddings<float>(model, segments);
  for (std::size_t i = 0; i < embs.size(); ++i) {
    CHECK((embs[i] - again[i]).cwiseAbs().maxCoeff() == 0.0);
  }
  std::vector<acf::AcfMatrix> reversed(segments.rbegin(), segments.rend());
  const auto rev = session_embeddings<float>(model, reversed);
  CHECK((rev[0] - embs[3]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("session model training") {
  // embeddings with class-dependent drift; variable lengths
  auto make_sequences = [](int per_class, std::uint64_t seed) {
    LabeledSequences out;
    Rng rng(seed);
    for (int label = 0; label < 3; ++label) {
      for (int i = 0; i < per_class; ++i) {
        const int len = 2 + static_cast<int>(rng.uniform_int(0, 4));
        std::vector<Eigen::VectorXd> seq;
        for (int t = 0; t < len; ++t) {
          Eigen::VectorXd e(6);
          for (int f = 0; f < 6; ++f) e[f] = 0.3 * rng.normal() + 0.9 * label;
          seq.push_back(e);
        }
        out.x.push_back(std::move(seq));
        out.y.push_back(label);
      }
    }
    return out;
  };

  const auto train = make_sequences(5, 3);
  const auto val = make_sequences(2, 71);

  models::SessionLstmConfig cfg = models::SessionLstmConfig::tv_preset(6);
  cfg.lstm1_units = 12;
  cfg.lstm2_units = 8;
  cfg.d3_units = 8;
  models::SessionLstm<double> model(cfg, 19);

  TrainOptions opts;
  opts.max_epochs = 25;
  opts.patience = 24;
  opts.batch_size = 4;
  opts.seed = 8;

  const auto h = fit_session_model<double>(model, train, val, opts);
  CHECK(!h.epochs.empty());

  // lr column follows the schedule exactly
  for (const auto& e : h.epochs) {
    CHECK(e.learning_rate == doctest::Approx(lstm_learning_rate(e.epoch)).epsilon(1e-12));
  }
  CHECK(h.epochs.back().train_loss < h.epochs.front().train_loss);

  // determinism
  models::SessionLstm<double> m2(cfg, 19);
  const auto h2 = fit_session_model<double>(m2, train, val, opts);
  REQUIRE(h2.epochs.size() == h.epochs.size());
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    CHECK(h.epochs[e].train_loss == h2.epochs[e].train_loss);
  }

  // batch of one trains
  LabeledSequences one;
  one.x.push_back(train.x[0]);
  one.y.push_back(train.y[0]);
  models::SessionLstm<double> m3(cfg, 19);
  TrainOptions small = opts;
  small.max_epochs = 2;
  small.patience = 1;
  small.class_weights = {1.0, 1.0, 1.0};  // a lone class cannot drive auto weights
  const auto h3 = fit_session_model<double>(m3, one, one, small);
  CHECK(h3.epochs.size() >= 1);

  // width mismatch rejected
  LabeledSequences wrong = train;
  wrong.x[0][0] = Eigen::VectorXd::Zero(5);
  models::SessionLstm<double> m4(cfg, 19);
  CHECK_THROWS_AS(fit_session_model<double>(m4, wrong, val, small), ShapeError);
}

TEST_CASE("history serialization") {
  History h;
  h.best_epoch = 2;
  h.best_val_loss = 0.25;
  h.early_stopped = true;
  h.epochs.push_back({1, 1.5, 0.5, 0.4, 2e-4});
  h.epochs.push_back({2, 1.0, 0.25, 0.6, 2e-4});

  json j = h;
  const auto back = j.get<History>();
  CHECK(back.best_epoch == 2);
  CHECK(back.best_val_loss == 0.25);
  CHECK(back.early_stopped);
  REQUIRE(back.epochs.size() == 2);
  CHECK(back.epochs[1].val_uar == 0.6);

  const auto dir = std::filesystem::temp_directory_path() / "acfpipe_training_test";
  std::filesystem::create_directories(dir);
  write_history_csv(dir / "history.csv", h);
  std::ifstream in(dir / "history.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "# best_epoch=2");
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line == "epoch,learning_rate,train_loss,val_loss,val_uar");
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "acfpipe_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";

  models::DilatedCnn<double> model(tiny_cnn_config(), 77);
  auto params = model.parameters();

  ckpt::Checkpoint c;
  c.meta["model"] = "dilated_cnn";
  c.meta["seed"] = 77;
  ckpt::save_parameters(c, params);
  ckpt::save_bn_states(c, model.bn_states());

  acf::AcfStandardizer std_state;
  std_state.mean = Eigen::MatrixXd::Random(16, 11);
  std_state.std = Eigen::MatrixXd::Random(16, 11).cwiseAbs().array() + 0.5;
  std_state.fitted_on = 18;
  ckpt::save_standardizer(c, std_state);

  nn::AdamState<double> adam;
  adam.step = 12;
  adam.slots.push_back({params[0]->value.values, params[0]->value.values * 0.5});
  ckpt::save_adam(c, adam);

  ckpt::write_checkpoint(path, c);
  const auto r = ckpt::read_checkpoint(path);

  CHECK(r.meta.at("model") == "dilated_cnn");
  CHECK(r.meta.at("seed") == 77);

  models::DilatedCnn<double> restored(tiny_cnn_config(), 1);  // different init
  ckpt::load_parameters(r, restored.parameters());
  auto rp = restored.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK((params[i]->value.values == rp[i]->value.values).all());
  }
  ckpt::load_bn_states(r, restored.bn_states());

  const auto s2 = ckpt::load_standardizer(r);
  CHECK(s2.mean == std_state.mean);
  CHECK(s2.std == std_state.std);
  CHECK(s2.fitted_on == 18);

  nn::AdamState<double> adam2;
  ckpt::load_adam(r, adam2, params);
  CHECK(adam2.step == 12);
  REQUIRE(adam2.slots.size() == 1);
  CHECK((adam2.slots[0].m == adam.slots[0].m).all());
  CHECK((adam2.slots[0].v == adam.slots[0].v).all());

  // same checkpoint written twice is byte-identical
  const auto path2 = dir / "model2.ckpt";
  ckpt::write_checkpoint(path2, c);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint rejects damage") {
  const auto dir = std::filesystem::temp_directory_path() / "acfpipe_ckpt_damage";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";

  ckpt::Checkpoint c;
  c.meta["x"] = 1;
  nn::Tensor<float> t({3, 2});
  for (int i = 0; i < 6; ++i) t.values[i] = static_cast<float>(i) * 0.25f;
  c.add("param/w", t);
  ckpt::write_checkpoint(path, c);

  auto bytes = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  }();

  // truncation
  {
    std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(ckpt::read_checkpoint(dir / "trunc.ckpt"), IntegrityError);

  // flipped payload byte breaks the checksum
  {
    auto bad = bytes;
    bad[bytes.size() / 2] = static_cast<char>(bad[bytes.size() / 2] ^ 0x40);
    std::ofstream out(dir / "flip.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(ckpt::read_checkpoint(dir / "flip.ckpt"), IntegrityError);

  // version 999 with a recomputed checksum trips the version gate
  {
    auto bad = bytes;
    const std::uint32_t v = 999;
    for (int i = 0; i < 4; ++i) bad[8 + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    const auto crc = ckpt::crc32(reinterpret_cast<const std::uint8_t*>(bad.data()),
                                 bad.size() - 4);
    for (int i = 0; i < 4; ++i) {
      bad[bad.size() - 4 + static_cast<std::size_t>(i)] =
          static_cast<char>((crc >> (8 * i)) & 0xFF);
    }
    std::ofstream out(dir / "ver.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(ckpt::read_checkpoint(dir / "ver.ckpt"), VersionError);

  // wrong magic
  {
    auto bad = bytes;
    bad[0] = 'Z';
    const auto crc = ckpt::crc32(reinterpret_cast<const std::uint8_t*>(bad.data()),
                                 bad.size() - 4);
    for (int i = 0; i < 4; ++i) {
      bad[bad.size() - 4 + static_cast<std::size_t>(i)] =
          static_cast<char>((crc >> (8 * i)) & 0xFF);
    }
    std::ofstream out(dir / "magic.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(ckpt::read_checkpoint(dir / "magic.ckpt"), IntegrityError);

  // missing array name
  const auto good = ckpt::read_checkpoint(path);
  CHECK(good.has("param/w"));
  CHECK(!good.has("param/missing"));
  CHECK_THROWS_AS(good.at("param/missing"), IntegrityError);
  nn::Tensor<float> wrong({2, 2});
  CHECK_THROWS_AS(good.fill("param/w", wrong), IntegrityError);

  std::filesystem::remove_all(dir);
}
