#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "acfpipe/acf.hpp"
#include "acfpipe/checkpoint.hpp"
#include "acfpipe/corpus.hpp"
#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/pipeline.hpp"
#include "acfpipe/synth.hpp"

using namespace acfpipe;
using pipeline::PipelineConfig;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::map<std::string, std::string> dir_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[e.path().generic_string()] = slurp(e.path());
  }
  return out;
}

bool any_violation_contains(const std::vector<std::string>& v, const std::string& needle) {
  return std::any_of(v.begin(), v.end(), [&](const std::string& s) {
    return s.find(needle) != std::string::npos;
  });
}

// One tiny corpus with a trained two-stage pipeline, built once and shared
// by the artifact-contract cases below.
struct Fixture {
  fs::path root;
  PipelineConfig cfg;
  corpus::Manifest working;

  Fixture() {
    root = fs::temp_directory_path() / "acfpipe_pipeline_fixture";
    fs::remove_all(root);
    synth::SynthSpec spec;
    spec.speakers_per_class = 5;
    spec.sessions_per_speaker = 2;
    spec.min_duration_s = 25;
    spec.max_duration_s = 45;
    spec.seed = 4;
    synth::generate_corpus(spec, root / "corpus");

    cfg.manifest = root / "corpus" / "manifest.csv";
    cfg.work_dir = root / "work";
    cfg.seed = 1;
    cfg.segment_train.max_epochs = 4;
    cfg.segment_train.patience = 3;
    cfg.segment_train.batch_size = 16;
    cfg.session_train.max_epochs = 4;
    cfg.session_train.patience = 3;
    cfg.session_train.batch_size = 8;

    pipeline::run_features(cfg, 2);
    pipeline::run_acf(cfg, 2);
    pipeline::run_train_segment(cfg);
    pipeline::run_embed(cfg, 2);
    pipeline::run_train_session(cfg);
    working = corpus::load_manifest(cfg.workspace().working_manifest());
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("config json round trip keeps every field") {
  PipelineConfig cfg;
  cfg.manifest = "/data/manifest.csv";
  cfg.work_dir = "/data/work";
  cfg.max_delay = 30;
  cfg.precision = 64;
  cfg.seed = 42;
  cfg.vote_fraction = 0.75;
  cfg.bucket_edges = {2, 4, 8};
  cfg.segment_train.batch_size = 17;
  cfg.session_train.class_weights = {1.0, 2.0, 3.0};
  cfg.mfcc.hop_s = 0.02;

  const auto j = pipeline::config_to_json(cfg);
  const PipelineConfig back = pipeline::config_from_json(j, "");
  CHECK(pipeline::config_to_json(back) == j);
  CHECK(back.parse_notes.empty());
  CHECK(back.max_delay == 30);
  CHECK(back.segment_train.batch_size == 17);
  CHECK(back.session_train.class_weights == std::vector<double>{1.0, 2.0, 3.0});
  CHECK(back.mfcc.hop_s == doctest::Approx(0.02));
}

TEST_CASE("partial config keeps defaults and resolves relative paths") {
  const pipeline::json j{{"manifest", "corpus/manifest.csv"},
                         {"seed", 7},
                         {"segment_train", {{"batch_size", 32}}}};
  const PipelineConfig cfg = pipeline::config_from_json(j, "/base");
  CHECK(cfg.manifest == fs::path("/base/corpus/manifest.csv"));
  CHECK(cfg.work_dir == fs::path("/base/work"));
  CHECK(cfg.seed == 7);
  CHECK(cfg.max_delay == 50);
  CHECK(cfg.segment_train.batch_size == 32);
  CHECK(cfg.segment_train.max_epochs == 300);      // untouched sibling key
  CHECK(cfg.session_train.batch_size == 128);      // untouched sibling section
  CHECK(cfg.session_train.lstm_schedule);
  CHECK(cfg.segment_cnn.input_channels == -1);     // sentinel until the corpus is known
  CHECK(cfg.session_lstm.input_size == -1);
}

TEST_CASE("unknown config keys become violations, not silent drops") {
  const pipeline::json j{{"manifest", "m.csv"},
                         {"max_dely", 10},  // typo for max_delay
                         {"segment_train", {{"learning_rte", 0.1}}}};
  const PipelineConfig cfg = pipeline::config_from_json(j, "");
  REQUIRE(cfg.parse_notes.size() == 2);
  const auto v = pipeline::config_violations(cfg);
  CHECK(any_violation_contains(v, "unknown key \"max_dely\""));
  CHECK(any_violation_contains(v, "unknown key \"learning_rte\" in segment_train"));
}

TEST_CASE("resolve_models fills the corpus-dependent fields") {
  PipelineConfig cfg;
  cfg.max_delay = 50;
  const auto r = pipeline::resolve_models(cfg, 8);
  CHECK(r.segment_cnn.input_channels == 64);
  CHECK(r.segment_cnn.input_delay_bins == 51);
  CHECK(r.segment_cnn.flatten_width() == 184);
  CHECK(r.session_lstm.input_size == r.segment_cnn.d1_units);
  CHECK(r.baseline_cnn.input_channels == 8);

  cfg.segment_cnn.input_channels = 144;  // explicit values win
  const auto r2 = pipeline::resolve_models(cfg, 8);
  CHECK(r2.segment_cnn.input_channels == 144);
}

TEST_CASE("violations name the missing manifest") {
  PipelineConfig cfg;
  const auto v = pipeline::config_violations(cfg);
  CHECK(any_violation_contains(v, "manifest path missing"));

  cfg.manifest = "/nonexistent/m.csv";
  const auto v2 = pipeline::config_violations(cfg);
  CHECK(any_violation_contains(v2, "manifest file not found"));
  CHECK_THROWS_AS(pipeline::validate_config(cfg), ConfigError);
}

TEST_CASE("violations are enumerated together") {
  PipelineConfig cfg;
  cfg.precision = 16;
  cfg.vote_fraction = 1.5;
  cfg.bucket_edges = {5, 3};
  cfg.segment_train.patience = 400;
  const auto v = pipeline::config_violations(cfg);
  CHECK(any_violation_contains(v, "manifest path missing"));
  CHECK(any_violation_contains(v, "precision must be 32 or 64"));
  CHECK(any_violation_contains(v, "vote_fraction"));
  CHECK(any_violation_contains(v, "bucket_edges"));
  CHECK(any_violation_contains(v, "patience must be smaller"));
  CHECK(v.size() >= 5);
}

TEST_CASE("delay budget is checked against the shortest segment") {
  const fs::path dir = fs::temp_directory_path() / "acfpipe_pipeline_delay";
  fs::remove_all(dir);
  fs::create_directories(dir);

  // 12 s at 25 Hz: one whole-recording training window of 300 frames.
  dsp::ChannelSeries series;
  series.frame_rate_hz = 25.0;
  series.data = Eigen::MatrixXd::Random(2, 300);
  series.channel_names = {"c1", "c2"};
  dsp::write_feature_csv(dir / "S1.csv", series);
  std::ofstream(dir / "manifest.csv")
      << "session_id,speaker_id,split,hamd,qids,duration_s,path\n"
      << "S1,P1,train,3,,12.0,S1.csv\n";

  PipelineConfig cfg;
  cfg.manifest = dir / "manifest.csv";
  cfg.work_dir = dir / "work";
  cfg.max_delay = 50;
  CHECK(pipeline::config_violations(cfg).empty());

  cfg.max_delay = 500;
  const auto v = pipeline::config_violations(cfg);
  CHECK(any_violation_contains(v, "max_delay (500)"));
  CHECK(any_violation_contains(v, "300"));
  fs::remove_all(dir);
}

TEST_CASE("synth spec json round trip and partial load") {
  synth::SynthSpec spec;
  spec.channels = 6;
  spec.profiles[2].coupling_delay = 22;
  spec.seed = 9;
  const auto j = pipeline::synth_spec_to_json(spec);
  const auto back = pipeline::synth_spec_from_json(j);
  CHECK(back.channels == 6);
  CHECK(back.profiles[2].coupling_delay == 22);
  CHECK(back.seed == 9);

  const auto partial = pipeline::synth_spec_from_json(
      pipeline::json{{"speakers_per_class", 4}});
  CHECK(partial.speakers_per_class == 4);
  CHECK(partial.channels == 8);
  CHECK_THROWS_AS(
      pipeline::synth_spec_from_json(pipeline::json{{"profiles", pipeline::json::array()}}),
      ConfigError);
}

TEST_CASE("features stage emits the working manifest and segment table") {
  const auto& f = fixture();
  const auto work = f.cfg.workspace();

  REQUIRE(fs::exists(work.working_manifest()));
  REQUIRE(fs::exists(work.segments_table()));
  const corpus::Manifest m = f.working;
  CHECK(m.has_splits);
  CHECK(m.sessions.size() == 30);

  std::map<corpus::Split, std::set<std::string>> speakers;
  for (const auto& rec : m.sessions) {
    speakers[rec.split].insert(rec.speaker_id);
    CHECK(fs::exists(rec.path));  // canonical per-session series next to it
  }
  for (const auto& [split_a, set_a] : speakers) {
    for (const auto& [split_b, set_b] : speakers) {
      if (split_a == split_b) continue;
      for (const auto& s : set_a) CHECK(!set_b.count(s));
    }
  }

  const csv::Table t = csv::read_file(work.segments_table());
  CHECK(t.header == std::vector<std::string>{"session_id", "index", "start_s", "end_s",
                                             "split", "class"});
  CHECK(t.rows.size() > m.sessions.size());  // sliding windows multiply train sessions
}

TEST_CASE("acf stage writes one matrix per segment plus a train-fitted standardizer") {
  const auto& f = fixture();
  const auto work = f.cfg.workspace();

  const csv::Table t = csv::read_file(work.segments_table());
  long train_segments = 0;
  for (const auto& row : t.rows) {
    const fs::path p = work.acf_csv(row[0], static_cast<int>(csv::to_long(row[1])));
    REQUIRE(fs::exists(p));
    if (row[4] == "train") ++train_segments;
  }
  const acf::AcfMatrix one = acf::read_acf_csv(work.acf_csv(t.rows[0][0], 0));
  CHECK(one.values.rows() == 64);  // 8 channels squared
  CHECK(one.values.cols() == f.cfg.max_delay + 1);

  const auto c = ckpt::read_checkpoint(work.standardizer_ckpt());
  CHECK(c.meta.at("kind") == "acf_standardizer");
  CHECK(c.meta.at("train_segments").get<long>() == train_segments);
}

TEST_CASE("training stages never read test-split files") {
  const auto& f = fixture();
  std::set<std::string> test_ids;
  for (const auto& rec : f.working.sessions) {
    if (rec.split == corpus::Split::Test) test_ids.insert(rec.session_id);
  }
  REQUIRE(!test_ids.empty());

  auto touched_test_file = [&](const std::vector<std::string>& paths) {
    for (const auto& p : paths) {
      for (const auto& id : test_ids) {
        if (p.find("/" + id + "_") != std::string::npos ||
            p.find("/" + id + ".") != std::string::npos) {
          return true;
        }
      }
    }
    return false;
  };

  pipeline::StageLog seg_log;
  pipeline::run_train_segment(f.cfg, &seg_log);
  CHECK(!touched_test_file(seg_log.reads));

  pipeline::StageLog ses_log;
  pipeline::run_train_session(f.cfg, &ses_log);
  CHECK(!touched_test_file(ses_log.reads));

  // evaluation, by contrast, must reach the test split
  pipeline::StageLog eval_log;
  pipeline::run_evaluate(f.cfg, &eval_log);
  CHECK(touched_test_file(eval_log.reads));
}

TEST_CASE("stages are idempotent at the byte level and leave inputs alone") {
  const auto& f = fixture();
  pipeline::run_evaluate(f.cfg);
  pipeline::run_vote(f.cfg);

  const auto corpus_before = dir_bytes(f.root / "corpus");
  const auto work_before = dir_bytes(f.cfg.work_dir);

  pipeline::run_features(f.cfg, 2);
  pipeline::run_acf(f.cfg, 2);
  pipeline::run_train_segment(f.cfg);
  pipeline::run_embed(f.cfg, 2);
  pipeline::run_train_session(f.cfg);
  pipeline::run_evaluate(f.cfg);
  pipeline::run_vote(f.cfg);

  CHECK(dir_bytes(f.root / "corpus") == corpus_before);
  CHECK(dir_bytes(f.cfg.work_dir) == work_before);
}

TEST_CASE("evaluate and vote write the full report set") {
  const auto& f = fixture();
  const auto ev = pipeline::run_evaluate(f.cfg);
  CHECK(ev.segment.total > 0);
  CHECK(ev.session.total == 6);  // 3 test speakers x 2 sessions

  const auto vote = pipeline::run_vote(f.cfg);
  CHECK(vote.total == ev.session.total);

  const auto reports = f.cfg.workspace().reports_dir();
  for (const char* name :
       {"segment_history.csv", "session_history.csv", "segment_predictions.csv",
        "segment_metrics.csv", "segment_confusion.csv", "segment_confusion.svg",
        "session_predictions.csv", "session_metrics.csv", "session_confusion.csv",
        "session_confusion.svg", "session_bucket_accuracy.csv", "session_bucket_accuracy.svg",
        "misclassified_sessions.csv", "vote_predictions.csv", "vote_metrics.csv",
        "vote_confusion.csv"}) {
    CHECK_MESSAGE(fs::exists(reports / name), name);
  }

  const auto preds = eval::read_predictions_csv(reports / "session_predictions.csv");
  CHECK(preds.size() == 6);
  const csv::Table metrics = csv::read_file(reports / "session_metrics.csv");
  for (const char* col : {"accuracy", "uar", "f1_normal", "f1_moderate", "f1_severe"}) {
    CHECK(metrics.column(col) >= 0);
  }
}

TEST_CASE("embeddings match the checkpointed model re-applied by hand") {
  const auto& f = fixture();
  const auto work = f.cfg.workspace();
  const auto& rec = f.working.sessions.front();

  const auto c = ckpt::read_checkpoint(work.segment_ckpt());
  REQUIRE(c.meta.at("precision").get<int>() == 32);
  const auto model_cfg = c.meta.at("config").get<models::DilatedCnnConfig>();
  models::DilatedCnn<float> model(model_cfg, 0);
  ckpt::load_parameters(c, model.parameters());
  ckpt::load_bn_states(c, model.bn_states());

  const auto standardizer =
      ckpt::load_standardizer(ckpt::read_checkpoint(work.standardizer_ckpt()));
  const auto matrix =
      acf::apply_acf_standardizer(standardizer, acf::read_acf_csv(work.acf_csv(rec.session_id, 0)));
  const auto pred = models::forward_segment<float>(model, matrix);

  const csv::Table emb = csv::read_file(work.embedding_csv(rec.session_id));
  REQUIRE(!emb.rows.empty());
  REQUIRE(static_cast<int>(emb.header.size()) == model_cfg.d1_units + 1);
  for (int i = 0; i < model_cfg.d1_units; ++i) {
    CHECK(csv::to_double(emb.rows[0][static_cast<std::size_t>(i) + 1]) ==
          doctest::Approx(pred.embedding[i]).epsilon(1e-6));
  }
}

TEST_CASE("gridsearch enumerates the documented combinations in loss order") {
  const fs::path dir = fs::temp_directory_path() / "acfpipe_pipeline_grid";
  fs::remove_all(dir);
  synth::SynthSpec spec;
  spec.speakers_per_class = 3;
  spec.sessions_per_speaker = 1;
  spec.min_duration_s = 25;
  spec.max_duration_s = 30;
  spec.seed = 11;
  synth::generate_corpus(spec, dir / "corpus");

  PipelineConfig cfg;
  cfg.manifest = dir / "corpus" / "manifest.csv";
  cfg.work_dir = dir / "work";
  cfg.seed = 2;
  cfg.segment_train.max_epochs = 2;
  cfg.segment_train.patience = 1;
  cfg.segment_train.batch_size = 8;
  cfg.segment_train.class_weights = {1.0, 1.0, 1.0};  // tiny splits may miss a class
  cfg.session_train.max_epochs = 2;
  cfg.session_train.patience = 1;
  cfg.session_train.batch_size = 4;
  cfg.session_train.class_weights = {1.0, 1.0, 1.0};

  pipeline::run_features(cfg);
  pipeline::run_acf(cfg);
  pipeline::run_train_segment(cfg);
  pipeline::run_embed(cfg);

  const auto seg_rows = pipeline::gridsearch_segment(cfg);
  REQUIRE(seg_rows.size() == 32);
  CHECK(std::is_sorted(seg_rows.begin(), seg_rows.end(), [](const auto& a, const auto& b) {
    return a.val_loss < b.val_loss;
  }));
  std::set<std::tuple<int, int, int, int, double>> seg_combos;
  for (const auto& r : seg_rows) {
    seg_combos.insert({r.cnn.parallel_filters, r.cnn.c6_filters, r.cnn.c6_kernel,
                       r.cnn.d2_units, r.cnn.dropout});
  }
  CHECK(seg_combos.size() == 32);

  const auto ses_rows = pipeline::gridsearch_session(cfg);
  REQUIRE(ses_rows.size() == 54);
  std::set<std::tuple<int, int, double, double, int>> ses_combos;
  for (const auto& r : ses_rows) {
    CHECK(r.lstm.lstm2_units == 64);
    ses_combos.insert({r.lstm.lstm1_units, r.lstm.lstm2_units, r.lstm.recurrent_dropout1,
                       r.lstm.recurrent_dropout2, r.lstm.d3_units});
  }
  CHECK(ses_combos.size() == 54);

  CHECK(fs::exists(cfg.workspace().reports_dir() / "gridsearch_segment.csv"));
  CHECK(fs::exists(cfg.workspace().reports_dir() / "gridsearch_session.csv"));
  fs::remove_all(dir);
}

TEST_CASE("gradient check suite is clean") {
  std::ostringstream out;
  CHECK(pipeline::run_gradcheck(out) == 0);
  CHECK(out.str().find("FAIL") == std::string::npos);
}
