#include "acfpipe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "acfpipe/acf.hpp"
#include "acfpipe/checkpoint.hpp"
#include "acfpipe/corpus.hpp"
#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/nn/gradcheck.hpp"
#include "acfpipe/nn/init.hpp"
#include "acfpipe/nn/lstm.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::pipeline {

namespace fs = std::filesystem;

// ---- small utilities ---------------------------------------------------------

namespace {

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  workers = std::min<int>(workers, static_cast<int>(n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex fail_mutex;
  std::exception_ptr failure;
  auto body = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(fail_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Stage logs may be fed from worker threads.
class LogGuard {
 public:
  explicit LogGuard(StageLog* log) : log_(log) {}
  void read(const fs::path& p) {
    if (!log_) return;
    std::lock_guard<std::mutex> lock(mutex_);
    log_->note_read(p);
  }
  void write(const fs::path& p) {
    if (!log_) return;
    std::lock_guard<std::mutex> lock(mutex_);
    log_->note_write(p);
  }

 private:
  StageLog* log_;
  std::mutex mutex_;
};

void require_artifact(const fs::path& p, const std::string& produced_by) {
  if (!fs::exists(p)) {
    throw IoError("missing " + p.generic_string() + "; run `" + produced_by + "` first");
  }
}

}  // namespace

fs::path Workspace::acf_csv(const std::string& session_id, int segment_index) const {
  return acf_dir() / (session_id + "_" + zero_pad(segment_index, 3) + ".csv");
}

// ---- config ------------------------------------------------------------------

PipelineConfig::PipelineConfig() {
  segment_cnn = models::DilatedCnnConfig::tv_preset();
  segment_cnn.input_channels = -1;
  segment_cnn.input_delay_bins = -1;
  session_lstm = models::SessionLstmConfig::tv_preset();
  session_lstm.input_size = -1;
  baseline_cnn.input_channels = -1;
  work_dir = "work";
  session_train.lstm_schedule = true;
}

ResolvedModels resolve_models(const PipelineConfig& cfg, int feature_channels) {
  ResolvedModels r{cfg.segment_cnn, cfg.session_lstm, cfg.baseline_cnn};
  if (r.segment_cnn.input_channels < 0) {
    r.segment_cnn.input_channels = feature_channels * feature_channels;
  }
  if (r.segment_cnn.input_delay_bins < 0) r.segment_cnn.input_delay_bins = cfg.max_delay + 1;
  if (r.session_lstm.input_size < 0) r.session_lstm.input_size = r.segment_cnn.d1_units;
  if (r.baseline_cnn.input_channels < 0) r.baseline_cnn.input_channels = feature_channels;
  return r;
}

namespace {

// Merge-style parsing: absent keys keep defaults, unknown keys are collected
// so validate-config can report them all at once.
struct SectionParser {
  const json& j;
  std::string section;
  std::vector<std::string>* notes;
  std::set<std::string> seen;

  template <typename T>
  void take(const char* key, T& out) {
    seen.insert(key);
    if (j.contains(key)) j.at(key).get_to(out);
  }
  void take_path(const char* key, const fs::path& base, fs::path& out) {
    seen.insert(key);
    if (!j.contains(key)) return;
    fs::path p = j.at(key).get<std::string>();
    out = p.is_absolute() || base.empty() ? p : base / p;
  }
  void finish() {
    for (const auto& [key, value] : j.items()) {
      if (!seen.count(key)) notes->push_back("unknown key \"" + key + "\" in " + section);
    }
  }
};

void train_options_from_json(const json& j, const std::string& section,
                             training::TrainOptions& out, std::vector<std::string>* notes) {
  SectionParser p{j, section, notes, {}};
  p.take("learning_rate", out.learning_rate);
  p.take("max_epochs", out.max_epochs);
  p.take("patience", out.patience);
  p.take("batch_size", out.batch_size);
  p.seen.insert("class_weights");
  if (j.contains("class_weights")) {
    const json& w = j.at("class_weights");
    if (w.is_string() && w.get<std::string>() == "auto") {
      out.class_weights.clear();
    } else {
      w.get_to(out.class_weights);
    }
  }
  p.finish();
}

json train_options_to_json(const training::TrainOptions& o) {
  json j{{"learning_rate", o.learning_rate},
         {"max_epochs", o.max_epochs},
         {"patience", o.patience},
         {"batch_size", o.batch_size}};
  if (o.class_weights.empty()) {
    j["class_weights"] = "auto";
  } else {
    j["class_weights"] = o.class_weights;
  }
  return j;
}

void model_section_from_json(const json& j, const std::string& section, json base,
                             std::vector<std::string>* notes, const json& allowed) {
  // validated via the typed from_json below; here we only flag unknown keys
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) notes->push_back("unknown key \"" + key + "\" in " + section);
  }
  (void)base;
}

template <typename Config>
void merge_model_section(const json& j, const std::string& section, Config& cfg,
                         std::vector<std::string>* notes) {
  json merged = json(cfg);  // defaults
  model_section_from_json(j, section, merged, notes, merged);
  for (const auto& [key, value] : j.items()) {
    if (merged.contains(key)) merged[key] = value;
  }
  merged.get_to(cfg);
}

void mfcc_from_json(const json& j, dsp::MfccConfig& out, std::vector<std::string>* notes) {
  SectionParser p{j, "mfcc", notes, {}};
  p.take("window_s", out.window_s);
  p.take("hop_s", out.hop_s);
  p.take("fft_size", out.fft_size);
  p.take("mel_filters", out.mel_filters);
  p.take("num_coefficients", out.num_coefficients);
  p.take("preemphasis", out.preemphasis);
  p.take("log_floor", out.log_floor);
  p.finish();
}

json mfcc_to_json(const dsp::MfccConfig& c) {
  return json{{"window_s", c.window_s},
              {"hop_s", c.hop_s},
              {"fft_size", c.fft_size},
              {"mel_filters", c.mel_filters},
              {"num_coefficients", c.num_coefficients},
              {"preemphasis", c.preemphasis},
              {"log_floor", c.log_floor}};
}

}  // namespace

PipelineConfig config_from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig cfg;
  std::vector<std::string> notes;
  SectionParser top{j, "config", &notes, {}};
  top.take_path("manifest", base_dir, cfg.manifest);
  top.take_path("work_dir", base_dir, cfg.work_dir);
  if (!j.contains("work_dir") && cfg.work_dir.is_relative() && !base_dir.empty()) {
    cfg.work_dir = base_dir / cfg.work_dir;  // default lives next to the config
  }
  top.seen.insert("feature_source");
  if (j.contains("feature_source")) {
    const std::string s = j.at("feature_source").get<std::string>();
    const auto parsed = dsp::feature_source_from_string(s);
    if (parsed) {
      cfg.source = *parsed;
    } else {
      notes.push_back("unknown feature_source \"" + s + "\"");
    }
  }
  top.take("max_delay", cfg.max_delay);
  top.take("precision", cfg.precision);
  top.take("seed", cfg.seed);
  top.take("vote_fraction", cfg.vote_fraction);
  top.take("bucket_edges", cfg.bucket_edges);
  for (const char* key : {"segment_cnn", "session_lstm", "baseline_cnn", "segment_train",
                          "session_train", "baseline_train", "mfcc"}) {
    top.seen.insert(key);
  }
  if (j.contains("segment_cnn")) {
    merge_model_section(j.at("segment_cnn"), "segment_cnn", cfg.segment_cnn, &notes);
  }
  if (j.contains("session_lstm")) {
    merge_model_section(j.at("session_lstm"), "session_lstm", cfg.session_lstm, &notes);
  }
  if (j.contains("baseline_cnn")) {
    merge_model_section(j.at("baseline_cnn"), "baseline_cnn", cfg.baseline_cnn, &notes);
  }
  if (j.contains("segment_train")) {
    train_options_from_json(j.at("segment_train"), "segment_train", cfg.segment_train, &notes);
  }
  if (j.contains("session_train")) {
    train_options_from_json(j.at("session_train"), "session_train", cfg.session_train, &notes);
  }
  if (j.contains("baseline_train")) {
    train_options_from_json(j.at("baseline_train"), "baseline_train", cfg.baseline_train,
                            &notes);
  }
  if (j.contains("mfcc")) mfcc_from_json(j.at("mfcc"), cfg.mfcc, &notes);
  top.finish();
  cfg.session_train.lstm_schedule = true;
  cfg.parse_notes = std::move(notes);
  return cfg;
}

json config_to_json(const PipelineConfig& cfg) {
  return json{{"manifest", cfg.manifest.generic_string()},
              {"work_dir", cfg.work_dir.generic_string()},
              {"feature_source", dsp::to_string(cfg.source)},
              {"max_delay", cfg.max_delay},
              {"precision", cfg.precision},
              {"seed", cfg.seed},
              {"vote_fraction", cfg.vote_fraction},
              {"bucket_edges", cfg.bucket_edges},
              {"segment_cnn", cfg.segment_cnn},
              {"session_lstm", cfg.session_lstm},
              {"baseline_cnn", cfg.baseline_cnn},
              {"segment_train", train_options_to_json(cfg.segment_train)},
              {"session_train", train_options_to_json(cfg.session_train)},
              {"baseline_train", train_options_to_json(cfg.baseline_train)},
              {"mfcc", mfcc_to_json(cfg.mfcc)}};
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.generic_string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("config " + path.generic_string() + ": " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

void save_config(const fs::path& path, const PipelineConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config file " + path.generic_string());
  out << config_to_json(cfg).dump(2) << "\n";
}

namespace {

void check_train_section(const std::string& name, const training::TrainOptions& o,
                         bool scheduled, std::vector<std::string>& v) {
  if (!scheduled && o.learning_rate <= 0) v.push_back(name + ": learning_rate must be positive");
  if (o.max_epochs < 1) v.push_back(name + ": max_epochs must be positive");
  if (o.patience < 1) v.push_back(name + ": patience must be positive");
  if (o.patience >= o.max_epochs && o.max_epochs >= 1) {
    v.push_back(name + ": patience must be smaller than max_epochs");
  }
  if (o.batch_size < 1) v.push_back(name + ": batch_size must be positive");
  if (!o.class_weights.empty()) {
    if (o.class_weights.size() != 3) {
      v.push_back(name + ": class_weights needs exactly 3 entries");
    } else {
      for (double w : o.class_weights) {
        if (w <= 0) {
          v.push_back(name + ": class_weights must be positive");
          break;
        }
      }
    }
  }
}

struct CorpusProbe {
  int channels = 0;
  double frame_rate_hz = 0.0;
  double shortest_segment_s = 0.0;
  long segment_count = 0;
};

// Reads just enough of the corpus to run the cross-field checks.
std::optional<CorpusProbe> probe_corpus(const PipelineConfig& cfg,
                                        const corpus::Manifest& m,
                                        std::vector<std::string>& v) {
  CorpusProbe probe;
  bool rate_known = false;
  for (const auto& rec : m.sessions) {
    if (rec.path.extension() == ".wav") {
      if (!rate_known) {
        probe.frame_rate_hz = 1.0 / cfg.mfcc.hop_s;
        probe.channels = cfg.mfcc.num_coefficients - 1;
        rate_known = true;
      }
      continue;
    }
    if (!rate_known) {
      try {
        const auto series = dsp::ingest_feature_csv(rec.path);
        probe.frame_rate_hz = series.frame_rate_hz;
        probe.channels = static_cast<int>(series.channels());
        rate_known = true;
      } catch (const std::exception& e) {
        v.push_back("feature file for session " + rec.session_id + " unreadable: " + e.what());
        return std::nullopt;
      }
    }
  }
  if (!rate_known) return std::nullopt;

  double shortest = std::numeric_limits<double>::infinity();
  for (const auto& rec : m.sessions) {
    for (const auto& [start, end] : corpus::segment_recording(rec.duration_s, rec.split)) {
      shortest = std::min(shortest, end - start);
      ++probe.segment_count;
    }
  }
  probe.shortest_segment_s = shortest;
  return probe;
}

}  // namespace

std::vector<std::string> config_violations(const PipelineConfig& cfg) {
  std::vector<std::string> v = cfg.parse_notes;

  if (cfg.manifest.empty()) v.push_back("manifest path missing");
  if (cfg.work_dir.empty()) v.push_back("work_dir missing");
  if (cfg.precision != 32 && cfg.precision != 64) {
    v.push_back("precision must be 32 or 64, got " + std::to_string(cfg.precision));
  }
  if (cfg.max_delay < 1) v.push_back("max_delay must be positive");
  if (!(cfg.vote_fraction > 0.0 && cfg.vote_fraction <= 1.0)) {
    v.push_back("vote_fraction must be in (0,1]");
  }
  for (std::size_t i = 0; i + 1 < cfg.bucket_edges.size(); ++i) {
    if (cfg.bucket_edges[i] >= cfg.bucket_edges[i + 1]) {
      v.push_back("bucket_edges must be strictly increasing");
      break;
    }
  }
  check_train_section("segment_train", cfg.segment_train, false, v);
  check_train_section("session_train", cfg.session_train, true, v);
  check_train_section("baseline_train", cfg.baseline_train, false, v);
  if (cfg.mfcc.window_s <= 0 || cfg.mfcc.hop_s <= 0) {
    v.push_back("mfcc window_s and hop_s must be positive");
  }

  int feature_channels = -1;
  if (!cfg.manifest.empty()) {
    if (!fs::exists(cfg.manifest)) {
      v.push_back("manifest file not found: " + cfg.manifest.generic_string());
    } else {
      try {
        const corpus::Manifest m = corpus::load_manifest(cfg.manifest);
        if (m.sessions.empty()) {
          v.push_back("manifest has no admissible sessions");
        }
        bool all_files_present = true;
        for (const auto& rec : m.sessions) {
          if (!fs::exists(rec.path)) {
            v.push_back("feature file not found for session " + rec.session_id + ": " +
                        rec.path.generic_string());
            all_files_present = false;
          }
        }
        if (all_files_present && !m.sessions.empty()) {
          if (const auto probe = probe_corpus(cfg, m, v)) {
            feature_channels = probe->channels;
            if (probe->segment_count == 0) {
              v.push_back("no session is long enough to segment");
            } else {
              const long min_frames =
                  static_cast<long>(probe->shortest_segment_s * probe->frame_rate_hz);
              if (cfg.max_delay >= min_frames) {
                v.push_back("max_delay (" + std::to_string(cfg.max_delay) +
                            ") must be smaller than the shortest segment's frame count (" +
                            std::to_string(min_frames) + ")");
              }
            }
          }
        }
      } catch (const std::exception& e) {
        v.push_back(std::string("manifest unreadable: ") + e.what());
      }
    }
  }

  // Model sections: resolve the derivable fields first so only genuine
  // problems are reported; the corpus-dependent cross-checks need a readable
  // corpus and are skipped (already flagged above) otherwise.
  const auto resolved = resolve_models(cfg, feature_channels > 0 ? feature_channels : 8);
  for (const auto& s : resolved.segment_cnn.violations()) v.push_back("segment_cnn: " + s);
  for (const auto& s : resolved.session_lstm.violations()) v.push_back("session_lstm: " + s);
  for (const auto& s : resolved.baseline_cnn.violations()) v.push_back("baseline_cnn: " + s);
  if (cfg.segment_cnn.input_delay_bins > 0 &&
      cfg.segment_cnn.input_delay_bins != cfg.max_delay + 1) {
    v.push_back("segment_cnn: input_delay_bins (" +
                std::to_string(cfg.segment_cnn.input_delay_bins) + ") must equal max_delay+1 (" +
                std::to_string(cfg.max_delay + 1) + ")");
  }
  if (cfg.session_lstm.input_size > 0 &&
      cfg.session_lstm.input_size != resolved.segment_cnn.d1_units) {
    v.push_back("session_lstm: input_size (" + std::to_string(cfg.session_lstm.input_size) +
                ") must equal segment_cnn d1_units (" +
                std::to_string(resolved.segment_cnn.d1_units) + ")");
  }
  if (feature_channels > 0) {
    if (cfg.segment_cnn.input_channels > 0 &&
        cfg.segment_cnn.input_channels != feature_channels * feature_channels) {
      v.push_back("segment_cnn: input_channels (" +
                  std::to_string(cfg.segment_cnn.input_channels) +
                  ") must equal the squared corpus channel count (" +
                  std::to_string(feature_channels * feature_channels) + ")");
    }
    if (cfg.baseline_cnn.input_channels > 0 &&
        cfg.baseline_cnn.input_channels != feature_channels) {
      v.push_back("baseline_cnn: input_channels (" +
                  std::to_string(cfg.baseline_cnn.input_channels) +
                  ") must equal the corpus channel count (" +
                  std::to_string(feature_channels) + ")");
    }
  }
  return v;
}

void validate_config(const PipelineConfig& cfg) {
  const auto v = config_violations(cfg);
  if (v.empty()) return;
  std::string msg = "invalid pipeline config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

// ---- synth spec io -------------------------------------------------------------

json synth_spec_to_json(const synth::SynthSpec& spec) {
  json profiles = json::array();
  for (const auto& p : spec.profiles) {
    profiles.push_back(json{{"coupling_delay", p.coupling_delay},
                            {"coupling", p.coupling},
                            {"noise", p.noise}});
  }
  return json{{"channels", spec.channels},
              {"frame_rate_hz", spec.frame_rate_hz},
              {"profiles", profiles},
              {"speakers_per_class", spec.speakers_per_class},
              {"sessions_per_speaker", spec.sessions_per_speaker},
              {"min_duration_s", spec.min_duration_s},
              {"max_duration_s", spec.max_duration_s},
              {"seed", spec.seed}};
}

synth::SynthSpec synth_spec_from_json(const json& j) {
  synth::SynthSpec spec;
  if (j.contains("channels")) j.at("channels").get_to(spec.channels);
  if (j.contains("frame_rate_hz")) j.at("frame_rate_hz").get_to(spec.frame_rate_hz);
  if (j.contains("profiles")) {
    const json& ps = j.at("profiles");
    if (!ps.is_array() || ps.size() != 3) {
      throw ConfigError("synth spec: profiles must be an array of 3 objects");
    }
    for (std::size_t i = 0; i < 3; ++i) {
      auto& p = spec.profiles[i];
      const json& pj = ps[i];
      if (pj.contains("coupling_delay")) pj.at("coupling_delay").get_to(p.coupling_delay);
      if (pj.contains("coupling")) pj.at("coupling").get_to(p.coupling);
      if (pj.contains("noise")) pj.at("noise").get_to(p.noise);
    }
  }
  if (j.contains("speakers_per_class")) {
    j.at("speakers_per_class").get_to(spec.speakers_per_class);
  }
  if (j.contains("sessions_per_speaker")) {
    j.at("sessions_per_speaker").get_to(spec.sessions_per_speaker);
  }
  if (j.contains("min_duration_s")) j.at("min_duration_s").get_to(spec.min_duration_s);
  if (j.contains("max_duration_s")) j.at("max_duration_s").get_to(spec.max_duration_s);
  if (j.contains("seed")) j.at("seed").get_to(spec.seed);
  return spec;
}

synth::SynthSpec load_synth_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read synth spec " + path.generic_string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError("synth spec " + path.generic_string() + ": " + e.what());
  }
  return synth_spec_from_json(j);
}

// ---- shared stage plumbing ------------------------------------------------------

namespace {

struct SegmentRef {
  std::string session_id;
  int index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  corpus::SeverityClass severity = corpus::SeverityClass::Normal;
  corpus::Split split = corpus::Split::Train;
};

corpus::Manifest load_working_manifest(const Workspace& work, LogGuard& log) {
  require_artifact(work.working_manifest(), "features");
  log.read(work.working_manifest());
  corpus::Manifest m = corpus::load_manifest(work.working_manifest());
  if (!m.has_splits) throw IntegrityError("working manifest lost its split column");
  return m;
}

void write_segment_table(const fs::path& path, const std::vector<SegmentRef>& segments) {
  csv::Table t;
  t.header = {"session_id", "index", "start_s", "end_s", "split", "class"};
  for (const auto& s : segments) {
    t.rows.push_back({s.session_id, std::to_string(s.index), csv::format_double(s.start_s),
                      csv::format_double(s.end_s), corpus::to_string(s.split),
                      corpus::to_string(s.severity)});
  }
  csv::write_file(path, t);
}

std::vector<SegmentRef> load_segment_table(const Workspace& work, LogGuard& log) {
  require_artifact(work.segments_table(), "features");
  log.read(work.segments_table());
  const csv::Table t = csv::read_file(work.segments_table());
  for (const char* col : {"session_id", "index", "start_s", "end_s", "split", "class"}) {
    if (t.column(col) < 0) {
      throw FormatError("segment table missing column " + std::string(col));
    }
  }
  std::vector<SegmentRef> out;
  for (const auto& row : t.rows) {
    SegmentRef s;
    s.session_id = row[static_cast<std::size_t>(t.column("session_id"))];
    s.index = static_cast<int>(csv::to_long(row[static_cast<std::size_t>(t.column("index"))]));
    s.start_s = csv::to_double(row[static_cast<std::size_t>(t.column("start_s"))]);
    s.end_s = csv::to_double(row[static_cast<std::size_t>(t.column("end_s"))]);
    const auto split =
        corpus::split_from_string(row[static_cast<std::size_t>(t.column("split"))]);
    const auto severity =
        corpus::class_from_string(row[static_cast<std::size_t>(t.column("class"))]);
    if (!split || !severity) {
      throw FormatError("segment table has an invalid split or class label");
    }
    s.split = *split;
    s.severity = *severity;
    out.push_back(std::move(s));
  }
  return out;
}

std::map<std::string, std::vector<SegmentRef>> by_session(const std::vector<SegmentRef>& segs) {
  std::map<std::string, std::vector<SegmentRef>> out;
  for (const auto& s : segs) out[s.session_id].push_back(s);
  return out;
}

acf::AcfStandardizer load_standardizer_ckpt(const Workspace& work, LogGuard& log) {
  require_artifact(work.standardizer_ckpt(), "acf");
  log.read(work.standardizer_ckpt());
  const ckpt::Checkpoint c = ckpt::read_checkpoint(work.standardizer_ckpt());
  return ckpt::load_standardizer(c);
}

// Standardized matrices and labels for one split, in manifest order.
training::LabeledMatrices load_split_matrices(const Workspace& work,
                                              const corpus::Manifest& m,
                                              const std::vector<SegmentRef>& segments,
                                              const acf::AcfStandardizer& standardizer,
                                              corpus::Split split, LogGuard& log) {
  const auto grouped = by_session(segments);
  training::LabeledMatrices out;
  for (const auto& rec : m.sessions) {
    if (rec.split != split) continue;
    const auto it = grouped.find(rec.session_id);
    if (it == grouped.end()) continue;
    for (const auto& seg : it->second) {
      const fs::path p = work.acf_csv(seg.session_id, seg.index);
      require_artifact(p, "acf");
      log.read(p);
      out.x.push_back(acf::apply_acf_standardizer(standardizer, acf::read_acf_csv(p)));
      out.y.push_back(static_cast<int>(seg.severity));
    }
  }
  return out;
}

int label_of(const corpus::SessionRecord& rec) { return static_cast<int>(rec.severity); }

void write_embedding_csv(const fs::path& path, const std::string& session_id,
                         const std::vector<Eigen::VectorXd>& rows) {
  csv::Table t;
  t.comments = {"session_id=" + session_id,
                "dimension=" + std::to_string(rows.empty() ? 0 : rows.front().size())};
  t.header = {"segment_index"};
  const Eigen::Index dim = rows.empty() ? 0 : rows.front().size();
  for (Eigen::Index i = 0; i < dim; ++i) t.header.push_back("e" + zero_pad(static_cast<int>(i), 3));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<std::string> row{std::to_string(r)};
    for (Eigen::Index i = 0; i < dim; ++i) {
      row.push_back(csv::format_double(rows[r][i], 17));
    }
    t.rows.push_back(std::move(row));
  }
  csv::write_file(path, t);
}

std::vector<Eigen::VectorXd> read_embedding_csv(const fs::path& path) {
  const csv::Table t = csv::read_file(path);
  if (t.header.size() < 2 || t.header.front() != "segment_index") {
    throw FormatError("embedding file " + path.generic_string() + " has an unexpected header");
  }
  const Eigen::Index dim = static_cast<Eigen::Index>(t.header.size()) - 1;
  std::vector<Eigen::VectorXd> out;
  for (const auto& row : t.rows) {
    Eigen::VectorXd v(dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      v[i] = csv::to_double(row[static_cast<std::size_t>(i + 1)]);
    }
    out.push_back(std::move(v));
  }
  return out;
}

int checkpoint_precision(const ckpt::Checkpoint& c) {
  return c.meta.value("precision", 64);
}

}  // namespace

// ---- features stage -------------------------------------------------------------

void run_features(const PipelineConfig& cfg, int workers, StageLog* log) {
  LogGuard guard(log);
  if (cfg.manifest.empty()) throw ConfigError("manifest path missing");
  require_artifact(cfg.manifest, "synth (or point `manifest` at an existing corpus)");
  guard.read(cfg.manifest);
  corpus::Manifest m = corpus::load_manifest(cfg.manifest);
  if (m.sessions.empty()) throw ArgumentError("manifest has no admissible sessions");
  for (const auto& id : m.excluded_session_ids) {
    std::cerr << "features: session " << id << " excluded (scale scores disagree)\n";
  }

  if (!m.has_splits) {
    const auto split = corpus::split_speakers(m.sessions, corpus::SplitRatios{},
                                              mix_seed(cfg.seed, "split"));
    for (auto& rec : m.sessions) rec.split = split.by_speaker.at(rec.speaker_id);
    m.has_splits = true;
  }

  const Workspace work = cfg.workspace();
  fs::create_directories(work.features_dir());

  // First session sets the expected channel count for the rest.
  auto load_series = [&](const corpus::SessionRecord& rec,
                         std::optional<int> expected) -> dsp::ChannelSeries {
    guard.read(rec.path);
    if (rec.path.extension() == ".wav") {
      const dsp::Waveform w = dsp::normalize_peak(dsp::load_wav(rec.path));
      dsp::ChannelSeries series = dsp::mfcc(w, cfg.mfcc);
      if (expected && series.channels() != *expected) {
        throw ShapeError("session " + rec.session_id + " produced " +
                         std::to_string(series.channels()) + " channels, expected " +
                         std::to_string(*expected));
      }
      return series;
    }
    return dsp::ingest_feature_csv(rec.path, expected);
  };

  std::vector<double> durations(m.sessions.size(), 0.0);
  auto convert = [&](std::size_t i, std::optional<int> expected) {
    const auto& rec = m.sessions[i];
    const dsp::ChannelSeries series = load_series(rec, expected);
    const fs::path out = work.feature_csv(rec.session_id);
    dsp::write_feature_csv(out, series);
    guard.write(out);
    durations[i] = static_cast<double>(series.frames()) / series.frame_rate_hz;
    return static_cast<int>(series.channels());
  };

  const int channels = convert(0, std::nullopt);
  parallel_for(m.sessions.size() - 1, workers,
               [&](std::size_t i) { convert(i + 1, channels); });

  std::vector<SegmentRef> segments;
  for (std::size_t i = 0; i < m.sessions.size(); ++i) {
    auto& rec = m.sessions[i];
    if (std::abs(durations[i] - rec.duration_s) > 0.5) {
      std::cerr << "features: session " << rec.session_id << " manifest duration "
                << rec.duration_s << "s differs from the series (" << durations[i] << "s)\n";
    }
    rec.duration_s = durations[i];
    rec.path = rec.session_id + ".csv";
    const auto segs = corpus::make_segments(rec);
    if (segs.empty()) {
      std::cerr << "features: session " << rec.session_id << " too short to segment, skipped\n";
      continue;
    }
    for (const auto& s : segs) {
      segments.push_back(SegmentRef{s.session_id, s.index, s.start_s, s.end_s, s.severity,
                                    rec.split});
    }
  }
  if (segments.empty()) throw ArgumentError("no session is long enough to segment");

  corpus::write_manifest(work.working_manifest(), m.sessions);
  guard.write(work.working_manifest());
  write_segment_table(work.segments_table(), segments);
  guard.write(work.segments_table());
}

// ---- acf stage --------------------------------------------------------------------

void run_acf(const PipelineConfig& cfg, int workers, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = by_session(load_segment_table(work, guard));
  fs::create_directories(work.acf_dir());

  std::mutex warn_mutex;
  parallel_for(m.sessions.size(), workers, [&](std::size_t i) {
    const auto& rec = m.sessions[i];
    const auto it = segments.find(rec.session_id);
    if (it == segments.end()) return;
    guard.read(rec.path);
    const dsp::ChannelSeries series = dsp::ingest_feature_csv(rec.path);
    for (const auto& seg : it->second) {
      const dsp::ChannelSeries window = dsp::slice_segment(series, seg.start_s, seg.end_s);
      const dsp::ChannelSeries standardized = dsp::standardize_channels(window);
      std::vector<std::string> warnings;
      const acf::AcfMatrix matrix = acf::acf_matrix(standardized, cfg.max_delay, &warnings);
      if (!warnings.empty()) {
        std::lock_guard<std::mutex> lock(warn_mutex);
        for (const auto& w : warnings) {
          std::cerr << "acf: " << rec.session_id << " segment " << seg.index << ": " << w
                    << "\n";
        }
      }
      const fs::path out = work.acf_csv(seg.session_id, seg.index);
      acf::write_acf_csv(out, matrix);
      guard.write(out);
    }
  });

  // The standardizer sees training-split matrices only.
  std::vector<acf::AcfMatrix> train;
  for (const auto& rec : m.sessions) {
    if (rec.split != corpus::Split::Train) continue;
    const auto it = segments.find(rec.session_id);
    if (it == segments.end()) continue;
    for (const auto& seg : it->second) {
      const fs::path p = work.acf_csv(seg.session_id, seg.index);
      guard.read(p);
      train.push_back(acf::read_acf_csv(p));
    }
  }
  if (train.empty()) throw ArgumentError("training split has no segments");
  const acf::AcfStandardizer standardizer = acf::fit_acf_standardizer(train);

  ckpt::Checkpoint c;
  c.meta = json{{"kind", "acf_standardizer"},
                {"max_delay", cfg.max_delay},
                {"train_segments", train.size()}};
  ckpt::save_standardizer(c, standardizer);
  ckpt::write_checkpoint(work.standardizer_ckpt(), c);
  guard.write(work.standardizer_ckpt());
}

// ---- segment model training ----------------------------------------------------------

namespace {

template <typename Scalar>
training::History train_segment_impl(const PipelineConfig& cfg, const Workspace& work,
                                     const training::LabeledMatrices& train,
                                     const training::LabeledMatrices& val,
                                     const models::DilatedCnnConfig& model_cfg,
                                     LogGuard& guard) {
  models::DilatedCnn<Scalar> model(model_cfg, mix_seed(cfg.seed, "segment_model"));
  training::TrainOptions opts = cfg.segment_train;
  opts.seed = mix_seed(cfg.seed, "train_segment");
  const training::History history = training::fit_segment_model<Scalar>(model, train, val, opts);

  ckpt::Checkpoint c;
  c.meta = json{{"kind", "segment_cnn"},
                {"precision", cfg.precision},
                {"seed", cfg.seed},
                {"config", model_cfg},
                {"history", history}};
  ckpt::save_parameters(c, model.parameters());
  ckpt::save_bn_states(c, model.bn_states());
  fs::create_directories(work.checkpoints_dir());
  ckpt::write_checkpoint(work.segment_ckpt(), c);
  guard.write(work.segment_ckpt());

  fs::create_directories(work.reports_dir());
  const fs::path hist = work.reports_dir() / "segment_history.csv";
  training::write_history_csv(hist, history);
  guard.write(hist);
  return history;
}

}  // namespace

training::History run_train_segment(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = load_segment_table(work, guard);
  const acf::AcfStandardizer standardizer = load_standardizer_ckpt(work, guard);

  const auto train =
      load_split_matrices(work, m, segments, standardizer, corpus::Split::Train, guard);
  const auto val =
      load_split_matrices(work, m, segments, standardizer, corpus::Split::Validation, guard);
  if (train.x.empty()) throw ArgumentError("training split has no segments");
  if (val.x.empty()) throw ArgumentError("validation split has no segments");

  const auto resolved = resolve_models(cfg, train.x.front().channels);
  if (cfg.precision == 64) {
    return train_segment_impl<double>(cfg, work, train, val, resolved.segment_cnn, guard);
  }
  return train_segment_impl<float>(cfg, work, train, val, resolved.segment_cnn, guard);
}

// ---- embeddings ------------------------------------------------------------------------

namespace {

template <typename Scalar>
models::DilatedCnn<Scalar> segment_model_from_ckpt(const ckpt::Checkpoint& c) {
  const models::DilatedCnnConfig model_cfg = c.meta.at("config").get<models::DilatedCnnConfig>();
  models::DilatedCnn<Scalar> model(model_cfg, 0);
  ckpt::load_parameters(c, model.parameters());
  ckpt::load_bn_states(c, model.bn_states());
  return model;
}

template <typename Scalar>
void embed_impl(const PipelineConfig& cfg, const Workspace& work, const corpus::Manifest& m,
                const std::map<std::string, std::vector<SegmentRef>>& segments,
                const acf::AcfStandardizer& standardizer, const ckpt::Checkpoint& c,
                int workers, LogGuard& guard) {
  const models::DilatedCnn<Scalar> base = segment_model_from_ckpt<Scalar>(c);
  fs::create_directories(work.embeddings_dir());
  parallel_for(m.sessions.size(), workers, [&](std::size_t i) {
    const auto& rec = m.sessions[i];
    const auto it = segments.find(rec.session_id);
    if (it == segments.end()) {
      std::cerr << "embed: session " << rec.session_id << " has no segments, skipped\n";
      return;
    }
    models::DilatedCnn<Scalar> model = base;  // workers keep private BN buffers
    std::vector<acf::AcfMatrix> matrices;
    for (const auto& seg : it->second) {
      const fs::path p = work.acf_csv(seg.session_id, seg.index);
      require_artifact(p, "acf");
      guard.read(p);
      matrices.push_back(acf::apply_acf_standardizer(standardizer, acf::read_acf_csv(p)));
    }
    const auto rows = training::session_embeddings<Scalar>(model, matrices);
    const fs::path out = work.embedding_csv(rec.session_id);
    write_embedding_csv(out, rec.session_id, rows);
    guard.write(out);
  });
}

}  // namespace

void run_embed(const PipelineConfig& cfg, int workers, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = by_session(load_segment_table(work, guard));
  const acf::AcfStandardizer standardizer = load_standardizer_ckpt(work, guard);
  require_artifact(work.segment_ckpt(), "train-segment");
  guard.read(work.segment_ckpt());
  const ckpt::Checkpoint c = ckpt::read_checkpoint(work.segment_ckpt());
  if (checkpoint_precision(c) == 64) {
    embed_impl<double>(cfg, work, m, segments, standardizer, c, workers, guard);
  } else {
    embed_impl<float>(cfg, work, m, segments, standardizer, c, workers, guard);
  }
}

// ---- session model training ---------------------------------------------------------------

namespace {

training::LabeledSequences load_split_sequences(const Workspace& work,
                                                const corpus::Manifest& m, corpus::Split split,
                                                LogGuard& guard) {
  training::LabeledSequences out;
  for (const auto& rec : m.sessions) {
    if (rec.split != split) continue;
    const fs::path p = work.embedding_csv(rec.session_id);
    if (!fs::exists(p)) {
      std::cerr << "train-session: no embeddings for session " << rec.session_id
                << ", skipped\n";
      continue;
    }
    guard.read(p);
    out.x.push_back(read_embedding_csv(p));
    out.y.push_back(label_of(rec));
  }
  return out;
}

template <typename Scalar>
training::History train_session_impl(const PipelineConfig& cfg, const Workspace& work,
                                     const training::LabeledSequences& train,
                                     const training::LabeledSequences& val,
                                     const models::SessionLstmConfig& model_cfg,
                                     LogGuard& guard) {
  models::SessionLstm<Scalar> model(model_cfg, mix_seed(cfg.seed, "session_model"));
  training::TrainOptions opts = cfg.session_train;
  opts.lstm_schedule = true;
  opts.seed = mix_seed(cfg.seed, "train_session");
  const training::History history = training::fit_session_model<Scalar>(model, train, val, opts);

  ckpt::Checkpoint c;
  c.meta = json{{"kind", "session_lstm"},
                {"precision", cfg.precision},
                {"seed", cfg.seed},
                {"config", model_cfg},
                {"history", history}};
  ckpt::save_parameters(c, model.parameters());
  fs::create_directories(work.checkpoints_dir());
  ckpt::write_checkpoint(work.session_ckpt(), c);
  guard.write(work.session_ckpt());

  fs::create_directories(work.reports_dir());
  const fs::path hist = work.reports_dir() / "session_history.csv";
  training::write_history_csv(hist, history);
  guard.write(hist);
  return history;
}

}  // namespace

training::History run_train_session(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);

  const auto train = load_split_sequences(work, m, corpus::Split::Train, guard);
  const auto val = load_split_sequences(work, m, corpus::Split::Validation, guard);
  if (train.x.empty()) throw ArgumentError("training split has no embedded sessions");
  if (val.x.empty()) throw ArgumentError("validation split has no embedded sessions");

  models::SessionLstmConfig model_cfg = cfg.session_lstm;
  if (model_cfg.input_size < 0) {
    model_cfg.input_size = static_cast<int>(train.x.front().front().size());
  }
  if (cfg.precision == 64) {
    return train_session_impl<double>(cfg, work, train, val, model_cfg, guard);
  }
  return train_session_impl<float>(cfg, work, train, val, model_cfg, guard);
}

// ---- baseline model training ----------------------------------------------------------------

namespace {

// The trainer consumes matrix blocks; a cropped channel series rides in an
// AcfMatrix so the same batching path serves both models.
acf::AcfMatrix series_block(const dsp::ChannelSeries& window, int frames) {
  acf::AcfMatrix m;
  m.channels = static_cast<int>(window.channels());
  m.max_delay = frames - 1;
  m.values = window.data.leftCols(frames);
  return m;
}

training::LabeledMatrices load_split_crops(const Workspace& work, const corpus::Manifest& m,
                                           const std::map<std::string, std::vector<SegmentRef>>& segments,
                                           corpus::Split split, int frames, LogGuard& guard) {
  training::LabeledMatrices out;
  for (const auto& rec : m.sessions) {
    if (rec.split != split) continue;
    const auto it = segments.find(rec.session_id);
    if (it == segments.end()) continue;
    guard.read(rec.path);
    const dsp::ChannelSeries series = dsp::ingest_feature_csv(rec.path);
    for (const auto& seg : it->second) {
      const dsp::ChannelSeries window =
          dsp::standardize_channels(dsp::slice_segment(series, seg.start_s, seg.end_s));
      if (window.frames() < frames) {
        throw ShapeError("session " + rec.session_id + " segment " +
                         std::to_string(seg.index) + " is shorter than the baseline input (" +
                         std::to_string(window.frames()) + " < " + std::to_string(frames) +
                         " frames)");
      }
      out.x.push_back(series_block(window, frames));
      out.y.push_back(static_cast<int>(seg.severity));
    }
  }
  return out;
}

template <typename Scalar>
training::History train_baseline_impl(const PipelineConfig& cfg, const Workspace& work,
                                      const training::LabeledMatrices& train,
                                      const training::LabeledMatrices& val,
                                      const models::BaselineCnnConfig& model_cfg,
                                      LogGuard& guard) {
  models::BaselineCnn<Scalar> model(model_cfg, mix_seed(cfg.seed, "baseline_model"));
  training::TrainOptions opts = cfg.baseline_train;
  opts.seed = mix_seed(cfg.seed, "train_baseline");
  const training::History history = training::fit_segment_model<Scalar>(model, train, val, opts);

  ckpt::Checkpoint c;
  c.meta = json{{"kind", "baseline_cnn"},
                {"precision", cfg.precision},
                {"seed", cfg.seed},
                {"config", model_cfg},
                {"history", history}};
  ckpt::save_parameters(c, model.parameters());
  ckpt::save_bn_states(c, model.bn_states());
  fs::create_directories(work.checkpoints_dir());
  ckpt::write_checkpoint(work.baseline_ckpt(), c);
  guard.write(work.baseline_ckpt());

  fs::create_directories(work.reports_dir());
  const fs::path hist = work.reports_dir() / "baseline_history.csv";
  training::write_history_csv(hist, history);
  guard.write(hist);
  return history;
}

}  // namespace

training::History run_train_baseline(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = by_session(load_segment_table(work, guard));

  int channels = 0;
  for (const auto& rec : m.sessions) {
    if (segments.count(rec.session_id)) {
      channels = static_cast<int>(dsp::ingest_feature_csv(rec.path).channels());
      break;
    }
  }
  if (channels == 0) throw ArgumentError("no segmented sessions");
  const auto resolved = resolve_models(cfg, channels);
  const int frames = resolved.baseline_cnn.input_frames;

  const auto train =
      load_split_crops(work, m, segments, corpus::Split::Train, frames, guard);
  const auto val =
      load_split_crops(work, m, segments, corpus::Split::Validation, frames, guard);
  if (train.x.empty()) throw ArgumentError("training split has no segments");
  if (val.x.empty()) throw ArgumentError("validation split has no segments");

  if (cfg.precision == 64) {
    return train_baseline_impl<double>(cfg, work, train, val, resolved.baseline_cnn, guard);
  }
  return train_baseline_impl<float>(cfg, work, train, val, resolved.baseline_cnn, guard);
}

// ---- evaluation -------------------------------------------------------------------------------

namespace {

struct SegmentPredictions {
  std::vector<eval::Prediction> flat;  // every test segment, manifest order
  std::map<std::string, std::vector<eval::Prediction>> per_session;
};

template <typename Scalar>
SegmentPredictions predict_test_segments(const Workspace& work, const corpus::Manifest& m,
                                         const std::map<std::string, std::vector<SegmentRef>>& segments,
                                         const acf::AcfStandardizer& standardizer,
                                         const ckpt::Checkpoint& c, LogGuard& guard) {
  models::DilatedCnn<Scalar> model = segment_model_from_ckpt<Scalar>(c);
  SegmentPredictions out;
  for (const auto& rec : m.sessions) {
    if (rec.split != corpus::Split::Test) continue;
    const auto it = segments.find(rec.session_id);
    if (it == segments.end()) continue;
    for (const auto& seg : it->second) {
      const fs::path p = work.acf_csv(seg.session_id, seg.index);
      require_artifact(p, "acf");
      guard.read(p);
      const acf::AcfMatrix matrix =
          acf::apply_acf_standardizer(standardizer, acf::read_acf_csv(p));
      const models::SegmentPrediction sp = models::forward_segment<Scalar>(model, matrix);
      eval::Prediction pred;
      pred.id = seg.session_id + "_" + zero_pad(seg.index, 3);
      pred.truth = static_cast<int>(seg.severity);
      pred.predicted = sp.predicted;
      pred.confidence = sp.confidence;
      out.flat.push_back(pred);
      out.per_session[seg.session_id].push_back(pred);
    }
  }
  return out;
}

SegmentPredictions test_segment_predictions(const PipelineConfig& cfg, const Workspace& work,
                                            const corpus::Manifest& m,
                                            const std::map<std::string, std::vector<SegmentRef>>& segments,
                                            LogGuard& guard) {
  const acf::AcfStandardizer standardizer = load_standardizer_ckpt(work, guard);
  require_artifact(work.segment_ckpt(), "train-segment");
  guard.read(work.segment_ckpt());
  const ckpt::Checkpoint c = ckpt::read_checkpoint(work.segment_ckpt());
  (void)cfg;
  if (checkpoint_precision(c) == 64) {
    return predict_test_segments<double>(work, m, segments, standardizer, c, guard);
  }
  return predict_test_segments<float>(work, m, segments, standardizer, c, guard);
}

template <typename Scalar>
std::vector<eval::Prediction> predict_test_sessions(const Workspace& work,
                                                    const corpus::Manifest& m,
                                                    const ckpt::Checkpoint& c, LogGuard& guard) {
  const models::SessionLstmConfig model_cfg =
      c.meta.at("config").get<models::SessionLstmConfig>();
  models::SessionLstm<Scalar> model(model_cfg, 0);
  ckpt::load_parameters(c, model.parameters());

  std::vector<eval::Prediction> out;
  for (const auto& rec : m.sessions) {
    if (rec.split != corpus::Split::Test) continue;
    const fs::path p = work.embedding_csv(rec.session_id);
    if (!fs::exists(p)) {
      std::cerr << "evaluate: no embeddings for test session " << rec.session_id
                << ", skipped\n";
      continue;
    }
    guard.read(p);
    const auto rows = read_embedding_csv(p);
    const Eigen::Vector3d probs = models::forward_session<Scalar>(model, rows);
    eval::Prediction pred;
    pred.id = rec.session_id;
    pred.truth = label_of(rec);
    Eigen::Index arg = 0;
    probs.maxCoeff(&arg);
    pred.predicted = static_cast<int>(arg);
    pred.confidence = probs[arg];
    out.push_back(pred);
  }
  return out;
}

}  // namespace

EvaluateResult run_evaluate(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = by_session(load_segment_table(work, guard));
  fs::create_directories(work.reports_dir());

  const SegmentPredictions seg_preds =
      test_segment_predictions(cfg, work, m, segments, guard);
  if (seg_preds.flat.empty()) throw ArgumentError("test split has no segments");

  const eval::ConfusionMatrix seg_cm = eval::confusion(seg_preds.flat);
  const eval::Metrics seg_metrics = eval::metrics(seg_cm);
  eval::write_predictions_csv(work.reports_dir() / "segment_predictions.csv", seg_preds.flat);
  eval::write_metrics_csv(work.reports_dir() / "segment_metrics.csv", seg_metrics);
  eval::write_confusion_csv(work.reports_dir() / "segment_confusion.csv", seg_cm);
  eval::write_confusion_svg(work.reports_dir() / "segment_confusion.svg", seg_cm);
  for (const char* name : {"segment_predictions.csv", "segment_metrics.csv",
                           "segment_confusion.csv", "segment_confusion.svg"}) {
    guard.write(work.reports_dir() / name);
  }

  require_artifact(work.session_ckpt(), "train-session");
  guard.read(work.session_ckpt());
  const ckpt::Checkpoint c = ckpt::read_checkpoint(work.session_ckpt());
  const std::vector<eval::Prediction> session_preds =
      checkpoint_precision(c) == 64 ? predict_test_sessions<double>(work, m, c, guard)
                                    : predict_test_sessions<float>(work, m, c, guard);
  if (session_preds.empty()) throw ArgumentError("test split has no embedded sessions");

  const eval::ConfusionMatrix ses_cm = eval::confusion(session_preds);
  const eval::Metrics ses_metrics = eval::metrics(ses_cm);
  eval::write_predictions_csv(work.reports_dir() / "session_predictions.csv", session_preds);
  eval::write_metrics_csv(work.reports_dir() / "session_metrics.csv", ses_metrics);
  eval::write_confusion_csv(work.reports_dir() / "session_confusion.csv", ses_cm);
  eval::write_confusion_svg(work.reports_dir() / "session_confusion.svg", ses_cm);

  std::vector<long> counts;
  counts.reserve(session_preds.size());
  for (const auto& pred : session_preds) {
    const auto it = segments.find(pred.id);
    counts.push_back(it == segments.end() ? 0 : static_cast<long>(it->second.size()));
  }
  const auto buckets = eval::accuracy_by_segment_count(session_preds, counts, cfg.bucket_edges);
  eval::write_bucket_csv(work.reports_dir() / "session_bucket_accuracy.csv", buckets);
  eval::write_bucket_svg(work.reports_dir() / "session_bucket_accuracy.svg", buckets);

  const auto missed = eval::misclassification_report(session_preds, m.sessions);
  eval::write_misclassification_csv(work.reports_dir() / "misclassified_sessions.csv", missed);
  for (const char* name :
       {"session_predictions.csv", "session_metrics.csv", "session_confusion.csv",
        "session_confusion.svg", "session_bucket_accuracy.csv", "session_bucket_accuracy.svg",
        "misclassified_sessions.csv"}) {
    guard.write(work.reports_dir() / name);
  }

  return EvaluateResult{seg_metrics, ses_metrics};
}

eval::Metrics run_vote(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = by_session(load_segment_table(work, guard));
  fs::create_directories(work.reports_dir());

  const SegmentPredictions seg_preds =
      test_segment_predictions(cfg, work, m, segments, guard);
  if (seg_preds.flat.empty()) throw ArgumentError("test split has no segments");

  Rng rng(mix_seed(cfg.seed, "vote"));
  std::vector<eval::Prediction> voted;
  for (const auto& rec : m.sessions) {
    if (rec.split != corpus::Split::Test) continue;
    const auto it = seg_preds.per_session.find(rec.session_id);
    if (it == seg_preds.per_session.end()) continue;
    const eval::VoteOutcome outcome =
        eval::plurality_vote(it->second, cfg.vote_fraction, rng);
    eval::Prediction pred;
    pred.id = rec.session_id;
    pred.truth = label_of(rec);
    pred.predicted = outcome.predicted;
    pred.confidence = outcome.kept == 0
                          ? 0.0
                          : static_cast<double>(outcome.kept_counts[static_cast<std::size_t>(
                                outcome.predicted)]) /
                                static_cast<double>(outcome.kept);
    voted.push_back(pred);
  }

  const eval::ConfusionMatrix cm = eval::confusion(voted);
  const eval::Metrics metrics = eval::metrics(cm);
  eval::write_predictions_csv(work.reports_dir() / "vote_predictions.csv", voted);
  eval::write_metrics_csv(work.reports_dir() / "vote_metrics.csv", metrics);
  eval::write_confusion_csv(work.reports_dir() / "vote_confusion.csv", cm);
  for (const char* name : {"vote_predictions.csv", "vote_metrics.csv", "vote_confusion.csv"}) {
    guard.write(work.reports_dir() / name);
  }
  return metrics;
}

// ---- grid search -------------------------------------------------------------------------------

namespace {

double uar_at_best(const training::History& h) {
  for (const auto& e : h.epochs) {
    if (e.epoch == h.best_epoch) return e.val_uar;
  }
  return 0.0;
}

template <typename Scalar>
void segment_grid_impl(const PipelineConfig& cfg, const training::LabeledMatrices& train,
                       const training::LabeledMatrices& val,
                       const models::DilatedCnnConfig& base,
                       std::vector<SegmentGridRow>& rows) {
  int combo = 0;
  for (int o1 : {16, 32}) {
    for (int o2 : {8, 16}) {
      for (int k1 : {3, 4}) {
        for (int o3 : {8, 16}) {
          for (double dp : {0.4, 0.5}) {
            models::DilatedCnnConfig c = base;
            c.parallel_filters = o1;
            c.c6_filters = o2;
            c.c6_kernel = k1;
            c.d2_units = o3;
            c.dropout = dp;
            models::DilatedCnn<Scalar> model(c, mix_seed(cfg.seed, "grid_segment", combo));
            training::TrainOptions opts = cfg.segment_train;
            opts.seed = mix_seed(cfg.seed, "grid_segment_train", combo);
            const auto history = training::fit_segment_model<Scalar>(model, train, val, opts);
            rows.push_back(SegmentGridRow{c, history.best_val_loss, uar_at_best(history),
                                          history.best_epoch});
            ++combo;
          }
        }
      }
    }
  }
}

template <typename Scalar>
void session_grid_impl(const PipelineConfig& cfg, const training::LabeledSequences& train,
                       const training::LabeledSequences& val,
                       const models::SessionLstmConfig& base,
                       std::vector<SessionGridRow>& rows) {
  int combo = 0;
  for (int l1 : {64, 128}) {
    for (int l2 : {64}) {
      for (double rd1 : {0.4, 0.6, 0.7}) {
        for (double rd2 : {0.3, 0.4, 0.7}) {
          for (int d3 : {16, 32, 64}) {
            models::SessionLstmConfig c = base;
            c.lstm1_units = l1;
            c.lstm2_units = l2;
            c.recurrent_dropout1 = rd1;
            c.recurrent_dropout2 = rd2;
            c.d3_units = d3;
            models::SessionLstm<Scalar> model(c, mix_seed(cfg.seed, "grid_session", combo));
            training::TrainOptions opts = cfg.session_train;
            opts.lstm_schedule = true;
            opts.seed = mix_seed(cfg.seed, "grid_session_train", combo);
            const auto history = training::fit_session_model<Scalar>(model, train, val, opts);
            rows.push_back(SessionGridRow{c, history.best_val_loss, uar_at_best(history),
                                          history.best_epoch});
            ++combo;
          }
        }
      }
    }
  }
}

}  // namespace

std::vector<SegmentGridRow> gridsearch_segment(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto segments = load_segment_table(work, guard);
  const acf::AcfStandardizer standardizer = load_standardizer_ckpt(work, guard);
  const auto train =
      load_split_matrices(work, m, segments, standardizer, corpus::Split::Train, guard);
  const auto val =
      load_split_matrices(work, m, segments, standardizer, corpus::Split::Validation, guard);
  if (train.x.empty() || val.x.empty()) throw ArgumentError("train or validation split empty");

  const auto resolved = resolve_models(cfg, train.x.front().channels);
  std::vector<SegmentGridRow> rows;
  if (cfg.precision == 64) {
    segment_grid_impl<double>(cfg, train, val, resolved.segment_cnn, rows);
  } else {
    segment_grid_impl<float>(cfg, train, val, resolved.segment_cnn, rows);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.val_loss < b.val_loss;
  });

  fs::create_directories(work.reports_dir());
  csv::Table t;
  t.header = {"o1", "o2", "k1", "o3", "dp", "val_loss", "val_uar", "best_epoch"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.cnn.parallel_filters), std::to_string(r.cnn.c6_filters),
                      std::to_string(r.cnn.c6_kernel), std::to_string(r.cnn.d2_units),
                      csv::format_double(r.cnn.dropout), csv::format_double(r.val_loss),
                      csv::format_double(r.val_uar), std::to_string(r.best_epoch)});
  }
  const fs::path out = work.reports_dir() / "gridsearch_segment.csv";
  csv::write_file(out, t);
  guard.write(out);
  return rows;
}

std::vector<SessionGridRow> gridsearch_session(const PipelineConfig& cfg, StageLog* log) {
  LogGuard guard(log);
  const Workspace work = cfg.workspace();
  const corpus::Manifest m = load_working_manifest(work, guard);
  const auto train = load_split_sequences(work, m, corpus::Split::Train, guard);
  const auto val = load_split_sequences(work, m, corpus::Split::Validation, guard);
  if (train.x.empty() || val.x.empty()) throw ArgumentError("train or validation split empty");

  models::SessionLstmConfig base = cfg.session_lstm;
  if (base.input_size < 0) base.input_size = static_cast<int>(train.x.front().front().size());
  std::vector<SessionGridRow> rows;
  if (cfg.precision == 64) {
    session_grid_impl<double>(cfg, train, val, base, rows);
  } else {
    session_grid_impl<float>(cfg, train, val, base, rows);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.val_loss < b.val_loss;
  });

  fs::create_directories(work.reports_dir());
  csv::Table t;
  t.header = {"lstm1", "lstm2", "rd1", "rd2", "d3", "val_loss", "val_uar", "best_epoch"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.lstm.lstm1_units), std::to_string(r.lstm.lstm2_units),
                      csv::format_double(r.lstm.recurrent_dropout1),
                      csv::format_double(r.lstm.recurrent_dropout2),
                      std::to_string(r.lstm.d3_units), csv::format_double(r.val_loss),
                      csv::format_double(r.val_uar), std::to_string(r.best_epoch)});
  }
  const fs::path out = work.reports_dir() / "gridsearch_session.csv";
  csv::write_file(out, t);
  guard.write(out);
  return rows;
}

// ---- gradient checks ----------------------------------------------------------------------------

namespace {

nn::Tensor<double> random_tensor(std::vector<Eigen::Index> shape, std::uint64_t seed,
                                 double scale = 1.0) {
  nn::Tensor<double> t(std::move(shape));
  Rng rng(seed);
  for (Eigen::Index i = 0; i < t.numel(); ++i) t.values[i] = scale * rng.normal();
  return t;
}

struct GradCase {
  std::string name;
  double tolerance;
  std::function<nn::GradCheckReport()> run;
};

nn::GradCheckReport check_dense() {
  nn::Parameter<double> w("w", {4, 3}), b("b", {3});
  Rng rng(5);
  nn::he_uniform_init(w.value, 4, rng);
  const auto x = random_tensor({5, 4}, 17);
  auto run = [&](bool backward) {
    if (backward) {
      w.zero_grad();
      b.zero_grad();
    }
    nn::Tape<double> tape(0, true);
    auto logits =
        nn::dense(tape.input(x), tape.param(w), tape.param(b), nn::Activation::LeakyReLU);
    auto loss = nn::softmax_cross_entropy(logits, {0, 1, 2, 1, 0}, {1.0, 2.0, 0.5});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&w, &b}, run);
}

nn::GradCheckReport check_conv_dilated() {
  nn::Parameter<double> k("k", {2, 3, 5, 1}), b("b", {2});
  nn::Parameter<double> wd("wd", {2 * 17, 3}), bd("bd", {3});
  Rng rng(7);
  nn::he_uniform_init(k.value, 15, rng);
  nn::he_uniform_init(wd.value, 34, rng);
  const auto x = random_tensor({2, 3, 17, 1}, 41);
  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : std::vector<nn::Parameter<double>*>{&k, &b, &wd, &bd}) p->zero_grad();
    }
    nn::Tape<double> tape(0, true);
    auto y = nn::conv2d(tape.input(x), tape.param(k), tape.param(b),
                        {.stride_h = 1, .dilation_h = 3, .padding = nn::Padding::Same});
    auto logits =
        nn::dense(nn::flatten(y), tape.param(wd), tape.param(bd), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {1, 0}, {1.0, 1.0, 1.0});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&k, &b, &wd, &bd}, run);
}

nn::GradCheckReport check_conv_strided() {
  nn::Parameter<double> k("k", {2, 2, 3, 1}), b("b", {2});
  nn::Parameter<double> wd("wd", {12, 3}), bd("bd", {3});
  Rng rng(19);
  nn::he_uniform_init(k.value, 6, rng);
  nn::he_uniform_init(wd.value, 12, rng);
  const auto x = random_tensor({3, 2, 11, 1}, 43);
  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : std::vector<nn::Parameter<double>*>{&k, &b, &wd, &bd}) p->zero_grad();
    }
    nn::Tape<double> tape(0, true);
    auto y = nn::conv2d(tape.input(x), tape.param(k), tape.param(b),
                        {.stride_h = 2, .padding = nn::Padding::Same});
    auto logits =
        nn::dense(nn::flatten(y), tape.param(wd), tape.param(bd), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {0, 1, 2}, {1.0, 1.0, 1.0});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&k, &b, &wd, &bd}, run);
}

nn::GradCheckReport check_batch_norm() {
  nn::Parameter<double> gamma("g", {3}), beta("beta", {3});
  gamma.value.values.setOnes();
  nn::Parameter<double> w("w", {18, 3}), bd("bd", {3});
  Rng rng(6);
  nn::he_uniform_init(w.value, 18, rng);
  const auto x = random_tensor({4, 3, 6, 1}, 71, 2.0);
  auto run = [&](bool backward) {
    nn::BatchNormState<double> state(3);
    if (backward) {
      for (auto* p : std::vector<nn::Parameter<double>*>{&gamma, &beta, &w, &bd}) {
        p->zero_grad();
      }
    }
    nn::Tape<double> tape(0, true);
    auto y = nn::batch_norm(tape.input(x), tape.param(gamma), tape.param(beta), state);
    auto logits =
        nn::dense(nn::flatten(y), tape.param(w), tape.param(bd), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {0, 1, 2, 1}, {1.0, 1.3, 0.7});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&gamma, &beta, &w, &bd}, run);
}

nn::GradCheckReport check_max_pool() {
  nn::Parameter<double> k("k", {2, 1, 3, 1}), b("b", {2});
  nn::Parameter<double> w("w", {10, 3}), bd("bd", {3});
  Rng rng(8);
  nn::he_uniform_init(k.value, 3, rng);
  nn::he_uniform_init(w.value, 10, rng);
  const auto x = random_tensor({2, 1, 12, 1}, 83);
  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : std::vector<nn::Parameter<double>*>{&k, &b, &w, &bd}) p->zero_grad();
    }
    nn::Tape<double> tape(0, true);
    auto y = nn::conv2d(tape.input(x), tape.param(k), tape.param(b),
                        {.padding = nn::Padding::Valid});
    auto pooled = nn::max_pool(y, 2, 1);
    auto logits =
        nn::dense(nn::flatten(pooled), tape.param(w), tape.param(bd), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {2, 0}, {1.0, 1.0, 1.0});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&k, &b, &w, &bd}, run);
}

nn::GradCheckReport check_dropout() {
  nn::Parameter<double> w("w", {6, 3}), b("b", {3});
  Rng rng(9);
  nn::he_uniform_init(w.value, 6, rng);
  const auto x = random_tensor({4, 6}, 53);
  auto run = [&](bool backward) {
    if (backward) {
      w.zero_grad();
      b.zero_grad();
    }
    nn::Tape<double> tape(21, true);  // fixed seed keeps the mask identical per call
    auto h = nn::dropout(nn::dense(tape.input(x), tape.param(w), tape.param(b),
                                   nn::Activation::ReLU),
                         0.4);
    auto loss = nn::softmax_cross_entropy(h, {0, 2, 1, 0}, {1.0, 1.0, 1.0});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&w, &b}, run);
}

nn::GradCheckReport check_lstm(double recurrent_dropout, std::uint64_t tape_seed) {
  const Eigen::Index f = 3, u = 4;
  nn::LstmLayer<double> layer("l", f, u, recurrent_dropout);
  Rng rng(10);
  nn::glorot_uniform_init(layer.w.value, f, 4 * u, rng);
  nn::uniform_init(layer.r.value, 0.4, rng);
  nn::Parameter<double> w("w", {u, 3}), b("b", {3});
  nn::glorot_uniform_init(w.value, u, 3, rng);

  std::vector<nn::Tensor<double>> xs;
  for (int t = 0; t < 5; ++t) xs.push_back(random_tensor({2, f}, 100 + t));
  const std::vector<std::vector<double>> mask = {{1, 1}, {1, 1}, {1, 1}, {1, 0}, {1, 0}};

  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : std::vector<nn::Parameter<double>*>{&layer.w, &layer.r, &layer.b, &w, &b}) {
        p->zero_grad();
      }
    }
    nn::Tape<double> tape(tape_seed, true);
    std::vector<nn::Var<double>> inputs;
    for (const auto& x : xs) inputs.push_back(tape.input(x));
    auto states = nn::lstm_forward(tape, layer, inputs, mask);
    auto logits =
        nn::dense(states.back(), tape.param(w), tape.param(b), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {1, 2}, {1.0, 1.0, 1.0});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&layer.w, &layer.r, &layer.b, &w, &b}, run);
}

nn::GradCheckReport check_weighted_ce() {
  nn::Parameter<double> w("w", {5, 3}), b("b", {3});
  Rng rng(13);
  nn::he_uniform_init(w.value, 5, rng);
  const auto x = random_tensor({6, 5}, 29);
  auto run = [&](bool backward) {
    if (backward) {
      w.zero_grad();
      b.zero_grad();
    }
    nn::Tape<double> tape(0, true);
    auto logits = nn::dense(tape.input(x), tape.param(w), tape.param(b), nn::Activation::None);
    auto loss = nn::softmax_cross_entropy(logits, {0, 0, 1, 2, 2, 2}, {3.1, 0.8, 0.7});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>({&w, &b}, run);
}

nn::GradCheckReport check_full_cnn() {
  models::DilatedCnnConfig cfg;
  cfg.input_channels = 4;
  cfg.input_delay_bins = 11;
  cfg.parallel_filters = 16;
  cfg.c6_filters = 8;
  cfg.c6_kernel = 3;
  cfg.d1_units = 6;
  cfg.d2_units = 8;
  cfg.dropout = 0.4;
  models::DilatedCnn<double> model(cfg, 77);
  auto params = model.parameters();
  const auto x = random_tensor({2, 4, 11, 1}, 88);
  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : params) p->zero_grad();
    }
    models::DilatedCnn<double> scratch = model;  // fresh BN state per call
    nn::Tape<double> tape(5, true);
    auto out = scratch.forward(tape, tape.input(x));
    auto loss = nn::softmax_cross_entropy(out.logits, {0, 2}, {1.0, 1.2, 0.8});
    if (backward) {
      tape.backward(loss);
      auto sp = scratch.parameters();
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->grad.values += sp[i]->grad.values;
      }
    }
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>(params, run, 1e-5, 40);
}

nn::GradCheckReport check_full_lstm() {
  models::SessionLstmConfig cfg;
  cfg.input_size = 4;
  cfg.lstm1_units = 5;
  cfg.lstm2_units = 4;
  cfg.recurrent_dropout1 = 0.3;
  cfg.recurrent_dropout2 = 0.2;
  cfg.d3_units = 6;
  models::SessionLstm<double> model(cfg, 31);
  auto params = model.parameters();
  std::vector<nn::Tensor<double>> xs;
  for (int t = 0; t < 4; ++t) xs.push_back(random_tensor({2, 4}, 300 + t));
  const std::vector<std::vector<double>> mask = {{1, 1}, {1, 1}, {1, 0}, {1, 0}};
  auto run = [&](bool backward) {
    if (backward) {
      for (auto* p : params) p->zero_grad();
    }
    nn::Tape<double> tape(9, true);
    std::vector<nn::Var<double>> inputs;
    for (const auto& x : xs) inputs.push_back(tape.input(x));
    auto logits = model.forward(tape, inputs, mask);
    auto loss = nn::softmax_cross_entropy(logits, {1, 0}, {1.0, 1.1, 0.9});
    if (backward) tape.backward(loss);
    return static_cast<double>(loss.value().values[0]);
  };
  return nn::gradient_check<double>(params, run, 1e-5, 40);
}

}  // namespace

int run_gradcheck(std::ostream& out) {
  const std::vector<GradCase> cases = {
      {"dense", 1e-4, check_dense},
      {"conv2d dilated same-padding", 1e-4, check_conv_dilated},
      {"conv2d strided", 1e-4, check_conv_strided},
      {"batch norm", 1e-4, check_batch_norm},
      {"max pool", 1e-4, check_max_pool},
      {"dropout", 1e-4, check_dropout},
      {"weighted softmax cross-entropy", 1e-4, check_weighted_ce},
      {"lstm sequence", 1e-4, [] { return check_lstm(0.0, 0); }},
      {"lstm recurrent dropout", 1e-4, [] { return check_lstm(0.3, 77); }},
      {"dilated cnn composition", 1e-3, check_full_cnn},
      {"session lstm composition", 1e-3, check_full_lstm},
  };
  int failures = 0;
  for (const auto& c : cases) {
    const nn::GradCheckReport report = c.run();
    const bool ok = report.pass(c.tolerance);
    if (!ok) ++failures;
    std::ostringstream line;
    line << "gradcheck " << c.name << ": max rel err " << report.worst() << " (tolerance "
         << c.tolerance << ") " << (ok ? "ok" : "FAIL") << "\n";
    out << line.str();
  }
  return failures;
}

}  // namespace acfpipe::pipeline
