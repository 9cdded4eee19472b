#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "acfpipe/dsp.hpp"
#include "acfpipe/evaluation.hpp"
#include "acfpipe/models.hpp"
#include "acfpipe/synth.hpp"
#include "acfpipe/training.hpp"

// Stage orchestration over a fixed work-dir layout:
//   features/     per-session channel series, working manifest, segment table,
//                 embeddings/<session>.csv
//   acf/          per-segment correlation matrices and the train-fitted standardizer
//   checkpoints/  segment.ckpt, session.ckpt, baseline.ckpt
//   reports/      histories, metrics, predictions, confusions, plots
// Every stage reads upstream artifacts from the work dir, never the caller's
// input files (the one exception is `features`, which ingests the corpus).
namespace acfpipe::pipeline {

using nlohmann::json;

// Which data files a stage touched, for split-hygiene and idempotence tests.
struct StageLog {
  std::vector<std::string> reads;
  std::vector<std::string> writes;

  void note_read(const std::filesystem::path& p) { reads.push_back(p.generic_string()); }
  void note_write(const std::filesystem::path& p) { writes.push_back(p.generic_string()); }
};

struct Workspace {
  std::filesystem::path root;

  std::filesystem::path features_dir() const { return root / "features"; }
  std::filesystem::path acf_dir() const { return root / "acf"; }
  std::filesystem::path checkpoints_dir() const { return root / "checkpoints"; }
  std::filesystem::path reports_dir() const { return root / "reports"; }
  std::filesystem::path embeddings_dir() const { return features_dir() / "embeddings"; }

  std::filesystem::path working_manifest() const { return features_dir() / "manifest.csv"; }
  std::filesystem::path segments_table() const { return features_dir() / "segments.csv"; }
  std::filesystem::path feature_csv(const std::string& session_id) const {
    return features_dir() / (session_id + ".csv");
  }
  std::filesystem::path acf_csv(const std::string& session_id, int segment_index) const;
  std::filesystem::path standardizer_ckpt() const { return acf_dir() / "standardizer.ckpt"; }
  std::filesystem::path embedding_csv(const std::string& session_id) const {
    return embeddings_dir() / (session_id + ".csv");
  }
  std::filesystem::path segment_ckpt() const { return checkpoints_dir() / "segment.ckpt"; }
  std::filesystem::path session_ckpt() const { return checkpoints_dir() / "session.ckpt"; }
  std::filesystem::path baseline_ckpt() const { return checkpoints_dir() / "baseline.ckpt"; }
};

// Model sections accept -1 for the fields that follow from the corpus and the
// delay budget; resolve_models() fills them in once the channel count is known.
struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path work_dir;
  dsp::FeatureSource source = dsp::FeatureSource::Synthetic;
  int max_delay = 50;
  int precision = 32;  // training scalar width; 32 or 64
  std::uint64_t seed = 0;
  double vote_fraction = 0.5;
  std::vector<long> bucket_edges;  // session-count buckets; empty = exact counts

  models::DilatedCnnConfig segment_cnn;
  models::SessionLstmConfig session_lstm;
  models::BaselineCnnConfig baseline_cnn;
  training::TrainOptions segment_train;
  training::TrainOptions session_train;
  training::TrainOptions baseline_train;
  dsp::MfccConfig mfcc;

  // Unknown-key reports collected while parsing; config_violations surfaces them.
  std::vector<std::string> parse_notes;

  PipelineConfig();

  Workspace workspace() const { return Workspace{work_dir}; }
};

struct ResolvedModels {
  models::DilatedCnnConfig segment_cnn;
  models::SessionLstmConfig session_lstm;
  models::BaselineCnnConfig baseline_cnn;
};

// Fills the -1 sentinels: CNN input from the channel count and max delay,
// LSTM input from the CNN embedding width, baseline input from the channels.
ResolvedModels resolve_models(const PipelineConfig& cfg, int feature_channels);

// Partial JSON: absent keys keep defaults, unknown keys are config violations.
PipelineConfig config_from_json(const json& j, const std::filesystem::path& base_dir);
json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const PipelineConfig& cfg);

// Every problem with the config and the files it references, in one pass:
// schema violations, missing files, model-section violations and the
// max_delay vs shortest-segment cross-check.
std::vector<std::string> config_violations(const PipelineConfig& cfg);
void validate_config(const PipelineConfig& cfg);  // throws ConfigError with the full list

json synth_spec_to_json(const synth::SynthSpec& spec);
synth::SynthSpec synth_spec_from_json(const json& j);  // partial, like the config
synth::SynthSpec load_synth_spec(const std::filesystem::path& path);

// Ingests the corpus behind cfg.manifest: converts WAV input to MFCC series,
// rewrites feature CSVs in canonical form, assigns speaker-disjoint splits
// when the manifest has none, and emits the working manifest + segment table.
void run_features(const PipelineConfig& cfg, int workers = 1, StageLog* log = nullptr);

// Slices segments, standardizes each channel within the segment, computes the
// delayed-correlation matrices, and fits the matrix standardizer on the
// training split only.
void run_acf(const PipelineConfig& cfg, int workers = 1, StageLog* log = nullptr);

training::History run_train_segment(const PipelineConfig& cfg, StageLog* log = nullptr);

// Eval-mode embeddings for every segmented session, one CSV per session.
void run_embed(const PipelineConfig& cfg, int workers = 1, StageLog* log = nullptr);

training::History run_train_session(const PipelineConfig& cfg, StageLog* log = nullptr);

// Baseline CNN over fixed-length crops of the standardized channel series.
training::History run_train_baseline(const PipelineConfig& cfg, StageLog* log = nullptr);

struct EvaluateResult {
  eval::Metrics segment;
  eval::Metrics session;
};

// Test-split metrics for the segment CNN and the session LSTM; writes
// predictions, metrics, confusions, the per-segment-count accuracy table and
// the misclassified-session report.
EvaluateResult run_evaluate(const PipelineConfig& cfg, StageLog* log = nullptr);

// Plurality vote over the segment CNN's test predictions.
eval::Metrics run_vote(const PipelineConfig& cfg, StageLog* log = nullptr);

struct SegmentGridRow {
  models::DilatedCnnConfig cnn;
  double val_loss = 0.0;
  double val_uar = 0.0;
  int best_epoch = 0;
};
struct SessionGridRow {
  models::SessionLstmConfig lstm;
  double val_loss = 0.0;
  double val_uar = 0.0;
  int best_epoch = 0;
};

// Exhaustive grids over the documented hyper-parameter ranges, ranked by
// validation loss; both validation loss and UAR are reported per combination.
std::vector<SegmentGridRow> gridsearch_segment(const PipelineConfig& cfg,
                                               StageLog* log = nullptr);
std::vector<SessionGridRow> gridsearch_session(const PipelineConfig& cfg,
                                               StageLog* log = nullptr);

// Finite-difference checks for every layer kind plus the full CNN and LSTM
// compositions at 64-bit precision. Prints one line per check; returns the
// number of failures.
int run_gradcheck(std::ostream& out);

}  // namespace acfpipe::pipeline
