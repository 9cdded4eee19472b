#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "acfpipe/corpus.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::eval {

// One scored prediction; `id` names a segment or session depending on level.
struct Prediction {
  std::string id;
  int truth = 0;
  int predicted = 0;
  double confidence = 1.0;  // in [0,1]
};

// Rows: true class, columns: predicted class; order Normal, Moderate, Severe.
using ConfusionMatrix = Eigen::Matrix<long, 3, 3>;

ConfusionMatrix confusion(const std::vector<Prediction>& preds);
ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool f1_defined = true;  // false when support or predicted count is zero
  long support = 0;
};

struct Metrics {
  double accuracy = 0.0;
  double uar = 0.0;  // mean recall over classes with support
  std::array<ClassMetrics, 3> per_class{};
  long total = 0;
};

Metrics metrics(const ConfusionMatrix& cm);

struct VoteOutcome {
  int predicted = 0;
  long kept = 0;                        // ballots counted
  std::array<long, 3> kept_counts{};    // votes per class among the kept
  bool tie_broken = false;              // modal tie resolved by rng
};

// Mode of the ceil(fraction*n) most confident segment predictions.
// Confidence ties keep earlier segments; modal ties are drawn from rng.
VoteOutcome plurality_vote(const std::vector<Prediction>& segments, double fraction,
                           Rng& rng);

struct BucketRow {
  long lo = 0;
  long hi = 0;  // inclusive; hi < 0 means unbounded
  long sessions = 0;
  long correct = 0;
  double accuracy = 0.0;
};

// Buckets session predictions by their segment counts. Edges define
// [e0,e1), [e1,e2), ..., [ek,inf); empty edges group by exact count.
// Empty buckets are dropped.
std::vector<BucketRow> accuracy_by_segment_count(const std::vector<Prediction>& sessions,
                                                 const std::vector<long>& segment_counts,
                                                 const std::vector<long>& bucket_edges);

struct MisclassifiedSession {
  std::string speaker_id;
  std::string session_id;
  int truth = 0;
  int predicted = 0;
  std::vector<corpus::ScaleScore> scores;
};

// Every wrong session prediction with its scale scores, grouped by speaker
// (speakers ordered by id, a speaker's sessions in prediction order).
std::vector<MisclassifiedSession> misclassification_report(
    const std::vector<Prediction>& sessions,
    const std::vector<corpus::SessionRecord>& records);

// ---- report files ----------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, const Metrics& m);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);
void write_bucket_csv(const std::filesystem::path& path, const std::vector<BucketRow>& rows);
void write_misclassification_csv(const std::filesystem::path& path,
                                 const std::vector<MisclassifiedSession>& rows);
void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<Prediction>& preds);
std::vector<Prediction> read_predictions_csv(const std::filesystem::path& path);

void write_confusion_svg(const std::filesystem::path& path, const ConfusionMatrix& cm);
void write_bucket_svg(const std::filesystem::path& path, const std::vector<BucketRow>& rows);

}  // namespace acfpipe::eval
