#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace acfpipe::corpus {

enum class Scale { HAMD, QIDS };

enum class SeverityClass { Normal = 0, Moderate = 1, Severe = 2 };

enum class Split { Train = 0, Validation = 1, Test = 2 };

constexpr int kNumClasses = 3;

const char* to_string(SeverityClass c);
const char* to_string(Split s);
const char* to_string(Scale s);
std::optional<SeverityClass> class_from_string(const std::string& s);
std::optional<Split> split_from_string(const std::string& s);

struct ScaleScore {
  Scale scale = Scale::HAMD;
  int score = 0;
};

// Severity level on the 1..5 scale (1=Normal .. 5=Very Severe).
using SeverityLevel = int;

struct SessionRecord {
  std::string session_id;
  std::string speaker_id;
  std::vector<ScaleScore> scores;
  SeverityClass severity = SeverityClass::Normal;
  Split split = Split::Train;
  std::filesystem::path path;  // audio or feature file
  double duration_s = 0.0;
};

struct SegmentRecord {
  std::string session_id;
  int index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  SeverityClass severity = SeverityClass::Normal;
};

// Maps a rating-scale score onto the 1..5 severity level. Intervals are
// closed on both ends; scores outside the scale range raise RangeError.
SeverityLevel severity_from_scale(const ScaleScore& score);

// 1 -> Normal, 2..3 -> Moderate, 4..5 -> Severe.
SeverityClass class_from_level(SeverityLevel level);

// Single score: its class. Two scores: a class only when both map to the
// same 1..5 level; disagreeing pairs are excluded (nullopt).
std::optional<SeverityClass> admit_session(const std::vector<ScaleScore>& scores);

struct SplitRatios {
  double train = 0.6;
  double validation = 0.2;
  double test = 0.2;
};

struct SplitAssignment {
  std::map<std::string, Split> by_speaker;
  // Largest per-class deviation (percentage points) between a split's class
  // distribution over sessions and the global one.
  double max_deviation_pp = 0.0;
};

// Speaker-disjoint stratified split. Deterministic for a fixed seed; tries
// several shuffles and keeps the most balanced assignment. Throws SplitError
// for fewer than 3 speakers.
SplitAssignment split_speakers(const std::vector<SessionRecord>& sessions,
                               const SplitRatios& ratios, std::uint64_t seed);

// Segmentation windows for one recording.
// Train/Validation: sliding 20 s windows shifted by 5 s (a single full-length
// window for 10..20 s recordings, nothing below 10 s).
// Test: n equal non-overlapping segments with n minimizing |duration/n - 20|
// subject to duration/n >= 10, ties resolved toward larger n.
std::vector<std::pair<double, double>> segment_recording(double duration_s,
                                                         Split split);

std::vector<SegmentRecord> make_segments(const SessionRecord& session);

// Corpus manifest: one row per session.
// Columns: session_id,speaker_id,split,hamd,qids,duration_s,path
// split/hamd/qids may be empty. Severity is derived from the scores present;
// rows whose scores disagree at the level granularity are dropped.
struct Manifest {
  std::vector<SessionRecord> sessions;
  std::vector<std::string> excluded_session_ids;  // score disagreement
  bool has_splits = false;
};

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path,
                    const std::vector<SessionRecord>& sessions);

}  // namespace acfpipe::corpus
