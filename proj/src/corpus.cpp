#include "acfpipe/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::corpus {

const char* to_string(SeverityClass c) {
  switch (c) {
    case SeverityClass::Normal: return "normal";
    case SeverityClass::Moderate: return "moderate";
    case SeverityClass::Severe: return "severe";
  }
  return "?";
}

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

const char* to_string(Scale s) { return s == Scale::HAMD ? "hamd" : "qids"; }

std::optional<SeverityClass> class_from_string(const std::string& s) {
  if (s == "normal") return SeverityClass::Normal;
  if (s == "moderate") return SeverityClass::Moderate;
  if (s == "severe") return SeverityClass::Severe;
  return std::nullopt;
}

std::optional<Split> split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

namespace {

// Upper bounds of the five severity levels per scale; lower bound of level 1
// is 0 and each next level starts one past the previous upper bound.
constexpr std::array<int, 5> kHamdUpper = {7, 13, 18, 22, 52};
constexpr std::array<int, 5> kQidsUpper = {5, 10, 15, 20, 27};

}  // namespace

SeverityLevel severity_from_scale(const ScaleScore& score) {
  const auto& upper = score.scale == Scale::HAMD ? kHamdUpper : kQidsUpper;
  if (score.score < 0 || score.score > upper.back()) {
    throw RangeError(std::string(to_string(score.scale)) + " score " +
                     std::to_string(score.score) + " outside 0.." +
                     std::to_string(upper.back()));
  }
  for (int level = 0; level < 5; ++level) {
    if (score.score <= upper[static_cast<std::size_t>(level)]) return level + 1;
  }
  return 5;  // unreachable
}

SeverityClass class_from_level(SeverityLevel level) {
  if (level < 1 || level > 5) {
    throw RangeError("severity level " + std::to_string(level) + " outside 1..5");
  }
  if (level == 1) return SeverityClass::Normal;
  if (level <= 3) return SeverityClass::Moderate;
  return SeverityClass::Severe;
}

std::optional<SeverityClass> admit_session(const std::vector<ScaleScore>& scores) {
  if (scores.empty()) throw ArgumentError("admit_session: no scores");
  if (scores.size() > 2) throw ArgumentError("admit_session: more than two scores");
  if (scores.size() == 2 && scores[0].scale == scores[1].scale) {
    throw ArgumentError("admit_session: two scores on the same scale");
  }
  const SeverityLevel first = severity_from_scale(scores[0]);
  if (scores.size() == 2) {
    const SeverityLevel second = severity_from_scale(scores[1]);
    if (first != second) return std::nullopt;
  }
  return class_from_level(first);
}

namespace {

struct SpeakerInfo {
  std::string id;
  std::array<int, kNumClasses> class_counts{};  // sessions per class
  int total = 0;
};

double assignment_deviation_pp(
    const std::vector<SpeakerInfo>& speakers,
    const std::vector<int>& split_of,
    const std::array<double, kNumClasses>& global_frac) {
  std::array<std::array<double, kNumClasses>, 3> counts{};
  std::array<double, 3> totals{};
  for (std::size_t i = 0; i < speakers.size(); ++i) {
    const int s = split_of[i];
    for (int c = 0; c < kNumClasses; ++c) {
      counts[s][c] += speakers[i].class_counts[static_cast<std::size_t>(c)];
    }
    totals[s] += speakers[i].total;
  }
  double worst = 0.0;
  for (int s = 0; s < 3; ++s) {
    for (int c = 0; c < kNumClasses; ++c) {
      const double frac = totals[s] > 0 ? counts[s][c] / totals[s] : 0.0;
      worst = std::max(worst, std::abs(frac - global_frac[static_cast<std::size_t>(c)]) * 100.0);
    }
  }
  return worst;
}

}  // namespace

SplitAssignment split_speakers(const std::vector<SessionRecord>& sessions,
                               const SplitRatios& ratios, std::uint64_t seed) {
  std::map<std::string, SpeakerInfo> by_id;
  for (const auto& s : sessions) {
    auto& info = by_id[s.speaker_id];
    info.id = s.speaker_id;
    info.class_counts[static_cast<std::size_t>(s.severity)] += 1;
    info.total += 1;
  }
  std::vector<SpeakerInfo> speakers;
  speakers.reserve(by_id.size());
  for (auto& [id, info] : by_id) speakers.push_back(info);
  const int n = static_cast<int>(speakers.size());
  if (n < 3) throw SplitError("need at least 3 speakers, have " + std::to_string(n));

  // Speaker counts per split: largest-remainder rounding, then every split
  // gets at least one speaker (taken from the largest).
  const std::array<double, 3> want = {ratios.train * n, ratios.validation * n,
                                      ratios.test * n};
  std::array<int, 3> target{};
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    target[s] = static_cast<int>(std::floor(want[s]));
    assigned += target[s];
  }
  while (assigned < n) {
    int best = 0;
    double best_rem = -1.0;
    for (int s = 0; s < 3; ++s) {
      const double rem = want[s] - target[s];
      if (rem > best_rem + 1e-12) {
        best_rem = rem;
        best = s;
      }
    }
    target[best] += 1;
    ++assigned;
  }
  for (int s = 0; s < 3; ++s) {
    while (target[s] == 0) {
      const int biggest =
          static_cast<int>(std::max_element(target.begin(), target.end()) - target.begin());
      target[biggest] -= 1;
      target[s] += 1;
    }
  }

  std::array<double, kNumClasses> global_frac{};
  double total_sessions = 0.0;
  for (const auto& sp : speakers) total_sessions += sp.total;
  for (const auto& sp : speakers) {
    for (int c = 0; c < kNumClasses; ++c) {
      global_frac[static_cast<std::size_t>(c)] += sp.class_counts[static_cast<std::size_t>(c)];
    }
  }
  for (auto& f : global_frac) f /= total_sessions;

  // Randomized greedy, best of a fixed number of attempts.
  constexpr int kAttempts = 32;
  std::vector<int> best_split;
  double best_dev = 1e18;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng(mix_seed(seed, "speaker_split", static_cast<std::uint64_t>(attempt)));
    std::vector<int> order(speakers.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);

    std::array<int, 3> used{};
    std::array<std::array<double, kNumClasses>, 3> counts{};
    std::array<double, 3> totals{};
    std::vector<int> split_of(speakers.size(), -1);
    for (int idx : order) {
      const auto& sp = speakers[static_cast<std::size_t>(idx)];
      int pick = -1;
      double pick_penalty = 1e18;
      for (int s = 0; s < 3; ++s) {
        if (used[s] >= target[s]) continue;
        double penalty = 0.0;
        const double t = totals[s] + sp.total;
        for (int c = 0; c < kNumClasses; ++c) {
          const double frac =
              (counts[s][c] + sp.class_counts[static_cast<std::size_t>(c)]) / t;
          penalty += std::abs(frac - global_frac[static_cast<std::size_t>(c)]);
        }
        // Prefer the emptier split on near-ties so targets fill evenly.
        penalty += 1e-6 * (static_cast<double>(used[s]) / target[s]);
        if (penalty < pick_penalty) {
          pick_penalty = penalty;
          pick = s;
        }
      }
      split_of[static_cast<std::size_t>(idx)] = pick;
      used[pick] += 1;
      totals[pick] += sp.total;
      for (int c = 0; c < kNumClasses; ++c) {
        counts[pick][c] += sp.class_counts[static_cast<std::size_t>(c)];
      }
    }
    const double dev = assignment_deviation_pp(speakers, split_of, global_frac);
    if (dev < best_dev) {
      best_dev = dev;
      best_split = split_of;
      if (best_dev <= 10.0) break;
    }
  }

  SplitAssignment out;
  out.max_deviation_pp = best_dev;
  for (std::size_t i = 0; i < speakers.size(); ++i) {
    out.by_speaker[speakers[i].id] = static_cast<Split>(best_split[i]);
  }
  return out;
}

std::vector<std::pair<double, double>> segment_recording(double duration_s,
                                                         Split split) {
  if (!(duration_s > 0.0)) throw ArgumentError("segment_recording: non-positive duration");
  std::vector<std::pair<double, double>> out;
  if (duration_s < 10.0) return out;

  if (split != Split::Test) {
    if (duration_s <= 20.0) {
      out.emplace_back(0.0, duration_s);
      return out;
    }
    for (int k = 0;; ++k) {
      const double start = 5.0 * k;
      const double end = start + 20.0;
      if (end > duration_s + 1e-9) break;
      out.emplace_back(start, end);
    }
    return out;
  }

  // Test: n equal segments, n minimizing |duration/n - 20|, length >= 10 s,
  // ties toward larger n.
  int best_n = 1;
  double best_score = std::abs(duration_s - 20.0);
  for (int n = 2; duration_s / n >= 10.0; ++n) {
    const double score = std::abs(duration_s / n - 20.0);
    if (score < best_score + 1e-12) {
      best_score = std::min(score, best_score);
      best_n = n;
    }
  }
  const double len = duration_s / best_n;
  for (int i = 0; i < best_n; ++i) {
    const double start = i * len;
    const double end = (i + 1 == best_n) ? duration_s : (i + 1) * len;
    out.emplace_back(start, end);
  }
  return out;
}

std::vector<SegmentRecord> make_segments(const SessionRecord& session) {
  std::vector<SegmentRecord> out;
  const auto windows = segment_recording(session.duration_s, session.split);
  int index = 0;
  for (const auto& [start, end] : windows) {
    SegmentRecord seg;
    seg.session_id = session.session_id;
    seg.index = index++;
    seg.start_s = start;
    seg.end_s = end;
    seg.severity = session.severity;
    out.push_back(seg);
  }
  return out;
}

Manifest load_manifest(const std::filesystem::path& path) {
  const csv::Table t = csv::read_file(path);
  for (const char* col : {"session_id", "speaker_id", "duration_s", "path"}) {
    if (t.column(col) < 0) throw FormatError("manifest missing column '" + std::string(col) + "'");
  }
  const int c_sid = t.column("session_id");
  const int c_spk = t.column("speaker_id");
  const int c_split = t.column("split");
  const int c_hamd = t.column("hamd");
  const int c_qids = t.column("qids");
  const int c_dur = t.column("duration_s");
  const int c_path = t.column("path");

  const auto base = path.parent_path();
  Manifest m;
  std::set<std::string> seen_ids;
  int rows_with_split = 0;
  for (const auto& row : t.rows) {
    if (row.size() < t.header.size()) throw FormatError("manifest row with missing fields");
    SessionRecord s;
    s.session_id = row[static_cast<std::size_t>(c_sid)];
    s.speaker_id = row[static_cast<std::size_t>(c_spk)];
    if (s.session_id.empty() || s.speaker_id.empty()) {
      throw FormatError("manifest row with empty session or speaker id");
    }
    if (!seen_ids.insert(s.session_id).second) {
      throw FormatError("duplicate session_id '" + s.session_id + "'");
    }
    if (c_hamd >= 0 && !row[static_cast<std::size_t>(c_hamd)].empty()) {
      s.scores.push_back({Scale::HAMD, static_cast<int>(csv::to_long(row[static_cast<std::size_t>(c_hamd)]))});
    }
    if (c_qids >= 0 && !row[static_cast<std::size_t>(c_qids)].empty()) {
      s.scores.push_back({Scale::QIDS, static_cast<int>(csv::to_long(row[static_cast<std::size_t>(c_qids)]))});
    }
    if (s.scores.empty()) throw FormatError("session '" + s.session_id + "' has no scores");
    s.duration_s = csv::to_double(row[static_cast<std::size_t>(c_dur)]);
    if (!(s.duration_s > 0)) throw FormatError("session '" + s.session_id + "' has non-positive duration");
    std::filesystem::path p = row[static_cast<std::size_t>(c_path)];
    s.path = p.is_absolute() ? p : base / p;

    const auto cls = admit_session(s.scores);
    if (!cls) {
      m.excluded_session_ids.push_back(s.session_id);
      continue;
    }
    s.severity = *cls;

    if (c_split >= 0 && !row[static_cast<std::size_t>(c_split)].empty()) {
      const auto sp = split_from_string(row[static_cast<std::size_t>(c_split)]);
      if (!sp) throw FormatError("bad split value '" + row[static_cast<std::size_t>(c_split)] + "'");
      s.split = *sp;
      ++rows_with_split;
    }
    m.sessions.push_back(std::move(s));
  }
  if (rows_with_split > 0 && rows_with_split != static_cast<int>(m.sessions.size())) {
    throw FormatError("manifest has split values on some rows but not all");
  }
  m.has_splits = rows_with_split > 0;
  if (m.has_splits) {
    std::map<std::string, Split> speaker_split;
    for (const auto& s : m.sessions) {
      auto [it, inserted] = speaker_split.emplace(s.speaker_id, s.split);
      if (!inserted && it->second != s.split) {
        throw FormatError("speaker '" + s.speaker_id + "' appears in two splits");
      }
    }
  }
  return m;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<SessionRecord>& sessions) {
  csv::Table t;
  t.header = {"session_id", "speaker_id", "split", "hamd", "qids", "duration_s", "path"};
  for (const auto& s : sessions) {
    std::string hamd, qids;
    for (const auto& sc : s.scores) {
      (sc.scale == Scale::HAMD ? hamd : qids) = std::to_string(sc.score);
    }
    t.rows.push_back({s.session_id, s.speaker_id, to_string(s.split), hamd, qids,
                      csv::format_double(s.duration_s), s.path.generic_string()});
  }
  csv::write_file(path, t);
}

}  // namespace acfpipe::corpus
