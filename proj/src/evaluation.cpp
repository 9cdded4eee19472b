#include "acfpipe/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"

namespace acfpipe::eval {
namespace {

void check_class(int c, const char* what) {
  if (c < 0 || c > 2) {
    throw ArgumentError(std::string(what) + " class out of range: " + std::to_string(c));
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

const char* kClassNames[3] = {"normal", "moderate", "severe"};

}  // namespace

ConfusionMatrix confusion(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw ArgumentError("confusion: no predictions");
  ConfusionMatrix cm = ConfusionMatrix::Zero();
  for (const auto& p : preds) {
    check_class(p.truth, "true");
    check_class(p.predicted, "predicted");
    cm(p.truth, p.predicted) += 1;
  }
  return cm;
}

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& predicted) {
  if (truth.size() != predicted.size()) {
    throw ArgumentError("confusion: size mismatch");
  }
  if (truth.empty()) throw ArgumentError("confusion: no predictions");
  ConfusionMatrix cm = ConfusionMatrix::Zero();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    check_class(truth[i], "true");
    check_class(predicted[i], "predicted");
    cm(truth[i], predicted[i]) += 1;
  }
  return cm;
}

Metrics metrics(const ConfusionMatrix& cm) {
  if ((cm.array() < 0).any()) throw ArgumentError("confusion matrix has negative counts");
  Metrics m;
  m.total = cm.sum();
  if (m.total == 0) throw ArgumentError("confusion matrix is empty");
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(m.total);

  double recall_sum = 0.0;
  int recall_classes = 0;
  for (int c = 0; c < 3; ++c) {
    auto& pc = m.per_class[c];
    pc.support = cm.row(c).sum();
    const long predicted_total = cm.col(c).sum();
    const long tp = cm(c, c);
    if (pc.support > 0) {
      pc.recall = static_cast<double>(tp) / static_cast<double>(pc.support);
      recall_sum += pc.recall;
      ++recall_classes;
    }
    if (predicted_total > 0) {
      pc.precision = static_cast<double>(tp) / static_cast<double>(predicted_total);
    }
    // F1 is undefined when the class never occurs or is never predicted;
    // report 0 with the flag cleared so averages stay computable.
    pc.f1_defined = pc.support > 0 && predicted_total > 0;
    const double pr = pc.precision + pc.recall;
    pc.f1 = (pc.f1_defined && pr > 0.0) ? 2.0 * pc.precision * pc.recall / pr : 0.0;
  }
  m.uar = recall_classes > 0 ? recall_sum / recall_classes : 0.0;
  return m;
}

VoteOutcome plurality_vote(const std::vector<Prediction>& segments, double fraction,
                           Rng& rng) {
  if (segments.empty()) throw ArgumentError("plurality_vote: no segment predictions");
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ArgumentError("plurality_vote: fraction must be in (0, 1]");
  }
  std::vector<std::size_t> order(segments.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return segments[a].confidence > segments[b].confidence;
  });

  VoteOutcome out;
  out.kept = static_cast<long>(
      std::ceil(fraction * static_cast<double>(segments.size())));
  out.kept = std::max(out.kept, 1L);
  for (long i = 0; i < out.kept; ++i) {
    const auto& p = segments[order[static_cast<std::size_t>(i)]];
    check_class(p.predicted, "predicted");
    out.kept_counts[static_cast<std::size_t>(p.predicted)] += 1;
  }

  const long best = *std::max_element(out.kept_counts.begin(), out.kept_counts.end());
  std::vector<int> modal;
  for (int c = 0; c < 3; ++c) {
    if (out.kept_counts[static_cast<std::size_t>(c)] == best) modal.push_back(c);
  }
  if (modal.size() == 1) {
    out.predicted = modal[0];
  } else {
    out.predicted = modal[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<long>(modal.size()) - 1))];
    out.tie_broken = true;
  }
  return out;
}

std::vector<BucketRow> accuracy_by_segment_count(const std::vector<Prediction>& sessions,
                                                 const std::vector<long>& segment_counts,
                                                 const std::vector<long>& bucket_edges) {
  if (sessions.size() != segment_counts.size()) {
    throw ArgumentError("accuracy_by_segment_count: size mismatch");
  }
  for (long n : segment_counts) {
    if (n < 1) throw ArgumentError("accuracy_by_segment_count: counts must be >= 1");
  }
  for (std::size_t i = 1; i < bucket_edges.size(); ++i) {
    if (bucket_edges[i] <= bucket_edges[i - 1]) {
      throw ArgumentError("accuracy_by_segment_count: edges must increase");
    }
  }

  std::map<long, BucketRow> buckets;  // keyed by lo
  auto row_for = [&](long n) -> BucketRow& {
    if (bucket_edges.empty()) {
      auto& r = buckets[n];
      r.lo = r.hi = n;
      return r;
    }
    if (n < bucket_edges.front()) {
      throw ArgumentError("accuracy_by_segment_count: count " + std::to_string(n) +
                          " below first edge");
    }
    std::size_t k = bucket_edges.size() - 1;
    for (std::size_t i = 0; i + 1 < bucket_edges.size(); ++i) {
      if (n < bucket_edges[i + 1]) {
        k = i;
        break;
      }
    }
    auto& r = buckets[bucket_edges[k]];
    r.lo = bucket_edges[k];
    r.hi = k + 1 < bucket_edges.size() ? bucket_edges[k + 1] - 1 : -1;
    return r;
  };

  for (std::size_t i = 0; i < sessions.size(); ++i) {
    auto& r = row_for(segment_counts[i]);
    r.sessions += 1;
    if (sessions[i].truth == sessions[i].predicted) r.correct += 1;
  }

  std::vector<BucketRow> out;
  for (auto& [lo, r] : buckets) {
    r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.sessions);
    out.push_back(r);
  }
  return out;
}

std::vector<MisclassifiedSession> misclassification_report(
    const std::vector<Prediction>& sessions,
    const std::vector<corpus::SessionRecord>& records) {
  std::map<std::string, const corpus::SessionRecord*> by_id;
  for (const auto& r : records) by_id[r.session_id] = &r;

  // group misclassifications under their speaker, speakers in id order
  std::map<std::string, std::vector<MisclassifiedSession>> by_speaker;
  for (const auto& p : sessions) {
    if (p.truth == p.predicted) continue;
    auto it = by_id.find(p.id);
    if (it == by_id.end()) {
      throw ArgumentError("misclassification_report: unknown session '" + p.id + "'");
    }
    MisclassifiedSession row;
    row.speaker_id = it->second->speaker_id;
    row.session_id = p.id;
    row.truth = p.truth;
    row.predicted = p.predicted;
    row.scores = it->second->scores;
    by_speaker[row.speaker_id].push_back(std::move(row));
  }

  std::vector<MisclassifiedSession> out;
  for (auto& [speaker, rows] : by_speaker) {
    for (auto& r : rows) out.push_back(std::move(r));
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const Metrics& m) {
  auto out = open_out(path);
  out << "accuracy,uar,f1_normal,f1_moderate,f1_severe,"
         "f1_normal_defined,f1_moderate_defined,f1_severe_defined,total\n";
  out << fmt(m.accuracy) << ',' << fmt(m.uar);
  for (const auto& pc : m.per_class) out << ',' << fmt(pc.f1);
  for (const auto& pc : m.per_class) out << ',' << (pc.f1_defined ? 1 : 0);
  out << ',' << m.total << '\n';
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  auto out = open_out(path);
  out << "true_class,pred_normal,pred_moderate,pred_severe\n";
  for (int r = 0; r < 3; ++r) {
    out << kClassNames[r];
    for (int c = 0; c < 3; ++c) out << ',' << cm(r, c);
    out << '\n';
  }
}

void write_bucket_csv(const std::filesystem::path& path, const std::vector<BucketRow>& rows) {
  auto out = open_out(path);
  out << "segments_from,segments_to,sessions,correct,accuracy\n";
  for (const auto& r : rows) {
    out << r.lo << ',';
    if (r.hi < 0) {
      out << "inf";
    } else {
      out << r.hi;
    }
    out << ',' << r.sessions << ',' << r.correct << ',' << fmt(r.accuracy) << '\n';
  }
}

void write_misclassification_csv(const std::filesystem::path& path,
                                 const std::vector<MisclassifiedSession>& rows) {
  auto out = open_out(path);
  out << "speaker_id,session_id,true_class,predicted_class,hamd,qids\n";
  for (const auto& r : rows) {
    std::string hamd = "", qids = "";
    for (const auto& s : r.scores) {
      if (s.scale == corpus::Scale::HAMD) hamd = std::to_string(s.score);
      if (s.scale == corpus::Scale::QIDS) qids = std::to_string(s.score);
    }
    out << r.speaker_id << ',' << r.session_id << ',' << kClassNames[r.truth] << ','
        << kClassNames[r.predicted] << ',' << hamd << ',' << qids << '\n';
  }
}

void write_predictions_csv(const std::filesystem::path& path,
                           const std::vector<Prediction>& preds) {
  auto out = open_out(path);
  out << "id,true_class,predicted_class,confidence\n";
  for (const auto& p : preds) {
    out << p.id << ',' << kClassNames[p.truth] << ',' << kClassNames[p.predicted] << ','
        << fmt(p.confidence) << '\n';
  }
}

std::vector<Prediction> read_predictions_csv(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  const int id = table.column("id");
  const int truth = table.column("true_class");
  const int pred = table.column("predicted_class");
  const int conf = table.column("confidence");
  if (id < 0 || truth < 0 || pred < 0 || conf < 0) {
    throw FormatError("predictions CSV is missing required columns: " + path.string());
  }

  auto to_class = [](const std::string& s) {
    for (int c = 0; c < 3; ++c) {
      if (s == kClassNames[c]) return c;
    }
    throw FormatError("unknown class label '" + s + "'");
  };

  std::vector<Prediction> out;
  for (const auto& row : table.rows) {
    Prediction p;
    p.id = row[static_cast<std::size_t>(id)];
    p.truth = to_class(row[static_cast<std::size_t>(truth)]);
    p.predicted = to_class(row[static_cast<std::size_t>(pred)]);
    p.confidence = csv::to_double(row[static_cast<std::size_t>(conf)]);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// minimal SVG plumbing shared by the two renderers
struct Svg {
  std::ostringstream body;
  int width, height;

  Svg(int w, int h) : width(w), height(h) {}

  void rect(double x, double y, double w, double h, const std::string& fill) {
    body << "<rect x='" << x << "' y='" << y << "' width='" << w << "' height='" << h
         << "' fill='" << fill << "' stroke='#444'/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 13,
            const char* anchor = "middle", const char* fill = "#111") {
    body << "<text x='" << x << "' y='" << y << "' font-size='" << size
         << "' font-family='sans-serif' text-anchor='" << anchor << "' fill='" << fill
         << "'>" << s << "</text>\n";
  }
  void save(const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='"
        << height << "' viewBox='0 0 " << width << ' ' << height << "'>\n"
        << "<rect width='100%' height='100%' fill='white'/>\n"
        << body.str() << "</svg>\n";
  }
};

std::string heat_color(double t) {
  // white -> steel blue ramp
  const int r = static_cast<int>(std::lround(255 - t * (255 - 70)));
  const int g = static_cast<int>(std::lround(255 - t * (255 - 130)));
  const int b = static_cast<int>(std::lround(255 - t * (255 - 180)));
  std::ostringstream os;
  os << "rgb(" << r << ',' << g << ',' << b << ')';
  return os.str();
}

}  // namespace

void write_confusion_svg(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  const int cell = 90, left = 120, top = 70;
  Svg svg(left + 3 * cell + 40, top + 3 * cell + 40);
  svg.text(left + 1.5 * cell, 28, "Confusion matrix (rows: true class)", 15);
  const double maxc = std::max<double>(1.0, static_cast<double>(cm.maxCoeff()));
  for (int c = 0; c < 3; ++c) {
    svg.text(left + cell * (c + 0.5), top - 12, kClassNames[c]);
  }
  for (int r = 0; r < 3; ++r) {
    svg.text(left - 10, top + cell * (r + 0.55), kClassNames[r], 13, "end");
    for (int c = 0; c < 3; ++c) {
      const double t = static_cast<double>(cm(r, c)) / maxc;
      svg.rect(left + c * cell, top + r * cell, cell, cell, heat_color(t));
      svg.text(left + cell * (c + 0.5), top + cell * (r + 0.58), std::to_string(cm(r, c)),
               16, "middle", t > 0.6 ? "#fff" : "#111");
    }
  }
  svg.save(path);
}

void write_bucket_svg(const std::filesystem::path& path, const std::vector<BucketRow>& rows) {
  const int bar = 56, gap = 18, left = 70, top = 50, plot_h = 220;
  const int n = static_cast<int>(rows.size());
  Svg svg(left + n * (bar + gap) + 40, top + plot_h + 70);
  svg.text(left + (n * (bar + gap)) / 2.0, 24, "Session accuracy by segment count", 15);
  for (int i = 0; i <= 4; ++i) {
    const double frac = i / 4.0;
    const double y = top + plot_h * (1.0 - frac);
    svg.text(left - 12, y + 4, fmt(frac), 11, "end", "#666");
    svg.body << "<line x1='" << left << "' y1='" << y << "' x2='" << left + n * (bar + gap)
             << "' y2='" << y << "' stroke='#ddd'/>\n";
  }
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    const double h = plot_h * r.accuracy;
    const double x = left + i * (bar + gap) + gap / 2.0;
    svg.rect(x, top + plot_h - h, bar, h, "rgb(70,130,180)");
    std::string label = std::to_string(r.lo);
    if (r.hi != r.lo) label += r.hi < 0 ? "+" : "-" + std::to_string(r.hi);
    svg.text(x + bar / 2.0, top + plot_h + 18, label, 12);
    svg.text(x + bar / 2.0, top + plot_h + 34, "n=" + std::to_string(r.sessions), 10,
             "middle", "#666");
  }
  svg.save(path);
}

}  // namespace acfpipe::eval
