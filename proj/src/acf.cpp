#include "acfpipe/acf.hpp"

#include <cmath>

#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"

namespace acfpipe::acf {

double delayed_correlation(const Eigen::Ref<const Eigen::VectorXd>& x_i,
                           const Eigen::Ref<const Eigen::VectorXd>& x_j, int delay) {
  const Eigen::Index n = x_i.size();
  if (x_j.size() != n) throw ArgumentError("delayed_correlation: channel length mismatch");
  if (delay < 0 || delay >= n) {
    throw ArgumentError("delayed_correlation: delay " + std::to_string(delay) +
                        " outside 0.." + std::to_string(n - 1));
  }
  // In-order accumulation: the definitional sum, reproducible across SIMD
  // widths (a vectorized dot reorders terms and drifts on cancelling sums).
  const Eigen::Index overlap = n - delay;
  double sum = 0.0;
  for (Eigen::Index t = 0; t < overlap; ++t) sum += x_i[t] * x_j[t + delay];
  return sum / static_cast<double>(overlap);
}

Eigen::VectorXd correlation_vector(const Eigen::Ref<const Eigen::VectorXd>& x_i,
                                   const Eigen::Ref<const Eigen::VectorXd>& x_j,
                                   int max_delay) {
  if (max_delay < 0 || max_delay >= x_i.size()) {
    throw ArgumentError("correlation_vector: max delay " + std::to_string(max_delay) +
                        " must be below the channel length");
  }
  Eigen::VectorXd out(max_delay + 1);
  for (int d = 0; d <= max_delay; ++d) out[d] = delayed_correlation(x_i, x_j, d);
  return out;
}

AcfMatrix acf_matrix(const dsp::ChannelSeries& cs, int max_delay,
                     std::vector<std::string>* warnings) {
  const auto m = cs.channels();
  const auto n = cs.frames();
  if (m < 1 || n < 1) throw ArgumentError("acf_matrix: empty series");
  if (max_delay < 0 || max_delay >= n) {
    throw ArgumentError("acf_matrix: max delay " + std::to_string(max_delay) +
                        " must be below the frame count " + std::to_string(n));
  }
  if (warnings) {
    for (Eigen::Index c = 0; c < m; ++c) {
      const double mean = cs.data.row(c).mean();
      const double sd = std::sqrt((cs.data.row(c).array() - mean).square().sum() /
                                  static_cast<double>(n));
      if (sd == 0.0) continue;  // constant channels standardize to zero
      if (std::abs(mean) > 1e-6 || std::abs(sd - 1.0) > 1e-3) {
        warnings->push_back("channel " + std::to_string(c + 1) +
                            " does not look standardized (mean " + std::to_string(mean) +
                            ", std " + std::to_string(sd) + ")");
      }
    }
  }

  AcfMatrix out;
  out.channels = static_cast<int>(m);
  out.max_delay = max_delay;
  out.values.resize(m * m, max_delay + 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) {
      out.values.row(i * m + j) =
          correlation_vector(cs.data.row(i).transpose(), cs.data.row(j).transpose(), max_delay)
              .transpose();
    }
  }
  return out;
}

AcfStandardizer fit_acf_standardizer(const std::vector<AcfMatrix>& train_matrices) {
  if (train_matrices.size() < 2) {
    throw ArgumentError("fit_acf_standardizer: need at least 2 training matrices");
  }
  const auto rows = train_matrices.front().values.rows();
  const auto cols = train_matrices.front().values.cols();
  for (const auto& m : train_matrices) {
    if (m.values.rows() != rows || m.values.cols() != cols) {
      throw ArgumentError("fit_acf_standardizer: shape mismatch across training matrices");
    }
  }
  AcfStandardizer s;
  s.fitted_on = static_cast<long>(train_matrices.size());
  const double k = static_cast<double>(train_matrices.size());
  s.mean = Eigen::MatrixXd::Zero(rows, cols);
  for (const auto& m : train_matrices) s.mean += m.values;
  s.mean /= k;
  Eigen::MatrixXd var = Eigen::MatrixXd::Zero(rows, cols);
  for (const auto& m : train_matrices) var += (m.values - s.mean).cwiseAbs2();
  var /= k;
  s.std = var.cwiseSqrt().cwiseMax(1e-8);
  return s;
}

AcfMatrix apply_acf_standardizer(const AcfStandardizer& s, const AcfMatrix& m) {
  if (m.values.rows() != s.mean.rows() || m.values.cols() != s.mean.cols()) {
    throw ArgumentError("apply_acf_standardizer: shape mismatch");
  }
  AcfMatrix out = m;
  out.values = (m.values - s.mean).cwiseQuotient(s.std);
  return out;
}

void write_acf_csv(const std::filesystem::path& path, const AcfMatrix& m) {
  csv::Table t;
  t.comments.push_back("channels=" + std::to_string(m.channels));
  t.comments.push_back("max_delay=" + std::to_string(m.max_delay));
  t.comments.push_back("pair_order=row_major");
  for (int d = 0; d <= m.max_delay; ++d) t.header.push_back("d" + std::to_string(d));
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    std::vector<std::string> row;
    row.reserve(static_cast<std::size_t>(m.values.cols()));
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
      row.push_back(csv::format_double(m.values(r, c), 12));
    }
    t.rows.push_back(std::move(row));
  }
  csv::write_file(path, t);
}

AcfMatrix read_acf_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read_file(path);
  const auto channels = t.meta("channels");
  const auto max_delay = t.meta("max_delay");
  if (!channels || !max_delay) {
    throw FormatError("acf file missing channels/max_delay metadata: " + path.string());
  }
  AcfMatrix m;
  m.channels = static_cast<int>(csv::to_long(*channels));
  m.max_delay = static_cast<int>(csv::to_long(*max_delay));
  const auto rows = static_cast<Eigen::Index>(m.channels) * m.channels;
  const auto cols = static_cast<Eigen::Index>(m.max_delay) + 1;
  if (static_cast<Eigen::Index>(t.rows.size()) != rows) {
    throw FormatError("acf file row count mismatch: " + path.string());
  }
  m.values.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = t.rows[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw FormatError("acf file column count mismatch: " + path.string());
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m.values(r, c) = csv::to_double(row[static_cast<std::size_t>(c)]);
    }
  }
  return m;
}

}  // namespace acfpipe::acf
