#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <string>
#include <vector>

#include "acfpipe/dsp.hpp"

namespace acfpipe::acf {

// Channel-delay correlation matrix: for M channels and maximum delay D the
// rows hold the delayed correlation vectors of every ordered channel pair in
// row-major (i,j) order, giving an M^2 x (D+1) matrix.
struct AcfMatrix {
  Eigen::MatrixXd values;  // M^2 x (D+1)
  int channels = 0;
  int max_delay = 0;

  // 1-based (i, j) pair for a row.
  std::pair<int, int> pair_at(Eigen::Index row) const {
    return {static_cast<int>(row) / channels + 1, static_cast<int>(row) % channels + 1};
  }
};

// r_{i,j}^d = sum_{t=0}^{N-d-1} x_i[t] x_j[t+d] / (N - d)
double delayed_correlation(const Eigen::Ref<const Eigen::VectorXd>& x_i,
                           const Eigen::Ref<const Eigen::VectorXd>& x_j, int delay);

Eigen::VectorXd correlation_vector(const Eigen::Ref<const Eigen::VectorXd>& x_i,
                                   const Eigen::Ref<const Eigen::VectorXd>& x_j,
                                   int max_delay);

// Expects standardized input; unstandardized channels produce a warning and
// the computation proceeds.
AcfMatrix acf_matrix(const dsp::ChannelSeries& cs, int max_delay,
                     std::vector<std::string>* warnings = nullptr);

struct AcfStandardizer {
  Eigen::MatrixXd mean;
  Eigen::MatrixXd std;  // floored at 1e-8
  long fitted_on = 0;
};

AcfStandardizer fit_acf_standardizer(const std::vector<AcfMatrix>& train_matrices);
AcfMatrix apply_acf_standardizer(const AcfStandardizer& s, const AcfMatrix& m);

// CSV persistence: one row per channel pair, metadata comments for the
// channel count, delay range and pair order.
void write_acf_csv(const std::filesystem::path& path, const AcfMatrix& m);
AcfMatrix read_acf_csv(const std::filesystem::path& path);

}  // namespace acfpipe::acf
