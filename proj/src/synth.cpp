#include "acfpipe/synth.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "acfpipe/errors.hpp"
#include "acfpipe/rng.hpp"

namespace acfpipe::synth {
namespace {

struct SessionCoefficients {
  std::vector<double> rho;     // self term per channel
  std::vector<double> kappa;   // coupling term per channel (gain applied)
  std::vector<int> delay;      // driver lag per channel
};

// Spectral radius of the VAR companion matrix; < 1 means stationary.
double companion_radius(const SessionCoefficients& c, int channels) {
  int max_lag = 1;
  for (int d : c.delay) max_lag = std::max(max_lag, d);
  const int n = channels * max_lag;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  for (int j = 0; j < channels; ++j) {
    a(j, j) = c.rho[static_cast<std::size_t>(j)];  // lag 1, self
    const int src = (j + channels - 1) % channels;
    a(j, (c.delay[static_cast<std::size_t>(j)] - 1) * channels + src) +=
        c.kappa[static_cast<std::size_t>(j)];
  }
  for (int lag = 1; lag < max_lag; ++lag) {
    for (int j = 0; j < channels; ++j) {
      a(lag * channels + j, (lag - 1) * channels + j) = 1.0;
    }
  }
  Eigen::EigenSolver<Eigen::MatrixXd> solver(a, /*computeEigenvectors=*/false);
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

SessionCoefficients draw_coefficients(const SynthSpec& spec, const ClassProfile& profile,
                                      std::uint64_t speaker_seed, int attempt) {
  Rng rng(mix_seed(speaker_seed, "coefficients", static_cast<std::uint64_t>(attempt)));
  SessionCoefficients c;
  for (int j = 0; j < spec.channels; ++j) {
    c.rho.push_back(rng.uniform(0.32, 0.40));
    // speaker-specific gain scales the coupling
    c.kappa.push_back(profile.coupling * rng.uniform(0.9, 1.1));
    // most channels sit exactly at the class delay; a few speakers shift one
    const double u = rng.uniform();
    const int jitter = u < 0.075 ? -1 : (u < 0.15 ? 1 : 0);
    c.delay.push_back(std::max(1, profile.coupling_delay + jitter));
  }
  return c;
}

int sample_hamd(corpus::SeverityClass klass, Rng& rng) {
  // uniform over a severity level inside the class, then uniform in the
  // level's score interval
  switch (klass) {
    case corpus::SeverityClass::Normal:
      return static_cast<int>(rng.uniform_int(0, 7));
    case corpus::SeverityClass::Moderate:
      return rng.uniform_int(0, 1) == 0 ? static_cast<int>(rng.uniform_int(8, 13))
                                        : static_cast<int>(rng.uniform_int(14, 18));
    case corpus::SeverityClass::Severe:
      return rng.uniform_int(0, 1) == 0 ? static_cast<int>(rng.uniform_int(19, 22))
                                        : static_cast<int>(rng.uniform_int(23, 52));
  }
  throw ArgumentError("unknown severity class");
}

std::string zero_pad(int v, int width) {
  std::ostringstream os;
  os.width(width);
  os.fill('0');
  os << v;
  return os.str();
}

}  // namespace

std::vector<std::string> SynthSpec::violations() const {
  std::vector<std::string> v;
  if (channels < 2) v.push_back("channels must be at least 2");
  if (frame_rate_hz <= 0) v.push_back("frame_rate_hz must be positive");
  if (speakers_per_class < 1) v.push_back("speakers_per_class must be at least 1");
  if (sessions_per_speaker < 1) v.push_back("sessions_per_speaker must be at least 1");
  if (min_duration_s < 10.0) {
    v.push_back("min_duration_s must be at least 10 (shorter recordings segment to nothing)");
  }
  if (max_duration_s < min_duration_s) {
    v.push_back("max_duration_s must be at least min_duration_s");
  }
  for (const auto& p : profiles) {
    if (p.coupling_delay < 1) v.push_back("coupling delays must be at least 1 frame");
    if (p.coupling < 0) v.push_back("coupling strength must be non-negative");
    if (p.noise <= 0) v.push_back("noise level must be positive");
  }
  for (int a = 0; a < 3; ++a) {
    for (int b = a + 1; b < 3; ++b) {
      if (profiles[static_cast<std::size_t>(a)].coupling_delay ==
          profiles[static_cast<std::size_t>(b)].coupling_delay) {
        v.push_back("class coupling delays must be pairwise distinct");
      }
    }
  }
  return v;
}

void SynthSpec::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid synthesis spec:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

SessionSignal generate_session(const SynthSpec& spec, corpus::SeverityClass klass,
                               std::uint64_t speaker_seed, std::uint64_t session_seed) {
  spec.validate();
  const auto& profile = spec.profiles[static_cast<std::size_t>(klass)];

  SessionCoefficients coeff;
  bool stable = false;
  for (int attempt = 0; attempt < 10; ++attempt) {
    coeff = draw_coefficients(spec, profile, speaker_seed, attempt);
    if (profile.coupling == 0.0 || companion_radius(coeff, spec.channels) < 0.999) {
      stable = true;
      break;
    }
  }
  if (!stable) {
    throw NumericError("vector-autoregressive draw unstable after 10 retries");
  }

  Rng rng(mix_seed(session_seed, "session"));
  const double duration = rng.uniform(spec.min_duration_s, spec.max_duration_s);
  const auto frames = static_cast<Eigen::Index>(std::llround(duration * spec.frame_rate_hz));

  int max_lag = 1;
  for (int d : coeff.delay) max_lag = std::max(max_lag, d);
  const Eigen::Index burn = 20 * max_lag + 200;

  const int m = spec.channels;
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(m, burn + frames);
  for (Eigen::Index t = 0; t < burn + frames; ++t) {
    for (int j = 0; j < m; ++j) {
      double v = profile.noise * rng.normal();
      if (t >= 1) v += coeff.rho[static_cast<std::size_t>(j)] * x(j, t - 1);
      const int d = coeff.delay[static_cast<std::size_t>(j)];
      const int src = (j + m - 1) % m;
      if (t >= d) v += coeff.kappa[static_cast<std::size_t>(j)] * x(src, t - d);
      x(j, t) = v;
    }
  }

  SessionSignal out;
  out.series.data = x.rightCols(frames);
  out.series.frame_rate_hz = spec.frame_rate_hz;
  out.series.source = dsp::FeatureSource::Synthetic;
  for (int j = 0; j < m; ++j) out.series.channel_names.push_back("ch_" + std::to_string(j));

  out.record.severity = klass;
  out.record.duration_s = static_cast<double>(frames) / spec.frame_rate_hz;
  Rng score_rng(mix_seed(session_seed, "score"));
  out.record.scores = {
      corpus::ScaleScore{corpus::Scale::HAMD, sample_hamd(klass, score_rng)}};
  return out;
}

corpus::Manifest generate_corpus(const SynthSpec& spec,
                                 const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "features");

  std::vector<corpus::SessionRecord> sessions;
  std::vector<dsp::ChannelSeries> signals;
  int speaker_index = 0;
  for (int klass = 0; klass < 3; ++klass) {
    for (int s = 0; s < spec.speakers_per_class; ++s, ++speaker_index) {
      const std::string speaker_id = "spk" + zero_pad(speaker_index, 2);
      const auto speaker_seed = mix_seed(spec.seed, "speaker",
                                         static_cast<std::uint64_t>(speaker_index));
      for (int k = 0; k < spec.sessions_per_speaker; ++k) {
        const auto session_seed = mix_seed(speaker_seed, "session",
                                           static_cast<std::uint64_t>(k));
        auto sig = generate_session(spec, static_cast<corpus::SeverityClass>(klass),
                                    speaker_seed, session_seed);
        sig.record.session_id = speaker_id + "_s" + zero_pad(k, 2);
        sig.record.speaker_id = speaker_id;
        sig.record.path = std::filesystem::path("features") / (sig.record.session_id + ".csv");
        sessions.push_back(sig.record);
        signals.push_back(std::move(sig.series));
      }
    }
  }

  const auto assignment =
      corpus::split_speakers(sessions, corpus::SplitRatios{}, mix_seed(spec.seed, "split"));
  for (auto& r : sessions) r.split = assignment.by_speaker.at(r.speaker_id);

  for (std::size_t i = 0; i < sessions.size(); ++i) {
    dsp::write_feature_csv(out_dir / sessions[i].path, signals[i]);
  }
  corpus::write_manifest(out_dir / "manifest.csv", sessions);

  corpus::Manifest manifest;
  manifest.sessions = std::move(sessions);
  manifest.has_splits = true;
  return manifest;
}

}  // namespace acfpipe::synth
