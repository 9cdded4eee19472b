#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace acfpipe::dsp {

struct Waveform {
  Eigen::VectorXd samples;
  int sample_rate_hz = 0;
};

enum class FeatureSource { TV, MFCC, Formant, EGeMAPS, Synthetic };

const char* to_string(FeatureSource s);
std::optional<FeatureSource> feature_source_from_string(const std::string& s);

// An M-channel uniformly sampled feature time series, channels in rows.
struct ChannelSeries {
  Eigen::MatrixXd data;  // M x N
  double frame_rate_hz = 0.0;
  std::vector<std::string> channel_names;
  FeatureSource source = FeatureSource::TV;

  Eigen::Index channels() const { return data.rows(); }
  Eigen::Index frames() const { return data.cols(); }
};

// PCM16 mono only. A non-8 kHz rate is accepted with a warning.
Waveform load_wav(const std::filesystem::path& path,
                  std::vector<std::string>* warnings = nullptr);
void write_wav(const std::filesystem::path& path, const Waveform& w);

// Scales to max |sample| = 1; all-zero input is returned unchanged.
Waveform normalize_peak(const Waveform& w);

struct MfccConfig {
  double window_s = 0.020;
  double hop_s = 0.010;
  int fft_size = 512;  // grown to cover the window when needed
  int mel_filters = 26;
  int num_coefficients = 13;  // first one is discarded
  double preemphasis = 0.97;
  double log_floor = 1e-10;
};

// 12 channels (coefficients 2..13), 100 Hz frame rate at the default hop.
ChannelSeries mfcc(const Waveform& w, const MfccConfig& cfg = {});

// Feature CSV: '# frame_rate_hz=<value>' metadata line, header row naming
// channels, one row per frame. Rows containing non-numeric cells are skipped.
ChannelSeries ingest_feature_csv(const std::filesystem::path& path,
                                 std::optional<int> expected_channels = std::nullopt);
void write_feature_csv(const std::filesystem::path& path, const ChannelSeries& cs);

// Per-channel z-score over the frames using the population deviation.
// Constant channels map to all-zero.
ChannelSeries standardize_channels(const ChannelSeries& cs);

// Frames [round(start*fr), round(end*fr)).
ChannelSeries slice_segment(const ChannelSeries& cs, double start_s, double end_s);

}  // namespace acfpipe::dsp
