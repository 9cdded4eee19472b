#include "acfpipe/dsp.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>

#include "acfpipe/csvio.hpp"
#include "acfpipe/errors.hpp"

namespace acfpipe::dsp {

const char* to_string(FeatureSource s) {
  switch (s) {
    case FeatureSource::TV: return "tv";
    case FeatureSource::MFCC: return "mfcc";
    case FeatureSource::Formant: return "formant";
    case FeatureSource::EGeMAPS: return "egemaps";
    case FeatureSource::Synthetic: return "synthetic";
  }
  return "?";
}

std::optional<FeatureSource> feature_source_from_string(const std::string& s) {
  if (s == "tv") return FeatureSource::TV;
  if (s == "mfcc") return FeatureSource::MFCC;
  if (s == "formant") return FeatureSource::Formant;
  if (s == "egemaps") return FeatureSource::EGeMAPS;
  if (s == "synthetic") return FeatureSource::Synthetic;
  return std::nullopt;
}

namespace {

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform load_wav(const std::filesystem::path& path,
                  std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char tag[5] = {};
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file: " + path.string());
  read_u32(in);  // riff size
  in.read(tag, 4);
  if (!in || std::strncmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file: " + path.string());

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  bool have_fmt = false;
  std::vector<char> payload;

  while (in.read(tag, 4)) {
    const std::uint32_t size = read_u32(in);
    if (!in) break;
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError("malformed fmt chunk");
      format = read_u16(in);
      channels = read_u16(in);
      sample_rate = read_u32(in);
      read_u32(in);  // byte rate
      read_u16(in);  // block align
      bits = read_u16(in);
      in.ignore(size - 16);
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      payload.resize(size);
      in.read(payload.data(), size);
      if (static_cast<std::uint32_t>(in.gcount()) != size) throw FormatError("truncated data chunk");
      break;
    } else {
      in.ignore(size + (size & 1));
    }
  }
  if (!have_fmt || payload.empty()) throw FormatError("missing fmt or data chunk: " + path.string());
  if (format != 1) throw FormatError("compressed WAV not supported (format " + std::to_string(format) + ")");
  if (channels != 1) throw FormatError("expected mono, got " + std::to_string(channels) + " channels");
  if (bits != 16) throw FormatError("expected 16-bit PCM, got " + std::to_string(bits) + " bits");

  Waveform w;
  w.sample_rate_hz = static_cast<int>(sample_rate);
  const std::size_t n = payload.size() / 2;
  w.samples.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto lo = static_cast<unsigned char>(payload[2 * i]);
    const auto hi = static_cast<unsigned char>(payload[2 * i + 1]);
    const auto v = static_cast<std::int16_t>(lo | (hi << 8));
    w.samples[static_cast<Eigen::Index>(i)] = static_cast<double>(v) / 32768.0;
  }
  if (warnings && sample_rate != 8000) {
    warnings->push_back("sample rate " + std::to_string(sample_rate) + " Hz, expected 8000 Hz");
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  out.write("RIFF", 4);
  write_u32(out, 36 + 2 * n);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, 1);  // mono
  write_u32(out, static_cast<std::uint32_t>(w.sample_rate_hz));
  write_u32(out, static_cast<std::uint32_t>(w.sample_rate_hz * 2));
  write_u16(out, 2);
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, 2 * n);
  for (Eigen::Index i = 0; i < w.samples.size(); ++i) {
    const long q = std::clamp(std::lrint(w.samples[i] * 32768.0), -32768L, 32767L);
    write_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
}

Waveform normalize_peak(const Waveform& w) {
  Waveform out = w;
  const double peak = w.samples.size() ? w.samples.cwiseAbs().maxCoeff() : 0.0;
  if (peak > 0.0) out.samples /= peak;
  return out;
}

ChannelSeries mfcc(const Waveform& w, const MfccConfig& cfg) {
  if (w.sample_rate_hz < 8000) {
    throw ArgumentError("mfcc: sample rate below 8000 Hz");
  }
  const auto window = static_cast<Eigen::Index>(std::lround(cfg.window_s * w.sample_rate_hz));
  const auto hop = static_cast<Eigen::Index>(std::lround(cfg.hop_s * w.sample_rate_hz));
  if (w.samples.size() < window) throw ArgumentError("mfcc: audio shorter than one analysis window");

  Eigen::Index fft_size = cfg.fft_size;
  while (fft_size < window) fft_size *= 2;
  const Eigen::Index bins = fft_size / 2 + 1;

  // Pre-emphasis.
  Eigen::VectorXd x = w.samples;
  for (Eigen::Index t = x.size() - 1; t >= 1; --t) x[t] -= cfg.preemphasis * x[t - 1];

  Eigen::VectorXd hamming(window);
  for (Eigen::Index n = 0; n < window; ++n) {
    hamming[n] = 0.54 - 0.46 * std::cos(2.0 * M_PI * n / (window - 1));
  }

  // Triangular mel filterbank, edges linear in mel between 0 and Nyquist.
  const auto hz_to_mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  const auto mel_to_hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double nyquist = w.sample_rate_hz / 2.0;
  const int nfilt = cfg.mel_filters;
  Eigen::VectorXd edges(nfilt + 2);
  for (int m = 0; m < nfilt + 2; ++m) {
    edges[m] = mel_to_hz(hz_to_mel(nyquist) * m / (nfilt + 1));
  }
  Eigen::MatrixXd bank = Eigen::MatrixXd::Zero(nfilt, bins);
  for (int m = 0; m < nfilt; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (Eigen::Index k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * w.sample_rate_hz / static_cast<double>(fft_size);
      if (f > lo && f < mid) {
        bank(m, k) = (f - lo) / (mid - lo);
      } else if (f >= mid && f < hi) {
        bank(m, k) = (hi - f) / (hi - mid);
      }
    }
  }

  // Orthonormal DCT-II rows for the kept coefficients.
  const int ncoef = cfg.num_coefficients;
  Eigen::MatrixXd dct(ncoef, nfilt);
  for (int j = 0; j < ncoef; ++j) {
    const double scale = std::sqrt((j == 0 ? 1.0 : 2.0) / nfilt);
    for (int m = 0; m < nfilt; ++m) {
      dct(j, m) = scale * std::cos(M_PI * j * (2 * m + 1) / (2.0 * nfilt));
    }
  }

  const Eigen::Index frames = (x.size() - window) / hop + 1;
  ChannelSeries cs;
  cs.source = FeatureSource::MFCC;
  cs.frame_rate_hz = 1.0 / cfg.hop_s;
  cs.data.resize(ncoef - 1, frames);
  for (int c = 1; c < ncoef; ++c) cs.channel_names.push_back("mfcc_" + std::to_string(c + 1));

  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(fft_size), 0.0);
  std::vector<std::complex<double>> spectrum;
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (Eigen::Index n = 0; n < window; ++n) {
      frame[static_cast<std::size_t>(n)] = x[f * hop + n] * hamming[n];
    }
    std::fill(frame.begin() + window, frame.end(), 0.0);
    fft.fwd(spectrum, frame);
    Eigen::VectorXd power(bins);
    for (Eigen::Index k = 0; k < bins; ++k) {
      power[k] = std::norm(spectrum[static_cast<std::size_t>(k)]) / static_cast<double>(fft_size);
    }
    Eigen::VectorXd logmel = (bank * power).cwiseMax(cfg.log_floor).array().log().matrix();
    const Eigen::VectorXd coefs = dct * logmel;
    cs.data.col(f) = coefs.tail(ncoef - 1);
  }
  return cs;
}

ChannelSeries ingest_feature_csv(const std::filesystem::path& path,
                                 std::optional<int> expected_channels) {
  const csv::Table t = csv::read_file(path);
  const auto rate = t.meta("frame_rate_hz");
  if (!rate) throw FormatError("feature file missing '# frame_rate_hz=' line: " + path.string());
  if (t.header.empty()) throw FormatError("feature file without header: " + path.string());

  const auto m = static_cast<Eigen::Index>(t.header.size());
  if (expected_channels && *expected_channels != m) {
    throw FormatError("expected " + std::to_string(*expected_channels) + " channels, file has " +
                      std::to_string(m) + ": " + path.string());
  }

  std::vector<Eigen::VectorXd> kept;
  kept.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    if (static_cast<Eigen::Index>(row.size()) != m) continue;
    Eigen::VectorXd v(m);
    bool ok = true;
    for (Eigen::Index c = 0; c < m; ++c) {
      try {
        v[c] = csv::to_double(row[static_cast<std::size_t>(c)]);
      } catch (const FormatError&) {
        ok = false;
        break;
      }
      if (!std::isfinite(v[c])) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(std::move(v));
  }
  if (kept.empty()) throw FormatError("feature file has no numeric rows: " + path.string());

  ChannelSeries cs;
  cs.frame_rate_hz = csv::to_double(*rate);
  if (!(cs.frame_rate_hz > 0)) throw FormatError("non-positive frame rate: " + path.string());
  cs.channel_names = t.header;
  if (const auto src = t.meta("source")) {
    if (const auto parsed = feature_source_from_string(*src)) cs.source = *parsed;
  }
  cs.data.resize(m, static_cast<Eigen::Index>(kept.size()));
  for (std::size_t f = 0; f < kept.size(); ++f) {
    cs.data.col(static_cast<Eigen::Index>(f)) = kept[f];
  }
  return cs;
}

void write_feature_csv(const std::filesystem::path& path, const ChannelSeries& cs) {
  csv::Table t;
  t.comments.push_back("frame_rate_hz=" + csv::format_double(cs.frame_rate_hz));
  t.comments.push_back(std::string("source=") + to_string(cs.source));
  t.header = cs.channel_names;
  if (t.header.empty()) {
    for (Eigen::Index c = 0; c < cs.channels(); ++c) t.header.push_back("ch" + std::to_string(c + 1));
  }
  t.rows.reserve(static_cast<std::size_t>(cs.frames()));
  for (Eigen::Index f = 0; f < cs.frames(); ++f) {
    std::vector<std::string> row;
    row.reserve(static_cast<std::size_t>(cs.channels()));
    for (Eigen::Index c = 0; c < cs.channels(); ++c) {
      row.push_back(csv::format_double(cs.data(c, f), 12));
    }
    t.rows.push_back(std::move(row));
  }
  csv::write_file(path, t);
}

ChannelSeries standardize_channels(const ChannelSeries& cs) {
  if (cs.frames() < 2) throw ArgumentError("standardize_channels: need at least 2 frames");
  ChannelSeries out = cs;
  const auto n = static_cast<double>(cs.frames());
  for (Eigen::Index c = 0; c < cs.channels(); ++c) {
    const double mean = cs.data.row(c).mean();
    const double var = (cs.data.row(c).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    if (sd < 1e-12) {
      out.data.row(c).setZero();
    } else {
      out.data.row(c) = (cs.data.row(c).array() - mean) / sd;
    }
  }
  return out;
}

ChannelSeries slice_segment(const ChannelSeries& cs, double start_s, double end_s) {
  const double duration = static_cast<double>(cs.frames()) / cs.frame_rate_hz;
  if (!(start_s >= 0.0) || !(end_s > start_s) || end_s > duration + 1e-9) {
    throw ArgumentError("slice_segment: bad bounds [" + std::to_string(start_s) + ", " +
                        std::to_string(end_s) + "] for " + std::to_string(duration) + " s");
  }
  const auto first = static_cast<Eigen::Index>(std::lround(start_s * cs.frame_rate_hz));
  auto last = static_cast<Eigen::Index>(std::lround(end_s * cs.frame_rate_hz));
  last = std::min(last, cs.frames());
  if (last <= first) throw ArgumentError("slice_segment: empty frame range");
  ChannelSeries out = cs;
  out.data = cs.data.middleCols(first, last - first);
  return out;
}

}  // namespace acfpipe::dsp
