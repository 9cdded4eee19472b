#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "acfpipe/dsp.hpp"
#include "acfpipe/errors.hpp"

using namespace acfpipe;
using namespace acfpipe::dsp;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::create_directories(dir);
  return dir;
}

Waveform sine(double freq_hz, double duration_s, int rate) {
  Waveform w;
  w.sample_rate_hz = rate;
  const auto n = static_cast<Eigen::Index>(duration_s * rate);
  w.samples.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    w.samples[i] = 0.8 * std::sin(2.0 * M_PI * freq_hz * static_cast<double>(i) / rate);
  }
  return w;
}

}  // namespace

TEST_CASE("peak normalization") {
  Waveform w;
  w.sample_rate_hz = 8000;
  w.samples.resize(2);
  w.samples << 0.5, -0.25;
  const auto n = normalize_peak(w);
  CHECK(n.samples[0] == doctest::Approx(1.0));
  CHECK(n.samples[1] == doctest::Approx(-0.5));

  Waveform z;
  z.sample_rate_hz = 8000;
  z.samples = Eigen::VectorXd::Zero(3);
  const auto nz = normalize_peak(z);
  CHECK(nz.samples.cwiseAbs().maxCoeff() == 0.0);

  // idempotent
  const auto n2 = normalize_peak(n);
  CHECK((n2.samples - n.samples).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
}

TEST_CASE("wav round trip and format checks") {
  const auto dir = scratch_dir("acfpipe_test_dsp");
  const auto w = normalize_peak(sine(440.0, 1.0, 8000));
  write_wav(dir / "tone.wav", w);

  const auto r = load_wav(dir / "tone.wav");
  CHECK(r.sample_rate_hz == 8000);
  REQUIRE(r.samples.size() == 8000);
  // PCM16 quantization error bound
  CHECK((r.samples - w.samples).cwiseAbs().maxCoeff() < 1.0 / 32000.0);

  std::vector<std::string> warnings;
  write_wav(dir / "tone16k.wav", sine(440.0, 0.5, 16000));
  const auto r16 = load_wav(dir / "tone16k.wav", &warnings);
  CHECK(r16.sample_rate_hz == 16000);
  CHECK(!warnings.empty());

  {
    std::ofstream out(dir / "garbage.wav", std::ios::binary);
    out << "definitely not a riff file";
  }
  CHECK_THROWS_AS(load_wav(dir / "garbage.wav"), FormatError);
  CHECK_THROWS_AS(load_wav(dir / "missing.wav"), IoError);

  fs::remove_all(dir);
}

TEST_CASE("load_wav rejects stereo") {
  const auto dir = scratch_dir("acfpipe_test_dsp_stereo");
  // hand-build a 2-channel PCM16 header
  const std::uint32_t data_bytes = 400;
  std::ofstream out(dir / "stereo.wav", std::ios::binary);
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  out.write("RIFF", 4);
  u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  u32(16);
  u16(1);      // PCM
  u16(2);      // stereo
  u32(8000);
  u32(8000 * 2 * 2);
  u16(4);
  u16(16);
  out.write("data", 4);
  u32(data_bytes);
  for (std::uint32_t i = 0; i < data_bytes / 2; ++i) u16(0);
  out.close();
  CHECK_THROWS_AS(load_wav(dir / "stereo.wav"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("mfcc shape and determinism") {
  const auto w = sine(440.0, 1.0, 8000);
  const auto cs = mfcc(w);
  CHECK(cs.channels() == 12);
  CHECK(cs.frames() == 99);
  CHECK(cs.frame_rate_hz == doctest::Approx(100.0));
  CHECK(cs.source == FeatureSource::MFCC);
  CHECK(cs.channel_names.front() == "mfcc_2");
  CHECK(cs.channel_names.back() == "mfcc_13");
  CHECK(cs.data.allFinite());

  const auto cs2 = mfcc(sine(440.0, 2.0, 8000));
  const auto cs3 = mfcc(sine(440.0, 2.0, 8000));
  CHECK((cs2.data - cs3.data).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mfcc frame count matches the closed form across durations") {
  for (double dur : {0.02, 0.05, 0.5, 1.0, 3.7, 10.0}) {
    const auto w = sine(300.0, dur, 8000);
    const auto cs = mfcc(w);
    const auto expected = (w.samples.size() - 160) / 80 + 1;
    CHECK(cs.frames() == expected);
  }
}

TEST_CASE("mfcc handles silence and rejects too-short input") {
  Waveform silent;
  silent.sample_rate_hz = 8000;
  silent.samples = Eigen::VectorXd::Zero(8000);
  const auto cs = mfcc(silent);
  CHECK(cs.data.allFinite());

  Waveform tiny;
  tiny.sample_rate_hz = 8000;
  tiny.samples = Eigen::VectorXd::Zero(100);  // 12.5 ms < one window
  CHECK_THROWS_AS(mfcc(tiny), ArgumentError);
}

TEST_CASE("channel standardization") {
  ChannelSeries cs;
  cs.frame_rate_hz = 100.0;
  cs.data.resize(2, 3);
  cs.data << 1, 2, 3, 5, 5, 5;
  cs.channel_names = {"a", "b"};
  const auto z = standardize_channels(cs);
  CHECK(z.data(0, 0) == doctest::Approx(-1.224744871).epsilon(1e-8));
  CHECK(z.data(0, 1) == doctest::Approx(0.0));
  CHECK(z.data(0, 2) == doctest::Approx(1.224744871).epsilon(1e-8));
  CHECK(z.data(1, 0) == 0.0);
  CHECK(z.data(1, 1) == 0.0);
  CHECK(z.data(1, 2) == 0.0);

  // idempotence on the non-constant channel
  const auto z2 = standardize_channels(z);
  CHECK((z2.data.row(0) - z.data.row(0)).cwiseAbs().maxCoeff() < 1e-9);

  ChannelSeries one;
  one.frame_rate_hz = 100.0;
  one.data.resize(1, 1);
  one.data << 4.0;
  CHECK_THROWS_AS(standardize_channels(one), ArgumentError);
}

TEST_CASE("standardization yields unit population moments") {
  ChannelSeries cs;
  cs.frame_rate_hz = 100.0;
  cs.data = Eigen::MatrixXd::Random(5, 400) * 13.0;
  cs.data.array() += 7.0;
  const auto z = standardize_channels(cs);
  for (Eigen::Index c = 0; c < z.channels(); ++c) {
    const double mean = z.data.row(c).mean();
    const double var = (z.data.row(c).array() - mean).square().mean();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
  }
}

TEST_CASE("segment slicing") {
  ChannelSeries cs;
  cs.frame_rate_hz = 100.0;
  cs.data.resize(2, 3000);  // 30 s
  for (Eigen::Index c = 0; c < 2; ++c) {
    for (Eigen::Index t = 0; t < 3000; ++t) cs.data(c, t) = static_cast<double>(t + c);
  }
  cs.channel_names = {"a", "b"};

  const auto mid = slice_segment(cs, 5.0, 25.0);
  CHECK(mid.frames() == 2000);
  CHECK(mid.data(0, 0) == 500.0);
  CHECK(mid.channel_names == cs.channel_names);
  CHECK(mid.frame_rate_hz == cs.frame_rate_hz);

  const auto all = slice_segment(cs, 0.0, 30.0);
  CHECK(all.frames() == 3000);
  CHECK((all.data - cs.data).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(slice_segment(cs, 25.0, 5.0), ArgumentError);
  CHECK_THROWS_AS(slice_segment(cs, -1.0, 5.0), ArgumentError);
  CHECK_THROWS_AS(slice_segment(cs, 0.0, 31.0), ArgumentError);
}

TEST_CASE("feature csv round trip") {
  const auto dir = scratch_dir("acfpipe_test_dsp_csv");
  ChannelSeries cs;
  cs.frame_rate_hz = 100.0;
  cs.data = Eigen::MatrixXd::Random(8, 50);
  cs.channel_names = {"tv1", "tv2", "tv3", "tv4", "tv5", "tv6", "periodicity", "aperiodicity"};
  cs.source = FeatureSource::TV;
  write_feature_csv(dir / "f.csv", cs);

  const auto r = ingest_feature_csv(dir / "f.csv", 8);
  CHECK(r.channels() == 8);
  CHECK(r.frames() == 50);
  CHECK(r.frame_rate_hz == doctest::Approx(100.0));
  CHECK(r.channel_names == cs.channel_names);
  CHECK(r.source == FeatureSource::TV);
  CHECK((r.data - cs.data).cwiseAbs().maxCoeff() < 1e-9);

  CHECK_THROWS_AS(ingest_feature_csv(dir / "f.csv", 23), FormatError);

  {
    std::ofstream out(dir / "norate.csv");
    out << "a,b\n1,2\n";
  }
  CHECK_THROWS_AS(ingest_feature_csv(dir / "norate.csv"), FormatError);

  // rows with non-numeric cells are skipped
  {
    std::ofstream out(dir / "holes.csv");
    out << "# frame_rate_hz=100\n";
    out << "a,b\n1,2\nx,4\n5,6\n";
  }
  const auto h = ingest_feature_csv(dir / "holes.csv");
  CHECK(h.frames() == 2);
  CHECK(h.data(0, 1) == 5.0);

  fs::remove_all(dir);
}
