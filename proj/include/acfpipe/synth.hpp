#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "acfpipe/corpus.hpp"
#include "acfpipe/dsp.hpp"

namespace acfpipe::synth {

// Per-class dynamics: channel j is driven by channel j-1 (ring topology)
// at a class-specific lag, so coordination timing carries the label.
struct ClassProfile {
  int coupling_delay = 3;    // frames between a channel and its driver
  double coupling = 0.6;     // strength of the cross-channel term
  double noise = 0.3;        // innovation standard deviation
};

struct SynthSpec {
  int channels = 8;
  double frame_rate_hz = 100.0;
  std::array<ClassProfile, 3> profiles = {
      ClassProfile{3, 0.6, 0.3},    // Normal: fast coordination
      ClassProfile{10, 0.6, 0.3},   // Moderate
      ClassProfile{18, 0.6, 0.3},   // Severe: slowed coordination
  };
  int speakers_per_class = 15;
  int sessions_per_speaker = 2;
  double min_duration_s = 35.0;
  double max_duration_s = 60.0;
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const;
  void validate() const;  // ConfigError listing every violation
};

struct SessionSignal {
  dsp::ChannelSeries series;
  corpus::SessionRecord record;  // scores, severity, duration; ids left blank
};

// One stable vector-autoregressive recording. Speaker seed fixes gains and
// per-channel delays; session seed fixes duration, score and noise. An
// unstable coefficient draw is retried with a perturbed seed, up to 10 times.
SessionSignal generate_session(const SynthSpec& spec, corpus::SeverityClass klass,
                               std::uint64_t speaker_seed, std::uint64_t session_seed);

// Full corpus on disk: features/<session>.csv per session plus manifest.csv
// with a speaker-disjoint stratified split. Deterministic and byte-identical
// for a fixed spec.
corpus::Manifest generate_corpus(const SynthSpec& spec,
                                 const std::filesystem::path& out_dir);

}  // namespace acfpipe::synth
