#pragma once

// Synthetic machine-sound corpora: harmonic stacks over band-limited noise,
// one spec per operating mode. Stand-in for shop-floor recordings in tests
// and desk-scale runs.

#include <fftw3.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "listen/audio.hpp"
#include "listen/mel.hpp"
#include "listen/tensor.hpp"

namespace listenkit {

struct ModeSpec {
  int mode_id = 0;
  double base_freq = 100.0;  // Hz
  int harmonics = 1;
  double noise_low = 0.0;    // Hz
  double noise_high = 0.0;   // Hz
  double snr_db = std::numeric_limits<double>::infinity();

  void validate(int sample_rate) const {
    if (mode_id < 0) throw ConfigError("mode spec: negative mode id");
    if (!(base_freq > 0.0) || base_freq >= sample_rate / 2.0) throw ConfigError("mode spec: base_freq outside (0, nyquist)");
    if (harmonics < 1) throw ConfigError("mode spec: need at least one harmonic");
    if (std::isfinite(snr_db) && !(noise_low >= 0.0 && noise_high > noise_low)) {
      throw ConfigError("mode spec: invalid noise band");
    }
  }
};

struct ModeInfo {
  int id = 0;
  std::string name;
  std::string axial_depth;
  std::string spindle_speed;
};

using ModeTaxonomy = std::vector<ModeInfo>;

// The ten CNC machining modes: off, idle, and {1, 3} mm axial depth at four
// spindle speeds.
inline ModeTaxonomy cnc_taxonomy() {
  ModeTaxonomy t{{0, "Mode 0", "Off", "Off"}, {1, "Mode 1", "On", "On"}};
  const char* speeds[] = {"6000 rpm", "8000 rpm", "10000 rpm", "12000 rpm"};
  for (int depth = 0; depth < 2; ++depth) {
    for (int s = 0; s < 4; ++s) {
      const int id = 2 + depth * 4 + s;
      t.push_back({id, "Mode " + std::to_string(id), depth == 0 ? "1 mm" : "3 mm", speeds[s]});
    }
  }
  return t;
}

// Synthetic stand-ins for the CNC modes. Cutting modes sit at the
// two-flute tooth-passing frequency (rpm / 60 * 2); deeper cuts get more
// harmonics and broader, louder noise.
inline std::vector<ModeSpec> cnc_mode_specs() {
  std::vector<ModeSpec> specs;
  specs.push_back({0, 60.0, 1, 50.0, 8000.0, -6.0});     // off: mains hum in ambient noise
  specs.push_back({1, 150.0, 2, 300.0, 3000.0, 12.0});   // spindle idling
  const double rpm[] = {6000, 8000, 10000, 12000};
  for (int depth = 0; depth < 2; ++depth) {
    for (int s = 0; s < 4; ++s) {
      ModeSpec m;
      m.mode_id = 2 + depth * 4 + s;
      m.base_freq = rpm[s] / 60.0 * 2.0;
      m.harmonics = depth == 0 ? 3 : 7;
      m.noise_low = depth == 0 ? 2000.0 : 800.0;
      m.noise_high = depth == 0 ? 6000.0 : 12000.0;
      m.snr_db = depth == 0 ? 12.0 : 4.0;
      specs.push_back(m);
    }
  }
  return specs;
}

// A family of alternative tasks for grid-search suites. `variant` shifts the
// frequency plan so tasks are related but distinct.
inline std::vector<ModeSpec> synthetic_task_specs(int variant, int classes) {
  std::vector<ModeSpec> specs;
  for (int c = 0; c < classes; ++c) {
    ModeSpec m;
    m.mode_id = c;
    m.base_freq = 90.0 * (1.0 + 0.13 * variant) * std::pow(1.45, c);
    m.harmonics = 2 + (c + variant) % 4;
    m.noise_low = 500.0 + 300.0 * ((c + variant) % 3);
    m.noise_high = m.noise_low + 4000.0;
    m.snr_db = 8.0;
    specs.push_back(m);
  }
  return specs;
}

inline void check_distinct_modes(const std::vector<ModeSpec>& specs) {
  std::set<int> ids;
  for (const auto& s : specs) {
    if (!ids.insert(s.mode_id).second) throw ConfigError("duplicate mode id " + std::to_string(s.mode_id));
  }
}

// Real white noise band-limited to [low, high] Hz, unit RMS.
inline std::vector<double> band_noise(std::size_t n, int sample_rate, double low, double high, Prng& prng) {
  const std::size_t bins = n / 2 + 1;
  RealFft::Buffer<fftw_complex> spectrum(bins);
  RealFft::Buffer<double> out(n);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_c2r_1d(static_cast<int>(n), spectrum.get(), out.get(), FFTW_ESTIMATE);
  }
  for (std::size_t k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n);
    const bool in_band = f >= low && f <= high && k != 0 && k != bins - 1;
    const double re = prng.normal(), im = prng.normal();
    spectrum.get()[k][0] = in_band ? re : 0.0;
    spectrum.get()[k][1] = in_band ? im : 0.0;
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  std::vector<double> noise(out.get(), out.get() + n);
  double power = 0.0;
  for (double v : noise) power += v * v;
  const double rms = std::sqrt(power / static_cast<double>(n));
  if (rms > 0.0) {
    for (double& v : noise) v /= rms;
  }
  return noise;
}

// One second of audio for `spec`. Harmonic h has amplitude 1/h and a random
// phase; noise is scaled to the requested SNR; the result peaks at 0.5.
inline AudioClip synth_mode_clip(const ModeSpec& spec, Prng& prng, int sample_rate = kSampleRate) {
  spec.validate(sample_rate);
  const auto n = static_cast<std::size_t>(sample_rate);
  std::vector<double> signal(n, 0.0);
  for (int h = 1; h <= spec.harmonics; ++h) {
    const double f = spec.base_freq * h;
    const double phase = prng.uniform(0.0, 2.0 * std::numbers::pi);
    if (f >= sample_rate / 2.0) continue;
    const double w = 2.0 * std::numbers::pi * f / sample_rate;
    for (std::size_t i = 0; i < n; ++i) signal[i] += std::sin(w * static_cast<double>(i) + phase) / h;
  }
  if (std::isfinite(spec.snr_db)) {
    double power = 0.0;
    for (double v : signal) power += v * v;
    const double signal_rms = std::sqrt(power / static_cast<double>(n));
    const double noise_rms = signal_rms / std::pow(10.0, spec.snr_db / 20.0);
    const auto noise = band_noise(n, sample_rate, spec.noise_low, spec.noise_high, prng);
    for (std::size_t i = 0; i < n; ++i) signal[i] += noise[i] * noise_rms;
  }
  double peak = 0.0;
  for (double v : signal) peak = std::max(peak, std::abs(v));
  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.origin = {"synth:mode" + std::to_string(spec.mode_id), 0};
  clip.samples.resize(n);
  const double gain = peak > 0.0 ? 0.5 / peak : 0.0;
  for (std::size_t i = 0; i < n; ++i) clip.samples[i] = static_cast<float>(signal[i] * gain);
  return clip;
}

struct LabeledClip {
  AudioClip clip;
  int mode = 0;
};

// `clips_per_mode` clips per spec with per-clip jitter of the base frequency
// (relative, uniform) and SNR (+/- 2 dB).
inline std::vector<LabeledClip> synth_corpus(const std::vector<ModeSpec>& specs, std::size_t clips_per_mode, Prng& prng,
                                             double freq_jitter = 0.01) {
  check_distinct_modes(specs);
  std::vector<LabeledClip> out;
  out.reserve(specs.size() * clips_per_mode);
  for (const auto& spec : specs) {
    for (std::size_t i = 0; i < clips_per_mode; ++i) {
      ModeSpec s = spec;
      s.base_freq *= 1.0 + prng.uniform(-freq_jitter, freq_jitter);
      if (std::isfinite(s.snr_db)) s.snr_db += prng.uniform(-2.0, 2.0);
      LabeledClip lc{synth_mode_clip(s, prng), spec.mode_id};
      lc.clip.origin.index = i;
      out.push_back(std::move(lc));
    }
  }
  return out;
}

}  // namespace listenkit
