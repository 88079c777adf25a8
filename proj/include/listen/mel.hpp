#pragma once

// Log-mel front end: centered power STFT -> Slaney mel projection -> dB with
// an 80 dB top clamp -> per-clip standardization.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/audio.hpp"
#include "listen/tensor.hpp"

namespace listenkit {

inline constexpr int kSampleRate = 48000;
inline constexpr std::size_t kMelBands = 128;
inline constexpr std::size_t kFrames = 128;

// ---------------------------------------------------------------- mel scale

namespace slaney {
inline constexpr double kLinearStep = 200.0 / 3.0;  // Hz per mel below 1 kHz
inline constexpr double kBreakHz = 1000.0;
inline constexpr double kBreakMel = kBreakHz / kLinearStep;  // 15
inline const double kLogStep = std::log(6.4) / 27.0;
}  // namespace slaney

inline double hz_to_mel(double hz) {
  if (!(hz >= 0.0)) throw DomainError("hz_to_mel: negative frequency");
  if (hz < slaney::kBreakHz) return hz / slaney::kLinearStep;
  return slaney::kBreakMel + std::log(hz / slaney::kBreakHz) / slaney::kLogStep;
}

inline double mel_to_hz(double mel) {
  if (!(mel >= 0.0)) throw DomainError("mel_to_hz: negative mel");
  if (mel < slaney::kBreakMel) return mel * slaney::kLinearStep;
  return slaney::kBreakHz * std::exp(slaney::kLogStep * (mel - slaney::kBreakMel));
}

// ---------------------------------------------------------------- configs

struct StftConfig {
  std::size_t n_fft = 2048;
  std::size_t win_length = 2048;
  std::size_t hop_length = 376;
  bool center = true;  // reflect padding by n_fft/2 on both sides

  void validate() const {
    if (n_fft == 0 || n_fft % 2 != 0) throw ConfigError("stft: n_fft must be positive and even");
    if (win_length == 0 || win_length > n_fft) throw ConfigError("stft: win_length must be in [1, n_fft]");
    if (hop_length == 0) throw ConfigError("stft: hop_length must be positive");
  }

  std::size_t frame_count(std::size_t samples) const {
    if (center) return samples / hop_length + 1;
    return samples < n_fft ? 0 : (samples - n_fft) / hop_length + 1;
  }
};

// Everything the runtime needs to reproduce training-time inputs; stored in
// every checkpoint.
struct PreprocessingSettings {
  int sample_rate = kSampleRate;
  StftConfig stft;
  std::size_t n_mels = kMelBands;
  double top_db = 80.0;
  double amin = 1e-10;
  double variance_floor = 1e-8;
  std::string mel_scale = "slaney";
  std::string normalization = "per_clip_standardize";

  friend bool operator==(const PreprocessingSettings& a, const PreprocessingSettings& b) {
    return a.sample_rate == b.sample_rate && a.stft.n_fft == b.stft.n_fft && a.stft.win_length == b.stft.win_length &&
           a.stft.hop_length == b.stft.hop_length && a.stft.center == b.stft.center && a.n_mels == b.n_mels &&
           a.top_db == b.top_db && a.amin == b.amin && a.variance_floor == b.variance_floor &&
           a.mel_scale == b.mel_scale && a.normalization == b.normalization;
  }
};

inline void to_json(nlohmann::json& j, const PreprocessingSettings& p) {
  j = {{"sample_rate", p.sample_rate}, {"n_fft", p.stft.n_fft},   {"win_length", p.stft.win_length},
       {"hop_length", p.stft.hop_length}, {"center", p.stft.center}, {"n_mels", p.n_mels},
       {"top_db", p.top_db},            {"amin", p.amin},          {"variance_floor", p.variance_floor},
       {"mel_scale", p.mel_scale},      {"normalization", p.normalization}};
}

inline void from_json(const nlohmann::json& j, PreprocessingSettings& p) {
  p.sample_rate = j.at("sample_rate").get<int>();
  p.stft.n_fft = j.at("n_fft").get<std::size_t>();
  p.stft.win_length = j.at("win_length").get<std::size_t>();
  p.stft.hop_length = j.at("hop_length").get<std::size_t>();
  p.stft.center = j.at("center").get<bool>();
  p.n_mels = j.at("n_mels").get<std::size_t>();
  p.top_db = j.at("top_db").get<double>();
  p.amin = j.at("amin").get<double>();
  p.variance_floor = j.at("variance_floor").get<double>();
  p.mel_scale = j.at("mel_scale").get<std::string>();
  p.normalization = j.at("normalization").get<std::string>();
}

// ---------------------------------------------------------------- filterbank

class MelFilterbank {
 public:
  // Triangular filters between n_mels + 2 mel-spaced edges on [0, sr/2],
  // each scaled by 2 / (f_{i+2} - f_i).
  MelFilterbank(int sample_rate, std::size_t n_fft, std::size_t n_mels)
      : sample_rate_(sample_rate), n_fft_(n_fft), n_mels_(n_mels) {
    if (n_mels == 0) throw ConfigError("filterbank: n_mels must be >= 1");
    if (n_fft == 0 || n_fft % 2 != 0) throw ConfigError("filterbank: n_fft must be positive and even");
    if (sample_rate <= 0) throw ConfigError("filterbank: sample rate must be positive");
    const std::size_t bins = n_fft / 2 + 1;
    const double f_max = sample_rate / 2.0;
    const double mel_max = hz_to_mel(f_max);
    edges_hz_.resize(n_mels + 2);
    for (std::size_t i = 0; i < n_mels + 2; ++i) {
      edges_hz_[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    }
    weights_ = Tensor<float>({n_mels, bins});
    support_.assign(n_mels, {bins, 0});
    for (std::size_t m = 0; m < n_mels; ++m) {
      const double lo = edges_hz_[m], mid = edges_hz_[m + 1], hi = edges_hz_[m + 2];
      const double enorm = 2.0 / (hi - lo);
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = bin_hz(k);
        const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
        if (w > 0.0) {
          weights_(m, k) = static_cast<float>(w * enorm);
          support_[m].first = std::min(support_[m].first, k);
          support_[m].second = k + 1;
        }
      }
      if (support_[m].second == 0) {
        throw ConfigError("filterbank: mel band " + std::to_string(m) + " has no FFT bins; n_mels " +
                          std::to_string(n_mels) + " too large for n_fft " + std::to_string(n_fft));
      }
    }
  }

  const Tensor<float>& weights() const { return weights_; }
  std::size_t n_mels() const { return n_mels_; }
  std::size_t n_bins() const { return n_fft_ / 2 + 1; }
  int sample_rate() const { return sample_rate_; }
  const std::vector<double>& edges_hz() const { return edges_hz_; }
  double center_hz(std::size_t m) const { return edges_hz_.at(m + 1); }
  double bin_hz(std::size_t k) const { return static_cast<double>(k) * sample_rate_ / static_cast<double>(n_fft_); }

  // Half-open bin range [first, second) where row m is nonzero.
  std::pair<std::size_t, std::size_t> support(std::size_t m) const { return support_.at(m); }

 private:
  int sample_rate_;
  std::size_t n_fft_;
  std::size_t n_mels_;
  std::vector<double> edges_hz_;
  Tensor<float> weights_;
  std::vector<std::pair<std::size_t, std::size_t>> support_;
};

// ---------------------------------------------------------------- FFT

// FFTW planning is not thread-safe; execution with new arrays is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(fftw_planner_mutex());
    Buffer<double> in(n);
    Buffer<fftw_complex> out(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.get(), out.get(), FFTW_ESTIMATE);
    if (!plan_) throw InternalError("fftw: planning failed");
  }
  ~RealFft() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }

  template <typename U>
  struct Buffer {
    explicit Buffer(std::size_t count) : ptr(static_cast<U*>(fftw_malloc(sizeof(U) * count))) {
      if (!ptr) throw std::bad_alloc();
    }
    ~Buffer() { fftw_free(ptr); }
    Buffer(const Buffer&) = delete;
    Buffer& operator=(const Buffer&) = delete;
    U* get() const { return ptr; }
    U* ptr;
  };

  // Safe to call concurrently on one instance.
  void forward(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(plan_, in, out); }

 private:
  std::size_t n_;
  fftw_plan plan_ = nullptr;
};

// ---------------------------------------------------------------- spectrogram

struct LogMelSpectrogram {
  Tensor<float> values;  // [n_mels x frames]
  ClipOrigin origin;
  double db_min = 0.0;  // dynamic range after the top-dB clamp, before standardization
  double db_max = 0.0;
};

// Reusable front end. Immutable after construction; process() may be called
// from several threads at once.
class SpectrogramFrontend {
 public:
  explicit SpectrogramFrontend(PreprocessingSettings settings = {})
      : settings_(std::move(settings)),
        filterbank_(settings_.sample_rate, settings_.stft.n_fft, settings_.n_mels),
        fft_(settings_.stft.n_fft) {
    settings_.stft.validate();
    const std::size_t n = settings_.stft.n_fft, w = settings_.stft.win_length;
    window_.assign(n, 0.0);
    const std::size_t offset = (n - w) / 2;
    for (std::size_t i = 0; i < w; ++i) {
      window_[offset + i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(w));
    }
  }

  const PreprocessingSettings& settings() const { return settings_; }
  const MelFilterbank& filterbank() const { return filterbank_; }

  // Mel power [n_mels x frames], before the dB conversion.
  Tensor<double> mel_power(std::span<const float> samples) const {
    const StftConfig& cfg = settings_.stft;
    const std::size_t n = cfg.n_fft, bins = n / 2 + 1;
    const std::size_t frames = cfg.frame_count(samples.size());
    const std::size_t pad = cfg.center ? n / 2 : 0;
    const auto len = static_cast<std::ptrdiff_t>(samples.size());
    if (cfg.center && samples.size() <= pad) throw PreconditionError("stft: clip too short for reflect padding");

    auto sample_at = [&](std::ptrdiff_t i) -> double {
      // reflect without repeating the edge sample
      if (i < 0) i = -i;
      if (i >= len) i = 2 * (len - 1) - i;
      return samples[static_cast<std::size_t>(i)];
    };

    RealFft::Buffer<double> in(n);
    RealFft::Buffer<fftw_complex> out(bins);
    std::vector<double> power(bins);
    Tensor<double> mel({filterbank_.n_mels(), frames});
    const auto& fb = filterbank_.weights();
    for (std::size_t t = 0; t < frames; ++t) {
      const auto start = static_cast<std::ptrdiff_t>(t * cfg.hop_length) - static_cast<std::ptrdiff_t>(pad);
      for (std::size_t i = 0; i < n; ++i) in.get()[i] = sample_at(start + static_cast<std::ptrdiff_t>(i)) * window_[i];
      fft_.forward(in.get(), out.get());
      for (std::size_t k = 0; k < bins; ++k) power[k] = out.get()[k][0] * out.get()[k][0] + out.get()[k][1] * out.get()[k][1];
      for (std::size_t m = 0; m < filterbank_.n_mels(); ++m) {
        const auto [lo, hi] = filterbank_.support(m);
        double acc = 0.0;
        for (std::size_t k = lo; k < hi; ++k) acc += static_cast<double>(fb(m, k)) * power[k];
        mel(m, t) = acc;
      }
    }
    return mel;
  }

  // dB with top-dB clamp, before standardization.
  Tensor<double> log_mel_db(std::span<const float> samples) const {
    Tensor<double> db = mel_power(samples);
    double mx = -std::numeric_limits<double>::infinity();
    for (auto& v : db.values()) {
      v = 10.0 * std::log10(std::max(v, settings_.amin));
      mx = std::max(mx, v);
    }
    const double floor = mx - settings_.top_db;
    for (auto& v : db.values()) v = std::max(v, floor);
    return db;
  }

  LogMelSpectrogram process(const AudioClip& clip) const {
    if (clip.sample_rate != settings_.sample_rate) {
      throw PreconditionError("spectrogram: clip sample rate " + std::to_string(clip.sample_rate) + " != " +
                              std::to_string(settings_.sample_rate) + " (resample first)");
    }
    for (float s : clip.samples) {
      if (!std::isfinite(s)) throw PreconditionError("spectrogram: non-finite sample");
    }
    const Tensor<double> db = log_mel_db(clip.samples);
    LogMelSpectrogram out;
    out.origin = clip.origin;
    double mean = 0.0, mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (double v : db.values()) {
      mean += v;
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    mean /= static_cast<double>(db.size());
    double var = 0.0;
    for (double v : db.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(db.size());
    const double inv_std = 1.0 / std::sqrt(std::max(var, settings_.variance_floor));
    out.values = Tensor<float>(db.dims());
    for (std::size_t i = 0; i < db.size(); ++i) out.values[i] = static_cast<float>((db[i] - mean) * inv_std);
    out.db_min = mn;
    out.db_max = mx;
    return out;
  }

 private:
  PreprocessingSettings settings_;
  MelFilterbank filterbank_;
  RealFft fft_;
  std::vector<double> window_;
};

inline LogMelSpectrogram clip_to_spectrogram(const AudioClip& clip, const SpectrogramFrontend& frontend) {
  return frontend.process(clip);
}

}  // namespace listenkit
