#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "listen/audio.hpp"
#include "listen/mel.hpp"
#include "listen/synth.hpp"

namespace listenkit {
namespace {

std::vector<unsigned char> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

AudioClip sine_clip(double freq, double amplitude = 0.5, int rate = kSampleRate) {
  AudioClip clip;
  clip.sample_rate = rate;
  clip.samples.resize(static_cast<std::size_t>(rate));
  for (std::size_t i = 0; i < clip.samples.size(); ++i) {
    clip.samples[i] = static_cast<float>(amplitude * std::sin(2 * std::numbers::pi * freq * static_cast<double>(i) / rate));
  }
  return clip;
}

// Direct DFT magnitude at one frequency; independent of FFTW.
double dft_magnitude(const std::vector<float>& x, int rate, double freq) {
  double re = 0, im = 0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double a = 2 * std::numbers::pi * freq * static_cast<double>(n) / rate;
    re += x[n] * std::cos(a);
    im -= x[n] * std::sin(a);
  }
  return std::hypot(re, im);
}

double dominant_frequency(const std::vector<float>& x, int rate, double lo, double hi, double step) {
  double best_f = lo, best = -1;
  for (double f = lo; f <= hi; f += step) {
    const double m = dft_magnitude(x, rate, f);
    if (m > best) {
      best = m;
      best_f = f;
    }
  }
  return best_f;
}

std::size_t argmax_row(const Tensor<double>& m) {
  std::size_t best = 0;
  double best_sum = -INFINITY;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += m(r, c);
    if (s > best_sum) {
      best_sum = s;
      best = r;
    }
  }
  return best;
}

// ---------------------------------------------------------------- WAV

TEST(Wav, ZeroPcm16DecodesToZeros) {
  auto buf = decode_wav(to_bytes(encode_wav(std::vector<float>(48000, 0.0f), 48000, 1)));
  EXPECT_EQ(buf.sample_rate, 48000);
  ASSERT_EQ(buf.samples.size(), 48000u);
  for (float s : buf.samples) EXPECT_EQ(s, 0.0f);
}

TEST(Wav, Pcm16FullScaleUsesFixedPointScaling) {
  auto buf = decode_wav(to_bytes(encode_wav({1.0f, -1.0f}, 48000, 1)));
  EXPECT_FLOAT_EQ(buf.samples[0], 32767.0f / 32768.0f);
  EXPECT_FLOAT_EQ(buf.samples[1], -1.0f);
}

TEST(Wav, OppositeStereoChannelsAverageToSilence) {
  std::vector<float> interleaved;
  for (int i = 0; i < 1000; ++i) {
    interleaved.push_back(0.5f);
    interleaved.push_back(-0.5f);
  }
  auto buf = decode_wav(to_bytes(encode_wav(interleaved, 44100, 2)));
  ASSERT_EQ(buf.samples.size(), 1000u);
  for (float s : buf.samples) EXPECT_EQ(s, 0.0f);
}

TEST(Wav, Pcm24AndFloatDecode) {
  const std::vector<float> x{0.25f, -0.75f, 0.5f};
  auto b24 = decode_wav(to_bytes(encode_wav(x, 16000, 1, WavEncoding::pcm24)));
  auto bf = decode_wav(to_bytes(encode_wav(x, 16000, 1, WavEncoding::float32)));
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_FLOAT_EQ(b24.samples[i], x[i]);
    EXPECT_EQ(bf.samples[i], x[i]);
  }
}

TEST(Wav, MalformedAndUnsupportedInputs) {
  EXPECT_THROW(decode_wav(to_bytes("RIFX....WAVE")), FormatError);
  EXPECT_THROW(decode_wav(to_bytes("")), FormatError);
  auto bytes = to_bytes(encode_wav({0.1f, 0.2f}, 8000, 1));
  bytes[34] = 8;  // bits per sample -> 8-bit PCM
  EXPECT_THROW(decode_wav(bytes), UnsupportedError);
  auto no_data = to_bytes(encode_wav({}, 8000, 1));
  no_data.resize(36);
  EXPECT_THROW(decode_wav(no_data), FormatError);
}

TEST(Wav, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "listen_wav_roundtrip.wav";
  AudioBuffer buf{{0.0f, 0.5f, -0.5f}, 48000};
  save_wav(path, buf, WavEncoding::float32);
  EXPECT_EQ(load_wav(path).samples, buf.samples);
  std::filesystem::remove(path);
  EXPECT_THROW(load_wav(path), IoError);
}

// ---------------------------------------------------------------- resample

TEST(Resample, SameRateIsIdentity) {
  AudioBuffer buf{{0.1f, -0.3f, 0.7f}, 48000};
  auto out = resample(buf, 48000);
  EXPECT_EQ(out.samples, buf.samples);
  EXPECT_THROW(resample(buf, 0), PreconditionError);
}

TEST(Resample, ConstantStaysConstant) {
  AudioBuffer buf{std::vector<float>(44100, 0.7f), 44100};
  auto out = resample(buf, 48000);
  EXPECT_EQ(out.sample_rate, 48000);
  EXPECT_EQ(out.samples.size(), 48000u);
  for (float s : out.samples) EXPECT_FLOAT_EQ(s, 0.7f);
}

TEST(Resample, OutputLengthRounds) {
  AudioBuffer buf{std::vector<float>(1001, 0.0f), 3};
  EXPECT_EQ(resample(buf, 2).samples.size(), 667u);  // round(1001 * 2 / 3) = round(667.33)
}

TEST(Resample, SinePeakSurvivesUpsampling) {
  auto clip = sine_clip(1000.0, 0.5, 16000);
  auto out = resample(AudioBuffer{clip.samples, 16000}, 48000);
  EXPECT_NEAR(dominant_frequency(out.samples, 48000, 100.0, 8000.0, 10.0), 1000.0, 10.0);
}

// ---------------------------------------------------------------- segmentation

TEST(Segment, DropsTrailingPartialSecond) {
  AudioBuffer buf{std::vector<float>(168000, 0.0f), 48000};  // 3.5 s
  auto clips = segment_clips(buf, "x");
  ASSERT_EQ(clips.size(), 3u);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_EQ(clips[i].origin.index, i);
    EXPECT_EQ(clips[i].samples.size(), 48000u);
  }
}

TEST(Segment, ExactSecondsAndShortInput) {
  EXPECT_EQ(segment_clips(AudioBuffer{std::vector<float>(48000), 48000}).size(), 1u);
  EXPECT_EQ(segment_clips(AudioBuffer{std::vector<float>(20 * 48000), 48000}).size(), 20u);
  EXPECT_THROW(segment_clips(AudioBuffer{std::vector<float>(47999), 48000}), InputError);
}

TEST(Segment, ClipsAreConsecutiveWindows) {
  AudioBuffer buf{std::vector<float>(3 * 100), 100};
  for (std::size_t i = 0; i < buf.samples.size(); ++i) buf.samples[i] = static_cast<float>(i);
  auto clips = segment_clips(buf);
  EXPECT_EQ(clips[1].samples.front(), 100.0f);
  EXPECT_EQ(clips[2].samples.back(), 299.0f);
}

// ---------------------------------------------------------------- mel scale

TEST(MelScale, ReferencePoints) {
  EXPECT_EQ(hz_to_mel(0.0), 0.0);
  EXPECT_DOUBLE_EQ(hz_to_mel(1000.0), 15.0);
  EXPECT_NEAR(hz_to_mel(6400.0), 42.0, 1e-12);
  EXPECT_THROW(hz_to_mel(-1.0), DomainError);
}

TEST(MelScale, StrictlyIncreasingAndInvertible) {
  double prev = -1;
  for (double f = 0; f <= 24000; f += 7.3) {
    const double m = hz_to_mel(f);
    EXPECT_GT(m, prev);
    EXPECT_NEAR(mel_to_hz(m), f, 1e-8 * std::max(1.0, f));
    prev = m;
  }
}

// ---------------------------------------------------------------- filterbank

TEST(Filterbank, ShapeAndNonNegativity) {
  MelFilterbank fb(48000, 2048, 128);
  EXPECT_EQ(fb.weights().dims(), (Dims{128, 1025}));
  for (std::size_t m = 0; m < 128; ++m) {
    double sum = 0;
    const auto [lo, hi] = fb.support(m);
    for (std::size_t k = 0; k < 1025; ++k) {
      const float w = fb.weights()(m, k);
      EXPECT_GE(w, 0.0f);
      sum += w;
      // single contiguous support
      if (k < lo || k >= hi) {
        EXPECT_EQ(w, 0.0f);
      } else {
        EXPECT_GT(w, 0.0f) << "row " << m << " bin " << k;
      }
    }
    EXPECT_GT(sum, 0.0);
  }
}

TEST(Filterbank, CentersFollowInverseMelOfInteriorEdges) {
  MelFilterbank fb(48000, 2048, 128);
  const double mel_max = hz_to_mel(24000.0);
  for (std::size_t m = 0; m < 128; ++m) {
    const double expected = mel_to_hz(mel_max * static_cast<double>(m + 1) / 129.0);
    EXPECT_NEAR(fb.center_hz(m), expected, 1e-9 * expected);
    if (m > 0) {
      EXPECT_GT(fb.center_hz(m), fb.center_hz(m - 1));
    }
    // the peak weight sits at the bin nearest the center
    const auto [lo, hi] = fb.support(m);
    std::size_t peak = lo;
    for (std::size_t k = lo; k < hi; ++k) {
      if (fb.weights()(m, k) > fb.weights()(m, peak)) peak = k;
    }
    EXPECT_LE(std::abs(fb.bin_hz(peak) - expected), 48000.0 / 2048.0);
  }
}

TEST(Filterbank, CoversEveryInteriorBin) {
  MelFilterbank fb(48000, 2048, 128);
  for (std::size_t k = 1; k < 1024; ++k) {
    bool covered = false;
    for (std::size_t m = 0; m < 128 && !covered; ++m) covered = fb.weights()(m, k) > 0.0f;
    EXPECT_TRUE(covered) << "bin " << k;
  }
}

TEST(Filterbank, AreaNormalization) {
  MelFilterbank fb(48000, 2048, 128);
  // the continuous triangle integrates to 1 in Hz; the sampled sum times the
  // bin width should agree closely for wide (high-frequency) filters
  const double bin = 48000.0 / 2048.0;
  double sum = 0;
  for (std::size_t k = 0; k < 1025; ++k) sum += fb.weights()(120, k) * bin;
  EXPECT_NEAR(sum, 1.0, 0.02);
}

TEST(Filterbank, RejectsTooManyBands) {
  EXPECT_THROW(MelFilterbank(48000, 2048, 512), ConfigError);
  EXPECT_THROW(MelFilterbank(48000, 2047, 128), ConfigError);
  EXPECT_THROW(MelFilterbank(48000, 2048, 0), ConfigError);
}

// ---------------------------------------------------------------- spectrogram

class SpectrogramTest : public ::testing::Test {
 protected:
  SpectrogramFrontend frontend;
};

TEST_F(SpectrogramTest, OneSecondAt48kIs128By128) {
  Prng prng(1);
  AudioClip clip;
  clip.sample_rate = 48000;
  for (int i = 0; i < 48000; ++i) clip.samples.push_back(static_cast<float>(prng.uniform(-1, 1)));
  auto spec = clip_to_spectrogram(clip, frontend);
  EXPECT_EQ(spec.values.dims(), (Dims{128, 128}));
  EXPECT_TRUE(spec.values.all_finite());
  EXPECT_LE(spec.db_max - spec.db_min, 80.0);
}

TEST_F(SpectrogramTest, StandardizedOutputHasZeroMeanUnitVariance) {
  auto spec = frontend.process(sine_clip(440.0));
  double mean = 0, var = 0;
  for (float v : spec.values.values()) mean += v;
  mean /= spec.values.size();
  for (float v : spec.values.values()) var += (v - mean) * (v - mean);
  var /= spec.values.size();
  EXPECT_NEAR(mean, 0.0, 1e-5);
  EXPECT_NEAR(var, 1.0, 1e-4);
}

TEST_F(SpectrogramTest, SilenceStandardizesToZeros) {
  AudioClip clip{std::vector<float>(48000, 0.0f), 48000, {}};
  auto spec = frontend.process(clip);
  for (float v : spec.values.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(spec.db_max, -100.0);
  EXPECT_EQ(spec.db_min, -100.0);
}

TEST_F(SpectrogramTest, SineEnergyLandsInBandContainingItsFrequency) {
  auto db = frontend.log_mel_db(sine_clip(1000.0).samples);
  const auto row = argmax_row(db);
  const auto& edges = frontend.filterbank().edges_hz();
  EXPECT_LT(edges[row], 1000.0);
  EXPECT_GT(edges[row + 2], 1000.0);
}

TEST_F(SpectrogramTest, RejectsOtherSampleRates) {
  AudioClip clip{std::vector<float>(44100, 0.0f), 44100, {}};
  EXPECT_THROW(frontend.process(clip), PreconditionError);
}

TEST_F(SpectrogramTest, LouderClipNeverHasLessMelEnergy) {
  Prng prng(2);
  auto clip = synth_mode_clip({3, 333.0, 4, 800.0, 9000.0, 6.0}, prng);
  auto quiet = frontend.mel_power(clip.samples);
  for (auto& s : clip.samples) s *= 1.7f;
  auto loud = frontend.mel_power(clip.samples);
  for (std::size_t i = 0; i < quiet.size(); ++i) EXPECT_GE(loud[i], quiet[i]);
}

TEST_F(SpectrogramTest, DeterministicBytes) {
  Prng prng(3);
  auto clip = synth_mode_clip({1, 150.0, 2, 300.0, 3000.0, 10.0}, prng);
  EXPECT_EQ(frontend.process(clip).values, frontend.process(clip).values);
}

// ---------------------------------------------------------------- synthesis

TEST(Synth, NoiselessSingleHarmonicIsPureSine) {
  Prng prng(4);
  ModeSpec spec{0, 440.0, 1};
  auto clip = synth_mode_clip(spec, prng);
  // project onto sin/cos at 440 Hz; the residual must vanish
  double s = 0, c = 0;
  const auto n = clip.samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2 * std::numbers::pi * 440.0 * static_cast<double>(i) / 48000.0;
    s += clip.samples[i] * std::sin(a);
    c += clip.samples[i] * std::cos(a);
  }
  s *= 2.0 / n;
  c *= 2.0 / n;
  double residual = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2 * std::numbers::pi * 440.0 * static_cast<double>(i) / 48000.0;
    residual = std::max(residual, std::abs(clip.samples[i] - (s * std::sin(a) + c * std::cos(a))));
  }
  EXPECT_NEAR(std::hypot(s, c), 0.5, 1e-4);
  EXPECT_LT(residual, 1e-4);
}

TEST(Synth, SameSeedSameClip) {
  ModeSpec spec{2, 200.0, 3, 2000.0, 6000.0, 10.0};
  Prng a(5), b(5);
  EXPECT_EQ(synth_mode_clip(spec, a).samples, synth_mode_clip(spec, b).samples);
}

TEST(Synth, DifferentBaseFrequenciesPeakInDifferentBands) {
  SpectrogramFrontend frontend;
  Prng prng(6);
  auto low = frontend.log_mel_db(synth_mode_clip({0, 500.0, 1, 100.0, 20000.0, 20.0}, prng).samples);
  auto high = frontend.log_mel_db(synth_mode_clip({1, 2000.0, 1, 100.0, 20000.0, 20.0}, prng).samples);
  EXPECT_LT(argmax_row(low), argmax_row(high));
}

TEST(Synth, ValidatesSpecs) {
  Prng prng(7);
  EXPECT_THROW(synth_mode_clip({0, 30000.0, 1}, prng), ConfigError);
  EXPECT_THROW(synth_mode_clip({0, 100.0, 0}, prng), ConfigError);
  EXPECT_THROW(synth_corpus({{1, 100.0, 1}, {1, 200.0, 1}}, 1, prng), ConfigError);
}

TEST(Synth, CncTaxonomyMatchesTable) {
  auto t = cnc_taxonomy();
  ASSERT_EQ(t.size(), 10u);
  EXPECT_EQ(t[0].spindle_speed, "Off");
  EXPECT_EQ(t[1].axial_depth, "On");
  EXPECT_EQ(t[4].axial_depth, "1 mm");
  EXPECT_EQ(t[4].spindle_speed, "10000 rpm");
  EXPECT_EQ(t[9].axial_depth, "3 mm");
  EXPECT_EQ(t[9].spindle_speed, "12000 rpm");
  for (int i = 0; i < 10; ++i) EXPECT_EQ(t[static_cast<std::size_t>(i)].id, i);
  EXPECT_NO_THROW(check_distinct_modes(cnc_mode_specs()));
}

}  // namespace
}  // namespace listenkit
