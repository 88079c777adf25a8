#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "listen/error.hpp"

namespace listenkit {

struct AudioBuffer {
  std::vector<float> samples;  // mono, nominally in [-1, 1]
  int sample_rate = 0;

  double duration_s() const { return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0; }
};

struct ClipOrigin {
  std::string source;
  std::size_t index = 0;
};

// Exactly one second of mono audio.
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
  ClipOrigin origin;
};

namespace detail {

inline std::uint16_t read_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace detail

enum class WavEncoding { pcm16, pcm24, float32 };

// Decodes a RIFF/WAVE image held in memory. Multichannel input is averaged
// to mono.
inline AudioBuffer decode_wav(const std::vector<unsigned char>& bytes) {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("wav: missing RIFF/WAVE header");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16 || body + len > bytes.size()) throw FormatError("wav: truncated fmt chunk");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format == 0xFFFE) {
        // WAVE_FORMAT_EXTENSIBLE: the real format tag leads the subformat GUID
        if (len < 40) throw FormatError("wav: truncated extensible fmt chunk");
        format = read_u16(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      // tolerate writers that leave the data length unset or too long
      data_len = std::min<std::size_t>(len, bytes.size() - body);
      break;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw FormatError("wav: no fmt chunk");
  if (!data) throw FormatError("wav: no data chunk");
  if (channels == 0 || rate == 0) throw FormatError("wav: zero channels or sample rate");

  WavEncoding enc;
  if (format == 1 && bits == 16) enc = WavEncoding::pcm16;
  else if (format == 1 && bits == 24) enc = WavEncoding::pcm24;
  else if (format == 3 && bits == 32) enc = WavEncoding::float32;
  else throw UnsupportedError("wav: unsupported encoding (format " + std::to_string(format) + ", " +
                              std::to_string(bits) + " bits)");

  const std::size_t width = bits / 8;
  const std::size_t frame = width * channels;
  const std::size_t frames = data_len / frame;
  AudioBuffer buf;
  buf.sample_rate = static_cast<int>(rate);
  buf.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame + c * width;
      double s = 0.0;
      switch (enc) {
        case WavEncoding::pcm16:
          s = static_cast<std::int16_t>(read_u16(p)) / 32768.0;
          break;
        case WavEncoding::pcm24: {
          std::int32_t v = p[0] | (p[1] << 8) | (p[2] << 16);
          if (v & 0x800000) v -= 0x1000000;
          s = v / 8388608.0;
          break;
        }
        case WavEncoding::float32: {
          const std::uint32_t u = read_u32(p);
          float fv;
          std::memcpy(&fv, &u, sizeof fv);
          if (!std::isfinite(fv)) throw FormatError("wav: non-finite float sample");
          s = fv;
          break;
        }
      }
      acc += s;
    }
    buf.samples[f] = static_cast<float>(acc / channels);
  }
  return buf;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline AudioBuffer load_wav(const std::filesystem::path& path) { return decode_wav(read_file_bytes(path)); }

// Interleaved samples, channels already laid out frame by frame.
inline std::string encode_wav(const std::vector<float>& interleaved, int sample_rate, int channels,
                              WavEncoding enc = WavEncoding::pcm16) {
  const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : enc == WavEncoding::pcm24 ? 24 : 32;
  const std::uint16_t width = bits / 8;
  const auto data_len = static_cast<std::uint32_t>(interleaved.size() * width);
  std::string out = "RIFF";
  detail::put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, enc == WavEncoding::float32 ? 3 : 1);
  detail::put_u16(out, static_cast<std::uint16_t>(channels));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(sample_rate * channels * width));
  detail::put_u16(out, static_cast<std::uint16_t>(channels * width));
  detail::put_u16(out, bits);
  out += "data";
  detail::put_u32(out, data_len);
  for (float s : interleaved) {
    switch (enc) {
      case WavEncoding::pcm16: {
        const long v = std::lround(std::clamp(static_cast<double>(s), -1.0, 1.0) * 32768.0);
        detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(v, -32768L, 32767L))));
        break;
      }
      case WavEncoding::pcm24: {
        const long v = std::clamp(std::lround(std::clamp(static_cast<double>(s), -1.0, 1.0) * 8388608.0), -8388608L, 8388607L);
        const auto u = static_cast<std::uint32_t>(v);
        for (int i = 0; i < 3; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
        break;
      }
      case WavEncoding::float32: {
        std::uint32_t u;
        std::memcpy(&u, &s, sizeof u);
        detail::put_u32(out, u);
        break;
      }
    }
  }
  return out;
}

inline void save_wav(const std::filesystem::path& path, const AudioBuffer& buf, WavEncoding enc = WavEncoding::pcm16) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  const std::string bytes = encode_wav(buf.samples, buf.sample_rate, 1, enc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Linear interpolation; lossy above the lower of the two Nyquist limits.
inline AudioBuffer resample(const AudioBuffer& buf, int target) {
  if (target <= 0) throw PreconditionError("resample: target rate must be positive");
  if (buf.sample_rate <= 0) throw PreconditionError("resample: source rate must be positive");
  if (target == buf.sample_rate) return buf;
  const double ratio = static_cast<double>(buf.sample_rate) / target;
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(buf.samples.size()) * target / buf.sample_rate));
  AudioBuffer out;
  out.sample_rate = target;
  out.samples.resize(out_len);
  if (buf.samples.empty()) return out;
  const std::size_t last = buf.samples.size() - 1;
  for (std::size_t i = 0; i < out_len; ++i) {
    const double x = static_cast<double>(i) * ratio;
    const auto i0 = std::min(static_cast<std::size_t>(x), last);
    const std::size_t i1 = std::min(i0 + 1, last);
    const double frac = std::min(x - static_cast<double>(i0), 1.0);
    out.samples[i] = static_cast<float>(buf.samples[i0] + (buf.samples[i1] - buf.samples[i0]) * frac);
  }
  return out;
}

// Back-to-back one-second windows; the trailing partial second is dropped.
inline std::vector<AudioClip> segment_clips(const AudioBuffer& buf, const std::string& source = "") {
  if (buf.sample_rate <= 0) throw PreconditionError("segment_clips: sample rate must be positive");
  const auto len = static_cast<std::size_t>(buf.sample_rate);
  if (buf.samples.size() < len) throw InputError("segment_clips: buffer shorter than one second");
  std::vector<AudioClip> clips;
  for (std::size_t i = 0; (i + 1) * len <= buf.samples.size(); ++i) {
    AudioClip clip;
    clip.sample_rate = buf.sample_rate;
    clip.samples.assign(buf.samples.begin() + static_cast<std::ptrdiff_t>(i * len),
                        buf.samples.begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
    clip.origin = {source, i};
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace listenkit
