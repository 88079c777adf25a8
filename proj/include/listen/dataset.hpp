#pragma once

// Labeled corpora: manifests, spectrogram caching and seeded splits.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/audio.hpp"
#include "listen/mel.hpp"
#include "listen/synth.hpp"
#include "listen/tensor.hpp"

namespace listenkit {

template <typename T>
struct Example {
  Tensor<T> image;  // standardized log-mel [128 x 128]
  int label = -1;
  ClipOrigin origin;
};

template <typename T>
using Dataset = std::vector<Example<T>>;

template <typename T>
Tensor<T> to_image(const LogMelSpectrogram& spec) {
  return spec.values.template cast<T>();
}

template <typename T>
Dataset<T> make_dataset(const std::vector<LabeledClip>& clips, const SpectrogramFrontend& frontend) {
  Dataset<T> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back({to_image<T>(frontend.process(c.clip)), c.mode, c.clip.origin});
  return out;
}

template <typename T>
Dataset<T> make_dataset(const std::vector<AudioClip>& clips, const SpectrogramFrontend& frontend) {
  Dataset<T> out;
  out.reserve(clips.size());
  for (const auto& c : clips) out.push_back({to_image<T>(frontend.process(c)), -1, c.origin});
  return out;
}

// ---------------------------------------------------------------- manifests

struct ManifestEntry {
  std::filesystem::path path;
  long offset_s = 0;
  int mode = 0;
};

// JSON lines: {"path": str, "offset_s": int, "mode": int}. Relative paths
// resolve against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest '" + manifest.string() + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e{j.at("path").get<std::string>(), j.at("offset_s").get<long>(), j.at("mode").get<int>()};
      if (e.offset_s < 0) throw InputError("negative offset_s");
      if (e.mode < 0) throw InputError("negative mode");
      if (e.path.is_relative()) e.path = manifest.parent_path() / e.path;
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    } catch (const InputError& ex) {
      throw InputError(manifest.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

// Decodes each referenced second, resampling to the front end's rate.
inline std::vector<LabeledClip> load_manifest_clips(const std::vector<ManifestEntry>& entries, int sample_rate = kSampleRate) {
  std::map<std::filesystem::path, AudioBuffer> cache;
  std::vector<LabeledClip> out;
  for (const auto& e : entries) {
    auto it = cache.find(e.path);
    if (it == cache.end()) it = cache.emplace(e.path, resample(load_wav(e.path), sample_rate)).first;
    const AudioBuffer& buf = it->second;
    const auto start = static_cast<std::size_t>(e.offset_s) * static_cast<std::size_t>(sample_rate);
    if (start + static_cast<std::size_t>(sample_rate) > buf.samples.size()) {
      throw InputError(e.path.string() + ": offset " + std::to_string(e.offset_s) + " s past end of audio");
    }
    LabeledClip lc;
    lc.mode = e.mode;
    lc.clip.sample_rate = sample_rate;
    lc.clip.origin = {e.path.string(), static_cast<std::size_t>(e.offset_s)};
    lc.clip.samples.assign(buf.samples.begin() + static_cast<std::ptrdiff_t>(start),
                           buf.samples.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(sample_rate)));
    out.push_back(std::move(lc));
  }
  return out;
}

// ---------------------------------------------------------------- splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Seeded shuffle of 0..n-1; the first round(n * train_fraction) go to train.
inline Split split_indices(std::size_t n, double train_fraction, Prng& prng) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw DomainError("split: train fraction outside [0, 1]");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  prng.shuffle(idx.begin(), idx.end());
  const auto cut = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
  return {{idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut)}, {idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end()}};
}

template <typename T>
Dataset<T> subset(const Dataset<T>& data, const std::vector<std::size_t>& idx) {
  Dataset<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data.at(i));
  return out;
}

}  // namespace listenkit
