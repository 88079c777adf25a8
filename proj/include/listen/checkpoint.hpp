#pragma once

// On-disk model format:
//
//   "LSTN1" | u32 version | u32 json_len | json config |
//   { u16 name_len | name | u8 ndim | ndim x u32 dims | f32 data }*
//
// All integers and floats little-endian. The JSON config alone determines
// every tensor shape, so loading validates each record against a freshly
// built skeleton.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "listen/mel.hpp"
#include "listen/model.hpp"
#include "listen/synth.hpp"

namespace listenkit {

inline constexpr char kCheckpointMagic[5] = {'L', 'S', 'T', 'N', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// A frozen float model plus everything needed to run it.
struct ModelBundle {
  ModelConfig config;
  PreprocessingSettings preprocessing;
  Backbone<float> backbone;
  std::optional<MlpHead<float>> head;
  std::optional<CnnDecoder<float>> decoder;
  ModeTaxonomy labels;
  nlohmann::json metadata = nlohmann::json::object();

  template <typename F>
  void visit(F&& f) const {
    backbone.visit(f);
    if (head) head->visit(f);
    if (decoder) decoder->visit(f);
  }
  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    if (head) head->visit(f);
    if (decoder) decoder->visit(f);
  }
};

inline nlohmann::json checkpoint_header(const ModelBundle& m) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& l : m.labels) {
    labels.push_back({{"id", l.id}, {"name", l.name}, {"axial_depth", l.axial_depth}, {"spindle_speed", l.spindle_speed}});
  }
  return {{"model", m.config},
          {"preprocessing", m.preprocessing},
          {"num_classes", m.head ? m.head->num_classes() : 0},
          {"has_decoder", m.decoder.has_value()},
          {"labels", labels},
          {"metadata", m.metadata}};
}

inline std::string serialize_checkpoint(const ModelBundle& m) {
  const std::string json = checkpoint_header(m).dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  m.visit([&](const std::string& name, const Tensor<float>& t) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (auto d : t.dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  });
  return out;
}

inline void save_checkpoint(const ModelBundle& m, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

namespace detail {

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  const unsigned char* take(std::size_t n, const char* what) {
    if (n > size_ - pos_) throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    const unsigned char* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) { return read_u32(take(4, what)); }
  std::uint16_t u16(const char* what) { return read_u16(take(2, what)); }
  std::uint8_t u8(const char* what) { return *take(1, what); }
  bool done() const { return pos_ == size_; }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline ModelBundle parse_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes.data(), bytes.size());
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(in.take(sizeof kCheckpointMagic, "magic"), kCheckpointMagic, 5) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t json_len = in.u32("config length");
  const auto* json_bytes = in.take(json_len, "config");

  ModelBundle m;
  std::size_t num_classes = 0;
  bool has_decoder = false;
  try {
    const auto header = nlohmann::json::parse(json_bytes, json_bytes + json_len);
    m.config = header.at("model").get<ModelConfig>();
    m.preprocessing = header.at("preprocessing").get<PreprocessingSettings>();
    num_classes = header.at("num_classes").get<std::size_t>();
    has_decoder = header.at("has_decoder").get<bool>();
    for (const auto& l : header.at("labels")) {
      m.labels.push_back({l.at("id").get<int>(), l.at("name").get<std::string>(), l.value("axial_depth", std::string{}),
                          l.value("spindle_speed", std::string{})});
    }
    m.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  m.config.validate();
  if (num_classes > 100000) throw ConfigError("checkpoint config: implausible class count");

  // Reject configs that cannot fit in the payload before allocating anything.
  const std::size_t d = m.config.embed_dim;
  std::size_t params = block_param_formula(m.config) + kPatchPixels * d + d + 4 * d;
  if (num_classes > 0) params += (d + 1) * kHeadHidden + 2 * kHeadHidden + (kHeadHidden + 1) * num_classes;
  if (has_decoder) params += 9 * d * d + d + (d + 1) * kDecoderChannels;
  if (params * sizeof(float) > in.remaining()) {
    throw CorruptionError("checkpoint payload too short for its config");
  }

  // Shapes come from the config; fill values from the records.
  m.backbone = build_backbone<float>(m.config, 0, Init::zeros);
  if (num_classes > 0) m.head = build_head<float>(m.config.embed_dim, num_classes, 0, Init::zeros);
  if (has_decoder) m.decoder = build_decoder<float>(m.config.embed_dim, 0, Init::zeros);

  std::size_t expected_bytes = 0;
  m.visit([&](const std::string& name, const Tensor<float>& t) {
    expected_bytes += 2 + name.size() + 1 + 4 * t.rank() + 4 * t.size();
  });
  if (expected_bytes != in.remaining()) {
    throw CorruptionError("checkpoint payload is " + std::to_string(in.remaining()) + " bytes, config implies " +
                          std::to_string(expected_bytes));
  }

  m.visit([&](const std::string& name, Tensor<float>& t) {
    const std::uint16_t name_len = in.u16("tensor name length");
    const auto* name_bytes = in.take(name_len, "tensor name");
    const std::string got(reinterpret_cast<const char*>(name_bytes), name_len);
    if (got != name) throw ConfigError("checkpoint tensor '" + got + "' where '" + name + "' was expected");
    const std::uint8_t ndim = in.u8("tensor rank");
    Dims dims(ndim);
    for (auto& extent : dims) extent = in.u32("tensor dims");
    if (dims != t.dims()) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + dims_string(dims) + ", config implies " +
                        dims_string(t.dims()));
    }
    std::memcpy(t.data(), in.take(t.size() * sizeof(float), "tensor data"), t.size() * sizeof(float));
  });
  if (!in.done()) throw CorruptionError("trailing bytes after last tensor record");
  m.backbone.positional = sinusoidal_table<float>(kNumTokens, m.config.embed_dim);
  return m;
}

inline ModelBundle load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path));
}

}  // namespace listenkit
