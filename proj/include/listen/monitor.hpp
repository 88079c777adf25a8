#pragma once

// Streaming mode monitor: a producer cuts audio into one-second clips, a
// consumer classifies them under a latency budget, and a publisher fans mode
// events out to NDJSON sinks.

#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <deque>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/audio.hpp"
#include "listen/checkpoint.hpp"
#include "listen/dataset.hpp"
#include "listen/finetune.hpp"
#include "listen/mel.hpp"

namespace listenkit {

inline constexpr double kDefaultBudgetMs = 1000.0 / 30.0;

using LogHook = std::function<void(const std::string&)>;

// ---------------------------------------------------------------- queue

// Bounded FIFO. A push into a full queue evicts the oldest element.
template <typename T>
class DropOldestQueue {
 public:
  explicit DropOldestQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("queue capacity must be >= 1");
  }

  // Returns true when an element was evicted to make room.
  bool push(T value) {
    bool dropped = false;
    {
      std::lock_guard lock(mu_);
      if (closed_) return false;
      if (items_.size() == capacity_) {
        items_.pop_front();
        ++drops_;
        dropped = true;
      }
      items_.push_back(std::move(value));
      high_water_ = std::max(high_water_, items_.size());
    }
    cv_.notify_one();
    return dropped;
  }

  // Blocks until an element is available; nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty() || closed_; });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }
  std::size_t drops() const {
    std::lock_guard lock(mu_);
    return drops_;
  }
  std::size_t high_water() const {
    std::lock_guard lock(mu_);
    return high_water_;
  }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
  std::size_t drops_ = 0, high_water_ = 0;
  bool closed_ = false;
};

// ---------------------------------------------------------------- sources

class ClipSource {
 public:
  virtual ~ClipSource() = default;
  // Next clip in arrival order; nullopt at end of stream.
  virtual std::optional<AudioClip> next() = 0;
};

// Sleeps so that clip i is released no earlier than i / speed seconds after
// the first one. speed <= 0 disables pacing.
class Pacer {
 public:
  explicit Pacer(double speed) : speed_(speed) {}
  void wait(std::size_t index) {
    if (speed_ <= 0.0) return;
    if (index == 0) start_ = std::chrono::steady_clock::now();
    std::this_thread::sleep_until(start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                               std::chrono::duration<double>(static_cast<double>(index) / speed_)));
  }

 private:
  double speed_;
  std::chrono::steady_clock::time_point start_;
};

// A WAV file resampled to the model rate and cut into back-to-back clips.
class WavSource : public ClipSource {
 public:
  WavSource(const std::filesystem::path& path, int sample_rate, double speed = 0.0) : pacer_(speed) {
    auto buf = load_wav(path);
    if (buf.sample_rate != sample_rate) buf = resample(buf, sample_rate);
    clips_ = segment_clips(buf, path.string());
  }

  std::optional<AudioClip> next() override {
    if (next_ >= clips_.size()) return std::nullopt;
    pacer_.wait(next_);
    return std::move(clips_[next_++]);
  }

  std::size_t size() const { return clips_.size(); }

 private:
  std::vector<AudioClip> clips_;
  std::size_t next_ = 0;
  Pacer pacer_;
};

// Headerless signed 16-bit little-endian mono at 48 kHz, read one second at a
// time. A trailing partial second ends the stream.
class RawPcmSource : public ClipSource {
 public:
  static constexpr int kRate = 48000;

  RawPcmSource(std::istream& in, int sample_rate, std::string name = "pcm") : in_(in), rate_(sample_rate), name_(std::move(name)) {}

  std::optional<AudioClip> next() override {
    std::vector<char> bytes(2 * kRate);
    in_.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in_.gcount() != static_cast<std::streamsize>(bytes.size())) return std::nullopt;
    AudioBuffer buf{std::vector<float>(kRate), kRate};
    for (int i = 0; i < kRate; ++i) {
      const auto lo = static_cast<unsigned char>(bytes[2 * i]), hi = static_cast<unsigned char>(bytes[2 * i + 1]);
      buf.samples[i] = static_cast<float>(static_cast<std::int16_t>(lo | (hi << 8))) / 32768.0f;
    }
    if (rate_ != kRate) buf = resample(buf, rate_);
    AudioClip clip{std::move(buf.samples), rate_, {name_, index_++}};
    clip.samples.resize(static_cast<std::size_t>(rate_), 0.0f);
    return clip;
  }

 private:
  std::istream& in_;
  int rate_;
  std::string name_;
  std::size_t index_ = 0;
};

// In-memory clips, mostly for tests and benchmarks.
class VectorSource : public ClipSource {
 public:
  explicit VectorSource(std::vector<AudioClip> clips, double speed = 0.0) : clips_(std::move(clips)), pacer_(speed) {}
  std::optional<AudioClip> next() override {
    if (next_ >= clips_.size()) return std::nullopt;
    pacer_.wait(next_);
    return clips_[next_++];
  }

 private:
  std::vector<AudioClip> clips_;
  std::size_t next_ = 0;
  Pacer pacer_;
};

struct StreamedClip {
  std::size_t clip_id = 0;
  AudioClip clip;
};

struct ProducerStats {
  std::size_t produced = 0;
  std::size_t skipped = 0;
};

// Producer loop: numbers clips in arrival order and pushes them into the
// queue. Clips with non-finite samples are skipped (their id is consumed).
// Closes the queue at end of stream.
inline ProducerStats stream_clips(ClipSource& source, DropOldestQueue<StreamedClip>& queue, const LogHook& warn = {}) {
  ProducerStats stats;
  std::size_t id = 0;
  try {
    while (auto clip = source.next()) {
      const std::size_t clip_id = id++;
      if (!std::all_of(clip->samples.begin(), clip->samples.end(), [](float s) { return std::isfinite(s); })) {
        ++stats.skipped;
        if (warn) warn("clip " + std::to_string(clip_id) + ": non-finite samples, skipped");
        continue;
      }
      queue.push({clip_id, std::move(*clip)});
      ++stats.produced;
    }
  } catch (const std::exception& e) {
    if (warn) warn(std::string("source failed: ") + e.what());
  }
  queue.close();
  return stats;
}

// ---------------------------------------------------------------- events

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

inline std::string format_rfc3339(Timestamp ts) {
  const auto secs = std::chrono::floor<std::chrono::seconds>(ts);
  const auto ms = (ts - secs).count();
  const std::time_t t = std::chrono::system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  const std::size_t n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms));
  return buf;
}

inline Timestamp parse_rfc3339(const std::string& s) {
  std::tm tm{};
  int ms = 0, consumed = 0;
  if (std::sscanf(s.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d.%3dZ%n", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour, &tm.tm_min,
                  &tm.tm_sec, &ms, &consumed) != 7 ||
      consumed != static_cast<int>(s.size()) || s.size() != 24) {
    throw FormatError("timestamp '" + s + "' is not YYYY-MM-DDTHH:MM:SS.mmmZ");
  }
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  const std::time_t t = timegm(&tm);
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::from_time_t(t)) +
         std::chrono::milliseconds(ms);
}

inline Timestamp now_ms() { return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now()); }

struct LatencyRecord {
  std::size_t clip_id = 0;
  double pre = 0.0, infer = 0.0, post = 0.0, total = 0.0;  // milliseconds

  friend bool operator==(const LatencyRecord&, const LatencyRecord&) = default;
};

struct ModeEvent {
  Timestamp ts{};
  std::size_t clip_id = 0;
  int mode = 0;
  std::string label;
  double confidence = 0.0;
  LatencyRecord latency;
  bool over_budget = false;
  std::size_t drops = 0;

  friend bool operator==(const ModeEvent&, const ModeEvent&) = default;
};

inline std::string to_ndjson(const ModeEvent& e) {
  const nlohmann::json j = {
      {"ts", format_rfc3339(e.ts)},
      {"clip_id", e.clip_id},
      {"mode", e.mode},
      {"label", e.label},
      {"confidence", e.confidence},
      {"latency_ms", {{"pre", e.latency.pre}, {"infer", e.latency.infer}, {"post", e.latency.post}, {"total", e.latency.total}}},
      {"over_budget", e.over_budget},
      {"drops", e.drops}};
  return j.dump() + "\n";
}

inline ModeEvent parse_ndjson(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    ModeEvent e;
    e.ts = parse_rfc3339(j.at("ts").get<std::string>());
    e.clip_id = j.at("clip_id").get<std::size_t>();
    e.mode = j.at("mode").get<int>();
    e.label = j.at("label").get<std::string>();
    e.confidence = j.at("confidence").get<double>();
    const auto& l = j.at("latency_ms");
    e.latency = {e.clip_id, l.at("pre").get<double>(), l.at("infer").get<double>(), l.at("post").get<double>(),
                 l.at("total").get<double>()};
    e.over_budget = j.at("over_budget").get<bool>();
    e.drops = j.at("drops").get<std::size_t>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("event line: ") + ex.what());
  }
}

// ---------------------------------------------------------------- inference

// A loaded classifier plus the front end it was trained with. Immutable after
// construction and safe to share between threads.
class MonitorModel {
 public:
  explicit MonitorModel(const ModelBundle& bundle)
      : classifier_(classifier_from_bundle(bundle)), frontend_(bundle.preprocessing), labels_(bundle.labels) {
    const auto& pre = frontend_.settings();
    const std::size_t frames = pre.stft.frame_count(static_cast<std::size_t>(pre.sample_rate));
    if (pre.n_mels != kMelBands || frames != kFrames) {
      throw ConfigError("monitor: preprocessing yields " + std::to_string(pre.n_mels) + "x" + std::to_string(frames) +
                        " spectrograms, model expects 128x128");
    }
  }

  const Classifier<float>& classifier() const { return classifier_; }
  const SpectrogramFrontend& frontend() const { return frontend_; }
  int sample_rate() const { return frontend_.settings().sample_rate; }

  std::string label(int mode) const {
    for (const auto& m : labels_) {
      if (m.id == mode) return m.name;
    }
    return "Mode " + std::to_string(mode);
  }

 private:
  Classifier<float> classifier_;
  SpectrogramFrontend frontend_;
  ModeTaxonomy labels_;
};

// Times preprocessing, the forward pass and postprocessing separately. A
// budget overrun is only flagged.
inline ModeEvent infer_clip(const MonitorModel& model, const AudioClip& clip, std::size_t clip_id, double budget_ms = kDefaultBudgetMs,
                            std::size_t drops = 0) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); };
  const auto t0 = clock::now();
  const auto image = to_image<float>(model.frontend().process(clip));
  const auto t1 = clock::now();
  const auto logits = classifier_logits(model.classifier(), image);
  const auto t2 = clock::now();
  const auto p = predict_from_logits<float>(logits.values());
  ModeEvent e;
  e.clip_id = clip_id;
  e.mode = p.mode;
  e.label = model.label(p.mode);
  e.confidence = p.confidence;
  e.drops = drops;
  const auto t3 = clock::now();
  e.latency = {clip_id, ms(t1 - t0), ms(t2 - t1), ms(t3 - t2), 0.0};
  e.latency.total = e.latency.pre + e.latency.infer + e.latency.post;
  e.over_budget = e.latency.total > budget_ms;
  e.ts = now_ms();
  return e;
}

// ---------------------------------------------------------------- statistics

struct LatencyStats {
  std::size_t count = 0;
  double mean = 0.0, p50 = 0.0, p95 = 0.0, max = 0.0;
  double over_budget_rate = 0.0;
  double budget_ms = kDefaultBudgetMs;

  nlohmann::json to_json() const {
    return {{"count", count}, {"mean_ms", mean}, {"p50_ms", p50}, {"p95_ms", p95},
            {"max_ms", max},  {"over_budget_rate", over_budget_rate}, {"budget_ms", budget_ms}};
  }
};

// Nearest-rank percentile of an ascending sequence.
inline double nearest_rank(const std::vector<double>& sorted, double pct) {
  const auto n = sorted.size();
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

inline LatencyStats latency_stats(const std::vector<LatencyRecord>& records, double budget_ms = kDefaultBudgetMs) {
  if (records.empty()) throw InputError("latency_stats: no records");
  std::vector<double> totals;
  for (const auto& r : records) totals.push_back(r.total);
  std::sort(totals.begin(), totals.end());
  LatencyStats s;
  s.count = totals.size();
  s.budget_ms = budget_ms;
  double sum = 0.0;
  std::size_t over = 0;
  for (double t : totals) {
    sum += t;
    over += t > budget_ms;
  }
  s.mean = sum / static_cast<double>(s.count);
  s.p50 = nearest_rank(totals, 50);
  s.p95 = nearest_rank(totals, 95);
  s.max = totals.back();
  s.over_budget_rate = static_cast<double>(over) / static_cast<double>(s.count);
  return s;
}

inline void write_latency_csv(const std::filesystem::path& path, const std::vector<ModeEvent>& events) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(9);
  out << "clip_id,mode,confidence,pre_ms,infer_ms,post_ms,total_ms,over_budget\n";
  for (const auto& e : events) {
    out << e.clip_id << ',' << e.mode << ',' << e.confidence << ',' << e.latency.pre << ',' << e.latency.infer << ','
        << e.latency.post << ',' << e.latency.total << ',' << (e.over_budget ? 1 : 0) << '\n';
  }
}

// ---------------------------------------------------------------- sinks

class EventSink {
 public:
  virtual ~EventSink() = default;
  virtual void publish(const std::string& line) = 0;
  // Called periodically by the publisher when idle.
  virtual void poll() {}
};

class StreamSink : public EventSink {
 public:
  explicit StreamSink(std::ostream& out) : out_(out) {}
  void publish(const std::string& line) override {
    out_ << line;
    out_.flush();
  }

 private:
  std::ostream& out_;
};

// Exponential reconnect delay.
class Backoff {
 public:
  Backoff(double base_s = 0.5, double factor = 2.0, double cap_s = 30.0) : base_(base_s), factor_(factor), cap_(cap_s), next_(base_s) {}
  // Delay to wait after a failure; grows for the next one.
  double fail() {
    const double d = next_;
    next_ = std::min(next_ * factor_, cap_);
    return d;
  }
  void reset() { next_ = base_; }

 private:
  double base_, factor_, cap_, next_;
};

// NDJSON over TCP. Lines are buffered (dropping the oldest beyond
// `buffer_limit`) until a connection is up; a failed connect or send schedules
// the next attempt with exponential backoff.
class TcpSink : public EventSink {
 public:
  TcpSink(std::string host, int port, std::size_t buffer_limit = 1000, Backoff backoff = {})
      : host_(std::move(host)), port_(port), limit_(buffer_limit), backoff_(backoff) {
    if (port <= 0 || port > 65535) throw ConfigError("tcp sink: bad port " + std::to_string(port));
    if (buffer_limit == 0) throw ConfigError("tcp sink: buffer limit must be >= 1");
  }
  ~TcpSink() override { disconnect(); }
  TcpSink(const TcpSink&) = delete;
  TcpSink& operator=(const TcpSink&) = delete;

  void publish(const std::string& line) override {
    if (buffer_.size() == limit_) {
      buffer_.pop_front();
      offset_ = 0;
      ++dropped_;
    }
    buffer_.push_back(line);
    flush();
  }

  void poll() override { flush(); }

  std::size_t buffered() const { return buffer_.size(); }
  std::size_t dropped() const { return dropped_; }
  bool connected() const { return fd_ >= 0; }
  std::size_t connect_attempts() const { return attempts_; }

 private:
  using clock = std::chrono::steady_clock;

  void flush() {
    if (buffer_.empty()) return;
    if (fd_ < 0 && !try_connect()) return;
    while (!buffer_.empty()) {
      const std::string& line = buffer_.front();
      const ssize_t n = ::send(fd_, line.data() + offset_, line.size() - offset_, MSG_NOSIGNAL | MSG_DONTWAIT);
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) return;
        fail();
        return;
      }
      offset_ += static_cast<std::size_t>(n);
      if (offset_ == line.size()) {
        buffer_.pop_front();
        offset_ = 0;
      }
    }
  }

  bool try_connect() {
    if (clock::now() < next_attempt_) return false;
    ++attempts_;
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host_.c_str(), std::to_string(port_).c_str(), &hints, &res) != 0) {
      fail();
      return false;
    }
    for (addrinfo* a = res; a && fd_ < 0; a = a->ai_next) {
      const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_NONBLOCK, a->ai_protocol);
      if (fd < 0) continue;
      int rc = ::connect(fd, a->ai_addr, a->ai_addrlen);
      if (rc < 0 && errno == EINPROGRESS) {
        pollfd p{fd, POLLOUT, 0};
        int err = 0;
        socklen_t len = sizeof err;
        rc = (::poll(&p, 1, 200) == 1 && ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) == 0 && err == 0) ? 0 : -1;
      }
      if (rc == 0) {
        fd_ = fd;
      } else {
        ::close(fd);
      }
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) {
      fail();
      return false;
    }
    backoff_.reset();
    offset_ = 0;  // a partially sent line is resent whole on the new connection
    return true;
  }

  void fail() {
    disconnect();
    next_attempt_ = clock::now() + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(backoff_.fail()));
  }

  void disconnect() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  std::string host_;
  int port_;
  std::size_t limit_;
  Backoff backoff_;
  std::deque<std::string> buffer_;
  std::size_t offset_ = 0;
  std::size_t dropped_ = 0, attempts_ = 0;
  int fd_ = -1;
  clock::time_point next_attempt_{};
};

// Parses "stdout" or "tcp:host:port".
inline std::unique_ptr<EventSink> make_sink(const std::string& spec) {
  if (spec == "stdout") return std::make_unique<StreamSink>(std::cout);
  if (spec.rfind("tcp:", 0) == 0) {
    const auto colon = spec.rfind(':');
    if (colon <= 4) throw ConfigError("sink '" + spec + "': expected tcp:host:port");
    try {
      return std::make_unique<TcpSink>(spec.substr(4, colon - 4), std::stoi(spec.substr(colon + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("sink '" + spec + "': bad port");
    }
  }
  throw ConfigError("unknown sink '" + spec + "' (use stdout or tcp:host:port)");
}

// Serializes events and hands each line to every sink on its own thread, so
// a slow sink never stalls inference. Pending lines are capped, oldest
// dropped first.
class Publisher {
 public:
  explicit Publisher(std::vector<EventSink*> sinks, std::size_t pending_limit = 1000)
      : sinks_(std::move(sinks)), limit_(pending_limit), thread_([this] { loop(); }) {}
  ~Publisher() { stop(); }
  Publisher(const Publisher&) = delete;
  Publisher& operator=(const Publisher&) = delete;

  void publish(const ModeEvent& e) {
    auto line = to_ndjson(e);
    {
      std::lock_guard lock(mu_);
      if (pending_.size() == limit_) {
        pending_.pop_front();
        ++dropped_;
      }
      pending_.push_back(std::move(line));
    }
    cv_.notify_one();
  }

  // Delivers everything still pending, then joins.
  void stop() {
    {
      std::lock_guard lock(mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    cv_.notify_one();
    if (thread_.joinable()) thread_.join();
  }

  std::size_t dropped() const {
    std::lock_guard lock(mu_);
    return dropped_;
  }

 private:
  void loop() {
    std::unique_lock lock(mu_);
    while (true) {
      cv_.wait_for(lock, std::chrono::milliseconds(100), [&] { return !pending_.empty() || stopping_; });
      std::deque<std::string> batch;
      batch.swap(pending_);
      const bool done = stopping_;
      lock.unlock();
      for (const auto& line : batch)
        for (auto* s : sinks_) s->publish(line);
      if (batch.empty())
        for (auto* s : sinks_) s->poll();
      lock.lock();
      if (done && pending_.empty()) return;
    }
  }

  std::vector<EventSink*> sinks_;
  const std::size_t limit_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> pending_;
  std::size_t dropped_ = 0;
  bool stopping_ = false;
  std::thread thread_;
};

// ---------------------------------------------------------------- monitor loop

struct MonitorOptions {
  double budget_ms = kDefaultBudgetMs;
  std::size_t capacity = 4;
  std::function<void(const ModeEvent&)> on_event;  // runs on the consumer thread after publishing
  LogHook warn;

  void validate() const {
    if (!(budget_ms > 0.0)) throw ConfigError("monitor: budget_ms must be > 0");
    if (capacity == 0) throw ConfigError("monitor: queue capacity must be >= 1");
  }
};

struct MonitorSummary {
  std::size_t produced = 0;
  std::size_t skipped = 0;
  std::size_t processed = 0;
  std::size_t drops = 0;
  std::size_t queue_high_water = 0;
  std::vector<LatencyRecord> latencies;
};

// Producer thread reads the source; the calling thread classifies; the
// publisher thread (if any) writes to sinks. Returns when the source ends and
// the queue is drained.
inline MonitorSummary run_monitor(const MonitorModel& model, ClipSource& source, Publisher* publisher, const MonitorOptions& opt) {
  opt.validate();
  DropOldestQueue<StreamedClip> queue(opt.capacity);
  ProducerStats produced;
  std::thread producer([&] { produced = stream_clips(source, queue, opt.warn); });
  MonitorSummary s;
  while (auto item = queue.pop()) {
    const auto e = infer_clip(model, item->clip, item->clip_id, opt.budget_ms, queue.drops());
    s.latencies.push_back(e.latency);
    ++s.processed;
    if (publisher) publisher->publish(e);
    if (opt.on_event) opt.on_event(e);
  }
  producer.join();
  s.produced = produced.produced;
  s.skipped = produced.skipped;
  s.drops = queue.drops();
  s.queue_high_water = queue.high_water();
  return s;
}

}  // namespace listenkit
