#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cityfabric/types.hpp"

namespace cityfabric {

// Per-second unique-vehicle rows for one camera covering [window_start_s, window_start_s + window_len_s).
struct FlowSummary {
  std::string camera_id;
  int64_t window_start_s = 0;
  int window_len_s = 15;
  std::vector<FlowRecord> rows;

  bool operator==(const FlowSummary&) const = default;
};

nlohmann::json summary_to_json(const FlowSummary& s);
FlowSummary summary_from_json(const nlohmann::json& j);
std::string encode_summary(const FlowSummary& s);
FlowSummary decode_summary(const std::string& text);

struct AggregatorOptions {
  int window_len_s = 15;
  int64_t lateness_ms = 2000;
  // Tracking ids unseen for this long are forgotten.
  int64_t id_retention_ms = 120'000;
};

struct AggregatorStats {
  uint64_t events = 0;
  uint64_t late_events = 0;
  uint64_t vehicles = 0;
  uint64_t windows_emitted = 0;
};

// Counts each tracking id once, in the second it was first observed, and
// emits tumbling windows once the watermark (max ts - lateness) passes their end.
// Windows are aligned to the scenario epoch; events for an already-emitted
// window are dropped and counted as late.
class WindowAggregator {
 public:
  WindowAggregator(std::string camera_id, size_t num_classes, AggregatorOptions options = {});

  void push(const DetectionEvent& e, std::vector<FlowSummary>& closed);
  // Emits every window up to and including the one containing `until_s - 1`
  // (or every open window when until_s < 0).
  void finish(std::vector<FlowSummary>& closed, int64_t until_s = -1);

  const AggregatorStats& stats() const noexcept { return stats_; }
  int64_t next_window_start_s() const noexcept { return next_window_start_s_; }
  int64_t watermark_ms() const noexcept { return max_ts_ms_ - options_.lateness_ms; }

 private:
  void emit_until(int64_t end_s_exclusive, std::vector<FlowSummary>& closed);
  void evict_ids();

  std::string camera_id_;
  size_t num_classes_;
  AggregatorOptions options_;
  AggregatorStats stats_;
  int64_t max_ts_ms_ = 0;
  int64_t next_window_start_s_ = 0;
  std::map<int64_t, std::vector<Counts>> open_;  // window start -> per-second counts
  std::unordered_map<uint64_t, int64_t> last_seen_ms_;
  int64_t last_eviction_ms_ = 0;
};

std::vector<FlowSummary> aggregate(std::span<const DetectionEvent> events, const std::string& camera_id,
                                   size_t num_classes, int window_len_s, int lateness_s = 2,
                                   int64_t until_s = -1);

// ---- emission ----

struct Ack {
  size_t records_written = 0;
};

class SummarySink {
 public:
  virtual ~SummarySink() = default;
  // Throws Error(kIngestUnreachable) (or any std::exception) on transport failure.
  virtual Ack send(const FlowSummary& summary) = 0;
};

struct EmitterOptions {
  int max_retries = 5;
  std::chrono::milliseconds base_backoff{50};
  std::chrono::milliseconds max_backoff{2000};
  std::filesystem::path spill_path;  // empty: keep spilled summaries in memory only
};

enum class EmitOutcome { kDelivered, kSpilled };

// At-least-once delivery with capped exponential backoff. After max retries
// the summary goes to a local spill queue that is replayed, in order, before
// the next delivery.
class Emitter {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  Emitter(SummarySink& sink, EmitterOptions options = {}, Sleeper sleeper = {});

  EmitOutcome emit(const FlowSummary& summary);
  // Attempts delivery of every spilled summary; returns how many were delivered.
  size_t replay_spill();
  size_t spilled() const;
  uint64_t attempts() const noexcept { return attempts_; }
  const std::vector<std::chrono::milliseconds>& backoff_log() const noexcept { return backoff_log_; }

 private:
  bool try_deliver(const FlowSummary& summary, int max_retries);
  void persist_spill() const;

  SummarySink& sink_;
  EmitterOptions options_;
  Sleeper sleeper_;
  std::deque<FlowSummary> spill_;
  uint64_t attempts_ = 0;
  std::vector<std::chrono::milliseconds> backoff_log_;
};

// Background emitter: aggregation enqueues, one thread delivers in enqueue order.
class AsyncEmitter {
 public:
  explicit AsyncEmitter(Emitter& emitter);
  ~AsyncEmitter();
  AsyncEmitter(const AsyncEmitter&) = delete;
  AsyncEmitter& operator=(const AsyncEmitter&) = delete;

  void enqueue(FlowSummary summary);
  // Blocks until everything enqueued so far has been delivered or spilled.
  void flush();
  uint64_t delivered() const noexcept { return delivered_.load(); }

 private:
  void run();

  Emitter& emitter_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<FlowSummary> queue_;
  bool busy_ = false;
  bool stop_ = false;
  std::atomic<uint64_t> delivered_{0};
  std::thread worker_;
};

}  // namespace cityfabric
