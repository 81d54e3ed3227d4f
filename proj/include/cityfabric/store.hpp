#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cityfabric/edge_worker.hpp"
#include "cityfabric/types.hpp"

namespace cityfabric {

// Dense [camera x second x class] count matrix with a per-(camera, second) missing mask.
struct FlowMatrix {
  std::vector<std::string> cameras;
  int64_t from_s = 0;
  int64_t to_s = 0;  // exclusive
  size_t num_classes = 0;
  std::vector<uint32_t> counts;
  std::vector<uint8_t> missing;

  size_t seconds() const noexcept { return static_cast<size_t>(to_s - from_s); }
  uint32_t at(size_t cam, size_t sec, size_t cls) const {
    return counts[(cam * seconds() + sec) * num_classes + cls];
  }
  uint32_t& at(size_t cam, size_t sec, size_t cls) { return counts[(cam * seconds() + sec) * num_classes + cls]; }
  bool is_missing(size_t cam, size_t sec) const { return missing[cam * seconds() + sec] != 0; }
  uint64_t total(size_t cam, size_t sec) const;
};

// ---- nowcast fan-out ----

struct NowcastFrame {
  uint64_t seq = 0;
  int64_t ts_s = 0;
  std::map<std::string, Counts> per_camera;
};

class NowcastSubscription {
 public:
  NowcastSubscription(std::vector<std::string> cameras, size_t buffer_bound);

  // Throws Error(kSubscriberOverflow) once the subscriber has been disconnected.
  std::optional<NowcastFrame> pop(std::chrono::milliseconds timeout);
  bool overflowed() const noexcept { return overflowed_.load(); }
  bool wants(const std::string& camera) const;
  size_t pending() const;

 private:
  friend class NowcastHub;
  // Returns false (and marks overflow) when the buffer bound is exceeded.
  bool offer(const NowcastFrame& frame);

  std::vector<std::string> cameras_;  // empty: all cameras
  size_t bound_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<NowcastFrame> queue_;
  std::atomic<bool> overflowed_{false};
};

// Broadcasts newly ingested seconds; never blocks the publisher.
class NowcastHub {
 public:
  std::shared_ptr<NowcastSubscription> subscribe(std::vector<std::string> cameras, size_t buffer_bound = 1024);
  void publish(const std::vector<FlowRecord>& changed_rows);
  size_t subscriber_count() const;
  uint64_t frames_published() const noexcept { return seq_.load(); }

 private:
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<NowcastSubscription>> subs_;
  std::atomic<uint64_t> seq_{0};
};

// ---- store ----

struct StoreOptions {
  std::filesystem::path dir;
  std::vector<std::string> cameras;
  size_t num_classes = 8;
  int64_t tail_horizon_s = 1800;
  bool sync = true;  // fdatasync before ack
  size_t compact_after_records = 0;  // 0: compact only on request
  int64_t max_age_s = 0;              // 0: keep forever; else compaction purges older seconds
};

struct IngestAck {
  size_t records_written = 0;  // rows accepted (identical re-deliveries included)
  size_t records_changed = 0;  // rows whose stored value changed
};

struct StoreStats {
  uint64_t records = 0;
  uint64_t disk_reads = 0;
  uint64_t ingests = 0;
  uint64_t compactions = 0;
};

// Append-log time-series store for flow records, one partition per camera.
// Layout and byte formats are described in schema/store.md.
class TimeSeriesStore {
 public:
  explicit TimeSeriesStore(StoreOptions options);
  ~TimeSeriesStore();
  TimeSeriesStore(const TimeSeriesStore&) = delete;
  TimeSeriesStore& operator=(const TimeSeriesStore&) = delete;

  // Throws UnknownCamera or MalformedSummary. Durable before returning.
  IngestAck ingest(const FlowSummary& summary);
  // Throws UnknownCamera or InvalidArgument when from_s >= to_s.
  FlowMatrix query(std::span<const std::string> cameras, int64_t from_s, int64_t to_s) const;
  std::optional<Counts> get(const std::string& camera, int64_t ts_s) const;

  void compact();
  NowcastHub& nowcast() noexcept { return hub_; }

  const std::vector<std::string>& cameras() const noexcept { return options_.cameras; }
  size_t num_classes() const noexcept { return options_.num_classes; }
  uint64_t record_count() const;
  std::optional<int64_t> latest_second() const;
  StoreStats stats() const;
  const std::filesystem::path& dir() const noexcept { return options_.dir; }

 private:
  struct Partition;

  Partition& partition(const std::string& camera) const;
  void load_partition(Partition& p);
  void compact_partition(Partition& p);
  void read_disk(const Partition& p, int64_t from_s, int64_t to_s, std::map<int64_t, Counts>& out) const;

  StoreOptions options_;
  std::vector<std::unique_ptr<Partition>> partitions_;
  std::unordered_map<std::string, size_t> index_;
  NowcastHub hub_;
  mutable std::atomic<uint64_t> disk_reads_{0};
  std::atomic<uint64_t> ingests_{0};
  std::atomic<uint64_t> compactions_{0};
};

// Summary sink that writes straight into a store in the same process.
class StoreSink : public SummarySink {
 public:
  explicit StoreSink(TimeSeriesStore& store) : store_(store) {}
  Ack send(const FlowSummary& summary) override {
    return Ack{store_.ingest(summary).records_written};
  }

 private:
  TimeSeriesStore& store_;
};

}  // namespace cityfabric
