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
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cityfabric/forecast_service.hpp"
#include "cityfabric/graph.hpp"
#include "cityfabric/scenario.hpp"
#include "cityfabric/scheduler.hpp"
#include "cityfabric/store.hpp"

namespace cityfabric {

enum class RunStatus { kIdle, kRunning, kDraining };
std::string_view to_string(RunStatus s);

struct GatewayEvent {
  uint64_t seq = 0;
  std::string type;
  nlohmann::json payload;
  nlohmann::json to_json() const;
};

class EventSubscription {
 public:
  explicit EventSubscription(size_t bound) : bound_(bound) {}
  // Throws Error(kSubscriberOverflow) once disconnected.
  std::optional<GatewayEvent> pop(std::chrono::milliseconds timeout);
  bool overflowed() const noexcept { return overflowed_.load(); }

 private:
  friend class EventBus;
  void offer(const GatewayEvent& e);

  size_t bound_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<GatewayEvent> queue_;
  std::atomic<bool> overflowed_{false};
};

// Sequence-numbered broadcast of placement and health changes.
class EventBus {
 public:
  uint64_t publish(std::string type, nlohmann::json payload);
  std::shared_ptr<EventSubscription> subscribe(size_t bound = 256);
  std::vector<GatewayEvent> since(uint64_t seq) const;  // from the retained ring
  uint64_t last_seq() const;

 private:
  mutable std::mutex mu_;
  uint64_t seq_ = 0;
  std::deque<GatewayEvent> ring_;
  std::vector<std::shared_ptr<EventSubscription>> subs_;
};

struct MetricsTick {
  uint64_t tick = 0;
  int64_t scenario_s = 0;
  size_t streams = 0;
  SchedulerMetrics scheduler;
  uint64_t ingested_records = 0;
};

nlohmann::json metrics_to_json(const SchedulerMetrics& m);
nlohmann::json tick_to_json(const MetricsTick& t);

struct GatewayOptions {
  std::filesystem::path store_dir;
  bool fast_forward = false;  // data plane replays as fast as the consumer allows
  bool admission_queue = false;
  bool store_sync = true;
  size_t metrics_ring = 3600;
  std::chrono::milliseconds tick_period{1000};
  bool tick_thread = true;  // record a metrics tick every period while running
};

struct StreamOutcome {
  std::string stream_id;
  std::optional<std::string> device_id;
  std::string status;  // started | rejected | queued | stopped | error
  std::string error;
};

struct PlacementDelta {
  std::vector<StreamOutcome> outcomes;
  size_t accepted() const;
  size_t rejected() const;
  nlohmann::json to_json() const;
};

struct HistoryResult {
  std::string target;
  bool segment = false;
  int64_t from_minute = 0;
  std::vector<double> series;              // per minute
  std::vector<CongestionState> band;       // per minute, segments only
  std::vector<uint8_t> missing;
  nlohmann::json to_json() const;
};

// Control plane over one scenario: lifecycle, stream start/stop through the
// scheduler, per-stream emulator -> edge worker -> store pipelines, and the
// read models served by the HTTP layer.
class Gateway {
 public:
  Gateway(ScenarioConfig config, GatewayOptions options);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Idle -> Running.
  void begin();
  // Running -> Draining -> Idle: stops every stream and flushes final windows.
  void drain();
  RunStatus status() const;

  PlacementDelta start_streams(const std::vector<std::string>& ids, std::optional<PlacementPolicy> policy = {});
  PlacementDelta stop_streams(const std::vector<std::string>& ids);
  // Blocks until every running pipeline has consumed its trace (fast-forward runs).
  void wait_streams_idle();
  void set_policy(PlacementPolicy p);
  PlacementPolicy policy() const;

  std::shared_ptr<const Placement> placement() const { return scheduler_.snapshot(); }
  SchedulerMetrics current_metrics() const { return metrics(*scheduler_.snapshot()); }
  MetricsTick record_tick();
  std::vector<MetricsTick> ticks() const;
  std::vector<std::string> running_streams() const;
  std::vector<std::string> queued_streams() const;
  nlohmann::json streams_json() const;

  HistoryResult history(const std::string& segment_or_camera, int64_t from_s, int64_t to_s) const;

  TimeSeriesStore& store() noexcept { return *store_; }
  const TimeSeriesStore& store() const noexcept { return *store_; }
  EventBus& events() noexcept { return events_; }
  const ScenarioConfig& config() const noexcept { return config_; }
  const CoarseGraph& coarse_graph() const noexcept { return graph_; }
  const std::vector<std::string>& camera_junctions() const noexcept { return camera_junction_; }
  int64_t scenario_now_s() const;

  void attach_forecasts(std::shared_ptr<ForecastService> service);
  std::shared_ptr<ForecastService> forecasts() const;
  void set_fl_log(std::vector<nlohmann::json> records);
  std::vector<nlohmann::json> fl_log() const;
  nlohmann::json graph_json() const;

  struct PipelineStats {
    uint64_t events = 0;
    uint64_t late_events = 0;
    uint64_t summaries = 0;
    uint64_t vehicles = 0;
    bool finished = false;
  };
  std::map<std::string, PipelineStats> pipeline_stats() const;

 private:
  struct Pipeline;
  void launch(const StreamConfig& s);
  void halt(const std::string& id);
  void tick_loop();
  void admit_queued();

  ScenarioConfig config_;
  GatewayOptions options_;
  CoarseGraph graph_;
  std::vector<std::string> camera_junction_;
  SchedulerActor scheduler_;
  std::unique_ptr<TimeSeriesStore> store_;
  EventBus events_;

  mutable std::mutex mu_;  // lifecycle; held across start/stop
  RunStatus status_ = RunStatus::kIdle;
  PlacementPolicy policy_;
  std::map<std::string, std::unique_ptr<Pipeline>> pipelines_;
  std::deque<std::string> admission_;
  std::chrono::steady_clock::time_point epoch_;

  mutable std::mutex metrics_mu_;
  std::deque<MetricsTick> ticks_;
  uint64_t tick_seq_ = 0;

  mutable std::mutex aux_mu_;
  std::shared_ptr<ForecastService> forecasts_;
  std::vector<nlohmann::json> fl_log_;

  std::atomic<bool> ticking_{false};
  std::thread tick_thread_;
  std::mutex tick_mu_;
  std::condition_variable tick_cv_;
};

}  // namespace cityfabric
