#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cityfabric/fl.hpp"
#include "cityfabric/forecast.hpp"
#include "cityfabric/forecast_service.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/graph_gru.hpp"
#include "cityfabric/scenario.hpp"

namespace cityfabric {

enum class RunMode { kFast, kRealtime };
std::string_view to_string(RunMode m);
RunMode parse_run_mode(std::string_view text);

struct RunOptions {
  RunMode mode = RunMode::kFast;
  std::filesystem::path out_dir = "out";
  std::optional<int64_t> duration_s;  // overrides intervals.duration_s
  bool forecast = true;
  bool fl = true;
  bool store_sync = true;
  std::function<void(const std::string&)> log;
};

struct RunReport {
  std::string scenario;
  RunMode mode = RunMode::kFast;
  double wall_seconds = 0.0;
  std::map<std::string, double> stage_seconds;
  size_t streams_started = 0;
  size_t streams_rejected = 0;
  uint64_t records = 0;
  uint64_t summaries = 0;
  uint64_t events = 0;
  uint64_t late_events = 0;
  uint64_t vehicles = 0;
  bool counts_conserved = false;  // store totals == arrival-process totals, per stream and class
  double peak_vehicles_per_s = 0.0;
  int64_t peak_second = 0;
  std::vector<double> rmse_graph_gru;  // per horizon minute
  std::vector<double> rmse_historical_average;
  std::vector<double> rmse_seasonal_naive;
  double fl_initial_accuracy = 0.0;
  double fl_final_accuracy = 0.0;
  std::vector<std::string> artifacts;
  std::string failed_module;
  nlohmann::json to_json() const;
};

// Runs the whole pipeline and writes the CSV/JSON artifacts into out_dir.
// Failures are rethrown as Error with the failing module named in the message
// (and recorded in run_report.json).
RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options);

struct ForecastTraining {
  MinuteSeries history;
  MinuteSeries test;
  std::shared_ptr<GraphGru> model;
  FitReport fit;
};

// One row per recorded metrics tick; the same values /v1/scheduler/metrics serves.
void write_ticks_csv(std::ostream& os, const std::vector<MetricsTick>& ticks);

// Generated history/test series (independent of the live run) and a trained GraphGRU-lite.
ForecastTraining train_forecaster(const ScenarioConfig& config, const CoarseGraph& graph);
std::vector<SeriesSource> series_sources(const ScenarioConfig& config);

// Per-minute super-edge flows for every minute of [0, minutes): [edge][minute].
std::vector<std::vector<double>> minute_edge_flows(const MinuteSeries& series, const CoarseGraph& graph,
                                                   const AllocationOptions& allocation);

// Model named by config.forecast.model; graph_gru is trained unless `checkpoint` exists.
std::shared_ptr<ForecastModel> make_forecaster(const ScenarioConfig& config, const CoarseGraph& graph,
                                               const std::filesystem::path& checkpoint = {});

// Forecast service over the gateway's store: each tick reads the last lag
// whole minutes per coarse vertex. The service is attached to the gateway.
std::shared_ptr<ForecastService> attach_live_forecasts(Gateway& gw, std::shared_ptr<const ForecastModel> model,
                                                       std::chrono::milliseconds period);

}  // namespace cityfabric
