#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cityfabric/emulator.hpp"
#include "cityfabric/graph.hpp"
#include "cityfabric/scheduler.hpp"
#include "cityfabric/types.hpp"

namespace cityfabric {

struct StreamConfig {
  StreamDescriptor desc;
  TrafficProcess process;
  bool operator==(const StreamConfig&) const = default;
};

struct Intervals {
  int64_t duration_s = 900;
  int window_len_s = 15;
  int lateness_s = 2;
  int64_t tail_horizon_s = 1800;
  int forecast_period_s = 5;
  bool operator==(const Intervals&) const = default;
};

struct ForecastConfig {
  std::string model = "graph_gru";  // graph_gru | historical_average | seasonal_naive
  int lag_minutes = 5;
  int horizon_minutes = 5;
  int step_minutes = 1;
  int hidden = 32;
  int epochs = 12;
  double lr = 0.005;
  double lr_decay = 0.9;
  int batch_size = 16;
  int seasonal_period = 5;
  int history_minutes = 720;  // generated training history
  int test_minutes = 240;     // generated held-out evaluation span
  uint64_t seed = 7;
  bool operator==(const ForecastConfig&) const = default;
};

struct ConfidenceModel {
  // Beta(alpha, beta) draws unless `fixed` is in (0, 1).
  double alpha = 4.0;
  double beta = 2.0;
  double fixed = 0.0;
  bool operator==(const ConfidenceModel&) const = default;
};

struct FlClientConfig {
  std::string id;
  std::string tier;  // e.g. "JO32"
  uint32_t streams = 1;
  std::vector<double> class_mix;  // empty: scenario default mix
  double rate_per_min = 120.0;
  double noise_rate = 0.05;
  ConfidenceModel confidence;
  double latency_mean_s = 5.0;
  double latency_shape = 4.0;
  bool operator==(const FlClientConfig&) const = default;
};

struct FlConfig {
  int rounds = 5;
  double tau = 0.30;
  int epochs = 3;
  double lr = 0.01;
  int batch_size = 32;
  int window_s = 20;
  int duration_min = 150;
  int target_frames = 0;  // 0: one frame per window_s; else spread windows to hit this many
  int holdout_per_class = 200;
  uint64_t seed = 11;
  bool concurrent = false;
  std::vector<FlClientConfig> clients;
  bool operator==(const FlConfig&) const = default;
};

struct ScenarioConfig {
  std::string name;
  uint64_t seed = 1;
  ClassList classes;
  std::vector<StreamConfig> streams;
  std::vector<DeviceProfile> devices;
  RoadGraph road_graph;
  Intervals intervals;
  CongestionThresholds congestion_thresholds;
  AllocationOptions allocation;
  PlacementPolicy policy = PlacementPolicy::kBestFit;
  ForecastConfig forecast;
  FlConfig fl;

  std::shared_ptr<const Fleet> fleet() const { return std::make_shared<Fleet>(devices); }
  std::vector<std::string> camera_ids() const;
  std::vector<StreamDescriptor> descriptors() const;
  const StreamConfig& stream(const std::string& id) const;

  bool operator==(const ScenarioConfig& o) const;
};

// Parses and validates; errors carry the line (parse) or JSON field path.
// Relative `power_table` references resolve against `base_dir`.
ScenarioConfig parse_scenario(const std::string& text, const std::filesystem::path& base_dir = {});
ScenarioConfig scenario_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ScenarioConfig load_scenario(const std::filesystem::path& path);
// Fully resolved form: every stream carries its whole process and devices carry power fields.
nlohmann::json scenario_to_json(const ScenarioConfig& cfg);
std::string serialize_scenario(const ScenarioConfig& cfg);
void validate(const ScenarioConfig& cfg);

// A bare name ("neighborhood100") is looked up under $CITYFABRIC_SCENARIOS and ./scenarios.
std::filesystem::path resolve_scenario_path(const std::string& name_or_path);

// Device list from a fleet file {"power_table": ..., "devices": [...]} or a scenario file.
std::vector<DeviceProfile> load_fleet(const std::filesystem::path& path);
std::vector<DeviceProfile> devices_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

FlConfig fl_config_from_json(const nlohmann::json& j, size_t num_classes);
nlohmann::json fl_config_to_json(const FlConfig& fl);
TrafficProcess traffic_process_from_json(const nlohmann::json& j, size_t num_classes);
nlohmann::json traffic_process_to_json(const TrafficProcess& p);

}  // namespace cityfabric
