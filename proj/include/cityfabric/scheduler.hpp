#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cityfabric/types.hpp"

namespace cityfabric {

struct DeviceProfile {
  std::string id;
  std::string model_name;
  uint32_t fps_capacity = 0;
  double tops = 0.0;
  double power_idle_w = 0.0;     // active with zero streams
  double power_per_fps_w = 0.0;  // slope per processed frame/s

  void validate() const;
  bool operator==(const DeviceProfile&) const = default;
};

enum class PlacementPolicy { kBestFit, kWorstFit };

std::string_view to_string(PlacementPolicy policy);
PlacementPolicy parse_policy(std::string_view text);

// Immutable device set, ordered by ascending device id so index order is the tie-break order.
class Fleet {
 public:
  explicit Fleet(std::vector<DeviceProfile> devices);

  size_t size() const noexcept { return devices_.size(); }
  const DeviceProfile& operator[](size_t i) const { return devices_[i]; }
  const std::vector<DeviceProfile>& devices() const noexcept { return devices_; }
  std::optional<size_t> find(std::string_view id) const;
  uint64_t total_capacity() const;

 private:
  std::vector<DeviceProfile> devices_;
};

// Chooses a device for a stream of `fps` frames/s, or nullopt when none fits.
// BestFit: minimal remaining capacity among feasible devices; WorstFit: maximal.
// Remaining capacity is evaluated before placement; ties go to the lower device id.
std::optional<size_t> choose_device(std::span<const uint32_t> remaining, uint32_t fps, PlacementPolicy policy);

// Stream -> device assignment over a fleet. A device is active iff it hosts >= 1 stream.
class Placement {
 public:
  explicit Placement(std::shared_ptr<const Fleet> fleet);

  const Fleet& fleet() const noexcept { return *fleet_; }
  std::shared_ptr<const Fleet> fleet_ptr() const noexcept { return fleet_; }

  // Throws CapacityExhausted (placement unchanged) or InvalidArgument if already placed.
  size_t assign(const StreamDescriptor& stream, PlacementPolicy policy);
  // Throws UnknownStream.
  void remove(const std::string& stream_id);

  std::optional<size_t> device_of(const std::string& stream_id) const;
  uint32_t used_fps(size_t device) const { return used_.at(device); }
  uint32_t remaining(size_t device) const { return (*fleet_)[device].fps_capacity - used_.at(device); }
  std::vector<uint32_t> remaining_all() const;
  bool active(size_t device) const { return streams_on_.at(device) > 0; }
  size_t active_count() const;
  size_t stream_count() const noexcept { return assignments_.size(); }

  struct Assignment {
    size_t device = 0;
    uint32_t fps = 0;
    bool operator==(const Assignment&) const = default;
  };
  const std::map<std::string, Assignment>& assignments() const noexcept { return assignments_; }

  // used_fps <= capacity and used_fps equals the sum of assigned stream fps, per device.
  bool consistent() const;

  bool operator==(const Placement& o) const {
    return assignments_ == o.assignments_ && used_ == o.used_ && streams_on_ == o.streams_on_;
  }

 private:
  std::shared_ptr<const Fleet> fleet_;
  std::map<std::string, Assignment> assignments_;
  std::vector<uint32_t> used_;
  std::vector<uint32_t> streams_on_;
};

Placement assign_stream(Placement p, const StreamDescriptor& s, PlacementPolicy policy);
Placement remove_stream(Placement p, const std::string& stream_id);

struct SchedulerMetrics {
  double active_capacity_tops = 0.0;
  double utilization_pct = 0.0;
  double total_power_w = 0.0;
  uint64_t cumulative_fps = 0;
  size_t active_devices = 0;
  double max_device_utilization_pct = 0.0;
};

SchedulerMetrics metrics(const Placement& p);

struct SweepRow {
  size_t step = 0;
  size_t n_streams = 0;
  PlacementPolicy policy = PlacementPolicy::kBestFit;
  SchedulerMetrics metrics;
  std::vector<bool> active;  // per device, fleet order
};

// Replays sequential arrivals of uniform `fps` streams; one row per requested count.
// Throws CapacityExhausted carrying the step index.
std::vector<SweepRow> sweep(std::shared_ptr<const Fleet> fleet, std::span<const size_t> stream_counts,
                            PlacementPolicy policy, uint32_t fps = 25);
// Same, over explicit stream descriptors (heterogeneous fps).
std::vector<SweepRow> sweep(std::shared_ptr<const Fleet> fleet, std::span<const StreamDescriptor> streams,
                            std::span<const size_t> stream_counts, PlacementPolicy policy);

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);

// Serializes placement mutations; readers take immutable snapshots.
class SchedulerActor {
 public:
  explicit SchedulerActor(std::shared_ptr<const Fleet> fleet);

  size_t assign(const StreamDescriptor& stream, PlacementPolicy policy);
  void remove(const std::string& stream_id);
  std::shared_ptr<const Placement> snapshot() const;

 private:
  mutable std::mutex mu_;
  std::shared_ptr<const Placement> current_;
};

}  // namespace cityfabric
