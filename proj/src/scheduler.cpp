#include "cityfabric/scheduler.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>

#include "cityfabric/errors.hpp"

namespace cityfabric {

void DeviceProfile::validate() const {
  if (id.empty()) throw Error(ErrorCode::kInvalidArgument, "device id must not be empty");
  if (fps_capacity == 0) throw Error(ErrorCode::kInvalidArgument, "device '" + id + "': fps_capacity must be > 0");
  if (tops <= 0.0) throw Error(ErrorCode::kInvalidArgument, "device '" + id + "': tops must be > 0");
  if (power_idle_w < 0.0 || power_per_fps_w < 0.0)
    throw Error(ErrorCode::kInvalidArgument, "device '" + id + "': power values must be >= 0");
}

std::string_view to_string(PlacementPolicy policy) {
  return policy == PlacementPolicy::kBestFit ? "bestfit" : "worstfit";
}

PlacementPolicy parse_policy(std::string_view text) {
  if (text == "bestfit" || text == "best_fit" || text == "BestFit") return PlacementPolicy::kBestFit;
  if (text == "worstfit" || text == "worst_fit" || text == "WorstFit") return PlacementPolicy::kWorstFit;
  throw Error(ErrorCode::kInvalidArgument, "unknown policy '" + std::string(text) + "'");
}

Fleet::Fleet(std::vector<DeviceProfile> devices) : devices_(std::move(devices)) {
  for (const auto& d : devices_) d.validate();
  std::sort(devices_.begin(), devices_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (size_t i = 1; i < devices_.size(); ++i) {
    if (devices_[i].id == devices_[i - 1].id)
      throw Error(ErrorCode::kDuplicateId, "device '" + devices_[i].id + "' listed twice");
  }
}

std::optional<size_t> Fleet::find(std::string_view id) const {
  auto it = std::lower_bound(devices_.begin(), devices_.end(), id,
                             [](const DeviceProfile& d, std::string_view key) { return d.id < key; });
  if (it == devices_.end() || it->id != id) return std::nullopt;
  return static_cast<size_t>(it - devices_.begin());
}

uint64_t Fleet::total_capacity() const {
  uint64_t total = 0;
  for (const auto& d : devices_) total += d.fps_capacity;
  return total;
}

std::optional<size_t> choose_device(std::span<const uint32_t> remaining, uint32_t fps, PlacementPolicy policy) {
  std::optional<size_t> best;
  for (size_t i = 0; i < remaining.size(); ++i) {
    if (remaining[i] < fps) continue;
    if (!best) {
      best = i;
      continue;
    }
    // Strict comparison keeps the lowest index on ties.
    if (policy == PlacementPolicy::kBestFit ? remaining[i] < remaining[*best] : remaining[i] > remaining[*best])
      best = i;
  }
  return best;
}

Placement::Placement(std::shared_ptr<const Fleet> fleet)
    : fleet_(std::move(fleet)), used_(fleet_->size(), 0), streams_on_(fleet_->size(), 0) {}

std::vector<uint32_t> Placement::remaining_all() const {
  std::vector<uint32_t> out(used_.size());
  for (size_t i = 0; i < used_.size(); ++i) out[i] = remaining(i);
  return out;
}

size_t Placement::assign(const StreamDescriptor& stream, PlacementPolicy policy) {
  if (assignments_.contains(stream.id))
    throw Error(ErrorCode::kInvalidArgument, "stream '" + stream.id + "' is already placed");
  if (stream.fps == 0) throw Error(ErrorCode::kInvalidArgument, "stream '" + stream.id + "' has fps 0");
  const auto rem = remaining_all();
  const auto device = choose_device(rem, stream.fps, policy);
  if (!device) throw CapacityExhausted(stream.id, stream.fps);
  assignments_.emplace(stream.id, Assignment{*device, stream.fps});
  used_[*device] += stream.fps;
  ++streams_on_[*device];
  return *device;
}

void Placement::remove(const std::string& stream_id) {
  auto it = assignments_.find(stream_id);
  if (it == assignments_.end()) throw Error(ErrorCode::kUnknownStream, "stream '" + stream_id + "' is not placed");
  used_[it->second.device] -= it->second.fps;
  --streams_on_[it->second.device];
  assignments_.erase(it);
}

std::optional<size_t> Placement::device_of(const std::string& stream_id) const {
  auto it = assignments_.find(stream_id);
  if (it == assignments_.end()) return std::nullopt;
  return it->second.device;
}

size_t Placement::active_count() const {
  return static_cast<size_t>(std::count_if(streams_on_.begin(), streams_on_.end(), [](uint32_t n) { return n > 0; }));
}

bool Placement::consistent() const {
  std::vector<uint64_t> sum(used_.size(), 0);
  std::vector<uint32_t> count(used_.size(), 0);
  for (const auto& [id, a] : assignments_) {
    sum[a.device] += a.fps;
    ++count[a.device];
  }
  for (size_t i = 0; i < used_.size(); ++i) {
    if (used_[i] > (*fleet_)[i].fps_capacity || sum[i] != used_[i] || count[i] != streams_on_[i]) return false;
  }
  return true;
}

Placement assign_stream(Placement p, const StreamDescriptor& s, PlacementPolicy policy) {
  p.assign(s, policy);
  return p;
}

Placement remove_stream(Placement p, const std::string& stream_id) {
  p.remove(stream_id);
  return p;
}

SchedulerMetrics metrics(const Placement& p) {
  SchedulerMetrics m;
  uint64_t active_capacity = 0;
  for (size_t i = 0; i < p.fleet().size(); ++i) {
    if (!p.active(i)) continue;
    const auto& d = p.fleet()[i];
    const uint32_t used = p.used_fps(i);
    m.active_capacity_tops += d.tops;
    m.total_power_w += d.power_idle_w + d.power_per_fps_w * used;
    m.cumulative_fps += used;
    active_capacity += d.fps_capacity;
    ++m.active_devices;
    m.max_device_utilization_pct =
        std::max(m.max_device_utilization_pct, 100.0 * used / static_cast<double>(d.fps_capacity));
  }
  if (active_capacity > 0) m.utilization_pct = 100.0 * static_cast<double>(m.cumulative_fps) / active_capacity;
  return m;
}

namespace {

SweepRow make_row(size_t step, const Placement& p, PlacementPolicy policy) {
  SweepRow row;
  row.step = step;
  row.n_streams = p.stream_count();
  row.policy = policy;
  row.metrics = metrics(p);
  row.active.resize(p.fleet().size());
  for (size_t i = 0; i < p.fleet().size(); ++i) row.active[i] = p.active(i);
  return row;
}

}  // namespace

std::vector<SweepRow> sweep(std::shared_ptr<const Fleet> fleet, std::span<const StreamDescriptor> streams,
                            std::span<const size_t> stream_counts, PlacementPolicy policy) {
  if (!std::is_sorted(stream_counts.begin(), stream_counts.end()))
    throw Error(ErrorCode::kInvalidArgument, "stream_counts must be ascending");
  if (!stream_counts.empty() && stream_counts.back() > streams.size())
    throw Error(ErrorCode::kInvalidArgument, "sweep needs more streams than were supplied");
  Placement p(std::move(fleet));
  std::vector<SweepRow> rows;
  size_t placed = 0;
  for (size_t step = 0; step < stream_counts.size(); ++step) {
    for (; placed < stream_counts[step]; ++placed) {
      try {
        p.assign(streams[placed], policy);
      } catch (const CapacityExhausted& e) {
        throw CapacityExhausted(e.stream_id(), streams[placed].fps, static_cast<long>(step));
      }
    }
    rows.push_back(make_row(step, p, policy));
  }
  return rows;
}

std::vector<SweepRow> sweep(std::shared_ptr<const Fleet> fleet, std::span<const size_t> stream_counts,
                            PlacementPolicy policy, uint32_t fps) {
  const size_t n = stream_counts.empty() ? 0 : stream_counts.back();
  std::vector<StreamDescriptor> streams(n);
  for (size_t i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "S%04zu", i + 1);
    streams[i].id = name;
    streams[i].index = static_cast<uint32_t>(i);
    streams[i].fps = fps;
  }
  return sweep(std::move(fleet), streams, stream_counts, policy);
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "step,n_streams,policy,cumulative_fps,active_capacity_tops,utilization_pct,total_power_w\n";
  const auto flags = os.flags();
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << r.step << ',' << r.n_streams << ',' << to_string(r.policy) << ',' << r.metrics.cumulative_fps << ','
       << r.metrics.active_capacity_tops << ',' << r.metrics.utilization_pct << ',' << r.metrics.total_power_w
       << '\n';
  }
  os.flags(flags);
}

SchedulerActor::SchedulerActor(std::shared_ptr<const Fleet> fleet)
    : current_(std::make_shared<const Placement>(std::move(fleet))) {}

size_t SchedulerActor::assign(const StreamDescriptor& stream, PlacementPolicy policy) {
  std::lock_guard lock(mu_);
  Placement next = *current_;
  const size_t device = next.assign(stream, policy);
  current_ = std::make_shared<const Placement>(std::move(next));
  return device;
}

void SchedulerActor::remove(const std::string& stream_id) {
  std::lock_guard lock(mu_);
  Placement next = *current_;
  next.remove(stream_id);
  current_ = std::make_shared<const Placement>(std::move(next));
}

std::shared_ptr<const Placement> SchedulerActor::snapshot() const {
  std::lock_guard lock(mu_);
  return current_;
}

}  // namespace cityfabric
