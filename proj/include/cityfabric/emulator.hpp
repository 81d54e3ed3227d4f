#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <vector>

#include "cityfabric/rng.hpp"
#include "cityfabric/types.hpp"

namespace cityfabric {

struct RateSegment {
  double from_s = 0.0;
  double rate_per_min = 0.0;
  bool operator==(const RateSegment&) const = default;
};

// Multiplicative log-normal rate modulation, constant over `segment_s` and
// AR(1) across segments. A `shared_weight` fraction of the variance comes from
// a process keyed by `shared_seed`, so streams sharing that seed co-vary.
struct RateModulation {
  double sigma = 0.0;
  double rho = 0.0;
  double segment_s = 60.0;
  double shared_weight = 0.0;
  uint64_t shared_seed = 0;
  bool operator==(const RateModulation&) const = default;
};

// Arrival-rate model for one stream: piecewise-constant base rate (vehicles/min),
// an optional sinusoidal cycle, and optional segment modulation.
struct TrafficProcess {
  double rate_per_min = 0.0;
  std::vector<RateSegment> segments;  // ascending from_s; overrides rate_per_min from that time on
  double diurnal_amplitude = 0.0;     // in [0, 1]
  double diurnal_period_s = 86400.0;
  double diurnal_phase_s = 0.0;
  RateModulation modulation;
  std::vector<double> class_mix;
  double dwell_frames = 25.0;
  double dwell_jitter = 0.5;  // dwell uniform in mean*(1 -+ jitter)

  // Vehicles/min at time t, before modulation.
  double base_rate(double t_s) const;
  void validate(size_t num_classes) const;
  bool operator==(const TrafficProcess&) const = default;
};

// Default class mix for the 8-class list, led by two-wheelers, sedans and three-wheelers.
std::vector<double> default_class_mix(size_t num_classes);

struct GroundTruthLabel {
  uint32_t stream = 0;
  int64_t frame = 0;
  int64_t ts_ms = 0;
  uint64_t tracking_id = 0;
  uint16_t true_class = 0;
  BBox bbox;
  bool operator==(const GroundTruthLabel&) const = default;
};

// One synthetic vehicle: visible in `dwell_frames` consecutive frames with linear drift.
struct Vehicle {
  uint64_t tracking_id = 0;
  uint16_t class_idx = 0;
  int64_t first_frame = 0;
  uint32_t dwell_frames = 1;
  BBox start;
  float vx = 0.f;  // per frame
  float vy = 0.f;
  uint64_t noise_key = 0;

  int64_t last_frame() const noexcept { return first_frame + dwell_frames - 1; }
  BBox bbox_at(int64_t frame) const;
};

inline int64_t frame_ts_ms(int64_t frame, uint32_t fps) { return frame * 1000 / static_cast<int64_t>(fps); }

// Sequential per-second arrivals for one stream. Arrival counts are Poisson
// with the rate evaluated at the second's midpoint; each vehicle's attributes
// come from its own seed, so counting and full expansion agree exactly.
class ArrivalProcess {
 public:
  ArrivalProcess(const StreamDescriptor& desc, const TrafficProcess& proc);

  void next_second(std::vector<Vehicle>& out);
  void next_second_counts(Counts& counts);
  int64_t second() const noexcept { return second_; }
  // Expected arrivals during second `s` (includes modulation).
  double expected_arrivals(int64_t s);
  uint32_t max_dwell() const noexcept { return max_dwell_; }

 private:
  size_t draw_count();
  Vehicle make_vehicle(uint64_t seq, int64_t second);
  uint16_t draw_class(SplitMix64& rng) const;
  double modulation_factor(int64_t s);

  StreamDescriptor desc_;
  TrafficProcess proc_;
  std::vector<double> cumulative_mix_;
  Rng count_rng_;
  int64_t second_ = 0;
  uint64_t next_seq_ = 1;
  uint32_t max_dwell_ = 1;
  std::vector<double> own_mod_;
  std::vector<double> shared_mod_;
};

// Frame-by-frame detection events for one stream, one second at a time.
class StreamGenerator {
 public:
  StreamGenerator(const StreamDescriptor& desc, const TrafficProcess& proc);

  // Appends events for every frame of the next second, ordered by ts then tracking id.
  void next_second(std::vector<DetectionEvent>& out, std::vector<GroundTruthLabel>* truth = nullptr);
  // Advances without emitting; vehicles arriving in skipped seconds are never shown.
  void skip_seconds(int64_t n);
  int64_t second() const noexcept { return arrivals_.second(); }
  uint32_t fps() const noexcept { return desc_.fps; }

 private:
  StreamDescriptor desc_;
  ArrivalProcess arrivals_;
  std::vector<Vehicle> active_;
  std::vector<Vehicle> incoming_;
};

// Expands vehicles into per-frame events for frames in [0, frame_limit).
std::vector<DetectionEvent> expand_vehicles(std::vector<Vehicle> vehicles, uint32_t stream, uint32_t fps,
                                            int64_t frame_limit);

std::vector<DetectionEvent> generate_stream(const StreamDescriptor& desc, const TrafficProcess& proc,
                                            double duration_s);

struct Trace {
  std::vector<DetectionEvent> events;
  std::vector<GroundTruthLabel> truth;  // truth[i] belongs to events[i]
};
Trace generate_trace(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s);

// Per-second, per-class first-seen counts without expanding frames.
std::vector<Counts> arrival_counts(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s,
                                   size_t num_classes);

// Random access to the objects visible in any frame of a stream.
class TraceIndex {
 public:
  TraceIndex(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s);

  std::vector<GroundTruthLabel> objects_at(int64_t frame) const;
  int64_t frame_count() const noexcept { return frame_count_; }
  uint32_t fps() const noexcept { return desc_.fps; }
  const StreamDescriptor& descriptor() const noexcept { return desc_; }
  size_t vehicle_count() const noexcept { return vehicles_.size(); }

 private:
  StreamDescriptor desc_;
  std::vector<Vehicle> vehicles_;  // sorted by first_frame
  int64_t frame_count_ = 0;
  uint32_t max_dwell_ = 1;
};

// ---- live serving ----

struct FrameBatch {
  int64_t frame = 0;
  int64_t ts_ms = 0;
  std::vector<DetectionEvent> events;
};

// Bounded frame queue between a producer and one consumer.
class EventChannel {
 public:
  explicit EventChannel(size_t capacity);

  // Blocks while full. Returns false if the channel was closed or `stop` was raised.
  bool push(FrameBatch batch, const std::atomic<bool>* stop = nullptr);
  std::optional<FrameBatch> pop(std::chrono::milliseconds timeout);
  void close();
  bool closed() const;
  bool drained() const;
  size_t depth() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<FrameBatch> queue_;
  size_t capacity_;
  bool closed_ = false;
};

struct ServeOptions {
  double duration_s = 60.0;  // serve frames of seconds [start_s, duration_s)
  int64_t start_s = 0;
  // Wall-clock time of scenario t=0; defaults to the moment serve() starts at start_s.
  std::optional<std::chrono::steady_clock::time_point> epoch;
  bool fast_forward = false;
  std::chrono::microseconds jitter_bound{5000};
  size_t backpressure_watermark = 50;
  std::function<void(size_t depth)> on_backpressure;
};

struct ServeStats {
  uint64_t frames = 0;
  uint64_t events = 0;
  uint64_t jitter_violations = 0;
  uint64_t backpressure_signals = 0;
  std::chrono::microseconds max_jitter{0};
};

// Replays the stream into `channel` at its native cadence (or as fast as the
// consumer allows in fast-forward mode) and closes the channel when done.
ServeStats serve(const StreamDescriptor& desc, const TrafficProcess& proc, EventChannel& channel,
                 const ServeOptions& options, const std::atomic<bool>* stop = nullptr);

}  // namespace cityfabric
