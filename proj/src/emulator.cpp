#include "cityfabric/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "cityfabric/errors.hpp"

namespace cityfabric {

namespace {

constexpr uint64_t kModulationTag = 0x6d6f64756c617465ULL;
constexpr uint64_t kCountTag = 0x636f756e74ULL;

float safe_upper(float extent) {
  float hi = 1.f - extent;
  while (hi > 0.f && hi + extent > 1.f) hi = std::nextafter(hi, 0.f);
  return std::max(hi, 0.f);
}

void extend_ar(std::vector<double>& series, size_t upto, uint64_t seed, double rho) {
  if (series.size() > upto) return;
  // Regenerate from the start so the sequence only depends on (seed, index).
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out;
  out.reserve(std::max(upto + 1, series.size() * 2));
  double prev = normal(rng);
  out.push_back(prev);
  const double innovation = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  while (out.size() < std::max(upto + 1, series.size() * 2)) {
    prev = rho * prev + innovation * normal(rng);
    out.push_back(prev);
  }
  series = std::move(out);
}

}  // namespace

double TrafficProcess::base_rate(double t_s) const {
  double rate = rate_per_min;
  for (const auto& seg : segments) {
    if (seg.from_s <= t_s) rate = seg.rate_per_min;
    else break;
  }
  if (diurnal_amplitude != 0.0) {
    const double phase = 2.0 * std::numbers::pi * (t_s - diurnal_phase_s) / diurnal_period_s;
    rate *= std::max(0.0, 1.0 + diurnal_amplitude * std::sin(phase));
  }
  return std::max(0.0, rate);
}

void TrafficProcess::validate(size_t num_classes) const {
  if (rate_per_min < 0.0) throw Error(ErrorCode::kInvalidArgument, "rate_per_min must be >= 0");
  double prev = -1.0;
  for (const auto& seg : segments) {
    if (seg.rate_per_min < 0.0) throw Error(ErrorCode::kInvalidArgument, "segment rate must be >= 0");
    if (seg.from_s <= prev) throw Error(ErrorCode::kInvalidArgument, "rate segments must be ascending");
    prev = seg.from_s;
  }
  if (diurnal_amplitude < 0.0 || diurnal_amplitude > 1.0)
    throw Error(ErrorCode::kInvalidArgument, "diurnal_amplitude must be in [0, 1]");
  if (diurnal_period_s <= 0.0) throw Error(ErrorCode::kInvalidArgument, "diurnal_period_s must be > 0");
  if (modulation.sigma < 0.0 || std::abs(modulation.rho) >= 1.0 || modulation.segment_s <= 0.0 ||
      modulation.shared_weight < 0.0 || modulation.shared_weight > 1.0)
    throw Error(ErrorCode::kInvalidArgument, "invalid rate modulation");
  if (class_mix.size() != num_classes)
    throw Error(ErrorCode::kInvalidArgument, "class_mix has " + std::to_string(class_mix.size()) +
                                                 " entries, expected " + std::to_string(num_classes));
  double sum = 0.0;
  for (double p : class_mix) {
    if (p < 0.0) throw Error(ErrorCode::kInvalidArgument, "class_mix entries must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::kInvalidArgument, "class_mix must sum to 1");
  if (dwell_frames < 1.0) throw Error(ErrorCode::kInvalidArgument, "dwell_frames must be >= 1");
  if (dwell_jitter < 0.0 || dwell_jitter >= 1.0)
    throw Error(ErrorCode::kInvalidArgument, "dwell_jitter must be in [0, 1)");
}

std::vector<double> default_class_mix(size_t num_classes) {
  if (num_classes == 8) return {0.37, 0.14, 0.15, 0.09, 0.12, 0.04, 0.05, 0.04};
  return std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes));
}

BBox Vehicle::bbox_at(int64_t frame) const {
  const auto t = static_cast<float>(frame - first_frame);
  SplitMix64 noise(noise_key ^ (static_cast<uint64_t>(frame) * 0x9e3779b97f4a7c15ULL));
  const float dx = static_cast<float>(noise.uniform() - 0.5) * 0.004f;
  const float dy = static_cast<float>(noise.uniform() - 0.5) * 0.004f;
  BBox b = start;
  b.x = std::clamp(start.x + vx * t + dx, 0.f, safe_upper(start.w));
  b.y = std::clamp(start.y + vy * t + dy, 0.f, safe_upper(start.h));
  return b;
}

// ---------------------------------------------------------------------------

ArrivalProcess::ArrivalProcess(const StreamDescriptor& desc, const TrafficProcess& proc)
    : desc_(desc), proc_(proc), count_rng_(derive_seed(desc.trace_seed, kCountTag)) {
  if (desc_.fps == 0) throw Error(ErrorCode::kInvalidArgument, "fps must be > 0");
  double acc = 0.0;
  for (double p : proc_.class_mix) {
    acc += p;
    cumulative_mix_.push_back(acc);
  }
  if (cumulative_mix_.empty()) throw Error(ErrorCode::kInvalidArgument, "class_mix must not be empty");
  max_dwell_ = static_cast<uint32_t>(std::ceil(proc_.dwell_frames * (1.0 + proc_.dwell_jitter))) + 1;
}

double ArrivalProcess::modulation_factor(int64_t s) {
  const auto& m = proc_.modulation;
  if (m.sigma == 0.0) return 1.0;
  const auto k = static_cast<size_t>(static_cast<double>(s) / m.segment_s);
  extend_ar(own_mod_, k, derive_seed(desc_.trace_seed, kModulationTag), m.rho);
  double z = std::sqrt(1.0 - m.shared_weight) * own_mod_[k];
  if (m.shared_weight > 0.0) {
    extend_ar(shared_mod_, k, derive_seed(m.shared_seed, kModulationTag), m.rho);
    z += std::sqrt(m.shared_weight) * shared_mod_[k];
  }
  // Mean-one log-normal factor.
  return std::exp(m.sigma * z - 0.5 * m.sigma * m.sigma);
}

double ArrivalProcess::expected_arrivals(int64_t s) {
  return proc_.base_rate(static_cast<double>(s) + 0.5) / 60.0 * modulation_factor(s);
}

size_t ArrivalProcess::draw_count() {
  const double mean = expected_arrivals(second_);
  if (mean <= 0.0) return 0;
  std::poisson_distribution<long> poisson(mean);
  return static_cast<size_t>(poisson(count_rng_));
}

uint16_t ArrivalProcess::draw_class(SplitMix64& rng) const {
  const double u = rng.uniform() * cumulative_mix_.back();
  auto it = std::upper_bound(cumulative_mix_.begin(), cumulative_mix_.end(), u);
  if (it == cumulative_mix_.end()) --it;
  // Skip zero-probability classes that share a cumulative value.
  while (it != cumulative_mix_.begin() && proc_.class_mix[it - cumulative_mix_.begin()] == 0.0) --it;
  return static_cast<uint16_t>(it - cumulative_mix_.begin());
}

Vehicle ArrivalProcess::make_vehicle(uint64_t seq, int64_t second) {
  SplitMix64 rng(derive_seed(desc_.trace_seed, seq));
  Vehicle v;
  v.class_idx = draw_class(rng);  // must stay the first draw; see next_second_counts
  v.tracking_id = (static_cast<uint64_t>(desc_.index + 1) << 32) | seq;
  v.first_frame = second * desc_.fps + static_cast<int64_t>(rng.uniform() * desc_.fps);
  const double jitter = proc_.dwell_jitter * (2.0 * rng.uniform() - 1.0);
  v.dwell_frames = static_cast<uint32_t>(std::max(1.0, std::round(proc_.dwell_frames * (1.0 + jitter))));

  const float w = 0.03f + 0.012f * static_cast<float>(v.class_idx % 8) + 0.01f * static_cast<float>(rng.uniform());
  const float h = w * (0.7f + 0.6f * static_cast<float>(rng.uniform()));
  v.start.w = w;
  v.start.h = h;
  v.start.x = static_cast<float>(rng.uniform()) * safe_upper(w);
  v.start.y = 0.2f * safe_upper(h) + static_cast<float>(rng.uniform()) * 0.8f * safe_upper(h);
  const float dir = rng.uniform() < 0.5 ? -1.f : 1.f;
  const auto dwell = static_cast<float>(v.dwell_frames);
  v.vx = dir * (0.3f + 0.5f * static_cast<float>(rng.uniform())) / dwell;
  v.vy = (static_cast<float>(rng.uniform()) - 0.5f) * 0.1f / dwell;
  v.noise_key = rng();
  return v;
}

void ArrivalProcess::next_second(std::vector<Vehicle>& out) {
  const size_t n = draw_count();
  for (size_t i = 0; i < n; ++i) out.push_back(make_vehicle(next_seq_++, second_));
  ++second_;
}

void ArrivalProcess::next_second_counts(Counts& counts) {
  counts.assign(proc_.class_mix.size(), 0);
  const size_t n = draw_count();
  for (size_t i = 0; i < n; ++i) {
    SplitMix64 rng(derive_seed(desc_.trace_seed, next_seq_++));
    ++counts[draw_class(rng)];
  }
  ++second_;
}

// ---------------------------------------------------------------------------

StreamGenerator::StreamGenerator(const StreamDescriptor& desc, const TrafficProcess& proc)
    : desc_(desc), arrivals_(desc, proc) {}

void StreamGenerator::next_second(std::vector<DetectionEvent>& out, std::vector<GroundTruthLabel>* truth) {
  const int64_t s = arrivals_.second();
  incoming_.clear();
  arrivals_.next_second(incoming_);
  // Carried vehicles have smaller ids than new arrivals, so appending keeps id order.
  active_.insert(active_.end(), incoming_.begin(), incoming_.end());

  const int64_t first = s * desc_.fps;
  const int64_t last = first + desc_.fps;
  for (int64_t f = first; f < last; ++f) {
    const int64_t ts = frame_ts_ms(f, desc_.fps);
    for (const auto& v : active_) {
      if (v.first_frame > f || v.last_frame() < f) continue;
      const BBox b = v.bbox_at(f);
      out.push_back(DetectionEvent{desc_.index, ts, v.tracking_id, v.class_idx, b});
      if (truth) truth->push_back(GroundTruthLabel{desc_.index, f, ts, v.tracking_id, v.class_idx, b});
    }
  }
  std::erase_if(active_, [last](const Vehicle& v) { return v.last_frame() < last; });
}

void StreamGenerator::skip_seconds(int64_t n) {
  Counts scratch;
  for (int64_t i = 0; i < n; ++i) arrivals_.next_second_counts(scratch);
  active_.clear();
}

std::vector<DetectionEvent> expand_vehicles(std::vector<Vehicle> vehicles, uint32_t stream, uint32_t fps,
                                            int64_t frame_limit) {
  std::vector<DetectionEvent> events;
  for (const auto& v : vehicles) {
    for (int64_t f = v.first_frame; f <= v.last_frame() && f < frame_limit; ++f)
      events.push_back(DetectionEvent{stream, frame_ts_ms(f, fps), v.tracking_id, v.class_idx, v.bbox_at(f)});
  }
  std::stable_sort(events.begin(), events.end(), [](const DetectionEvent& a, const DetectionEvent& b) {
    return a.ts_ms != b.ts_ms ? a.ts_ms < b.ts_ms : a.tracking_id < b.tracking_id;
  });
  return events;
}

namespace {

int64_t frame_limit_for(double duration_s, uint32_t fps) {
  if (!(duration_s > 0.0)) throw Error(ErrorCode::kInvalidArgument, "duration_s must be > 0");
  return static_cast<int64_t>(std::floor(duration_s * fps + 1e-9));
}

}  // namespace

Trace generate_trace(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s) {
  const int64_t limit = frame_limit_for(duration_s, desc.fps);
  const int64_t seconds = (limit + desc.fps - 1) / desc.fps;
  StreamGenerator gen(desc, proc);
  Trace trace;
  for (int64_t s = 0; s < seconds; ++s) gen.next_second(trace.events, &trace.truth);
  while (!trace.truth.empty() && trace.truth.back().frame >= limit) {
    trace.truth.pop_back();
    trace.events.pop_back();
  }
  return trace;
}

std::vector<DetectionEvent> generate_stream(const StreamDescriptor& desc, const TrafficProcess& proc,
                                            double duration_s) {
  const int64_t limit = frame_limit_for(duration_s, desc.fps);
  const int64_t seconds = (limit + desc.fps - 1) / desc.fps;
  const int64_t limit_ts = frame_ts_ms(limit, desc.fps);
  StreamGenerator gen(desc, proc);
  std::vector<DetectionEvent> events;
  for (int64_t s = 0; s < seconds; ++s) gen.next_second(events);
  if (limit % desc.fps != 0) {
    std::erase_if(events, [limit_ts](const DetectionEvent& e) { return e.ts_ms >= limit_ts; });
  }
  return events;
}

std::vector<Counts> arrival_counts(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s,
                                   size_t num_classes) {
  if (proc.class_mix.size() != num_classes)
    throw Error(ErrorCode::kInvalidArgument, "class_mix size does not match class count");
  const auto seconds = static_cast<int64_t>(std::ceil(duration_s - 1e-9));
  ArrivalProcess arrivals(desc, proc);
  std::vector<Counts> out(static_cast<size_t>(std::max<int64_t>(seconds, 0)));
  for (auto& row : out) arrivals.next_second_counts(row);
  return out;
}

TraceIndex::TraceIndex(const StreamDescriptor& desc, const TrafficProcess& proc, double duration_s)
    : desc_(desc), frame_count_(frame_limit_for(duration_s, desc.fps)) {
  ArrivalProcess arrivals(desc, proc);
  const int64_t seconds = (frame_count_ + desc.fps - 1) / desc.fps;
  for (int64_t s = 0; s < seconds; ++s) arrivals.next_second(vehicles_);
  max_dwell_ = arrivals.max_dwell();
  std::stable_sort(vehicles_.begin(), vehicles_.end(),
                   [](const Vehicle& a, const Vehicle& b) { return a.first_frame < b.first_frame; });
}

std::vector<GroundTruthLabel> TraceIndex::objects_at(int64_t frame) const {
  std::vector<GroundTruthLabel> out;
  if (frame < 0 || frame >= frame_count_) return out;
  auto it = std::lower_bound(vehicles_.begin(), vehicles_.end(), frame - static_cast<int64_t>(max_dwell_),
                             [](const Vehicle& v, int64_t f) { return v.first_frame < f; });
  const int64_t ts = frame_ts_ms(frame, desc_.fps);
  for (; it != vehicles_.end() && it->first_frame <= frame; ++it) {
    if (it->last_frame() < frame) continue;
    out.push_back(GroundTruthLabel{desc_.index, frame, ts, it->tracking_id, it->class_idx, it->bbox_at(frame)});
  }
  std::sort(out.begin(), out.end(),
            [](const GroundTruthLabel& a, const GroundTruthLabel& b) { return a.tracking_id < b.tracking_id; });
  return out;
}

// ---------------------------------------------------------------------------

EventChannel::EventChannel(size_t capacity) : capacity_(std::max<size_t>(capacity, 1)) {}

bool EventChannel::push(FrameBatch batch, const std::atomic<bool>* stop) {
  std::unique_lock lock(mu_);
  while (queue_.size() >= capacity_ && !closed_) {
    if (stop && stop->load()) return false;
    not_full_.wait_for(lock, std::chrono::milliseconds(20));
  }
  if (closed_) return false;
  queue_.push_back(std::move(batch));
  not_empty_.notify_one();
  return true;
}

std::optional<FrameBatch> EventChannel::pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  if (!not_empty_.wait_for(lock, timeout, [this] { return !queue_.empty() || closed_; })) return std::nullopt;
  if (queue_.empty()) return std::nullopt;
  FrameBatch batch = std::move(queue_.front());
  queue_.pop_front();
  not_full_.notify_one();
  return batch;
}

void EventChannel::close() {
  std::lock_guard lock(mu_);
  closed_ = true;
  not_empty_.notify_all();
  not_full_.notify_all();
}

bool EventChannel::closed() const {
  std::lock_guard lock(mu_);
  return closed_;
}

bool EventChannel::drained() const {
  std::lock_guard lock(mu_);
  return closed_ && queue_.empty();
}

size_t EventChannel::depth() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

ServeStats serve(const StreamDescriptor& desc, const TrafficProcess& proc, EventChannel& channel,
                 const ServeOptions& options, const std::atomic<bool>* stop) {
  using Clock = std::chrono::steady_clock;
  const int64_t limit = frame_limit_for(options.duration_s, desc.fps);
  StreamGenerator gen(desc, proc);
  ServeStats stats;
  std::vector<DetectionEvent> second_events;
  bool above_watermark = false;
  const double frame_us = 1e6 / static_cast<double>(desc.fps);
  const int64_t first = std::max<int64_t>(options.start_s, 0) * desc.fps;
  const auto start = options.epoch ? *options.epoch
                                   : Clock::now() - std::chrono::microseconds(static_cast<int64_t>(first * frame_us));
  if (options.start_s > 0) gen.skip_seconds(options.start_s);

  for (int64_t frame = first; frame < limit;) {
    second_events.clear();
    gen.next_second(second_events);
    size_t cursor = 0;
    const int64_t second_end = std::min(limit, frame + static_cast<int64_t>(desc.fps));
    for (; frame < second_end; ++frame) {
      if (stop && stop->load()) {
        channel.close();
        return stats;
      }
      FrameBatch batch;
      batch.frame = frame;
      batch.ts_ms = frame_ts_ms(frame, desc.fps);
      while (cursor < second_events.size() && second_events[cursor].ts_ms == batch.ts_ms)
        batch.events.push_back(second_events[cursor++]);

      if (!options.fast_forward) {
        const auto due = start + std::chrono::microseconds(static_cast<int64_t>(frame * frame_us));
        std::this_thread::sleep_until(due);
        const auto jitter = std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - due);
        stats.max_jitter = std::max(stats.max_jitter, jitter);
        if (jitter > options.jitter_bound) ++stats.jitter_violations;
      }
      stats.events += batch.events.size();
      if (!channel.push(std::move(batch), stop)) {
        channel.close();
        return stats;
      }
      ++stats.frames;

      const size_t depth = channel.depth();
      if (depth > options.backpressure_watermark && !above_watermark) {
        above_watermark = true;
        ++stats.backpressure_signals;
        if (options.on_backpressure) options.on_backpressure(depth);
      } else if (depth <= options.backpressure_watermark / 2) {
        above_watermark = false;
      }
    }
  }
  channel.close();
  return stats;
}

}  // namespace cityfabric
