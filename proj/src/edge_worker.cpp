#include "cityfabric/edge_worker.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"

namespace cityfabric {

namespace {

int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

}  // namespace

nlohmann::json summary_to_json(const FlowSummary& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) rows.push_back({{"ts_s", r.ts_s}, {"counts", r.counts}});
  return {{"camera_id", s.camera_id},
          {"window_start_s", s.window_start_s},
          {"window_len_s", s.window_len_s},
          {"rows", std::move(rows)}};
}

FlowSummary summary_from_json(const nlohmann::json& j) {
  try {
    FlowSummary s;
    s.camera_id = j.at("camera_id").get<std::string>();
    s.window_start_s = j.at("window_start_s").get<int64_t>();
    s.window_len_s = j.at("window_len_s").get<int>();
    for (const auto& r : j.at("rows")) {
      FlowRecord rec;
      rec.ts_s = r.at("ts_s").get<int64_t>();
      rec.camera_id = s.camera_id;
      rec.counts = r.at("counts").get<Counts>();
      s.rows.push_back(std::move(rec));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedSummary, e.what());
  }
}

std::string encode_summary(const FlowSummary& s) { return summary_to_json(s).dump(); }

FlowSummary decode_summary(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedSummary, e.what());
  }
  return summary_from_json(j);
}

// ---------------------------------------------------------------------------

WindowAggregator::WindowAggregator(std::string camera_id, size_t num_classes, AggregatorOptions options)
    : camera_id_(std::move(camera_id)), num_classes_(num_classes), options_(options) {
  if (options_.window_len_s < 5 || options_.window_len_s > 30)
    throw Error(ErrorCode::kInvalidArgument, "window_len_s must be within [5, 30]");
  if (options_.lateness_ms < 0) throw Error(ErrorCode::kInvalidArgument, "lateness must be >= 0");
}

void WindowAggregator::push(const DetectionEvent& e, std::vector<FlowSummary>& closed) {
  ++stats_.events;
  const int64_t len = options_.window_len_s;
  const int64_t sec = floor_div(e.ts_ms, 1000);
  const int64_t window = floor_div(sec, len) * len;

  auto [seen, first_time] = last_seen_ms_.try_emplace(e.tracking_id, e.ts_ms);
  if (!first_time) seen->second = std::max(seen->second, e.ts_ms);

  if (window < next_window_start_s_) {
    ++stats_.late_events;
    return;
  }
  if (first_time) {
    if (e.class_idx >= num_classes_)
      throw Error(ErrorCode::kInvalidArgument, "class index " + std::to_string(e.class_idx) + " out of range");
    auto it = open_.find(window);
    if (it == open_.end()) it = open_.emplace(window, std::vector<Counts>(len, Counts(num_classes_, 0))).first;
    ++it->second[static_cast<size_t>(sec - window)][e.class_idx];
    ++stats_.vehicles;
  }

  if (e.ts_ms > max_ts_ms_) {
    max_ts_ms_ = e.ts_ms;
    emit_until(floor_div(watermark_ms(), 1000), closed);
    if (max_ts_ms_ - last_eviction_ms_ >= 10'000) evict_ids();
  }
}

void WindowAggregator::emit_until(int64_t end_s_exclusive, std::vector<FlowSummary>& closed) {
  const int64_t len = options_.window_len_s;
  while (next_window_start_s_ + len <= end_s_exclusive) {
    FlowSummary s;
    s.camera_id = camera_id_;
    s.window_start_s = next_window_start_s_;
    s.window_len_s = options_.window_len_s;
    s.rows.reserve(static_cast<size_t>(len));
    auto it = open_.find(next_window_start_s_);
    for (int64_t i = 0; i < len; ++i) {
      FlowRecord r;
      r.ts_s = next_window_start_s_ + i;
      r.camera_id = camera_id_;
      r.counts = it != open_.end() ? std::move(it->second[static_cast<size_t>(i)]) : Counts(num_classes_, 0);
      s.rows.push_back(std::move(r));
    }
    if (it != open_.end()) open_.erase(it);
    closed.push_back(std::move(s));
    ++stats_.windows_emitted;
    next_window_start_s_ += len;
  }
}

void WindowAggregator::finish(std::vector<FlowSummary>& closed, int64_t until_s) {
  const int64_t len = options_.window_len_s;
  int64_t limit;
  if (until_s < 0) {
    limit = open_.empty() ? next_window_start_s_ : open_.rbegin()->first + len;
  } else {
    limit = floor_div(until_s + len - 1, len) * len;
  }
  emit_until(limit, closed);
}

void WindowAggregator::evict_ids() {
  last_eviction_ms_ = max_ts_ms_;
  const int64_t cutoff = max_ts_ms_ - options_.id_retention_ms;
  std::erase_if(last_seen_ms_, [cutoff](const auto& kv) { return kv.second < cutoff; });
}

std::vector<FlowSummary> aggregate(std::span<const DetectionEvent> events, const std::string& camera_id,
                                   size_t num_classes, int window_len_s, int lateness_s, int64_t until_s) {
  AggregatorOptions opt;
  opt.window_len_s = window_len_s;
  opt.lateness_ms = static_cast<int64_t>(lateness_s) * 1000;
  WindowAggregator agg(camera_id, num_classes, opt);
  std::vector<FlowSummary> out;
  for (const auto& e : events) agg.push(e, out);
  agg.finish(out, until_s);
  return out;
}

// ---------------------------------------------------------------------------

Emitter::Emitter(SummarySink& sink, EmitterOptions options, Sleeper sleeper)
    : sink_(sink), options_(std::move(options)), sleeper_(std::move(sleeper)) {
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  if (!options_.spill_path.empty() && std::filesystem::exists(options_.spill_path)) {
    std::ifstream in(options_.spill_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) spill_.push_back(decode_summary(line));
    }
  }
}

bool Emitter::try_deliver(const FlowSummary& summary, int max_retries) {
  for (int attempt = 0;; ++attempt) {
    ++attempts_;
    try {
      sink_.send(summary);
      return true;
    } catch (const Error& e) {
      // Validation failures will not improve with retries.
      if (e.code() == ErrorCode::kMalformedSummary || e.code() == ErrorCode::kUnknownCamera) throw;
    } catch (const std::exception&) {
    }
    if (attempt >= max_retries) return false;
    auto delay = options_.base_backoff * (int64_t{1} << std::min(attempt, 20));
    delay = std::min(delay, options_.max_backoff);
    backoff_log_.push_back(delay);
    sleeper_(delay);
  }
}

EmitOutcome Emitter::emit(const FlowSummary& summary) {
  if (!spill_.empty()) replay_spill();
  if (spill_.empty() && try_deliver(summary, options_.max_retries)) return EmitOutcome::kDelivered;
  spill_.push_back(summary);
  persist_spill();
  return EmitOutcome::kSpilled;
}

size_t Emitter::replay_spill() {
  size_t delivered = 0;
  while (!spill_.empty() && try_deliver(spill_.front(), 0)) {
    spill_.pop_front();
    ++delivered;
  }
  if (delivered > 0) persist_spill();
  return delivered;
}

size_t Emitter::spilled() const { return spill_.size(); }

void Emitter::persist_spill() const {
  if (options_.spill_path.empty()) return;
  const auto tmp = options_.spill_path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    for (const auto& s : spill_) out << encode_summary(s) << '\n';
    if (!out) throw Error(ErrorCode::kIo, "cannot write spill queue " + tmp);
  }
  std::filesystem::rename(tmp, options_.spill_path);
}

// ---------------------------------------------------------------------------

AsyncEmitter::AsyncEmitter(Emitter& emitter) : emitter_(emitter), worker_([this] { run(); }) {}

AsyncEmitter::~AsyncEmitter() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void AsyncEmitter::enqueue(FlowSummary summary) {
  {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(summary));
  }
  cv_.notify_one();
}

void AsyncEmitter::flush() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && !busy_; });
}

void AsyncEmitter::run() {
  std::unique_lock lock(mu_);
  for (;;) {
    cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
    if (queue_.empty() && stop_) break;
    FlowSummary next = std::move(queue_.front());
    queue_.pop_front();
    busy_ = true;
    lock.unlock();
    try {
      if (emitter_.emit(next) == EmitOutcome::kDelivered) ++delivered_;
    } catch (const std::exception&) {
      // Rejected summaries are dropped; the sink has already reported them.
    }
    lock.lock();
    busy_ = false;
    if (queue_.empty()) idle_cv_.notify_all();
  }
  idle_cv_.notify_all();
}

}  // namespace cityfabric
