#include "cityfabric/gateway.hpp"

#include <algorithm>

#include "cityfabric/edge_worker.hpp"
#include "cityfabric/emulator.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/forecast.hpp"

namespace cityfabric {

using nlohmann::json;

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kIdle: return "idle";
    case RunStatus::kRunning: return "running";
    case RunStatus::kDraining: return "draining";
  }
  return "unknown";
}

json GatewayEvent::to_json() const { return {{"seq", seq}, {"type", type}, {"payload", payload}}; }

std::optional<GatewayEvent> EventSubscription::pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [this] { return !queue_.empty() || overflowed_.load(); });
  if (overflowed_.load()) throw Error(ErrorCode::kSubscriberOverflow, "event subscriber fell behind");
  if (queue_.empty()) return std::nullopt;
  auto e = std::move(queue_.front());
  queue_.pop_front();
  return e;
}

void EventSubscription::offer(const GatewayEvent& e) {
  {
    std::lock_guard lock(mu_);
    if (overflowed_.load()) return;
    if (queue_.size() >= bound_) {
      overflowed_ = true;
      queue_.clear();
    } else {
      queue_.push_back(e);
    }
  }
  cv_.notify_all();
}

uint64_t EventBus::publish(std::string type, json payload) {
  std::vector<std::shared_ptr<EventSubscription>> subs;
  GatewayEvent e;
  {
    std::lock_guard lock(mu_);
    e.seq = ++seq_;
    e.type = std::move(type);
    e.payload = std::move(payload);
    ring_.push_back(e);
    if (ring_.size() > 4096) ring_.pop_front();
    std::erase_if(subs_, [](const auto& s) { return s->overflowed() || s.use_count() == 1; });
    subs = subs_;
  }
  for (auto& s : subs) s->offer(e);
  return e.seq;
}

std::shared_ptr<EventSubscription> EventBus::subscribe(size_t bound) {
  auto s = std::make_shared<EventSubscription>(bound);
  std::lock_guard lock(mu_);
  subs_.push_back(s);
  return s;
}

std::vector<GatewayEvent> EventBus::since(uint64_t seq) const {
  std::lock_guard lock(mu_);
  std::vector<GatewayEvent> out;
  for (const auto& e : ring_)
    if (e.seq > seq) out.push_back(e);
  return out;
}

uint64_t EventBus::last_seq() const {
  std::lock_guard lock(mu_);
  return seq_;
}

json metrics_to_json(const SchedulerMetrics& m) {
  return {{"active_capacity_tops", m.active_capacity_tops},
          {"utilization_pct", m.utilization_pct},
          {"total_power_w", m.total_power_w},
          {"cumulative_fps", m.cumulative_fps},
          {"active_devices", m.active_devices},
          {"max_device_utilization_pct", m.max_device_utilization_pct}};
}

json tick_to_json(const MetricsTick& t) {
  return {{"tick", t.tick},
          {"scenario_s", t.scenario_s},
          {"streams", t.streams},
          {"ingested_records", t.ingested_records},
          {"scheduler", metrics_to_json(t.scheduler)}};
}

size_t PlacementDelta::accepted() const {
  return static_cast<size_t>(std::count_if(outcomes.begin(), outcomes.end(),
                                           [](const auto& o) { return o.status == "started"; }));
}

size_t PlacementDelta::rejected() const {
  return static_cast<size_t>(std::count_if(outcomes.begin(), outcomes.end(),
                                           [](const auto& o) { return o.status == "rejected"; }));
}

json PlacementDelta::to_json() const {
  json arr = json::array();
  for (const auto& o : outcomes) {
    json j = {{"stream", o.stream_id}, {"status", o.status}};
    if (o.device_id) j["device"] = *o.device_id;
    if (!o.error.empty()) j["error"] = o.error;
    arr.push_back(std::move(j));
  }
  return {{"outcomes", std::move(arr)}, {"accepted", accepted()}, {"rejected", rejected()}};
}

json HistoryResult::to_json() const {
  json band_json = json::array();
  for (auto b : band) band_json.push_back(to_string(b));
  return {{"target", target},
          {"kind", segment ? "segment" : "camera"},
          {"from_minute", from_minute},
          {"series", series},
          {"band", band_json},
          {"missing", missing}};
}

// ---------------------------------------------------------------------------

struct Gateway::Pipeline {
  StreamConfig stream;
  EventChannel channel{512};
  std::atomic<bool> stop{false};
  std::atomic<bool> finished{false};
  std::atomic<uint64_t> events{0}, late{0}, summaries{0}, vehicles{0};
  std::thread producer;
  std::thread consumer;
};

Gateway::Gateway(ScenarioConfig config, GatewayOptions options)
    : config_(std::move(config)),
      options_(std::move(options)),
      graph_(coarsen(config_.road_graph)),
      scheduler_(config_.fleet()),
      policy_(config_.policy) {
  for (const auto& s : config_.streams) camera_junction_.push_back(s.desc.junction_id);
  StoreOptions so;
  so.dir = options_.store_dir;
  so.cameras = config_.camera_ids();
  so.num_classes = config_.classes.size();
  so.tail_horizon_s = config_.intervals.tail_horizon_s;
  so.sync = options_.store_sync;
  store_ = std::make_unique<TimeSeriesStore>(so);
}

Gateway::~Gateway() {
  try {
    drain();
  } catch (...) {
  }
}

RunStatus Gateway::status() const {
  std::lock_guard lock(mu_);
  return status_;
}

void Gateway::begin() {
  {
    std::lock_guard lock(mu_);
    if (status_ != RunStatus::kIdle)
      throw Error(ErrorCode::kInvalidState, "run can only begin from idle (now " + std::string(to_string(status_)) + ")");
    status_ = RunStatus::kRunning;
    epoch_ = std::chrono::steady_clock::now();
  }
  events_.publish("state", {{"state", "running"}});
  if (options_.tick_thread) {
    ticking_ = true;
    tick_thread_ = std::thread([this] { tick_loop(); });
  }
}

void Gateway::drain() {
  std::vector<std::string> ids;
  {
    std::lock_guard lock(mu_);
    if (status_ != RunStatus::kRunning) return;
    status_ = RunStatus::kDraining;
    for (const auto& [id, p] : pipelines_) ids.push_back(id);
    admission_.clear();
  }
  events_.publish("state", {{"state", "draining"}});
  stop_streams(ids);
  if (ticking_.exchange(false)) {
    tick_cv_.notify_all();
    if (tick_thread_.joinable()) tick_thread_.join();
  }
  {
    std::lock_guard lock(mu_);
    status_ = RunStatus::kIdle;
  }
  events_.publish("state", {{"state", "idle"}});
}

int64_t Gateway::scenario_now_s() const {
  if (options_.fast_forward) return store_->latest_second().value_or(0);
  std::lock_guard lock(mu_);
  if (status_ == RunStatus::kIdle) return store_->latest_second().value_or(0);
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - epoch_).count();
}

void Gateway::set_policy(PlacementPolicy p) {
  {
    std::lock_guard lock(mu_);
    policy_ = p;
  }
  events_.publish("policy", {{"policy", to_string(p)}});
}

PlacementPolicy Gateway::policy() const {
  std::lock_guard lock(mu_);
  return policy_;
}

void Gateway::launch(const StreamConfig& s) {
  auto p = std::make_unique<Pipeline>();
  p->stream = s;
  Pipeline* raw = p.get();
  const size_t C = config_.classes.size();
  ServeOptions so;
  so.fast_forward = options_.fast_forward;
  so.duration_s = options_.fast_forward ? static_cast<double>(config_.intervals.duration_s) : 1e12;
  if (!options_.fast_forward) {
    so.epoch = epoch_;
    so.start_s = std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - epoch_).count();
  }
  const std::string id = s.desc.id;
  so.on_backpressure = [this, id](size_t depth) {
    events_.publish("health", {{"stream", id}, {"backpressure", true}, {"depth", depth}});
  };
  raw->producer = std::thread([raw, so] { serve(raw->stream.desc, raw->stream.process, raw->channel, so, &raw->stop); });

  AggregatorOptions ao;
  ao.window_len_s = config_.intervals.window_len_s;
  ao.lateness_ms = static_cast<int64_t>(config_.intervals.lateness_s) * 1000;
  const auto spill_dir = options_.store_dir / "spill";
  raw->consumer = std::thread([this, raw, C, ao, spill_dir] {
    WindowAggregator agg(raw->stream.desc.id, C, ao);
    StoreSink sink(*store_);
    EmitterOptions eo;
    std::error_code ec;
    std::filesystem::create_directories(spill_dir, ec);
    eo.spill_path = spill_dir / (raw->stream.desc.id + ".ndjson");
    Emitter emitter(sink, eo);
    std::vector<FlowSummary> closed;
    auto flush = [&] {
      for (const auto& s : closed) {
        try {
          emitter.emit(s);
          ++raw->summaries;
        } catch (const std::exception& e) {
          events_.publish("health", {{"stream", raw->stream.desc.id}, {"error", e.what()}});
        }
      }
      closed.clear();
    };
    for (;;) {
      auto batch = raw->channel.pop(std::chrono::milliseconds(100));
      if (batch) {
        for (const auto& e : batch->events) agg.push(e, closed);
        raw->events += batch->events.size();
        if (!closed.empty()) flush();
      } else if (raw->channel.closed() && raw->channel.drained()) {
        break;
      }
    }
    agg.finish(closed, options_.fast_forward ? config_.intervals.duration_s : -1);
    flush();
    raw->late = agg.stats().late_events;
    raw->vehicles = agg.stats().vehicles;
    raw->finished = true;
  });
  pipelines_.emplace(id, std::move(p));
}

void Gateway::halt(const std::string& id) {
  auto it = pipelines_.find(id);
  if (it == pipelines_.end()) return;
  auto& p = *it->second;
  p.stop = true;
  if (p.producer.joinable()) p.producer.join();
  p.channel.close();
  if (p.consumer.joinable()) p.consumer.join();
  pipelines_.erase(it);
}

PlacementDelta Gateway::start_streams(const std::vector<std::string>& ids, std::optional<PlacementPolicy> policy) {
  {
    std::lock_guard lock(mu_);
    if (status_ == RunStatus::kDraining) throw Error(ErrorCode::kInvalidState, "run is draining");
  }
  if (status() == RunStatus::kIdle) begin();
  PlacementDelta delta;
  std::lock_guard lock(mu_);
  const PlacementPolicy pol = policy.value_or(policy_);
  for (const auto& id : ids) {
    StreamOutcome o;
    o.stream_id = id;
    const StreamConfig* sc = nullptr;
    for (const auto& s : config_.streams)
      if (s.desc.id == id) sc = &s;
    if (!sc) {
      o.status = "error";
      o.error = std::string(to_string(ErrorCode::kUnknownStream)) + ": stream '" + id + "' is not in the scenario";
      delta.outcomes.push_back(std::move(o));
      continue;
    }
    if (pipelines_.count(id) || std::find(admission_.begin(), admission_.end(), id) != admission_.end()) {
      o.status = "error";
      o.error = "InvalidState: stream '" + id + "' is already running";
      delta.outcomes.push_back(std::move(o));
      continue;
    }
    try {
      const size_t dev = scheduler_.assign(sc->desc, pol);
      o.device_id = scheduler_.snapshot()->fleet()[dev].id;
      o.status = "started";
      launch(*sc);
      events_.publish("placement", {{"action", "assign"}, {"stream", id}, {"device", *o.device_id},
                                    {"policy", to_string(pol)}});
    } catch (const CapacityExhausted& e) {
      o.error = e.what();
      if (options_.admission_queue) {
        o.status = "queued";
        admission_.push_back(id);
        events_.publish("queued", {{"stream", id}, {"position", admission_.size()}});
      } else {
        o.status = "rejected";
        events_.publish("rejected", {{"stream", id}, {"error", e.what()}});
      }
    }
    delta.outcomes.push_back(std::move(o));
  }
  return delta;
}

PlacementDelta Gateway::stop_streams(const std::vector<std::string>& ids) {
  PlacementDelta delta;
  {
    std::lock_guard lock(mu_);
    for (const auto& id : ids) {
      StreamOutcome o;
      o.stream_id = id;
      if (auto q = std::find(admission_.begin(), admission_.end(), id); q != admission_.end()) {
        admission_.erase(q);
        o.status = "stopped";
        events_.publish("dequeued", {{"stream", id}});
      } else if (!pipelines_.count(id)) {
        o.status = "error";
        o.error = std::string(to_string(ErrorCode::kUnknownStream)) + ": stream '" + id + "' is not running";
      } else {
        auto snap = scheduler_.snapshot();
        if (auto d = snap->device_of(id)) o.device_id = snap->fleet()[*d].id;
        halt(id);
        scheduler_.remove(id);
        o.status = "stopped";
        json payload = {{"action", "remove"}, {"stream", id}};
        if (o.device_id) payload["device"] = *o.device_id;
        events_.publish("placement", payload);
      }
      delta.outcomes.push_back(std::move(o));
    }
  }
  admit_queued();
  return delta;
}

void Gateway::admit_queued() {
  std::lock_guard lock(mu_);
  while (!admission_.empty() && status_ == RunStatus::kRunning) {
    const auto id = admission_.front();
    const auto& sc = config_.stream(id);
    try {
      const size_t dev = scheduler_.assign(sc.desc, policy_);
      admission_.pop_front();
      launch(sc);
      events_.publish("placement", {{"action", "assign"}, {"stream", id}, {"device", scheduler_.snapshot()->fleet()[dev].id},
                                    {"policy", to_string(policy_)}, {"from_queue", true}});
    } catch (const CapacityExhausted&) {
      break;
    }
  }
}

void Gateway::wait_streams_idle() {
  for (;;) {
    {
      std::lock_guard lock(mu_);
      bool all = std::all_of(pipelines_.begin(), pipelines_.end(),
                             [](const auto& kv) { return kv.second->finished.load(); });
      if (all) return;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

MetricsTick Gateway::record_tick() {
  MetricsTick t;
  auto snap = scheduler_.snapshot();
  t.scheduler = metrics(*snap);
  t.streams = snap->stream_count();
  t.scenario_s = scenario_now_s();
  t.ingested_records = store_->record_count();
  std::lock_guard lock(metrics_mu_);
  t.tick = ++tick_seq_;
  ticks_.push_back(t);
  if (ticks_.size() > options_.metrics_ring) ticks_.pop_front();
  return t;
}

std::vector<MetricsTick> Gateway::ticks() const {
  std::lock_guard lock(metrics_mu_);
  return {ticks_.begin(), ticks_.end()};
}

void Gateway::tick_loop() {
  std::unique_lock lock(tick_mu_);
  while (ticking_.load()) {
    if (tick_cv_.wait_for(lock, options_.tick_period, [this] { return !ticking_.load(); })) break;
    lock.unlock();
    record_tick();
    lock.lock();
  }
}

std::vector<std::string> Gateway::running_streams() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, p] : pipelines_) out.push_back(id);
  return out;
}

std::vector<std::string> Gateway::queued_streams() const {
  std::lock_guard lock(mu_);
  return {admission_.begin(), admission_.end()};
}

json Gateway::streams_json() const {
  auto snap = scheduler_.snapshot();
  const auto running = running_streams();
  const auto queued = queued_streams();
  json arr = json::array();
  for (const auto& s : config_.streams) {
    json j = {{"id", s.desc.id}, {"junction_id", s.desc.junction_id}, {"fps", s.desc.fps}};
    const bool run = std::find(running.begin(), running.end(), s.desc.id) != running.end();
    const bool q = std::find(queued.begin(), queued.end(), s.desc.id) != queued.end();
    j["state"] = run ? "running" : (q ? "queued" : "stopped");
    if (auto d = snap->device_of(s.desc.id)) j["device"] = snap->fleet()[*d].id;
    else j["device"] = nullptr;
    arr.push_back(std::move(j));
  }
  json devices = json::array();
  for (size_t d = 0; d < snap->fleet().size(); ++d) {
    const auto& dev = snap->fleet()[d];
    devices.push_back({{"id", dev.id},
                       {"model", dev.model_name},
                       {"fps_capacity", dev.fps_capacity},
                       {"used_fps", snap->used_fps(d)},
                       {"active", snap->active(d)}});
  }
  return {{"state", to_string(status())},
          {"policy", to_string(policy())},
          {"seq", events_.last_seq()},
          {"streams", std::move(arr)},
          {"devices", std::move(devices)},
          {"queued", queued}};
}

HistoryResult Gateway::history(const std::string& target, int64_t from_s, int64_t to_s) const {
  if (from_s >= to_s) throw Error(ErrorCode::kInvalidArgument, "history window is empty");
  const int64_t from_min = from_s >= 0 ? from_s / 60 : -((-from_s + 59) / 60);
  const int64_t to_min = (to_s + 59) / 60;
  HistoryResult out;
  out.target = target;
  out.from_minute = from_min;
  const auto cameras = config_.camera_ids();

  if (auto e = graph_.find_edge_by_name(target)) {
    out.segment = true;
    const auto series = build_minute_series(*store_, graph_.vertex_ids, cameras, camera_junction_, from_min, to_min);
    const auto& edge = graph_.edges[*e];
    for (Eigen::Index m = 0; m < series.minutes(); ++m) {
      std::vector<double> counts(static_cast<size_t>(series.values.rows()));
      for (Eigen::Index j = 0; j < series.values.rows(); ++j) counts[static_cast<size_t>(j)] = series.values(j, m);
      const auto flows = allocate_edge_flows(counts, graph_, config_.allocation);
      out.series.push_back(flows.flow[*e]);
      out.band.push_back(discretize(flows.flow[*e], config_.congestion_thresholds));
      out.missing.push_back(series.mask(edge.u, m) && series.mask(edge.v, m));
    }
    return out;
  }
  for (size_t c = 0; c < cameras.size(); ++c) {
    if (cameras[c] != target) continue;
    const std::vector<std::string> one{target};
    const std::vector<std::string> junction{target};
    const auto series = build_minute_series(*store_, junction, one, junction, from_min, to_min);
    for (Eigen::Index m = 0; m < series.minutes(); ++m) {
      out.series.push_back(series.values(0, m));
      out.missing.push_back(series.mask(0, m));
    }
    return out;
  }
  throw Error(ErrorCode::kUnknownSegment, "'" + target + "' is neither a super-edge nor a camera");
}

void Gateway::attach_forecasts(std::shared_ptr<ForecastService> service) {
  std::lock_guard lock(aux_mu_);
  forecasts_ = std::move(service);
}

std::shared_ptr<ForecastService> Gateway::forecasts() const {
  std::lock_guard lock(aux_mu_);
  return forecasts_;
}

void Gateway::set_fl_log(std::vector<json> records) {
  std::lock_guard lock(aux_mu_);
  fl_log_ = std::move(records);
}

std::vector<json> Gateway::fl_log() const {
  std::lock_guard lock(aux_mu_);
  return fl_log_;
}

json Gateway::graph_json() const {
  json g = coarse_graph_to_json(graph_);
  json cams = json::object();
  for (size_t i = 0; i < config_.streams.size(); ++i) cams[config_.streams[i].desc.id] = camera_junction_[i];
  g["cameras"] = std::move(cams);
  g["congestion_thresholds"] = {{"t1", config_.congestion_thresholds.t1}, {"t2", config_.congestion_thresholds.t2}};
  g["allocation"] = {{"weighting", to_string(config_.allocation.weighting)},
                     {"endpoint", to_string(config_.allocation.endpoint)}};
  return g;
}

std::map<std::string, Gateway::PipelineStats> Gateway::pipeline_stats() const {
  std::lock_guard lock(mu_);
  std::map<std::string, PipelineStats> out;
  for (const auto& [id, p] : pipelines_) {
    out[id] = PipelineStats{p->events.load(), p->late.load(), p->summaries.load(), p->vehicles.load(),
                            p->finished.load()};
  }
  return out;
}

}  // namespace cityfabric
