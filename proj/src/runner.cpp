#include "cityfabric/runner.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <thread>

#include "cityfabric/emulator.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/scheduler.hpp"

namespace cityfabric {

using nlohmann::json;

std::string_view to_string(RunMode m) { return m == RunMode::kFast ? "fast" : "realtime"; }

RunMode parse_run_mode(std::string_view text) {
  if (text == "fast") return RunMode::kFast;
  if (text == "realtime") return RunMode::kRealtime;
  throw Error(ErrorCode::kInvalidArgument, "unknown mode '" + std::string(text) + "' (fast|realtime)");
}

json RunReport::to_json() const {
  return {{"scenario", scenario},
          {"mode", to_string(mode)},
          {"wall_seconds", wall_seconds},
          {"stage_seconds", stage_seconds},
          {"streams_started", streams_started},
          {"streams_rejected", streams_rejected},
          {"records", records},
          {"summaries", summaries},
          {"events", events},
          {"late_events", late_events},
          {"vehicles", vehicles},
          {"counts_conserved", counts_conserved},
          {"peak_vehicles_per_s", peak_vehicles_per_s},
          {"peak_second", peak_second},
          {"rmse_graph_gru", rmse_graph_gru},
          {"rmse_historical_average", rmse_historical_average},
          {"rmse_seasonal_naive", rmse_seasonal_naive},
          {"fl_initial_accuracy", fl_initial_accuracy},
          {"fl_final_accuracy", fl_final_accuracy},
          {"artifacts", artifacts},
          {"failed_module", failed_module.empty() ? json(nullptr) : json(failed_module)}};
}

std::vector<SeriesSource> series_sources(const ScenarioConfig& config) {
  std::vector<SeriesSource> out;
  for (const auto& s : config.streams) out.push_back({s.desc, s.process, s.desc.junction_id});
  return out;
}

ForecastTraining train_forecaster(const ScenarioConfig& config, const CoarseGraph& graph) {
  const auto& fc = config.forecast;
  const auto sources = series_sources(config);
  ForecastTraining t;
  t.history = synthetic_minute_series(sources, graph.vertex_ids, fc.history_minutes, 0x4157, config.classes.size());
  t.test = synthetic_minute_series(sources, graph.vertex_ids, fc.test_minutes, 0x7e57, config.classes.size());
  GraphGruOptions go;
  go.hidden = fc.hidden;
  go.lag = fc.lag_minutes;
  go.horizon = fc.horizon_minutes;
  go.epochs = fc.epochs;
  go.lr = fc.lr;
  go.lr_decay = fc.lr_decay;
  go.batch_size = fc.batch_size;
  go.seed = fc.seed;
  t.model = std::make_shared<GraphGru>(graph, go);
  t.fit = t.model->fit(t.history);
  return t;
}

std::vector<std::vector<double>> minute_edge_flows(const MinuteSeries& series, const CoarseGraph& graph,
                                                   const AllocationOptions& allocation) {
  std::vector<std::vector<double>> out(graph.edges.size(), std::vector<double>(static_cast<size_t>(series.minutes())));
  std::vector<double> counts(static_cast<size_t>(series.values.rows()));
  for (Eigen::Index m = 0; m < series.minutes(); ++m) {
    for (Eigen::Index j = 0; j < series.values.rows(); ++j) counts[static_cast<size_t>(j)] = series.values(j, m);
    const auto flows = allocate_edge_flows(counts, graph, allocation);
    for (size_t e = 0; e < graph.edges.size(); ++e) out[e][static_cast<size_t>(m)] = flows.flow[e];
  }
  return out;
}

std::shared_ptr<ForecastModel> make_forecaster(const ScenarioConfig& config, const CoarseGraph& graph,
                                               const std::filesystem::path& checkpoint) {
  const auto& m = config.forecast.model;
  if (m == "historical_average") return std::make_shared<HistoricalAverage>();
  if (m == "seasonal_naive") return std::make_shared<SeasonalNaive>(config.forecast.seasonal_period);
  if (m != "graph_gru") throw Error(ErrorCode::kInvalidArgument, "unknown forecast model '" + m + "'");
  if (!checkpoint.empty() && std::filesystem::exists(checkpoint))
    return std::make_shared<GraphGru>(GraphGru::load(checkpoint, graph));
  auto t = train_forecaster(config, graph);
  if (!checkpoint.empty()) t.model->save(checkpoint);
  return t.model;
}

std::shared_ptr<ForecastService> attach_live_forecasts(Gateway& gw, std::shared_ptr<const ForecastModel> model,
                                                       std::chrono::milliseconds period) {
  const auto& cfg = gw.config();
  ForecastServiceOptions so;
  so.period = period;
  so.request.lag_minutes = std::max(cfg.forecast.lag_minutes, model->required_lag());
  so.request.horizon_minutes = cfg.forecast.horizon_minutes;
  so.request.step_minutes = cfg.forecast.step_minutes;
  const int lag = so.request.lag_minutes;
  const auto junctions = gw.coarse_graph().vertex_ids;
  auto provider = [&gw, lag, junctions] {
    const int64_t now = gw.scenario_now_s();
    const int64_t now_min = now >= 0 ? now / 60 : -((-now + 59) / 60);
    const auto cams = gw.config().camera_ids();
    const auto series = build_minute_series(gw.store(), junctions, cams, gw.camera_junctions(), now_min - lag, now_min);
    return ForecastInput{series.values, now};
  };
  auto svc = std::make_shared<ForecastService>(std::move(model), junctions, provider, so);
  gw.attach_forecasts(svc);
  return svc;
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

class Stage {
 public:
  Stage(RunReport& r, const RunOptions& o, std::string name) : r_(r), o_(o), name_(std::move(name)), t0_(Clock::now()) {
    if (o_.log) o_.log("[" + name_ + "] start");
  }
  ~Stage() {
    r_.stage_seconds[name_] = since(t0_);
    if (o_.log) o_.log("[" + name_ + "] " + std::to_string(r_.stage_seconds[name_]) + " s");
  }
  const std::string& name() const { return name_; }

 private:
  RunReport& r_;
  const RunOptions& o_;
  std::string name_;
  Clock::time_point t0_;
};

std::ofstream open_artifact(RunReport& r, const std::filesystem::path& dir, const std::string& name) {
  std::ofstream os(dir / name);
  if (!os) throw Error(ErrorCode::kIo, "cannot write " + (dir / name).string());
  r.artifacts.push_back(name);
  os.precision(10);
  return os;
}

void scheduler_stage(const ScenarioConfig& config, RunReport& r, const std::filesystem::path& dir) {
  const auto fleet = config.fleet();
  const auto descs = config.descriptors();
  for (auto policy : {PlacementPolicy::kBestFit, PlacementPolicy::kWorstFit}) {
    // Sweep as far as the fleet can host this stream list, in scenario order.
    Placement probe(fleet);
    size_t fit = 0;
    try {
      for (const auto& d : descs) {
        probe.assign(d, policy);
        ++fit;
      }
    } catch (const CapacityExhausted&) {
    }
    std::vector<size_t> counts;
    for (size_t n = 1; n <= fit; ++n) counts.push_back(n);
    const auto rows = sweep(fleet, descs, counts, policy);
    auto os = open_artifact(r, dir, "scheduler_sweep_" + std::string(to_string(policy)) + ".csv");
    write_sweep_csv(os, rows);
  }
}

}  // namespace

void write_ticks_csv(std::ostream& os, const std::vector<MetricsTick>& ticks) {
  os << "tick,scenario_s,streams,active_devices,active_capacity_tops,utilization_pct,total_power_w,cumulative_fps,"
        "max_device_utilization_pct,ingested_records\n";
  for (const auto& t : ticks) {
    const auto& m = t.scheduler;
    os << t.tick << ',' << t.scenario_s << ',' << t.streams << ',' << m.active_devices << ','
       << m.active_capacity_tops << ',' << m.utilization_pct << ',' << m.total_power_w << ',' << m.cumulative_fps
       << ',' << m.max_device_utilization_pct << ',' << t.ingested_records << '\n';
  }
}

RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options) {
  validate(config);
  const auto t0 = Clock::now();
  RunReport r;
  r.scenario = config.name;
  r.mode = options.mode;
  const auto dir = options.out_dir;
  std::filesystem::create_directories(dir);
  const int64_t duration = options.duration_s.value_or(config.intervals.duration_s);
  const size_t C = config.classes.size();

  auto write_report = [&] {
    r.wall_seconds = since(t0);
    std::ofstream os(dir / "run_report.json");
    os << r.to_json().dump(2) << '\n';
  };

  std::string module;
  try {
    ScenarioConfig cfg = config;
    cfg.intervals.duration_s = duration;

    module = "scheduler";
    {
      Stage st(r, options, module);
      scheduler_stage(cfg, r, dir);
    }

    module = "traffic-graph";
    CoarseGraph graph;
    {
      Stage st(r, options, module);
      graph = coarsen(cfg.road_graph);
      auto os = open_artifact(r, dir, "graph.json");
      json g = coarse_graph_to_json(graph);
      g["congestion_thresholds"] = {{"t1", cfg.congestion_thresholds.t1}, {"t2", cfg.congestion_thresholds.t2}};
      os << g.dump(2) << '\n';
    }

    module = "gateway";
    GatewayOptions go;
    go.store_dir = dir / "store";
    std::filesystem::remove_all(go.store_dir);
    go.fast_forward = options.mode == RunMode::kFast;
    go.store_sync = options.store_sync;
    go.tick_thread = options.mode == RunMode::kRealtime;
    Gateway gw(cfg, go);
    {
      Stage st(r, options, "data-plane");
      gw.begin();
      gw.record_tick();
      // One stream at a time so the tick log traces the activation curve.
      for (const auto& s : cfg.streams) {
        const auto delta = gw.start_streams({s.desc.id});
        r.streams_started += delta.accepted();
        r.streams_rejected += delta.rejected();
        gw.record_tick();
      }
      if (options.mode == RunMode::kFast) {
        gw.wait_streams_idle();
      } else {
        std::this_thread::sleep_for(std::chrono::seconds(duration));
      }
      for (const auto& [id, ps] : gw.pipeline_stats()) {
        (void)id;
        r.events += ps.events;
        r.summaries += ps.summaries;
      }
      gw.drain();
      gw.record_tick();
      r.records = gw.store().record_count();
      auto os = open_artifact(r, dir, "scheduler_ticks.csv");
      write_ticks_csv(os, gw.ticks());
    }

    module = "ingest-store";
    {
      Stage st(r, options, module);
      const auto cams = cfg.camera_ids();
      const auto m = gw.store().query(cams, 0, duration);
      auto os = open_artifact(r, dir, "vehicles_per_second.csv");
      os << "ts_s,total";
      for (const auto& n : cfg.classes.names()) os << ',' << n;
      os << '\n';
      std::vector<uint64_t> per_class(C);
      for (size_t s = 0; s < m.seconds(); ++s) {
        std::fill(per_class.begin(), per_class.end(), 0);
        for (size_t c = 0; c < cams.size(); ++c)
          for (size_t k = 0; k < C; ++k) per_class[k] += m.at(c, s, k);
        uint64_t total = 0;
        for (auto v : per_class) total += v;
        r.vehicles += total;
        if (static_cast<double>(total) > r.peak_vehicles_per_s) {
          r.peak_vehicles_per_s = static_cast<double>(total);
          r.peak_second = static_cast<int64_t>(s);
        }
        os << s << ',' << total;
        for (auto v : per_class) os << ',' << v;
        os << '\n';
      }
      // Store totals against the arrival process, per stream and class.
      bool ok = true;
      auto cs = open_artifact(r, dir, "count_conservation.csv");
      cs << "stream,class,stored,generated\n";
      for (size_t c = 0; c < cams.size(); ++c) {
        const auto& sc = cfg.streams[c];
        const auto gen = arrival_counts(sc.desc, sc.process, static_cast<double>(duration), C);
        for (size_t k = 0; k < C; ++k) {
          uint64_t stored = 0, expected = 0;
          for (size_t s = 0; s < m.seconds(); ++s) stored += m.at(c, s, k);
          for (const auto& row : gen) expected += row[k];
          if (stored != expected) ok = false;
          cs << sc.desc.id << ',' << cfg.classes.name(k) << ',' << stored << ',' << expected << '\n';
        }
      }
      r.counts_conserved = ok;
      const auto stats = gw.store().stats();
      auto is = open_artifact(r, dir, "ingest_stats.json");
      is << json{{"records", stats.records},
                 {"ingests", stats.ingests},
                 {"summaries", r.summaries},
                 {"disk_reads", stats.disk_reads},
                 {"compactions", stats.compactions},
                 {"expected_records", cams.size() * static_cast<uint64_t>(duration)}}
                .dump(2)
         << '\n';

      // Live minute edge flows and their congestion states.
      const auto series = build_minute_series(gw.store(), graph.vertex_ids, cams, gw.camera_junctions(), 0,
                                              duration / 60);
      const auto flows = minute_edge_flows(series, graph, cfg.allocation);
      auto ef = open_artifact(r, dir, "edge_flows.csv");
      ef << "minute,edge,flow,state\n";
      for (size_t e = 0; e < flows.size(); ++e)
        for (size_t mi = 0; mi < flows[e].size(); ++mi)
          ef << mi << ',' << graph.edge_name(e) << ',' << flows[e][mi] << ','
             << to_string(discretize(flows[e][mi], cfg.congestion_thresholds)) << '\n';
    }

    if (options.forecast) {
      module = "forecaster";
      Stage st(r, options, module);
      auto t = train_forecaster(cfg, graph);
      t.model->save(dir / "graph_gru.bin");
      r.artifacts.push_back("graph_gru.bin");
      auto tr = open_artifact(r, dir, "forecast_train.csv");
      tr << "epoch,train_rmse,learning_rate\n";
      for (size_t e = 0; e < t.fit.train_rmse.size(); ++e)
        tr << e + 1 << ',' << t.fit.train_rmse[e] << ',' << t.fit.learning_rate[e] << '\n';
      const int lag = cfg.forecast.lag_minutes;
      const int horizon = cfg.forecast.horizon_minutes;
      HistoricalAverage ha;
      SeasonalNaive sn(cfg.forecast.seasonal_period);
      r.rmse_graph_gru = evaluate(*t.model, t.test, lag, horizon);
      r.rmse_historical_average = evaluate(ha, t.test, std::max(lag, ha.required_lag()), horizon);
      r.rmse_seasonal_naive = evaluate(sn, t.test, std::max(lag, sn.required_lag()), horizon);
      auto os = open_artifact(r, dir, "forecast_rmse.csv");
      os << "horizon_min,graph_gru,historical_average,seasonal_naive\n";
      for (int h = 0; h < horizon; ++h)
        os << h + 1 << ',' << r.rmse_graph_gru[static_cast<size_t>(h)] << ','
           << r.rmse_historical_average[static_cast<size_t>(h)] << ','
           << r.rmse_seasonal_naive[static_cast<size_t>(h)] << '\n';
    }

    if (options.fl && !cfg.fl.clients.empty()) {
      module = "fl-trainer";
      Stage st(r, options, module);
      const auto rep = run_rounds(cfg.fl, C);
      {
        auto os = open_artifact(r, dir, "fl_rounds.jsonl");
        write_round_log(os, rep);
      }
      auto os = open_artifact(r, dir, "fl_rounds.csv");
      os << "round,accuracy,total_samples,participating\n";
      for (const auto& rec : rep.rounds)
        os << rec.round << ',' << rec.accuracy << ',' << rec.total_samples << ',' << rec.participating << '\n';
      auto cs = open_artifact(r, dir, "fl_clients.csv");
      cs << "client,tier,streams,frames,items,proposed,label_latency_s\n";
      for (size_t k = 0; k < rep.datasets.size(); ++k) {
        const auto& d = rep.datasets[k];
        const auto& cc = cfg.fl.clients[k];
        cs << d.client_id << ',' << cc.tier << ',' << cc.streams << ',' << d.frames.size() << ',' << d.items.size()
           << ',' << d.proposed << ',' << d.label_latency_total_s << '\n';
      }
      r.fl_initial_accuracy = rep.initial_accuracy;
      r.fl_final_accuracy = rep.rounds.empty() ? rep.initial_accuracy : rep.rounds.back().accuracy;
    }
  } catch (const std::exception& e) {
    r.failed_module = module;
    write_report();
    const auto* err = dynamic_cast<const Error*>(&e);
    throw Error(err ? err->code() : ErrorCode::kInvalidState, "module '" + module + "' failed: " + e.what());
  }
  r.artifacts.push_back("run_report.json");
  write_report();
  return r;
}

}  // namespace cityfabric
