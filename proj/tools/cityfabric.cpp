// cityfabric command-line entry point.
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "cityfabric/edge_worker.hpp"
#include "cityfabric/emulator.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/fl.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/graph.hpp"
#include "cityfabric/http.hpp"
#include "cityfabric/runner.hpp"
#include "cityfabric/scenario.hpp"
#include "cityfabric/scheduler.hpp"
#include "cityfabric/wire.hpp"

using namespace cityfabric;
using nlohmann::json;

namespace {

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

ScenarioConfig scenario_arg(const std::string& s) { return load_scenario(resolve_scenario_path(s)); }

int cmd_run(const std::string& scenario, const std::string& mode, const std::string& out_dir, int64_t duration,
            bool no_forecast, bool no_fl, bool no_sync) {
  auto cfg = scenario_arg(scenario);
  RunOptions o;
  o.mode = parse_run_mode(mode);
  o.out_dir = out_dir;
  if (duration > 0) o.duration_s = duration;
  o.forecast = !no_forecast;
  o.fl = !no_fl;
  o.store_sync = !no_sync;
  o.log = [](const std::string& line) { std::cerr << line << '\n'; };
  const auto r = run_scenario(cfg, o);
  std::cout << r.to_json().dump(2) << '\n';
  return 0;
}

int cmd_sweep(const std::string& policy, const std::string& fleet_path, const std::string& scenario, size_t streams,
              uint32_t fps, const std::string& out) {
  std::vector<DeviceProfile> devices;
  if (!fleet_path.empty()) devices = load_fleet(fleet_path);
  else devices = scenario_arg(scenario).devices;
  auto fleet = std::make_shared<Fleet>(devices);
  std::vector<size_t> counts;
  for (size_t n = 1; n <= streams; ++n) counts.push_back(n);
  std::vector<PlacementPolicy> policies;
  if (policy == "both") policies = {PlacementPolicy::kBestFit, PlacementPolicy::kWorstFit};
  else policies = {parse_policy(policy)};
  std::ofstream file;
  if (!out.empty()) file.open(out);
  std::ostream& os = out.empty() ? std::cout : file;
  for (size_t i = 0; i < policies.size(); ++i) {
    const auto rows = sweep(fleet, counts, policies[i], fps);
    if (i == 0) {
      write_sweep_csv(os, rows);
    } else {
      // header once
      std::ostringstream tmp;
      write_sweep_csv(tmp, rows);
      const auto s = tmp.str();
      os << s.substr(s.find('\n') + 1);
    }
  }
  return 0;
}

int cmd_fl(const std::string& scenario, const std::string& clients_file, int rounds, double tau, int epochs,
           int target_frames, const std::string& out_dir) {
  auto cfg = scenario_arg(scenario);
  FlConfig fl = cfg.fl;
  if (!clients_file.empty()) {
    std::ifstream is(clients_file);
    if (!is) throw Error(ErrorCode::kIo, "cannot read " + clients_file);
    json j = json::parse(is);
    // A clients file may carry a whole fl section or just the client list.
    if (j.is_array()) j = json{{"clients", j}};
    json merged = fl_config_to_json(fl);
    merged.merge_patch(j);
    fl = fl_config_from_json(merged, cfg.classes.size());
  }
  if (rounds >= 0) fl.rounds = rounds;
  if (tau >= 0) fl.tau = tau;
  if (epochs >= 0) fl.epochs = epochs;
  if (target_frames >= 0) fl.target_frames = target_frames;
  FlRunOptions o;
  o.on_record = [](const json& rec) {
    if (rec.value("type", "") == "round") std::cerr << rec.dump() << '\n';
  };
  const auto rep = run_rounds(fl, cfg.classes.size(), o);
  std::filesystem::create_directories(out_dir);
  std::ofstream log(std::filesystem::path(out_dir) / "fl_rounds.jsonl");
  write_round_log(log, rep);
  json clients = json::array();
  for (const auto& d : rep.datasets)
    clients.push_back({{"client", d.client_id},
                       {"frames", d.frames.size()},
                       {"items", d.items.size()},
                       {"proposed", d.proposed},
                       {"label_latency_s", d.label_latency_total_s}});
  json rounds_json = json::array();
  for (const auto& r : rep.rounds)
    rounds_json.push_back({{"round", r.round}, {"accuracy", r.accuracy}, {"total_samples", r.total_samples}});
  std::cout << json{{"initial_accuracy", rep.initial_accuracy}, {"rounds", rounds_json}, {"clients", clients}}.dump(2)
            << '\n';
  return 0;
}

int cmd_replay(const std::string& scenario, const std::vector<std::string>& ids, double duration,
               std::string format, const std::string& out, const std::string& input) {
  if (format.empty()) {
    const auto ext = std::filesystem::path(input.empty() ? out : input).extension();
    format = ext == ".ndjson" || ext == ".jsonl" ? "ndjson" : "binary";
  }
  if (format != "binary" && format != "ndjson")
    throw Error(ErrorCode::kInvalidArgument, "format must be binary or ndjson");
  if (!input.empty()) {
    // Decode a recorded trace and print the per-camera summaries it produces.
    std::ifstream is(input, std::ios::binary);
    if (!is) throw Error(ErrorCode::kIo, "cannot read " + input);
    const auto events = format == "binary" ? wire::read_events(is) : wire::read_events_ndjson(is);
    auto cfg = scenario_arg(scenario);
    std::map<uint32_t, std::vector<DetectionEvent>> by_stream;
    for (const auto& e : events) by_stream[e.stream].push_back(e);
    const auto cams = cfg.camera_ids();
    for (auto& [sid, evs] : by_stream) {
      const std::string cam = sid < cams.size() ? cams[sid] : "stream-" + std::to_string(sid);
      for (const auto& s : aggregate(evs, cam, cfg.classes.size(), cfg.intervals.window_len_s,
                                     cfg.intervals.lateness_s))
        std::cout << summary_to_json(s).dump() << '\n';
    }
    return 0;
  }
  auto cfg = scenario_arg(scenario);
  std::vector<DetectionEvent> all;
  for (const auto& s : cfg.streams) {
    if (!ids.empty() && std::find(ids.begin(), ids.end(), s.desc.id) == ids.end()) continue;
    auto ev = generate_stream(s.desc, s.process, duration);
    all.insert(all.end(), ev.begin(), ev.end());
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.ts_ms < b.ts_ms; });
  std::ofstream file;
  if (!out.empty()) file.open(out, std::ios::binary);
  std::ostream& os = out.empty() ? std::cout : file;
  if (format == "binary") wire::write_events(os, all);
  else wire::write_events_ndjson(os, all);
  std::cerr << all.size() << " events\n";
  return 0;
}

int cmd_serve(const std::string& scenario, uint16_t port, const std::string& address, const std::string& store_dir,
              bool fast, bool start_all, bool forecasts, const std::string& checkpoint, const std::string& fl_log,
              int forecast_period_ms) {
  auto cfg = scenario_arg(scenario);
  GatewayOptions go;
  go.store_dir = store_dir;
  go.fast_forward = fast;
  Gateway gw(cfg, go);
  if (!fl_log.empty()) {
    std::ifstream is(fl_log);
    std::vector<json> records;
    for (std::string line; std::getline(is, line);)
      if (!line.empty()) records.push_back(json::parse(line));
    gw.set_fl_log(std::move(records));
  }
  std::shared_ptr<ForecastService> svc;
  if (forecasts) {
    std::cerr << "preparing forecaster (" << cfg.forecast.model << ")\n";
    auto model = make_forecaster(cfg, gw.coarse_graph(), checkpoint);
    const int period = forecast_period_ms > 0 ? forecast_period_ms : static_cast<int>(cfg.intervals.forecast_period_s * 1000);
    svc = attach_live_forecasts(gw, model, std::chrono::milliseconds(period));
  }
  HttpServerOptions ho;
  ho.address = address;
  ho.port = port;
  HttpServer server(gw, ho);
  server.start();
  std::cerr << "listening on " << address << ":" << server.port() << '\n';
  gw.begin();
  if (svc) svc->start();
  if (start_all) {
    std::vector<std::string> ids = cfg.camera_ids();
    std::cerr << gw.start_streams(ids).to_json().dump() << '\n';
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted.load()) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  std::cerr << "shutting down\n";
  server.stop();
  if (svc) svc->stop();
  gw.drain();
  return 0;
}

int cmd_graph(const std::string& action, const std::string& scenario, int minutes) {
  auto cfg = scenario_arg(scenario);
  const auto cg = coarsen(cfg.road_graph);
  if (action == "coarsen") {
    std::cout << coarse_graph_to_json(cg).dump(2) << '\n';
    return 0;
  }
  // calibrate: percentiles of generated minute edge flows
  const auto series = synthetic_minute_series(series_sources(cfg), cg.vertex_ids, minutes, 0xca1b, cfg.classes.size());
  const auto flows = minute_edge_flows(series, cg, cfg.allocation);
  std::vector<double> all;
  for (const auto& e : flows) all.insert(all.end(), e.begin(), e.end());
  const auto t = calibrate_thresholds(all);
  std::cout << json{{"t1", t.t1}, {"t2", t.t2}, {"edges", cg.edges.size()}, {"minutes", minutes}}.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cityfabric: edge-cloud traffic analytics fabric"};
  app.require_subcommand(1);

  std::string scenario = "neighborhood100";
  std::string mode = "fast";
  std::string out_dir = "out";
  int64_t duration = 0;
  bool no_forecast = false, no_fl = false, no_sync = false;
  auto* run = app.add_subcommand("run", "run a scenario end to end and write artifacts");
  run->add_option("--scenario", scenario, "scenario name or path");
  run->add_option("--mode", mode, "fast|realtime")->check(CLI::IsMember({"fast", "realtime"}));
  run->add_option("--out-dir", out_dir);
  run->add_option("--duration", duration, "override scenario duration (s)");
  run->add_flag("--no-forecast", no_forecast);
  run->add_flag("--no-fl", no_fl);
  run->add_flag("--no-sync", no_sync, "skip fdatasync on ingest");

  auto* sched = app.add_subcommand("sched", "scheduler tools");
  auto* sweep_cmd = sched->add_subcommand("sweep", "activation/power sweep over uniform streams");
  std::string policy = "both", fleet, sweep_out;
  size_t streams = 80;
  uint32_t fps = 25;
  sweep_cmd->add_option("--policy", policy, "bestfit|worstfit|both");
  sweep_cmd->add_option("--fleet", fleet, "fleet file (default: the scenario's devices)");
  sweep_cmd->add_option("--scenario", scenario);
  sweep_cmd->add_option("--streams", streams);
  sweep_cmd->add_option("--fps", fps);
  sweep_cmd->add_option("--out", sweep_out, "CSV path (default stdout)");
  sched->require_subcommand(1);

  auto* fl = app.add_subcommand("fl", "federated learning");
  auto* fl_run = fl->add_subcommand("run", "run FedAvg rounds");
  std::string clients_file;
  int rounds = -1, epochs = -1, target_frames = -1;
  double tau = -1;
  fl_run->add_option("--scenario", scenario);
  fl_run->add_option("--clients", clients_file, "client list or fl section (JSON)");
  fl_run->add_option("--rounds", rounds);
  fl_run->add_option("--tau", tau);
  fl_run->add_option("--epochs", epochs);
  fl_run->add_option("--target-frames", target_frames);
  fl_run->add_option("--out-dir", out_dir);
  fl->require_subcommand(1);

  auto* replay = app.add_subcommand("replay", "write or read detection-event traces");
  std::string format, replay_out, input;
  std::vector<std::string> ids;
  double replay_duration = 60;
  replay->add_option("--scenario", scenario);
  replay->add_option("--streams", ids, "stream ids (default all)")->delimiter(',');
  replay->add_option("--duration", replay_duration);
  replay->add_option("--format", format, "default: from the file extension")->check(CLI::IsMember({"binary", "ndjson"}));
  replay->add_option("--out", replay_out);
  replay->add_option("--input", input, "decode this trace into summaries instead");

  auto* serve = app.add_subcommand("serve", "run the gateway with its HTTP/WebSocket API");
  uint16_t port = 8080;
  std::string address = "127.0.0.1", store_dir = "store", checkpoint, fl_log;
  bool fast = false, start_all = false, no_forecasts = false;
  int period_ms = 0;
  serve->add_option("--scenario", scenario);
  serve->add_option("--port", port);
  serve->add_option("--address", address);
  serve->add_option("--store-dir", store_dir);
  serve->add_flag("--fast", fast, "replay traces as fast as possible");
  serve->add_flag("--start-all", start_all, "start every stream on boot");
  serve->add_flag("--no-forecast", no_forecasts);
  serve->add_option("--checkpoint", checkpoint, "GraphGRU checkpoint (trained and saved if missing)");
  serve->add_option("--fl-log", fl_log, "round log served at /v1/fl/rounds");
  serve->add_option("--forecast-period-ms", period_ms);

  auto* graph = app.add_subcommand("graph", "traffic graph tools");
  std::string action = "coarsen";
  int minutes = 240;
  graph->add_option("action", action, "coarsen|calibrate")->check(CLI::IsMember({"coarsen", "calibrate"}));
  graph->add_option("--scenario", scenario);
  graph->add_option("--minutes", minutes);

  CLI11_PARSE(app, argc, argv);
  try {
    if (run->parsed()) return cmd_run(scenario, mode, out_dir, duration, no_forecast, no_fl, no_sync);
    if (sweep_cmd->parsed()) return cmd_sweep(policy, fleet, scenario, streams, fps, sweep_out);
    if (fl_run->parsed()) return cmd_fl(scenario, clients_file, rounds, tau, epochs, target_frames, out_dir);
    if (replay->parsed()) return cmd_replay(scenario, ids, replay_duration, format, replay_out, input);
    if (serve->parsed())
      return cmd_serve(scenario, port, address, store_dir, fast, start_all, !no_forecasts, checkpoint, fl_log,
                       period_ms);
    if (graph->parsed()) return cmd_graph(action, scenario, minutes);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
