#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cityfabric/edge_worker.hpp"
#include "cityfabric/emulator.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/fl.hpp"
#include "cityfabric/forecast.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/graph.hpp"
#include "cityfabric/http.hpp"
#include "cityfabric/runner.hpp"
#include "cityfabric/scenario.hpp"
#include "cityfabric/scheduler.hpp"
#include "cityfabric/store.hpp"

namespace py = pybind11;
using namespace cityfabric;
using nlohmann::json;

namespace {

// JSON crosses the boundary as text; the python side sees plain dicts and lists.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::object& o) { return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>()); }

ScenarioConfig scenario_arg(const std::string& name_or_path) {
  return load_scenario(resolve_scenario_path(name_or_path));
}

MinuteSeries series_arg(const std::vector<std::vector<double>>& values, const std::vector<std::vector<int>>& mask) {
  MinuteSeries s;
  const auto J = static_cast<Eigen::Index>(values.size());
  const auto T = J ? static_cast<Eigen::Index>(values[0].size()) : 0;
  s.values.resize(J, T);
  s.mask = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(J, T);
  for (Eigen::Index j = 0; j < J; ++j) {
    s.junctions.push_back("j" + std::to_string(j));
    if (static_cast<Eigen::Index>(values[static_cast<size_t>(j)].size()) != T)
      throw Error(ErrorCode::kShapeMismatch, "ragged values");
    for (Eigen::Index t = 0; t < T; ++t) {
      s.values(j, t) = values[static_cast<size_t>(j)][static_cast<size_t>(t)];
      if (!mask.empty()) s.mask(j, t) = mask.at(static_cast<size_t>(j)).at(static_cast<size_t>(t)) != 0;
    }
  }
  return s;
}

// Gateway over a scenario, driven through the same router as the HTTP server.
class PyGateway {
 public:
  PyGateway(const std::string& scenario, const std::filesystem::path& store_dir, bool fast) {
    GatewayOptions o;
    o.store_dir = store_dir;
    o.fast_forward = fast;
    o.store_sync = false;
    o.tick_thread = false;
    gw_ = std::make_unique<Gateway>(scenario_arg(scenario), o);
  }
  py::tuple request(const std::string& method, const std::string& target, const std::string& body) {
    HttpResponse r;
    {
      py::gil_scoped_release release;
      r = handle_request(*gw_, method, target, body);
    }
    return py::make_tuple(r.status, to_py(json::parse(r.body)));
  }
  void wait_idle() {
    py::gil_scoped_release release;
    gw_->wait_streams_idle();
  }
  void record_tick() { gw_->record_tick(); }
  void drain() {
    py::gil_scoped_release release;
    gw_->drain();
  }

 private:
  std::unique_ptr<Gateway> gw_;
};

class PyStore {
 public:
  PyStore(const std::filesystem::path& dir, std::vector<std::string> cameras, size_t num_classes, bool sync) {
    StoreOptions o;
    o.dir = dir;
    o.cameras = std::move(cameras);
    o.num_classes = num_classes;
    o.sync = sync;
    store_ = std::make_unique<TimeSeriesStore>(o);
  }
  py::dict ingest(const py::object& summary) {
    const auto ack = store_->ingest(summary_from_json(from_py(summary)));
    py::dict d;
    d["records_written"] = ack.records_written;
    d["records_changed"] = ack.records_changed;
    return d;
  }
  std::optional<Counts> get(const std::string& camera, int64_t ts) const { return store_->get(camera, ts); }
  uint64_t record_count() const { return store_->record_count(); }
  void compact() { store_->compact(); }

 private:
  std::unique_ptr<TimeSeriesStore> store_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cityfabric core bindings";

  static py::exception<Error> error_type(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type.ptr())(std::string(to_string(e.code())), std::string(e.what()));
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("load_scenario", [](const std::string& s) { return to_py(scenario_to_json(scenario_arg(s))); },
        py::arg("name_or_path"), "Resolved scenario as a dict.");
  m.def("validate_scenario", [](const std::string& text) { parse_scenario(text); }, py::arg("text"));

  m.def(
      "choose_device",
      [](const std::vector<uint32_t>& remaining, uint32_t fps, const std::string& policy) {
        return choose_device(remaining, fps, parse_policy(policy));
      },
      py::arg("remaining"), py::arg("fps"), py::arg("policy") = "bestfit");
  m.def(
      "sweep",
      [](const std::string& fleet_or_scenario, const std::vector<size_t>& counts, const std::string& policy,
         uint32_t fps) {
        auto path = resolve_scenario_path(fleet_or_scenario);
        auto fleet = std::make_shared<Fleet>(load_fleet(path));
        py::list out;
        for (const auto& r : sweep(fleet, counts, parse_policy(policy), fps)) {
          auto j = metrics_to_json(r.metrics);
          j["n_streams"] = r.n_streams;
          j["active"] = r.active;
          out.append(to_py(j));
        }
        return out;
      },
      py::arg("fleet"), py::arg("stream_counts"), py::arg("policy") = "bestfit", py::arg("fps") = 25);

  m.def(
      "arrival_counts",
      [](const std::string& scenario, const std::string& stream_id, double duration_s) {
        const auto cfg = scenario_arg(scenario);
        const auto& sc = cfg.stream(stream_id);
        return arrival_counts(sc.desc, sc.process, duration_s, cfg.classes.size());
      },
      py::arg("scenario"), py::arg("stream_id"), py::arg("duration_s"));
  m.def(
      "aggregate_stream",
      [](const std::string& scenario, const std::string& stream_id, double duration_s) {
        const auto cfg = scenario_arg(scenario);
        const auto& sc = cfg.stream(stream_id);
        const auto events = generate_stream(sc.desc, sc.process, duration_s);
        py::list out;
        for (const auto& s : aggregate(events, stream_id, cfg.classes.size(), cfg.intervals.window_len_s, 2,
                                       static_cast<int64_t>(duration_s)))
          out.append(to_py(summary_to_json(s)));
        return out;
      },
      py::arg("scenario"), py::arg("stream_id"), py::arg("duration_s"),
      "Flow summaries from replaying one stream through the window aggregator.");

  m.def(
      "coarse_graph",
      [](const std::string& scenario) { return to_py(coarse_graph_to_json(coarsen(scenario_arg(scenario).road_graph))); },
      py::arg("scenario"));
  m.def(
      "allocate_edge_flows",
      [](const std::string& scenario, const std::map<std::string, double>& counts, const std::string& weighting) {
        const auto cfg = scenario_arg(scenario);
        const auto cg = coarsen(cfg.road_graph);
        AllocationOptions o = cfg.allocation;
        if (!weighting.empty()) o.weighting = parse_weighting(weighting);
        const auto f = allocate_edge_flows(counts, cg, o);
        py::dict flows;
        for (size_t e = 0; e < f.flow.size(); ++e) flows[py::str(cg.edge_name(e))] = f.flow[e];
        py::dict d;
        d["flows"] = flows;
        d["residue"] = f.residue;
        return d;
      },
      py::arg("scenario"), py::arg("vertex_counts"), py::arg("weighting") = "");

  m.def(
      "evaluate_baseline",
      [](const std::string& model, const std::vector<std::vector<double>>& values,
         const std::vector<std::vector<int>>& mask, int lag, int horizon, int period) {
        const auto s = series_arg(values, mask);
        if (model == "historical_average") return evaluate(HistoricalAverage(), s, lag, horizon);
        if (model == "seasonal_naive") return evaluate(SeasonalNaive(period), s, lag, horizon);
        throw Error(ErrorCode::kInvalidArgument, "unknown baseline '" + model + "'");
      },
      py::arg("model"), py::arg("values"), py::arg("mask") = std::vector<std::vector<int>>{}, py::arg("lag"),
      py::arg("horizon"), py::arg("period") = 5, "Rolling-origin RMSE per horizon minute.");

  m.def(
      "fedavg",
      [](const std::vector<std::pair<std::vector<double>, size_t>>& updates) {
        std::vector<ClientUpdate> ups;
        for (size_t i = 0; i < updates.size(); ++i)
          ups.push_back({"c" + std::to_string(i), updates[i].first, updates[i].second});
        return fedavg(ups);
      },
      py::arg("updates"), "Sample-weighted average of (weights, n_samples) pairs.");
  m.def(
      "client_frames",
      [](const std::string& scenario, size_t client, int target_frames) {
        const auto cfg = scenario_arg(scenario);
        auto fl = cfg.fl;
        if (target_frames > 0) fl.target_frames = target_frames;
        return build_client_dataset(fl, client, cfg.classes.size()).frames.size();
      },
      py::arg("scenario"), py::arg("client"), py::arg("target_frames") = 0);

  m.def(
      "run_scenario",
      [](const std::string& scenario, const std::filesystem::path& out_dir, bool forecast, bool fl,
         std::optional<int64_t> duration_s) {
        RunOptions o;
        o.out_dir = out_dir;
        o.forecast = forecast;
        o.fl = fl;
        o.store_sync = false;
        o.duration_s = duration_s;
        const auto cfg = scenario_arg(scenario);
        RunReport r;
        {
          py::gil_scoped_release release;
          r = run_scenario(cfg, o);
        }
        return to_py(r.to_json());
      },
      py::arg("scenario"), py::arg("out_dir"), py::arg("forecast") = true, py::arg("fl") = true,
      py::arg("duration_s") = py::none());

  py::class_<PyStore>(m, "Store")
      .def(py::init<const std::filesystem::path&, std::vector<std::string>, size_t, bool>(), py::arg("dir"),
           py::arg("cameras"), py::arg("num_classes") = 8, py::arg("sync") = true)
      .def("ingest", &PyStore::ingest, py::arg("summary"))
      .def("get", &PyStore::get, py::arg("camera"), py::arg("ts_s"))
      .def("record_count", &PyStore::record_count)
      .def("compact", &PyStore::compact);

  py::class_<PyGateway>(m, "Gateway")
      .def(py::init<const std::string&, const std::filesystem::path&, bool>(), py::arg("scenario"),
           py::arg("store_dir"), py::arg("fast") = true)
      .def("request", &PyGateway::request, py::arg("method"), py::arg("target"), py::arg("body") = "",
           "Routes one /v1 request; returns (status, body).")
      .def("wait_idle", &PyGateway::wait_idle)
      .def("record_tick", &PyGateway::record_tick)
      .def("drain", &PyGateway::drain);
}
