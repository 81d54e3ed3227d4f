#include "cityfabric/scenario.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"

namespace cityfabric {

using nlohmann::json;

namespace {

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw Error(ErrorCode::kParse, "field " + path + ": " + what);
}

const json& req(const json& j, const char* key, const std::string& path) {
  if (!j.is_object()) field_error(path, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) field_error(path + "/" + key, "missing");
  return *it;
}

template <class T>
T get_as(const json& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    field_error(path, std::string("wrong type (") + v.type_name() + ")");
  }
}

template <class T>
T opt(const json& j, const char* key, T fallback, const std::string& path) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return get_as<T>(*it, path + "/" + key);
}

std::filesystem::path read_path_rel(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    size_t line = 1 + static_cast<size_t>(std::count(text.begin(), text.begin() + std::min(e.byte, text.size()), '\n'));
    throw Error(ErrorCode::kParse, path.string() + " line " + std::to_string(line) + ": " + e.what());
  }
}

TrafficProcess parse_process(const json& j, const std::string& path, size_t num_classes) {
  TrafficProcess p;
  if (!j.is_object()) field_error(path, "expected an object");
  p.rate_per_min = opt<double>(j, "rate_per_min", 0.0, path);
  if (auto it = j.find("segments"); it != j.end()) {
    for (size_t i = 0; i < it->size(); ++i) {
      const auto sp = path + "/segments/" + std::to_string(i);
      const auto& s = (*it)[i];
      p.segments.push_back({get_as<double>(req(s, "from_s", sp), sp + "/from_s"),
                            get_as<double>(req(s, "rate_per_min", sp), sp + "/rate_per_min")});
    }
  }
  p.diurnal_amplitude = opt<double>(j, "diurnal_amplitude", 0.0, path);
  p.diurnal_period_s = opt<double>(j, "diurnal_period_s", 86400.0, path);
  p.diurnal_phase_s = opt<double>(j, "diurnal_phase_s", 0.0, path);
  if (auto it = j.find("modulation"); it != j.end()) {
    const auto mp = path + "/modulation";
    p.modulation.sigma = opt<double>(*it, "sigma", 0.0, mp);
    p.modulation.rho = opt<double>(*it, "rho", 0.0, mp);
    p.modulation.segment_s = opt<double>(*it, "segment_s", 60.0, mp);
    p.modulation.shared_weight = opt<double>(*it, "shared_weight", 0.0, mp);
    p.modulation.shared_seed = opt<uint64_t>(*it, "shared_seed", 0, mp);
  }
  p.class_mix = opt<std::vector<double>>(j, "class_mix", {}, path);
  if (p.class_mix.empty()) p.class_mix = default_class_mix(num_classes);
  p.dwell_frames = opt<double>(j, "dwell_frames", 25.0, path);
  p.dwell_jitter = opt<double>(j, "dwell_jitter", 0.5, path);
  try {
    p.validate(num_classes);
  } catch (const Error& e) {
    field_error(path, e.what());
  }
  return p;
}

DeviceProfile parse_device(const json& d, const std::string& path, const json& table) {
  DeviceProfile dev;
  dev.id = get_as<std::string>(req(d, "id", path), path + "/id");
  dev.model_name = opt<std::string>(d, "model", "", path);
  const json* model = nullptr;
  if (!dev.model_name.empty() && table.is_object()) {
    auto models = table.find("models");
    if (models != table.end() && models->contains(dev.model_name)) model = &(*models)[dev.model_name];
  }
  if (!dev.model_name.empty() && !model && !d.contains("fps_capacity"))
    throw Error(ErrorCode::kReference, "field " + path + "/model: unknown device model '" + dev.model_name + "'");
  auto pick = [&](const char* key) -> const json* {
    if (d.contains(key)) return &d[key];
    if (model && model->contains(key)) return &(*model)[key];
    return nullptr;
  };
  auto num = [&](const char* key, bool required) -> double {
    const json* v = pick(key);
    if (!v) {
      if (required) field_error(path + "/" + key, "missing");
      return 0.0;
    }
    return get_as<double>(*v, path + "/" + key);
  };
  dev.fps_capacity = static_cast<uint32_t>(num("fps_capacity", true));
  dev.tops = num("tops", true);
  dev.power_idle_w = num("power_idle_w", false);
  dev.power_per_fps_w = num("power_per_fps_w", false);
  try {
    dev.validate();
  } catch (const Error& e) {
    field_error(path, e.what());
  }
  return dev;
}

}  // namespace

TrafficProcess traffic_process_from_json(const json& j, size_t num_classes) {
  return parse_process(j, "", num_classes);
}

json traffic_process_to_json(const TrafficProcess& p) {
  json segs = json::array();
  for (const auto& s : p.segments) segs.push_back({{"from_s", s.from_s}, {"rate_per_min", s.rate_per_min}});
  return {{"rate_per_min", p.rate_per_min},
          {"segments", segs},
          {"diurnal_amplitude", p.diurnal_amplitude},
          {"diurnal_period_s", p.diurnal_period_s},
          {"diurnal_phase_s", p.diurnal_phase_s},
          {"modulation",
           {{"sigma", p.modulation.sigma},
            {"rho", p.modulation.rho},
            {"segment_s", p.modulation.segment_s},
            {"shared_weight", p.modulation.shared_weight},
            {"shared_seed", p.modulation.shared_seed}}},
          {"class_mix", p.class_mix},
          {"dwell_frames", p.dwell_frames},
          {"dwell_jitter", p.dwell_jitter}};
}

std::vector<DeviceProfile> devices_from_json(const json& j, const std::filesystem::path& base_dir) {
  json table;
  if (auto it = j.find("power_table"); it != j.end()) {
    if (it->is_string()) table = read_json_file(read_path_rel(base_dir, it->get<std::string>()));
    else table = *it;
  }
  const auto& devs = req(j, "devices", "");
  if (!devs.is_array()) field_error("/devices", "expected an array");
  std::vector<DeviceProfile> out;
  IdTable ids;
  for (size_t i = 0; i < devs.size(); ++i) {
    auto d = parse_device(devs[i], "/devices/" + std::to_string(i), table);
    if (!ids.insert(d.id)) throw Error(ErrorCode::kDuplicateId, "device '" + d.id + "' listed twice");
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<DeviceProfile> load_fleet(const std::filesystem::path& path) {
  return devices_from_json(read_json_file(path), path.parent_path());
}

FlConfig fl_config_from_json(const json& j, size_t num_classes) {
  FlConfig fl;
  const std::string p = "/fl";
  fl.rounds = opt<int>(j, "rounds", fl.rounds, p);
  fl.tau = opt<double>(j, "tau", fl.tau, p);
  fl.epochs = opt<int>(j, "epochs", fl.epochs, p);
  fl.lr = opt<double>(j, "lr", fl.lr, p);
  fl.batch_size = opt<int>(j, "batch_size", fl.batch_size, p);
  fl.window_s = opt<int>(j, "window_s", fl.window_s, p);
  fl.duration_min = opt<int>(j, "duration_min", fl.duration_min, p);
  fl.target_frames = opt<int>(j, "target_frames", fl.target_frames, p);
  fl.holdout_per_class = opt<int>(j, "holdout_per_class", fl.holdout_per_class, p);
  fl.seed = opt<uint64_t>(j, "seed", fl.seed, p);
  fl.concurrent = opt<bool>(j, "concurrent", fl.concurrent, p);
  if (!(fl.tau > 0.0 && fl.tau < 1.0)) field_error(p + "/tau", "must be in (0, 1)");
  if (fl.window_s <= 0 || fl.duration_min <= 0 || fl.rounds < 0 || fl.epochs < 0)
    field_error(p, "window_s and duration_min must be > 0; rounds and epochs >= 0");
  IdTable ids;
  if (auto it = j.find("clients"); it != j.end()) {
    for (size_t i = 0; i < it->size(); ++i) {
      const auto cp = p + "/clients/" + std::to_string(i);
      const auto& c = (*it)[i];
      FlClientConfig cc;
      cc.id = get_as<std::string>(req(c, "id", cp), cp + "/id");
      cc.tier = opt<std::string>(c, "tier", "", cp);
      cc.streams = opt<uint32_t>(c, "streams", 1, cp);
      cc.class_mix = opt<std::vector<double>>(c, "class_mix", {}, cp);
      if (cc.class_mix.empty()) cc.class_mix = default_class_mix(num_classes);
      if (cc.class_mix.size() != num_classes) field_error(cp + "/class_mix", "length must equal class count");
      cc.rate_per_min = opt<double>(c, "rate_per_min", cc.rate_per_min, cp);
      cc.noise_rate = opt<double>(c, "noise_rate", cc.noise_rate, cp);
      if (auto conf = c.find("confidence"); conf != c.end()) {
        cc.confidence.alpha = opt<double>(*conf, "alpha", cc.confidence.alpha, cp + "/confidence");
        cc.confidence.beta = opt<double>(*conf, "beta", cc.confidence.beta, cp + "/confidence");
        cc.confidence.fixed = opt<double>(*conf, "fixed", cc.confidence.fixed, cp + "/confidence");
      }
      cc.latency_mean_s = opt<double>(c, "latency_mean_s", cc.latency_mean_s, cp);
      cc.latency_shape = opt<double>(c, "latency_shape", cc.latency_shape, cp);
      if (cc.noise_rate < 0.0 || cc.noise_rate > 1.0) field_error(cp + "/noise_rate", "must be in [0, 1]");
      if (cc.latency_mean_s <= 0.0 || cc.latency_shape <= 0.0)
        field_error(cp, "latency_mean_s and latency_shape must be > 0");
      if (!ids.insert(cc.id)) throw Error(ErrorCode::kDuplicateId, "FL client '" + cc.id + "' listed twice");
      fl.clients.push_back(std::move(cc));
    }
  }
  return fl;
}

json fl_config_to_json(const FlConfig& fl) {
  json clients = json::array();
  for (const auto& c : fl.clients) {
    clients.push_back({{"id", c.id},
                       {"tier", c.tier},
                       {"streams", c.streams},
                       {"class_mix", c.class_mix},
                       {"rate_per_min", c.rate_per_min},
                       {"noise_rate", c.noise_rate},
                       {"confidence", {{"alpha", c.confidence.alpha}, {"beta", c.confidence.beta}, {"fixed", c.confidence.fixed}}},
                       {"latency_mean_s", c.latency_mean_s},
                       {"latency_shape", c.latency_shape}});
  }
  return {{"rounds", fl.rounds},
          {"tau", fl.tau},
          {"epochs", fl.epochs},
          {"lr", fl.lr},
          {"batch_size", fl.batch_size},
          {"window_s", fl.window_s},
          {"duration_min", fl.duration_min},
          {"target_frames", fl.target_frames},
          {"holdout_per_class", fl.holdout_per_class},
          {"seed", fl.seed},
          {"concurrent", fl.concurrent},
          {"clients", std::move(clients)}};
}

ScenarioConfig scenario_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, "scenario must be a JSON object");
  ScenarioConfig cfg;
  cfg.name = opt<std::string>(j, "name", "scenario", "");
  cfg.seed = opt<uint64_t>(j, "seed", 1, "");

  if (auto it = j.find("classes"); it != j.end()) {
    auto names = get_as<std::vector<std::string>>(*it, "/classes");
    if (names.empty()) field_error("/classes", "must not be empty");
    IdTable seen;
    for (const auto& n : names)
      if (!seen.insert(n)) throw Error(ErrorCode::kDuplicateId, "class '" + n + "' listed twice");
    cfg.classes = ClassList(std::move(names));
  }
  const size_t C = cfg.classes.size();

  // road graph first so streams can be checked against it
  try {
    cfg.road_graph = road_graph_from_json(req(j, "road_graph", ""));
  } catch (const json::exception& e) {
    field_error("/road_graph", e.what());
  }

  cfg.devices = devices_from_json(j, base_dir);

  json defaults = j.value("traffic_defaults", json::object());
  const auto& streams = req(j, "streams", "");
  if (!streams.is_array()) field_error("/streams", "expected an array");
  IdTable ids;
  for (size_t i = 0; i < streams.size(); ++i) {
    const auto sp = "/streams/" + std::to_string(i);
    const auto& s = streams[i];
    StreamConfig sc;
    sc.desc.id = get_as<std::string>(req(s, "id", sp), sp + "/id");
    sc.desc.junction_id = get_as<std::string>(req(s, "junction_id", sp), sp + "/junction_id");
    sc.desc.fps = opt<uint32_t>(s, "fps", 25, sp);
    sc.desc.trace_seed = opt<uint64_t>(s, "trace_seed", derive_seed(cfg.seed, i), sp);
    sc.desc.index = static_cast<uint32_t>(i);
    if (sc.desc.fps == 0) field_error(sp + "/fps", "must be > 0");
    if (!ids.insert(sc.desc.id)) throw Error(ErrorCode::kDuplicateId, "stream '" + sc.desc.id + "' listed twice");
    auto v = cfg.road_graph.find(sc.desc.junction_id);
    if (!v)
      throw Error(ErrorCode::kReference,
                  "field " + sp + "/junction_id: junction '" + sc.desc.junction_id + "' is not in the road graph");
    if (!cfg.road_graph.vertices[*v].camera)
      throw Error(ErrorCode::kReference, "field " + sp + "/junction_id: junction '" + sc.desc.junction_id +
                                             "' has no camera");
    json proc = defaults;
    if (auto pit = s.find("process"); pit != s.end()) proc.merge_patch(*pit);
    sc.process = parse_process(proc, sp + "/process", C);
    cfg.streams.push_back(std::move(sc));
  }

  if (auto it = j.find("intervals"); it != j.end()) {
    const std::string p = "/intervals";
    auto& iv = cfg.intervals;
    iv.duration_s = opt<int64_t>(*it, "duration_s", iv.duration_s, p);
    iv.window_len_s = opt<int>(*it, "window_len_s", iv.window_len_s, p);
    iv.lateness_s = opt<int>(*it, "lateness_s", iv.lateness_s, p);
    iv.tail_horizon_s = opt<int64_t>(*it, "tail_horizon_s", iv.tail_horizon_s, p);
    iv.forecast_period_s = opt<int>(*it, "forecast_period_s", iv.forecast_period_s, p);
    if (iv.duration_s <= 0) field_error(p + "/duration_s", "must be > 0");
    if (iv.window_len_s < 5 || iv.window_len_s > 30) field_error(p + "/window_len_s", "must be within [5, 30]");
    if (iv.lateness_s < 0) field_error(p + "/lateness_s", "must be >= 0");
    if (iv.forecast_period_s <= 0) field_error(p + "/forecast_period_s", "must be > 0");
  }

  if (auto it = j.find("congestion_thresholds"); it != j.end()) {
    const std::string p = "/congestion_thresholds";
    cfg.congestion_thresholds.t1 = get_as<double>(req(*it, "t1", p), p + "/t1");
    cfg.congestion_thresholds.t2 = get_as<double>(req(*it, "t2", p), p + "/t2");
    try {
      cfg.congestion_thresholds.validate();
    } catch (const Error& e) {
      field_error(p, e.what());
    }
  }

  if (auto it = j.find("allocation"); it != j.end()) {
    try {
      cfg.allocation.weighting = parse_weighting(opt<std::string>(*it, "weighting", "multiplicity", "/allocation"));
      cfg.allocation.endpoint = parse_endpoint_rule(opt<std::string>(*it, "endpoint", "sum", "/allocation"));
    } catch (const Error& e) {
      field_error("/allocation", e.what());
    }
  }

  if (auto it = j.find("scheduler"); it != j.end()) {
    try {
      cfg.policy = parse_policy(opt<std::string>(*it, "policy", "bestfit", "/scheduler"));
    } catch (const Error& e) {
      field_error("/scheduler/policy", e.what());
    }
  }

  if (auto it = j.find("forecast"); it != j.end()) {
    const std::string p = "/forecast";
    auto& f = cfg.forecast;
    f.model = opt<std::string>(*it, "model", f.model, p);
    f.lag_minutes = opt<int>(*it, "lag_minutes", f.lag_minutes, p);
    f.horizon_minutes = opt<int>(*it, "horizon_minutes", f.horizon_minutes, p);
    f.step_minutes = opt<int>(*it, "step_minutes", f.step_minutes, p);
    f.hidden = opt<int>(*it, "hidden", f.hidden, p);
    f.epochs = opt<int>(*it, "epochs", f.epochs, p);
    f.lr = opt<double>(*it, "lr", f.lr, p);
    f.lr_decay = opt<double>(*it, "lr_decay", f.lr_decay, p);
    f.batch_size = opt<int>(*it, "batch_size", f.batch_size, p);
    f.seasonal_period = opt<int>(*it, "seasonal_period", f.seasonal_period, p);
    f.history_minutes = opt<int>(*it, "history_minutes", f.history_minutes, p);
    f.test_minutes = opt<int>(*it, "test_minutes", f.test_minutes, p);
    f.seed = opt<uint64_t>(*it, "seed", f.seed, p);
    if (f.model != "graph_gru" && f.model != "historical_average" && f.model != "seasonal_naive")
      field_error(p + "/model", "unknown model '" + f.model + "'");
    if (f.lag_minutes <= 0 || f.horizon_minutes <= 0 || f.step_minutes <= 0)
      field_error(p, "lag, horizon and step must be > 0");
    if (f.horizon_minutes % f.step_minutes != 0) field_error(p, "horizon must be divisible by step");
    if (f.hidden <= 0 || f.batch_size <= 0) field_error(p, "hidden and batch_size must be > 0");
  }

  if (auto it = j.find("fl"); it != j.end()) cfg.fl = fl_config_from_json(*it, C);

  validate(cfg);
  return cfg;
}

void validate(const ScenarioConfig& cfg) {
  cfg.road_graph.validate();
  Fleet fleet(cfg.devices);  // rejects duplicates and invalid profiles
  IdTable ids;
  for (const auto& s : cfg.streams) {
    if (!ids.insert(s.desc.id)) throw Error(ErrorCode::kDuplicateId, "stream '" + s.desc.id + "' listed twice");
    if (!cfg.road_graph.find(s.desc.junction_id))
      throw Error(ErrorCode::kReference, "junction '" + s.desc.junction_id + "' is not in the road graph");
    s.process.validate(cfg.classes.size());
  }
  cfg.congestion_thresholds.validate();
}

ScenarioConfig parse_scenario(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    size_t line = 1 + static_cast<size_t>(std::count(text.begin(), text.begin() + std::min(e.byte, text.size()), '\n'));
    throw Error(ErrorCode::kParse, "line " + std::to_string(line) + ": " + e.what());
  }
  return scenario_from_json(j, base_dir);
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open scenario " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_scenario(ss.str(), path.parent_path());
  } catch (const Error& e) {
    throw Error(e.code(), path.filename().string() + ": " + std::string(e.what()));
  }
}

json scenario_to_json(const ScenarioConfig& cfg) {
  json streams = json::array();
  for (const auto& s : cfg.streams) {
    streams.push_back({{"id", s.desc.id},
                       {"junction_id", s.desc.junction_id},
                       {"fps", s.desc.fps},
                       {"trace_seed", s.desc.trace_seed},
                       {"process", traffic_process_to_json(s.process)}});
  }
  json devices = json::array();
  for (const auto& d : cfg.devices) {
    devices.push_back({{"id", d.id},
                       {"model", d.model_name},
                       {"fps_capacity", d.fps_capacity},
                       {"tops", d.tops},
                       {"power_idle_w", d.power_idle_w},
                       {"power_per_fps_w", d.power_per_fps_w}});
  }
  const auto& iv = cfg.intervals;
  const auto& f = cfg.forecast;
  return {{"name", cfg.name},
          {"seed", cfg.seed},
          {"classes", cfg.classes.names()},
          {"streams", std::move(streams)},
          {"devices", std::move(devices)},
          {"road_graph", road_graph_to_json(cfg.road_graph)},
          {"intervals",
           {{"duration_s", iv.duration_s},
            {"window_len_s", iv.window_len_s},
            {"lateness_s", iv.lateness_s},
            {"tail_horizon_s", iv.tail_horizon_s},
            {"forecast_period_s", iv.forecast_period_s}}},
          {"congestion_thresholds", {{"t1", cfg.congestion_thresholds.t1}, {"t2", cfg.congestion_thresholds.t2}}},
          {"allocation",
           {{"weighting", to_string(cfg.allocation.weighting)}, {"endpoint", to_string(cfg.allocation.endpoint)}}},
          {"scheduler", {{"policy", to_string(cfg.policy)}}},
          {"forecast",
           {{"model", f.model},
            {"lag_minutes", f.lag_minutes},
            {"horizon_minutes", f.horizon_minutes},
            {"step_minutes", f.step_minutes},
            {"hidden", f.hidden},
            {"epochs", f.epochs},
            {"lr", f.lr},
            {"lr_decay", f.lr_decay},
            {"batch_size", f.batch_size},
            {"seasonal_period", f.seasonal_period},
            {"history_minutes", f.history_minutes},
            {"test_minutes", f.test_minutes},
            {"seed", f.seed}}},
          {"fl", fl_config_to_json(cfg.fl)}};
}

std::string serialize_scenario(const ScenarioConfig& cfg) { return scenario_to_json(cfg).dump(2); }

std::vector<std::string> ScenarioConfig::camera_ids() const {
  std::vector<std::string> out;
  out.reserve(streams.size());
  for (const auto& s : streams) out.push_back(s.desc.id);
  return out;
}

std::vector<StreamDescriptor> ScenarioConfig::descriptors() const {
  std::vector<StreamDescriptor> out;
  out.reserve(streams.size());
  for (const auto& s : streams) out.push_back(s.desc);
  return out;
}

const StreamConfig& ScenarioConfig::stream(const std::string& id) const {
  for (const auto& s : streams)
    if (s.desc.id == id) return s;
  throw Error(ErrorCode::kUnknownStream, "stream '" + id + "' is not in the scenario");
}

bool ScenarioConfig::operator==(const ScenarioConfig& o) const {
  return name == o.name && seed == o.seed && classes == o.classes && streams == o.streams && devices == o.devices &&
         road_graph == o.road_graph && intervals == o.intervals && congestion_thresholds == o.congestion_thresholds &&
         allocation.weighting == o.allocation.weighting && allocation.endpoint == o.allocation.endpoint &&
         policy == o.policy && forecast == o.forecast && fl == o.fl;
}

std::filesystem::path resolve_scenario_path(const std::string& name_or_path) {
  std::filesystem::path p(name_or_path);
  if (std::filesystem::exists(p)) return p;
  std::vector<std::filesystem::path> roots;
  if (const char* env = std::getenv("CITYFABRIC_SCENARIOS")) roots.emplace_back(env);
  roots.emplace_back("scenarios");
#ifdef CITYFABRIC_SOURCE_DIR
  roots.emplace_back(std::filesystem::path(CITYFABRIC_SOURCE_DIR) / "scenarios");
#endif
  for (const auto& root : roots) {
    for (const auto& cand : {root / p, root / (name_or_path + ".json")})
      if (std::filesystem::exists(cand)) return cand;
  }
  throw Error(ErrorCode::kIo, "scenario '" + name_or_path + "' not found");
}

}  // namespace cityfabric
