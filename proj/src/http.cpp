#include "cityfabric/http.hpp"

#include <sys/socket.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/forecast.hpp"

namespace cityfabric {

namespace beast = boost::beast;
namespace bhttp = boost::beast::http;
namespace websocket = boost::beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;
using nlohmann::json;

namespace {

std::string percent_decode(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '+') {
      out += ' ';
    } else if (s[i] == '%' && i + 2 < s.size()) {
      out += static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16));
      i += 2;
    } else {
      out += s[i];
    }
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    if (end > start) out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

int64_t int_param(const Target& t, const std::string& key, std::optional<int64_t> fallback = {}) {
  auto it = t.query.find(key);
  if (it == t.query.end()) {
    if (fallback) return *fallback;
    throw Error(ErrorCode::kInvalidArgument, "missing query parameter '" + key + "'");
  }
  try {
    size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidArgument, "query parameter '" + key + "' is not an integer");
  }
}

HttpResponse json_response(const json& j, int status = 200) { return {status, j.dump(), "application/json"}; }

json parse_body(std::string_view body) {
  if (body.empty()) return json::object();
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, std::string("request body: ") + e.what());
  }
}

std::vector<std::string> stream_selection(Gateway& gw, const json& body, const Target& t) {
  std::vector<std::string> ids;
  if (body.contains("streams")) {
    const auto& s = body["streams"];
    if (s.is_string() && s.get<std::string>() == "all") {
      for (const auto& sc : gw.config().streams) ids.push_back(sc.desc.id);
    } else if (s.is_array()) {
      for (const auto& v : s) ids.push_back(v.get<std::string>());
    } else {
      throw Error(ErrorCode::kInvalidArgument, "'streams' must be an array of ids or \"all\"");
    }
  } else if (auto it = t.query.find("ids"); it != t.query.end()) {
    ids = split_list(it->second);
  }
  return ids;
}

json flows_json(const FlowMatrix& m) {
  json counts = json::array();
  json missing = json::array();
  for (size_t c = 0; c < m.cameras.size(); ++c) {
    json cam = json::array();
    json miss = json::array();
    for (size_t s = 0; s < m.seconds(); ++s) {
      json row = json::array();
      for (size_t k = 0; k < m.num_classes; ++k) row.push_back(m.at(c, s, k));
      cam.push_back(std::move(row));
      miss.push_back(m.is_missing(c, s) ? 1 : 0);
    }
    counts.push_back(std::move(cam));
    missing.push_back(std::move(miss));
  }
  return {{"cameras", m.cameras}, {"from", m.from_s},       {"to", m.to_s},
          {"num_classes", m.num_classes}, {"counts", counts}, {"missing", missing}};
}

// Narrows a forecast to the requested horizon/step when it is a subset of what was issued.
json forecast_view(const Forecast& f, std::optional<int64_t> horizon, std::optional<int64_t> step) {
  if (!horizon && !step) return forecast_to_json(f);
  const int64_t st = step.value_or(1);
  const int64_t h = horizon.value_or(f.step_minutes.empty() ? 0 : f.step_minutes.back());
  if (st <= 0 || h <= 0 || h % st != 0)
    throw Error(ErrorCode::kInvalidArgument, "horizon must be a positive multiple of step");
  std::vector<Eigen::Index> cols;
  for (int64_t m = st; m <= h; m += st) {
    auto it = std::find(f.step_minutes.begin(), f.step_minutes.end(), static_cast<int>(m));
    if (it == f.step_minutes.end())
      throw Error(ErrorCode::kInvalidArgument, "the service does not issue a " + std::to_string(m) + "-minute step");
    cols.push_back(it - f.step_minutes.begin());
  }
  Forecast out;
  out.issued_at_s = f.issued_at_s;
  out.model_id = f.model_id;
  out.junctions = f.junctions;
  out.values.resize(f.values.rows(), static_cast<Eigen::Index>(cols.size()));
  for (size_t i = 0; i < cols.size(); ++i) {
    out.step_minutes.push_back(f.step_minutes[static_cast<size_t>(cols[i])]);
    out.values.col(static_cast<Eigen::Index>(i)) = f.values.col(cols[i]);
  }
  return forecast_to_json(out);
}

std::optional<int64_t> opt_param(const Target& t, const std::string& key) {
  if (!t.query.count(key)) return std::nullopt;
  return int_param(t, key);
}

HttpResponse route(Gateway& gw, std::string_view method, const Target& t, std::string_view body) {
  const auto& p = t.path;
  if (p == "/v1/health" && method == "GET") {
    return json_response({{"status", "ok"},
                          {"state", to_string(gw.status())},
                          {"scenario", gw.config().name},
                          {"scenario_s", gw.scenario_now_s()},
                          {"seq", gw.events().last_seq()},
                          {"records", gw.store().record_count()}});
  }
  if (p == "/v1/streams") {
    if (method == "GET") return json_response(gw.streams_json());
    const json b = parse_body(body);
    const auto ids = stream_selection(gw, b, t);
    if (method == "POST") {
      std::optional<PlacementPolicy> pol;
      if (b.contains("policy")) pol = parse_policy(b["policy"].get<std::string>());
      return json_response(gw.start_streams(ids, pol).to_json());
    }
    if (method == "DELETE") return json_response(gw.stop_streams(ids).to_json());
  }
  if (p == "/v1/scheduler/metrics" && method == "GET") {
    const auto snap = gw.placement();
    const int64_t last = int_param(t, "last", 300);
    const auto ticks = gw.ticks();
    json arr = json::array();
    const size_t begin = ticks.size() > static_cast<size_t>(std::max<int64_t>(last, 0))
                             ? ticks.size() - static_cast<size_t>(last) : 0;
    for (size_t i = begin; i < ticks.size(); ++i) arr.push_back(tick_to_json(ticks[i]));
    return json_response({{"current", metrics_to_json(metrics(*snap))},
                          {"streams", snap->stream_count()},
                          {"policy", to_string(gw.policy())},
                          {"ticks", arr}});
  }
  if (p == "/v1/scheduler/policy" && method == "POST") {
    const json b = parse_body(body);
    if (!b.contains("policy")) throw Error(ErrorCode::kInvalidArgument, "missing 'policy'");
    gw.set_policy(parse_policy(b["policy"].get<std::string>()));
    return json_response({{"policy", to_string(gw.policy())}});
  }
  if (p == "/v1/flows" && method == "GET") {
    std::vector<std::string> cams;
    if (auto it = t.query.find("cameras"); it != t.query.end()) cams = split_list(it->second);
    else cams = gw.store().cameras();
    const auto m = gw.store().query(cams, int_param(t, "from"), int_param(t, "to"));
    return json_response(flows_json(m));
  }
  if (p == "/v1/ingest" && method == "POST") {
    FlowSummary s;
    try {
      s = summary_from_json(parse_body(body));
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kMalformedSummary, e.what());
    }
    const auto ack = gw.store().ingest(s);
    return json_response({{"records_written", ack.records_written}, {"records_changed", ack.records_changed}});
  }
  if (p == "/v1/forecast" && method == "GET") {
    auto svc = gw.forecasts();
    auto f = svc ? svc->latest() : nullptr;
    if (!f) return json_response({{"error", "Unavailable"}, {"message", "no forecast issued yet"}}, 503);
    return json_response(forecast_view(*f, opt_param(t, "horizon"), opt_param(t, "step")));
  }
  if (p == "/v1/fl/rounds" && method == "GET") {
    return json_response({{"records", gw.fl_log()}});
  }
  if (p == "/v1/history" && method == "GET") {
    std::string target;
    if (auto it = t.query.find("segment"); it != t.query.end()) target = it->second;
    else if (auto c = t.query.find("camera"); c != t.query.end()) target = c->second;
    else throw Error(ErrorCode::kInvalidArgument, "history needs 'segment' or 'camera'");
    return json_response(gw.history(target, int_param(t, "from"), int_param(t, "to")).to_json());
  }
  if (p == "/v1/graph" && method == "GET") return json_response(gw.graph_json());
  if (p == "/v1/run/start" && method == "POST") {
    const json b = parse_body(body);
    if (gw.status() == RunStatus::kIdle) gw.begin();
    const auto ids = stream_selection(gw, b, t);
    json out = {{"state", to_string(gw.status())}};
    if (!ids.empty()) out["placement"] = gw.start_streams(ids).to_json();
    return json_response(out);
  }
  if (p == "/v1/run/stop" && method == "POST") {
    gw.drain();
    return json_response({{"state", to_string(gw.status())}});
  }
  return json_response({{"error", "NotFound"}, {"message", std::string(method) + " " + p}}, 404);
}

}  // namespace

Target parse_target(std::string_view target) {
  Target t;
  const auto q = target.find('?');
  t.path = std::string(target.substr(0, q));
  if (q == std::string_view::npos) return t;
  std::string_view rest = target.substr(q + 1);
  while (!rest.empty()) {
    const auto amp = rest.find('&');
    const auto part = rest.substr(0, amp);
    const auto eq = part.find('=');
    if (!part.empty()) {
      if (eq == std::string_view::npos) t.query[percent_decode(part)] = "";
      else t.query[percent_decode(part.substr(0, eq))] = percent_decode(part.substr(eq + 1));
    }
    if (amp == std::string_view::npos) break;
    rest = rest.substr(amp + 1);
  }
  return t;
}

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParse:
    case ErrorCode::kMalformedSummary:
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kDimensionMismatch:
      return 400;
    case ErrorCode::kUnknownStream:
    case ErrorCode::kUnknownCamera:
    case ErrorCode::kUnknownSegment:
      return 404;
    case ErrorCode::kInvalidState:
    case ErrorCode::kCapacityExhausted:
    case ErrorCode::kDuplicateId:
      return 409;
    default:
      return 500;
  }
}

HttpResponse handle_request(Gateway& gw, std::string_view method, std::string_view target, std::string_view body) {
  try {
    return route(gw, method, parse_target(target), body);
  } catch (const Error& e) {
    return json_response({{"error", to_string(e.code())}, {"message", e.what()}}, http_status_for(e.code()));
  } catch (const json::exception& e) {
    return json_response({{"error", "InvalidArgument"}, {"message", e.what()}}, 400);
  } catch (const std::exception& e) {
    return json_response({{"error", "Internal"}, {"message", e.what()}}, 500);
  }
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  struct Conn {
    tcp::socket socket;
    std::thread thread;
    int fd;  // survives the socket being moved into a websocket stream
    std::atomic<bool> done{false};
    explicit Conn(tcp::socket s) : socket(std::move(s)), fd(socket.native_handle()) {}
  };

  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread accept_thread;
  std::atomic<bool> stopping{false};
  std::mutex mu;
  std::list<std::shared_ptr<Conn>> conns;

  void reap() {
    std::lock_guard lock(mu);
    for (auto it = conns.begin(); it != conns.end();) {
      if ((*it)->done.load()) {
        if ((*it)->thread.joinable()) (*it)->thread.join();
        it = conns.erase(it);
      } else {
        ++it;
      }
    }
  }
};

namespace {

template <class Stream>
void ws_send(Stream& ws, json frame) {
  ws.write(net::buffer(frame.dump()));
}

void ws_session(Gateway& gw, tcp::socket socket, const bhttp::request<bhttp::string_body>& req,
                const HttpServerOptions& options, const std::atomic<bool>& stopping) {
  const Target t = parse_target(std::string_view(req.target().data(), req.target().size()));
  const bool known = t.path == "/v1/nowcast" || t.path == "/v1/events" || t.path == "/v1/forecast/stream";
  std::shared_ptr<ForecastService> svc;
  if (t.path == "/v1/forecast/stream") svc = gw.forecasts();
  if (!known || (t.path == "/v1/forecast/stream" && !svc)) {
    bhttp::response<bhttp::string_body> res{known ? bhttp::status::service_unavailable : bhttp::status::not_found,
                                            req.version()};
    res.set(bhttp::field::content_type, "application/json");
    res.body() = json{{"error", known ? "Unavailable" : "NotFound"}, {"message", t.path}}.dump();
    res.prepare_payload();
    beast::error_code ec;
    bhttp::write(socket, res, ec);
    return;
  }

  websocket::stream<tcp::socket> ws(std::move(socket));
  beast::error_code ec;
  ws.accept(req, ec);
  if (ec) return;
  ws.text(true);
  uint64_t seq = 0;
  try {
    if (t.path == "/v1/nowcast") {
      std::vector<std::string> cams;
      if (auto it = t.query.find("cameras"); it != t.query.end()) cams = split_list(it->second);
      auto sub = gw.store().nowcast().subscribe(cams, options.ws_buffer);
      while (!stopping.load()) {
        auto frame = sub->pop(options.ws_poll);
        if (!frame) continue;
        json per = json::object();
        for (const auto& [cam, counts] : frame->per_camera) per[cam] = counts;
        ws_send(ws, {{"seq", ++seq}, {"ts_s", frame->ts_s}, {"per_camera", per}});
      }
    } else if (t.path == "/v1/events") {
      auto sub = gw.events().subscribe(options.ws_buffer);
      uint64_t last = 0;
      if (auto it = t.query.find("since"); it != t.query.end()) {
        last = static_cast<uint64_t>(std::stoull(it->second));
        for (const auto& e : gw.events().since(last)) {
          ws_send(ws, e.to_json());
          last = e.seq;
        }
      } else {
        // Fresh clients get a snapshot stamped with the current sequence number.
        const uint64_t at = gw.events().last_seq();
        ws_send(ws, {{"seq", at}, {"type", "snapshot"}, {"payload", gw.streams_json()}});
        last = at;
      }
      while (!stopping.load()) {
        auto e = sub->pop(options.ws_poll);
        if (!e || e->seq <= last) continue;
        ws_send(ws, e->to_json());
        last = e->seq;
      }
    } else {
      auto sub = svc->subscribe(options.ws_buffer);
      while (!stopping.load()) {
        auto f = sub->pop(options.ws_poll);
        if (!f || !*f) continue;
        json j = forecast_to_json(**f);
        j["seq"] = ++seq;
        ws_send(ws, std::move(j));
      }
    }
    ws.close(websocket::close_code::going_away, ec);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kSubscriberOverflow) ws.close({websocket::close_code::policy_error, "subscriber overflow"}, ec);
  } catch (const std::exception&) {
    // peer went away
  }
}

void http_session(Gateway& gw, tcp::socket& socket, const HttpServerOptions& options,
                  const std::atomic<bool>& stopping) {
  beast::flat_buffer buffer;
  beast::error_code ec;
  while (!stopping.load()) {
    bhttp::request<bhttp::string_body> req;
    bhttp::read(socket, buffer, req, ec);
    if (ec) break;
    if (websocket::is_upgrade(req)) {
      ws_session(gw, std::move(socket), req, options, stopping);
      return;
    }
    bhttp::response<bhttp::string_body> res;
    res.version(req.version());
    res.set(bhttp::field::access_control_allow_origin, "*");
    if (req.method() == bhttp::verb::options) {
      res.result(bhttp::status::no_content);
      res.set(bhttp::field::access_control_allow_methods, "GET, POST, DELETE, OPTIONS");
      res.set(bhttp::field::access_control_allow_headers, "Content-Type");
    } else {
      const auto method = req.method_string();
      const auto target = req.target();
      auto r = handle_request(gw, std::string_view(method.data(), method.size()),
                              std::string_view(target.data(), target.size()), req.body());
      res.result(static_cast<unsigned>(r.status));
      res.set(bhttp::field::content_type, r.content_type);
      res.body() = std::move(r.body);
    }
    res.keep_alive(req.keep_alive());
    res.prepare_payload();
    bhttp::write(socket, res, ec);
    if (ec || !req.keep_alive()) break;
  }
  socket.shutdown(tcp::socket::shutdown_send, ec);
}

}  // namespace

HttpServer::HttpServer(Gateway& gw, HttpServerOptions options)
    : gw_(gw), options_(std::move(options)), impl_(std::make_unique<Impl>()) {}

HttpServer::~HttpServer() { stop(); }

void HttpServer::start() {
  auto& im = *impl_;
  const tcp::endpoint ep(net::ip::make_address(options_.address), options_.port);
  im.acceptor.open(ep.protocol());
  im.acceptor.set_option(net::socket_base::reuse_address(true));
  im.acceptor.bind(ep);
  im.acceptor.listen();
  port_ = im.acceptor.local_endpoint().port();
  im.accept_thread = std::thread([this] {
    auto& im = *impl_;
    while (!im.stopping.load()) {
      beast::error_code ec;
      tcp::socket sock(im.ioc);
      im.acceptor.accept(sock, ec);
      if (ec) {
        if (im.stopping.load()) break;
        continue;
      }
      im.reap();
      auto conn = std::make_shared<Impl::Conn>(std::move(sock));
      std::lock_guard lock(im.mu);
      im.conns.push_back(conn);
      conn->thread = std::thread([this, conn] {
        http_session(gw_, conn->socket, options_, impl_->stopping);
        conn->done = true;
      });
    }
  });
}

void HttpServer::stop() {
  auto& im = *impl_;
  if (im.stopping.exchange(true)) return;
  if (!im.accept_thread.joinable()) return;
  // Unblock the accept() and any blocked reads at the OS level.
  ::shutdown(im.acceptor.native_handle(), SHUT_RDWR);
  {
    std::lock_guard lock(im.mu);
    for (auto& c : im.conns) ::shutdown(c->fd, SHUT_RDWR);
  }
  im.accept_thread.join();
  std::list<std::shared_ptr<Impl::Conn>> conns;
  {
    std::lock_guard lock(im.mu);
    conns.swap(im.conns);
  }
  for (auto& c : conns) {
    if (c->thread.joinable()) c->thread.join();
  }
  beast::error_code ec;
  im.acceptor.close(ec);
}

// ---------------------------------------------------------------------------

ClientResponse http_request(const std::string& host, uint16_t port, std::string_view method, std::string_view target,
                            std::string_view body) {
  net::io_context ioc;
  tcp::resolver resolver(ioc);
  beast::tcp_stream stream(ioc);
  beast::error_code ec;
  auto results = resolver.resolve(host, std::to_string(port), ec);
  if (!ec) stream.connect(results, ec);
  if (ec) throw Error(ErrorCode::kIngestUnreachable, host + ":" + std::to_string(port) + ": " + ec.message());
  bhttp::request<bhttp::string_body> req{bhttp::string_to_verb(std::string(method)), std::string(target), 11};
  req.set(bhttp::field::host, host);
  req.set(bhttp::field::content_type, "application/json");
  req.body() = std::string(body);
  req.prepare_payload();
  bhttp::write(stream, req, ec);
  beast::flat_buffer buffer;
  bhttp::response<bhttp::string_body> res;
  if (!ec) bhttp::read(stream, buffer, res, ec);
  if (ec) throw Error(ErrorCode::kIngestUnreachable, std::string(target) + ": " + ec.message());
  stream.socket().shutdown(tcp::socket::shutdown_both, ec);
  return {static_cast<int>(res.result_int()), res.body()};
}

struct HttpSummarySink::Impl {
  std::string host;
  uint16_t port;
  net::io_context ioc;
  std::optional<beast::tcp_stream> stream;
  beast::flat_buffer buffer;

  void connect() {
    tcp::resolver resolver(ioc);
    beast::error_code ec;
    auto results = resolver.resolve(host, std::to_string(port), ec);
    stream.emplace(ioc);
    if (!ec) stream->connect(results, ec);
    if (ec) {
      stream.reset();
      throw Error(ErrorCode::kIngestUnreachable, host + ":" + std::to_string(port) + ": " + ec.message());
    }
    stream->socket().set_option(tcp::no_delay(true));
  }
};

HttpSummarySink::HttpSummarySink(std::string host, uint16_t port) : impl_(std::make_unique<Impl>()) {
  impl_->host = std::move(host);
  impl_->port = port;
}

HttpSummarySink::~HttpSummarySink() = default;

Ack HttpSummarySink::send(const FlowSummary& summary) {
  auto& im = *impl_;
  if (!im.stream) im.connect();
  bhttp::request<bhttp::string_body> req{bhttp::verb::post, "/v1/ingest", 11};
  req.set(bhttp::field::host, im.host);
  req.set(bhttp::field::content_type, "application/json");
  req.keep_alive(true);
  req.body() = summary_to_json(summary).dump();
  req.prepare_payload();
  beast::error_code ec;
  bhttp::write(*im.stream, req, ec);
  bhttp::response<bhttp::string_body> res;
  if (!ec) bhttp::read(*im.stream, im.buffer, res, ec);
  if (ec) {
    im.stream.reset();
    im.buffer.clear();
    throw Error(ErrorCode::kIngestUnreachable, "ingest: " + ec.message());
  }
  if (!res.keep_alive()) im.stream.reset();
  if (res.result_int() != 200) {
    const auto j = json::parse(res.body(), nullptr, false);
    throw Error(ErrorCode::kMalformedSummary, "ingest rejected summary: " +
                                                  (j.is_object() ? j.value("message", res.body()) : res.body()));
  }
  return Ack{json::parse(res.body()).at("records_written").get<size_t>()};
}

struct WsClient::Impl {
  net::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};
  beast::flat_buffer buffer;
  bool open = false;
};

WsClient::WsClient(const std::string& host, uint16_t port, const std::string& target)
    : impl_(std::make_unique<Impl>()) {
  tcp::resolver resolver(impl_->ioc);
  beast::error_code ec;
  auto results = resolver.resolve(host, std::to_string(port), ec);
  if (!ec) net::connect(impl_->ws.next_layer(), results, ec);
  if (!ec) impl_->ws.handshake(host, target, ec);
  if (ec) throw Error(ErrorCode::kIngestUnreachable, "websocket " + target + ": " + ec.message());
  impl_->open = true;
}

WsClient::~WsClient() { close(); }

std::optional<std::string> WsClient::read() {
  if (!impl_->open) return std::nullopt;
  beast::error_code ec;
  impl_->buffer.clear();
  impl_->ws.read(impl_->buffer, ec);
  if (ec) {
    impl_->open = false;
    return std::nullopt;
  }
  return beast::buffers_to_string(impl_->buffer.data());
}

void WsClient::close() {
  if (!impl_->open) return;
  impl_->open = false;
  beast::error_code ec;
  ::shutdown(impl_->ws.next_layer().native_handle(), SHUT_RDWR);
  impl_->ws.next_layer().close(ec);
}

std::string WsClient::close_reason() const { return std::string(impl_->ws.reason().reason.c_str()); }

}  // namespace cityfabric
