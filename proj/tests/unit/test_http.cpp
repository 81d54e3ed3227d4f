#include <doctest.h>

#include <thread>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/http.hpp"
#include "support.hpp"

using namespace cityfabric;
using nlohmann::json;

namespace {

GatewayOptions fast(const std::filesystem::path& dir) {
  GatewayOptions o;
  o.store_dir = dir;
  o.fast_forward = true;
  o.store_sync = false;
  o.tick_thread = false;
  return o;
}

FlowSummary summary(const std::string& cam, int64_t start, uint32_t base = 1) {
  FlowSummary s;
  s.camera_id = cam;
  s.window_start_s = start;
  s.window_len_s = 15;
  for (int i = 0; i < 15; ++i) {
    Counts c(8, 0);
    c[static_cast<size_t>(i) % 8] = base + static_cast<uint32_t>(i);
    s.rows.push_back({start + i, cam, c});
  }
  return s;
}

// Gateway over toy4 behind a live server on an ephemeral port.
struct Fixture {
  testing::TempDir tmp{"http"};
  Gateway gw{testing::load("toy4"), fast(tmp.path())};
  HttpServer server{gw, [] {
                      HttpServerOptions o;
                      o.port = 0;
                      o.ws_poll = std::chrono::milliseconds(20);
                      return o;
                    }()};
  Fixture() { server.start(); }
  ~Fixture() {
    server.stop();
    gw.drain();
  }
  ClientResponse call(std::string_view method, std::string_view target, std::string_view body = {}) {
    return http_request("127.0.0.1", server.port(), method, target, body);
  }
};

}  // namespace

TEST_SUITE("http") {
  TEST_CASE("target parsing decodes query values") {
    const auto t = parse_target("/v1/flows?cameras=cam0%2Ccam1&from=0&to=60&flag");
    CHECK(t.path == "/v1/flows");
    CHECK(t.query.at("cameras") == "cam0,cam1");
    CHECK(t.query.at("to") == "60");
    CHECK(t.query.count("flag") == 1);
    CHECK(parse_target("/v1/health").query.empty());
  }

  TEST_CASE("error codes map to statuses") {
    CHECK(http_status_for(ErrorCode::kMalformedSummary) == 400);
    CHECK(http_status_for(ErrorCode::kUnknownCamera) == 404);
    CHECK(http_status_for(ErrorCode::kCapacityExhausted) == 409);
    CHECK(http_status_for(ErrorCode::kIo) == 500);
  }

  TEST_CASE("health and stream control over a socket") {
    Fixture f;
    auto r = f.call("GET", "/v1/health");
    REQUIRE(r.status == 200);
    CHECK(json::parse(r.body)["scenario"] == "toy4");

    r = f.call("POST", "/v1/streams", R"({"streams":["cam0","cam1"],"policy":"worst_fit"})");
    REQUIRE(r.status == 200);
    r = f.call("GET", "/v1/streams");
    CHECK(r.status == 200);
    CHECK_FALSE(json::parse(r.body).empty());
    CHECK(f.gw.running_streams() == std::vector<std::string>{"cam0", "cam1"});

    r = f.call("DELETE", "/v1/streams?ids=cam1");
    CHECK(r.status == 200);
    CHECK(f.gw.running_streams() == std::vector<std::string>{"cam0"});

    CHECK(f.call("GET", "/v1/nope").status == 404);
    CHECK(f.call("POST", "/v1/streams", "{not json").status == 400);
    CHECK(f.call("POST", "/v1/streams", R"({"streams":7})").status == 400);
    CHECK(f.call("POST", "/v1/scheduler/policy", R"({"policy":"random"})").status == 400);
    CHECK(f.call("GET", "/v1/history?segment=X--Y&from=0&to=60").status == 404);
    CHECK(f.call("GET", "/v1/forecast").status == 503);
    const auto bad = json::parse(f.call("GET", "/v1/history").body);
    CHECK(bad["error"] == "InvalidArgument");
  }

  TEST_CASE("ingest and flows round trip") {
    Fixture f;
    const auto s = summary("cam2", 30, 4);
    auto r = f.call("POST", "/v1/ingest", summary_to_json(s).dump());
    REQUIRE(r.status == 200);
    CHECK(json::parse(r.body)["records_written"] == 15);
    CHECK(json::parse(r.body)["records_changed"] == 15);
    // re-delivery changes nothing
    CHECK(json::parse(f.call("POST", "/v1/ingest", summary_to_json(s).dump()).body)["records_changed"] == 0);

    r = f.call("GET", "/v1/flows?cameras=cam2&from=30&to=45");
    REQUIRE(r.status == 200);
    const auto j = json::parse(r.body);
    CHECK(j["cameras"] == json{"cam2"});
    for (size_t i = 0; i < 15; ++i) {
      CHECK(j["counts"][0][i] == json(s.rows[i].counts));
      CHECK(j["missing"][0][i] == 0);
    }
    CHECK(f.call("POST", "/v1/ingest", summary_to_json(summary("cam9", 0)).dump()).status == 404);
    CHECK(f.call("POST", "/v1/ingest", R"({"camera_id":"cam0"})").status == 400);
  }

  TEST_CASE("summary sink posts into the gateway store") {
    Fixture f;
    HttpSummarySink sink("127.0.0.1", f.server.port());
    for (int64_t w = 0; w < 4; ++w) CHECK(sink.send(summary("cam3", w * 15)).records_written == 15);
    CHECK(f.gw.store().record_count() == 60);
    CHECK(testing::code_of([&] { sink.send(summary("cam9", 0)); }) == ErrorCode::kMalformedSummary);
    // the connection survives a rejected summary
    CHECK(sink.send(summary("cam3", 60)).records_written == 15);

    HttpSummarySink dead("127.0.0.1", 1);
    CHECK(testing::code_of([&] { dead.send(summary("cam3", 0)); }) == ErrorCode::kIngestUnreachable);
  }

  TEST_CASE("nowcast websocket streams ingested seconds") {
    Fixture f;
    WsClient ws("127.0.0.1", f.server.port(), "/v1/nowcast?cameras=cam1");
    // give the session time to subscribe before publishing
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    f.gw.store().ingest(summary("cam0", 0));
    f.gw.store().ingest(summary("cam1", 0));
    uint64_t prev = 0;
    for (int64_t i = 0; i < 15; ++i) {
      auto text = ws.read();
      REQUIRE(text.has_value());
      const auto j = json::parse(*text);
      CHECK(j["seq"] == prev + 1);
      prev = j["seq"];
      CHECK(j["ts_s"] == i);
      CHECK(j["per_camera"].size() == 1);
      CHECK(j["per_camera"].contains("cam1"));
    }
  }

  TEST_CASE("events websocket sends a snapshot then placement events") {
    Fixture f;
    f.gw.start_streams({"cam0"});
    const auto at = f.gw.events().last_seq();
    WsClient ws("127.0.0.1", f.server.port(), "/v1/events");
    auto first = json::parse(*ws.read());
    CHECK(first["type"] == "snapshot");
    // the running stream may publish between the two reads
    const auto snap_seq = first["seq"].get<uint64_t>();
    CHECK(snap_seq >= at);
    f.gw.start_streams({"cam1"});
    auto next = json::parse(*ws.read());
    CHECK(next["seq"].get<uint64_t>() == snap_seq + 1);

    // replay from a sequence number skips the snapshot
    WsClient replay("127.0.0.1", f.server.port(), "/v1/events?since=0");
    auto e = json::parse(*replay.read());
    CHECK(e["seq"] == 1);
    CHECK(e["type"] != "snapshot");
  }

  TEST_CASE("unknown websocket targets are refused") {
    Fixture f;
    CHECK_THROWS_AS(WsClient("127.0.0.1", f.server.port(), "/v1/nope"), Error);
    CHECK_THROWS_AS(WsClient("127.0.0.1", f.server.port(), "/v1/forecast/stream"), Error);
  }
}
