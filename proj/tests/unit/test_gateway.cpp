#include <doctest.h>

#include <sstream>

#include "cityfabric/errors.hpp"
#include "cityfabric/gateway.hpp"
#include "cityfabric/http.hpp"
#include "cityfabric/runner.hpp"
#include "support.hpp"

using namespace cityfabric;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

// toy4 road graph with `n` low-rate streams spread over its four cameras.
ScenarioConfig many_streams(size_t n, bool mixed_fleet = true) {
  auto cfg = testing::load("toy4");
  const auto proto = cfg.streams.front();
  cfg.streams.clear();
  for (size_t i = 0; i < n; ++i) {
    auto s = proto;
    char id[16];
    std::snprintf(id, sizeof id, "s%03zu", i);
    s.desc.id = id;
    s.desc.index = static_cast<uint32_t>(i);
    s.desc.junction_id = std::string(1, static_cast<char>('A' + i % 4));
    s.desc.trace_seed = 1000 + i;
    s.process.rate_per_min = 20;
    cfg.streams.push_back(s);
  }
  cfg.intervals.duration_s = 15;
  if (mixed_fleet) cfg.devices = load_fleet(testing::scenario_path("fleet_5x200_4x400"));
  return cfg;
}

GatewayOptions fast(const std::filesystem::path& dir) {
  GatewayOptions o;
  o.store_dir = dir;
  o.fast_forward = true;
  o.store_sync = false;
  o.tick_thread = false;
  return o;
}

std::vector<std::string> ids(size_t from, size_t to) {
  std::vector<std::string> out;
  for (size_t i = from; i < to; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "s%03zu", i);
    out.push_back(id);
  }
  return out;
}

}  // namespace

TEST_SUITE("gateway") {
  TEST_CASE("stopping streams restores the earlier placement") {
    testing::TempDir tmp("gw");
    Gateway gw(many_streams(40), fast(tmp.path()));
    gw.start_streams(ids(0, 10));
    const auto before = *gw.placement();
    gw.start_streams(ids(10, 30), PlacementPolicy::kWorstFit);
    CHECK(gw.placement()->stream_count() == 30);
    gw.stop_streams(ids(10, 30));
    CHECK(*gw.placement() == before);
    CHECK(gw.running_streams() == ids(0, 10));
    gw.drain();
    CHECK(gw.status() == RunStatus::kIdle);
    CHECK(gw.placement()->stream_count() == 0);
  }

  TEST_CASE("200 streams on a 2000-FPS fleet: 80 accepted, 120 rejected") {
    testing::TempDir tmp("gw");
    auto cfg = many_streams(200);
    // 5x200 + 4x400 is 2600 FPS; ten 200-FPS devices give exactly 2000
    const auto jo32 = cfg.devices.front();
    cfg.devices.clear();
    for (int i = 0; i < 10; ++i) {
      auto d = jo32;
      d.id = "JO32-" + std::to_string(i + 1);
      cfg.devices.push_back(d);
    }
    Gateway gw(cfg, fast(tmp.path()));
    const auto delta = gw.start_streams(ids(0, 200));
    CHECK(delta.accepted() == 80);
    CHECK(delta.rejected() == 120);
    const auto m = gw.current_metrics();
    CHECK(m.cumulative_fps == 2000);
    CHECK(m.utilization_pct == doctest::Approx(100.0));
    for (size_t d = 0; d < gw.placement()->fleet().size(); ++d)
      CHECK(gw.placement()->used_fps(d) <= gw.placement()->fleet()[d].fps_capacity);
    size_t rejected_events = 0;
    for (const auto& e : gw.events().since(0))
      if (e.type == "rejected") ++rejected_events;
    CHECK(rejected_events == 120);
    gw.wait_streams_idle();
    gw.drain();
  }

  TEST_CASE("admission queue admits waiting streams when capacity frees") {
    testing::TempDir tmp("gw");
    auto o = fast(tmp.path());
    o.admission_queue = true;
    Gateway gw(many_streams(30, false), o);  // toy4 fleet: 600 FPS, 24 streams
    const auto delta = gw.start_streams(ids(0, 26));
    CHECK(delta.accepted() == 24);
    CHECK(gw.queued_streams() == ids(24, 26));
    gw.stop_streams({"s003"});
    CHECK(gw.queued_streams() == ids(25, 26));
    const auto running = gw.running_streams();
    CHECK(std::find(running.begin(), running.end(), "s024") != running.end());
    // stopping a queued stream just dequeues it
    gw.stop_streams({"s025"});
    CHECK(gw.queued_streams().empty());
    gw.drain();
  }

  TEST_CASE("per-stream errors do not abort the batch") {
    testing::TempDir tmp("gw");
    Gateway gw(many_streams(4), fast(tmp.path()));
    const auto d = gw.start_streams({"s000", "nope", "s000", "s001"});
    REQUIRE(d.outcomes.size() == 4);
    CHECK(d.outcomes[0].status == "started");
    CHECK(d.outcomes[1].status == "error");
    CHECK(d.outcomes[1].error.find("UnknownStream") != std::string::npos);
    CHECK(d.outcomes[2].error.find("InvalidState") != std::string::npos);
    CHECK(d.outcomes[3].status == "started");
    CHECK(gw.stop_streams({"nope"}).outcomes[0].status == "error");
    CHECK(testing::code_of([&] { gw.begin(); }) == ErrorCode::kInvalidState);
    gw.drain();
  }

  TEST_CASE("event sequence numbers are dense and replayable") {
    testing::TempDir tmp("gw");
    Gateway gw(many_streams(6), fast(tmp.path()));
    auto sub = gw.events().subscribe(64);
    gw.start_streams(ids(0, 6));
    gw.stop_streams(ids(0, 2));
    const auto all = gw.events().since(0);
    REQUIRE(!all.empty());
    for (size_t i = 0; i < all.size(); ++i) CHECK(all[i].seq == i + 1);
    CHECK(gw.events().last_seq() == all.back().seq);
    CHECK(gw.events().since(3).front().seq == 4);
    uint64_t prev = 0;
    while (auto e = sub->pop(10ms)) {
      CHECK(e->seq == prev + 1);
      prev = e->seq;
    }
    CHECK(prev == all.back().seq);
    gw.drain();
  }

  TEST_CASE("ingested flows, history and graph read models") {
    testing::TempDir tmp("gw");
    auto cfg = testing::load("toy4");
    Gateway gw(cfg, fast(tmp.path()));
    gw.start_streams(cfg.camera_ids());
    gw.wait_streams_idle();
    const auto stats = gw.pipeline_stats();
    CHECK(stats.size() == 4);
    for (const auto& [id, st] : stats) {
      CHECK(st.summaries == 8);
      CHECK(st.finished);
    }
    gw.drain();
    CHECK(gw.store().record_count() == 4 * 120);

    // camera history is the per-minute total
    const auto h = gw.history("cam0", 0, 120);
    REQUIRE(h.series.size() == 2);
    const std::vector<std::string> cam0{"cam0"};
    const auto m = gw.store().query(cam0, 0, 60);
    double total = 0;
    for (size_t s = 0; s < 60; ++s) total += static_cast<double>(m.total(0, s));
    CHECK(h.series[0] == total);
    CHECK_FALSE(h.segment);

    // segment history equals allocation of the junction minute totals
    const auto seg = gw.history("A--B", 0, 120);
    CHECK(seg.segment);
    REQUIRE(seg.series.size() == 2);
    const auto& cg = gw.coarse_graph();
    std::vector<double> counts(cg.vertex_count(), 0.0);
    const auto cams = cfg.camera_ids();
    const auto q = gw.store().query(cams, 0, 60);
    for (size_t c = 0; c < cams.size(); ++c)
      for (size_t s = 0; s < 60; ++s)
        counts[*cg.find_vertex(cfg.streams[c].desc.junction_id)] += static_cast<double>(q.total(c, s));
    const auto flows = allocate_edge_flows(counts, cg, cfg.allocation);
    CHECK(seg.series[0] == doctest::Approx(flows.flow[*cg.find_edge_by_name("A--B")]).epsilon(1e-12));
    CHECK(seg.band[0] == discretize(seg.series[0], cfg.congestion_thresholds));
    CHECK(testing::code_of([&] { gw.history("X--Y", 0, 60); }) == ErrorCode::kUnknownSegment);

    const auto g = gw.graph_json();
    CHECK(g["cameras"]["cam2"] == "C");
    CHECK(g["congestion_thresholds"]["t1"] == 60);
  }

  TEST_CASE("metrics over the API equal the ticks csv") {
    testing::TempDir tmp("gw");
    Gateway gw(many_streams(50), fast(tmp.path()));
    for (size_t i = 0; i < 50; i += 7) {
      gw.start_streams(ids(i, std::min<size_t>(50, i + 7)), i % 2 ? PlacementPolicy::kWorstFit : PlacementPolicy::kBestFit);
      gw.record_tick();
    }
    gw.stop_streams(ids(0, 10));
    gw.record_tick();
    const auto res = handle_request(gw, "GET", "/v1/scheduler/metrics?last=100", "");
    REQUIRE(res.status == 200);
    const auto api = json::parse(res.body);
    std::ostringstream os;
    os.precision(10);
    write_ticks_csv(os, gw.ticks());
    std::istringstream in(os.str());
    std::string line;
    std::getline(in, line);
    size_t row = 0;
    while (std::getline(in, line)) {
      std::vector<double> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
      const auto& t = api["ticks"][row++];
      const auto& m = t["scheduler"];
      CHECK(f[0] == t["tick"].get<double>());
      CHECK(f[2] == t["streams"].get<double>());
      CHECK(f[3] == m["active_devices"].get<double>());
      CHECK(f[4] == doctest::Approx(m["active_capacity_tops"].get<double>()).epsilon(1e-9));
      CHECK(f[5] == doctest::Approx(m["utilization_pct"].get<double>()).epsilon(1e-9));
      CHECK(f[6] == doctest::Approx(m["total_power_w"].get<double>()).epsilon(1e-9));
      CHECK(f[7] == m["cumulative_fps"].get<double>());
    }
    CHECK(row == api["ticks"].size());
    CHECK(row == 9);
    CHECK(api["current"]["cumulative_fps"] == 40 * 25);
    gw.drain();
  }
}
