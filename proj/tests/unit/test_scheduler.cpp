#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "cityfabric/errors.hpp"
#include "cityfabric/scheduler.hpp"
#include "support.hpp"

using namespace cityfabric;

namespace {

DeviceProfile jo32(const std::string& id) { return {id, "JO32", 200, 200.0, 22.4, 0.2}; }
DeviceProfile jo64(const std::string& id) { return {id, "JO64", 400, 275.0, 27.9, 0.15}; }

std::shared_ptr<const Fleet> mixed_fleet() {
  std::vector<DeviceProfile> d;
  for (int i = 1; i <= 5; ++i) d.push_back(jo32("JO32-" + std::to_string(i)));
  for (int i = 1; i <= 4; ++i) d.push_back(jo64("JO64-" + std::to_string(i)));
  return std::make_shared<Fleet>(d);
}

StreamDescriptor stream(int i, uint32_t fps = 25) {
  StreamDescriptor s;
  s.id = "s" + std::to_string(i);
  s.junction_id = "j";
  s.fps = fps;
  return s;
}

// Straight scan over all devices; written independently of choose_device.
std::optional<size_t> oracle_choose(const std::vector<uint32_t>& remaining, uint32_t fps, PlacementPolicy p) {
  std::optional<size_t> best;
  for (size_t i = 0; i < remaining.size(); ++i) {
    if (remaining[i] < fps) continue;
    if (!best) {
      best = i;
      continue;
    }
    if (p == PlacementPolicy::kBestFit ? remaining[i] < remaining[*best] : remaining[i] > remaining[*best]) best = i;
  }
  return best;
}

double oracle_power(const Placement& p) {
  double w = 0;
  for (size_t d = 0; d < p.fleet().size(); ++d) {
    if (!p.active(d)) continue;
    w += p.fleet()[d].power_idle_w + p.fleet()[d].power_per_fps_w * p.used_fps(d);
  }
  return w;
}

}  // namespace

TEST_SUITE("scheduler") {
  TEST_CASE("first stream on an empty fleet") {
    auto fleet = std::make_shared<Fleet>(std::vector<DeviceProfile>{jo32("A"), jo64("B")});
    Placement p(fleet);
    SUBCASE("best fit takes the tighter device") { CHECK(p.assign(stream(0), PlacementPolicy::kBestFit) == 0); }
    SUBCASE("worst fit takes the roomier device") { CHECK(p.assign(stream(0), PlacementPolicy::kWorstFit) == 1); }
    CHECK(p.stream_count() == 1);
    CHECK(p.consistent());
  }

  TEST_CASE("ties go to the lower device id") {
    auto fleet = std::make_shared<Fleet>(std::vector<DeviceProfile>{jo32("b"), jo32("a")});
    CHECK(fleet->devices()[0].id == "a");
    Placement p(fleet);
    CHECK(p.assign(stream(0), PlacementPolicy::kBestFit) == 0);
    Placement q(fleet);
    CHECK(q.assign(stream(0), PlacementPolicy::kWorstFit) == 0);
  }

  TEST_CASE("capacity exhaustion leaves placement unchanged") {
    auto fleet = std::make_shared<Fleet>(std::vector<DeviceProfile>{jo32("A")});
    Placement p(fleet);
    for (int i = 0; i < 8; ++i) p.assign(stream(i), PlacementPolicy::kBestFit);
    const Placement before = p;
    CHECK_THROWS_AS(p.assign(stream(8), PlacementPolicy::kBestFit), CapacityExhausted);
    CHECK(p == before);
    CHECK_THROWS_AS(p.assign(stream(0), PlacementPolicy::kBestFit), Error);
    CHECK_THROWS_AS(p.remove("nope"), Error);
  }

  TEST_CASE("exact fit is feasible") {
    auto fleet = std::make_shared<Fleet>(std::vector<DeviceProfile>{jo32("A")});
    Placement p(fleet);
    CHECK(p.assign(stream(0, 200), PlacementPolicy::kBestFit) == 0);
    CHECK(p.remaining(0) == 0);
  }

  TEST_CASE("fleet validation") {
    CHECK_THROWS_AS(Fleet({jo32("A"), jo32("A")}), Error);
    DeviceProfile bad = jo32("x");
    bad.fps_capacity = 0;
    CHECK_THROWS_AS(Fleet({bad}), Error);
  }

  TEST_CASE("best fit activates the first 400-FPS device at stream 41") {
    auto fleet = mixed_fleet();
    Placement p(fleet);
    int first_big = -1;
    for (int i = 1; i <= 80; ++i) {
      const size_t d = p.assign(stream(i), PlacementPolicy::kBestFit);
      if (first_big < 0 && fleet->devices()[d].fps_capacity == 400) first_big = i;
    }
    CHECK(first_big == 41);
  }

  TEST_CASE("calibrated power figures at 32 streams") {
    auto fleet = mixed_fleet();
    std::vector<size_t> counts{32};
    const auto best = sweep(fleet, counts, PlacementPolicy::kBestFit);
    const auto worst = sweep(fleet, counts, PlacementPolicy::kWorstFit);
    CHECK(best[0].metrics.total_power_w == doctest::Approx(249.6).epsilon(1e-9));
    CHECK(worst[0].metrics.total_power_w == doctest::Approx(231.6).epsilon(1e-9));
    CHECK(worst[0].metrics.total_power_w < best[0].metrics.total_power_w);
  }

  TEST_CASE("metrics match an independent computation") {
    auto fleet = mixed_fleet();
    Placement p(fleet);
    for (int i = 0; i < 37; ++i) p.assign(stream(i, i % 3 == 0 ? 30 : 15), PlacementPolicy::kWorstFit);
    const auto m = metrics(p);
    CHECK(m.total_power_w == doctest::Approx(oracle_power(p)).epsilon(1e-12));
    uint64_t fps = 0;
    double tops = 0, cap = 0;
    for (size_t d = 0; d < fleet->size(); ++d) {
      fps += p.used_fps(d);
      if (p.active(d)) {
        tops += (*fleet)[d].tops;
        cap += (*fleet)[d].fps_capacity;
      }
    }
    CHECK(m.cumulative_fps == fps);
    CHECK(m.active_capacity_tops == doctest::Approx(tops));
    CHECK(m.utilization_pct == doctest::Approx(100.0 * static_cast<double>(fps) / cap));
    CHECK(m.active_devices == p.active_count());
  }

  TEST_CASE("sweep reports the failing step") {
    auto fleet = std::make_shared<Fleet>(std::vector<DeviceProfile>{jo32("A")});
    std::vector<size_t> counts{4, 8, 9};
    try {
      sweep(fleet, counts, PlacementPolicy::kBestFit);
      FAIL("expected CapacityExhausted");
    } catch (const CapacityExhausted& e) {
      CHECK(e.step() == 2);  // index into stream_counts
    }
  }

  TEST_CASE("sweep csv") {
    auto fleet = mixed_fleet();
    std::vector<size_t> counts{1, 2};
    const auto rows = sweep(fleet, counts, PlacementPolicy::kBestFit);
    std::ostringstream os;
    write_sweep_csv(os, rows);
    const auto s = os.str();
    CHECK(s.rfind("step,n_streams,policy", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 3);
  }

  TEST_CASE("policy conformance against a brute-force chooser") {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 300; ++trial) {
      std::uniform_int_distribution<int> nd(1, 12), cap(1, 40), fps(1, 12);
      std::vector<DeviceProfile> devs;
      const int n = nd(rng);
      for (int i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "d%02d", i);
        devs.push_back({id, "m", static_cast<uint32_t>(cap(rng) * 10), 1.0, 1.0, 0.01});
      }
      auto fleet = std::make_shared<Fleet>(devs);
      for (auto policy : {PlacementPolicy::kBestFit, PlacementPolicy::kWorstFit}) {
        Placement p(fleet);
        for (int s = 0; s < 60; ++s) {
          const auto f = static_cast<uint32_t>(fps(rng) * 5);
          const auto expect = oracle_choose(p.remaining_all(), f, policy);
          const auto rem = p.remaining_all();
          CHECK(choose_device(rem, f, policy) == expect);
          if (expect) CHECK(p.assign(stream(s, f), policy) == *expect);
          else CHECK_THROWS_AS(p.assign(stream(s, f), policy), CapacityExhausted);
        }
      }
    }
  }

  TEST_CASE("random assign/remove keeps capacity invariants") {
    auto fleet = mixed_fleet();
    std::mt19937_64 rng(7);
    Placement p(fleet);
    std::vector<std::string> live;
    int next = 0;
    for (int op = 0; op < 10000; ++op) {
      if (!live.empty() && rng() % 3 == 0) {
        const size_t k = rng() % live.size();
        p.remove(live[k]);
        live.erase(live.begin() + static_cast<long>(k));
      } else {
        const auto f = static_cast<uint32_t>(5 + rng() % 60);
        const auto pol = rng() % 2 ? PlacementPolicy::kBestFit : PlacementPolicy::kWorstFit;
        try {
          p.assign(stream(next, f), pol);
          live.push_back("s" + std::to_string(next));
        } catch (const CapacityExhausted&) {
        }
        ++next;
      }
      REQUIRE(p.consistent());
      for (size_t d = 0; d < fleet->size(); ++d) REQUIRE(p.used_fps(d) <= (*fleet)[d].fps_capacity);
    }
  }

  TEST_CASE("assign then remove restores the placement") {
    auto fleet = mixed_fleet();
    Placement p(fleet);
    for (int i = 0; i < 10; ++i) p.assign(stream(i), PlacementPolicy::kBestFit);
    const Placement before = p;
    for (int i = 10; i < 30; ++i) p.assign(stream(i), PlacementPolicy::kWorstFit);
    for (int i = 10; i < 30; ++i) p.remove("s" + std::to_string(i));
    CHECK(p == before);
  }

  TEST_CASE("actor snapshots are immutable") {
    SchedulerActor actor(mixed_fleet());
    auto s0 = actor.snapshot();
    actor.assign(stream(0), PlacementPolicy::kBestFit);
    CHECK(s0->stream_count() == 0);
    CHECK(actor.snapshot()->stream_count() == 1);
    actor.remove("s0");
    CHECK(*actor.snapshot() == *s0);
  }
}
