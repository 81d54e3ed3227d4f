#include <doctest.h>

#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "cityfabric/emulator.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/wire.hpp"

using namespace cityfabric;

namespace {

StreamDescriptor desc(uint32_t index = 0, uint64_t seed = 42, uint32_t fps = 25) {
  StreamDescriptor d;
  d.id = "cam" + std::to_string(index);
  d.junction_id = "J";
  d.index = index;
  d.fps = fps;
  d.trace_seed = seed;
  return d;
}

TrafficProcess process(double rate = 300.0) {
  TrafficProcess p;
  p.rate_per_min = rate;
  p.class_mix = default_class_mix(8);
  p.diurnal_amplitude = 0.2;
  p.diurnal_period_s = 120;
  p.modulation = {0.2, 0.8, 30, 0.5, 9};
  return p;
}

}  // namespace

TEST_SUITE("emulator") {
  TEST_CASE("same seed, same trace; different seed, different trace") {
    const auto a = generate_stream(desc(0, 1), process(), 20);
    const auto b = generate_stream(desc(0, 1), process(), 20);
    const auto c = generate_stream(desc(0, 2), process(), 20);
    CHECK(a == b);
    CHECK(a != c);
    CHECK(!a.empty());
  }

  TEST_CASE("events are time ordered with valid boxes") {
    const auto ev = generate_stream(desc(3), process(), 30);
    for (size_t i = 1; i < ev.size(); ++i) {
      REQUIRE(ev[i - 1].ts_ms <= ev[i].ts_ms);
      if (ev[i - 1].ts_ms == ev[i].ts_ms) REQUIRE(ev[i - 1].tracking_id < ev[i].tracking_id);
    }
    for (const auto& e : ev) {
      REQUIRE(e.bbox.valid());
      REQUIRE(e.class_idx < 8);
      REQUIRE(e.stream == 3);
      REQUIRE((e.tracking_id >> 32) == 4);
    }
  }

  TEST_CASE("a tracking id keeps its class") {
    std::map<uint64_t, uint16_t> cls;
    for (const auto& e : generate_stream(desc(), process(), 30)) {
      auto [it, fresh] = cls.emplace(e.tracking_id, e.class_idx);
      if (!fresh) REQUIRE(it->second == e.class_idx);
    }
  }

  TEST_CASE("arrival counts equal distinct ids per first-seen second") {
    const auto d = desc(1, 77);
    const auto p = process(420);
    const double dur = 60;
    const auto ev = generate_stream(d, p, dur);
    std::map<uint64_t, std::pair<int64_t, uint16_t>> first;
    for (const auto& e : ev) first.try_emplace(e.tracking_id, e.ts_ms / 1000, e.class_idx);
    std::vector<Counts> expect(static_cast<size_t>(dur), Counts(8, 0));
    for (const auto& [id, v] : first) ++expect[static_cast<size_t>(v.first)][v.second];
    CHECK(arrival_counts(d, p, dur, 8) == expect);
  }

  TEST_CASE("zero rate produces nothing") {
    CHECK(generate_stream(desc(), process(0.0), 10).empty());
  }

  TEST_CASE("mean arrival rate tracks the configured rate") {
    TrafficProcess p;
    p.rate_per_min = 600;
    p.class_mix = default_class_mix(8);
    const auto counts = arrival_counts(desc(), p, 600, 8);
    uint64_t total = 0;
    for (const auto& c : counts)
      for (auto v : c) total += v;
    // 6000 expected, Poisson sd ~ 77
    CHECK(total > 5700);
    CHECK(total < 6300);
  }

  TEST_CASE("class mix is honoured") {
    TrafficProcess p;
    p.rate_per_min = 1200;
    p.class_mix = {0, 0, 1, 0, 0, 0, 0, 3};
    const auto counts = arrival_counts(desc(), p, 300, 8);
    uint64_t c2 = 0, c7 = 0, other = 0;
    for (const auto& c : counts) {
      c2 += c[2];
      c7 += c[7];
      for (size_t k : {0, 1, 3, 4, 5, 6}) other += c[k];
    }
    CHECK(other == 0);
    const double ratio = static_cast<double>(c7) / static_cast<double>(c2);
    CHECK(ratio > 2.6);
    CHECK(ratio < 3.4);
  }

  TEST_CASE("traffic process validation") {
    auto p = process();
    p.class_mix = {1, 1};
    CHECK_THROWS_AS(p.validate(8), Error);
    p = process();
    p.rate_per_min = -1;
    CHECK_THROWS_AS(p.validate(8), Error);
    p = process();
    p.diurnal_amplitude = 1.5;
    CHECK_THROWS_AS(p.validate(8), Error);
  }

  TEST_CASE("piecewise segments change the rate") {
    TrafficProcess p;
    p.rate_per_min = 60;
    p.segments = {{100, 600}};
    CHECK(p.base_rate(50) == 60);
    CHECK(p.base_rate(100) == 600);
  }

  TEST_CASE("trace index matches the expanded trace") {
    const auto d = desc(2, 5);
    const auto p = process();
    const auto tr = generate_trace(d, p, 10);
    REQUIRE(tr.events.size() == tr.truth.size());
    TraceIndex idx(d, p, 10);
    std::map<int64_t, std::vector<GroundTruthLabel>> by_frame;
    for (const auto& t : tr.truth) by_frame[t.frame].push_back(t);
    for (int64_t f : {0L, 7L, 100L, 249L}) {
      auto got = idx.objects_at(f);
      auto want = by_frame[f];
      auto key = [](const auto& a, const auto& b) { return a.tracking_id < b.tracking_id; };
      std::sort(got.begin(), got.end(), key);
      std::sort(want.begin(), want.end(), key);
      CHECK(got == want);
    }
  }

  TEST_CASE("wire binary and ndjson round trip") {
    const auto ev = generate_stream(desc(9), process(), 5);
    std::stringstream bin;
    wire::write_events(bin, ev);
    CHECK(bin.str().size() == ev.size() * wire::kEventFrameBytes);
    CHECK(wire::read_events(bin) == ev);
    std::stringstream nd;
    wire::write_events_ndjson(nd, ev);
    CHECK(wire::read_events_ndjson(nd) == ev);
  }

  TEST_CASE("wire decoding of partial frames") {
    DetectionEvent e{7, 1234, 99, 3, {0.1f, 0.2f, 0.3f, 0.4f}};
    std::vector<uint8_t> buf;
    wire::encode_event(e, buf);
    DetectionEvent out;
    CHECK_FALSE(wire::decode_event(std::span(buf).first(10), out).has_value());
    CHECK(wire::decode_event(buf, out) == wire::kEventFrameBytes);
    CHECK(out == e);
    // little-endian length prefix
    CHECK(buf[0] == 40);
    CHECK(buf[1] == 0);
  }

  TEST_CASE("fast-forward serve delivers the generated trace") {
    const auto d = desc(4, 11);
    const auto p = process();
    EventChannel ch(64);
    ServeOptions o;
    o.duration_s = 12;
    o.fast_forward = true;
    std::vector<DetectionEvent> got;
    std::thread consumer([&] {
      for (;;) {
        auto b = ch.pop(std::chrono::milliseconds(50));
        if (b) got.insert(got.end(), b->events.begin(), b->events.end());
        else if (ch.closed() && ch.drained()) break;
      }
    });
    const auto stats = serve(d, p, ch, o);
    consumer.join();
    CHECK(got == generate_stream(d, p, 12));
    CHECK(stats.frames == 300);
  }

  TEST_CASE("real-time serve keeps frame cadence") {
    EventChannel ch(1024);
    ServeOptions o;
    o.duration_s = 2;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::chrono::steady_clock::time_point> seen;
    std::thread consumer([&] {
      for (;;) {
        auto b = ch.pop(std::chrono::milliseconds(50));
        if (b) seen.push_back(std::chrono::steady_clock::now());
        else if (ch.closed() && ch.drained()) break;
      }
    });
    const auto stats = serve(desc(), process(), ch, o);
    consumer.join();
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(stats.frames == 50);
    CHECK(seen.size() == 50);
    CHECK(took > 1.9);
    CHECK(took < 2.6);
    CHECK(stats.max_jitter.count() < 50000);
  }

  TEST_CASE("serve stops on request") {
    EventChannel ch(4);
    std::atomic<bool> stop{false};
    ServeOptions o;
    o.duration_s = 1e9;
    o.fast_forward = true;
    std::thread t([&] { serve(desc(), process(), ch, o, &stop); });
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    stop = true;
    while (ch.pop(std::chrono::milliseconds(10))) {
    }
    t.join();
    CHECK(true);
  }

  TEST_CASE("serving from a later second matches the tail of the full trace") {
    const auto d = desc(5, 3);
    const auto p = process();
    EventChannel ch(1 << 12);
    ServeOptions o;
    o.start_s = 5;
    o.duration_s = 10;
    o.fast_forward = true;
    serve(d, p, ch, o);
    std::vector<DetectionEvent> got;
    while (auto b = ch.pop(std::chrono::milliseconds(1))) got.insert(got.end(), b->events.begin(), b->events.end());
    REQUIRE(!got.empty());
    CHECK(got.front().ts_ms >= 5000);
    // every vehicle first seen after the start second is reproduced exactly
    std::set<uint64_t> skipped;
    const auto full = generate_stream(d, p, 10);
    for (const auto& e : full)
      if (e.ts_ms < 5000) skipped.insert(e.tracking_id);
    std::vector<DetectionEvent> want;
    for (const auto& e : full)
      if (e.ts_ms >= 5000 && !skipped.count(e.tracking_id)) want.push_back(e);
    CHECK(got == want);
  }
}
