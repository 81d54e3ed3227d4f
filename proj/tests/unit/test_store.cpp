#include <doctest.h>

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <map>
#include <random>
#include <thread>

#include "cityfabric/errors.hpp"
#include "cityfabric/store.hpp"
#include "support.hpp"

using namespace cityfabric;
using namespace std::chrono_literals;

namespace {

using Oracle = std::map<std::pair<std::string, int64_t>, Counts>;

FlowSummary random_summary(std::mt19937_64& rng, const std::string& cam, int64_t start, int len, size_t C) {
  FlowSummary s;
  s.camera_id = cam;
  s.window_start_s = start;
  s.window_len_s = len;
  for (int i = 0; i < len; ++i) {
    Counts c(C);
    for (auto& v : c) v = static_cast<uint32_t>(rng() % 5);
    s.rows.push_back({start + i, cam, c});
  }
  return s;
}

void record(Oracle& o, const FlowSummary& s) {
  for (const auto& r : s.rows) o[{s.camera_id, r.ts_s}] = r.counts;
}

void check_against(const TimeSeriesStore& store, const Oracle& o, const std::vector<std::string>& cams,
                   int64_t from, int64_t to) {
  const auto m = store.query(cams, from, to);
  for (size_t ci = 0; ci < cams.size(); ++ci) {
    for (int64_t t = from; t < to; ++t) {
      const auto sec = static_cast<size_t>(t - from);
      auto it = o.find({cams[ci], t});
      if (it == o.end()) {
        REQUIRE(m.is_missing(ci, sec));
        for (size_t k = 0; k < m.num_classes; ++k) REQUIRE(m.at(ci, sec, k) == 0);
      } else {
        REQUIRE_FALSE(m.is_missing(ci, sec));
        for (size_t k = 0; k < m.num_classes; ++k) REQUIRE(m.at(ci, sec, k) == it->second[k]);
      }
    }
  }
}

StoreOptions opts(const std::filesystem::path& dir, std::vector<std::string> cams, int64_t tail = 1800) {
  StoreOptions o;
  o.dir = dir;
  o.cameras = std::move(cams);
  o.num_classes = 8;
  o.tail_horizon_s = tail;
  o.sync = false;
  return o;
}

}  // namespace

TEST_SUITE("store") {
  TEST_CASE("randomized queries agree with an in-memory map") {
    testing::TempDir tmp("store");
    const std::vector<std::string> cams{"a", "b", "c"};
    std::mt19937_64 rng(5);
    Oracle oracle;
    // short tail so older seconds are served from disk
    auto o = opts(tmp.path(), cams, 120);
    auto store = std::make_unique<TimeSeriesStore>(o);
    for (int step = 0; step < 400; ++step) {
      const auto& cam = cams[rng() % cams.size()];
      const int64_t start = 15 * static_cast<int64_t>(rng() % 60);
      const auto s = random_summary(rng, cam, start, 15, 8);
      store->ingest(s);
      record(oracle, s);
      if (step % 50 == 49) store->compact();
      if (step % 130 == 129) store = std::make_unique<TimeSeriesStore>(o);  // reopen
      if (step % 10 == 0) {
        const int64_t from = static_cast<int64_t>(rng() % 900) - 20;
        const int64_t to = from + 1 + static_cast<int64_t>(rng() % 200);
        check_against(*store, oracle, cams, from, to);
      }
    }
    check_against(*store, oracle, cams, -10, 920);
    CHECK(store->record_count() == oracle.size());
    CHECK(store->stats().disk_reads > 0);
  }

  TEST_CASE("duplicate delivery changes nothing and publishes nothing") {
    testing::TempDir tmp("store");
    TimeSeriesStore store(opts(tmp.path(), {"a"}));
    std::mt19937_64 rng(1);
    const auto s = random_summary(rng, "a", 0, 15, 8);
    store.ingest(s);
    auto sub = store.nowcast().subscribe({});
    const auto ack = store.ingest(s);
    CHECK(ack.records_written == 15);
    CHECK(ack.records_changed == 0);
    CHECK_FALSE(sub->pop(20ms).has_value());
  }

  TEST_CASE("a later delivery with different values wins") {
    testing::TempDir tmp("store");
    TimeSeriesStore store(opts(tmp.path(), {"a"}));
    std::mt19937_64 rng(2);
    auto s = random_summary(rng, "a", 0, 15, 8);
    store.ingest(s);
    s.rows[3].counts[0] += 7;
    CHECK(store.ingest(s).records_changed == 1);
    CHECK(store.get("a", 3) == s.rows[3].counts);
  }

  TEST_CASE("killed writer loses no acknowledged record") {
    testing::TempDir tmp("store");
    const auto dir = tmp.path();
    int fds[2];
    REQUIRE(::pipe(fds) == 0);
    const pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      ::close(fds[0]);
      auto o = opts(dir, {"a", "b"});
      o.sync = true;
      TimeSeriesStore store(o);
      std::mt19937_64 rng(3);
      for (int64_t w = 0;; ++w) {
        store.ingest(random_summary(rng, w % 2 ? "b" : "a", 15 * (w / 2), 15, 8));
        const int64_t acked = w + 1;
        if (::write(fds[1], &acked, sizeof acked) != sizeof acked) ::_exit(1);
      }
    }
    ::close(fds[1]);
    int64_t acked = 0, v = 0;
    while (acked < 40 && ::read(fds[0], &v, sizeof v) == sizeof v) acked = v;
    ::kill(pid, SIGKILL);
    while (::read(fds[0], &v, sizeof v) == sizeof v) acked = v;
    ::close(fds[0]);
    ::waitpid(pid, nullptr, 0);

    // regenerate what the child acknowledged
    Oracle oracle;
    std::mt19937_64 rng(3);
    for (int64_t w = 0; w < acked; ++w) record(oracle, random_summary(rng, w % 2 ? "b" : "a", 15 * (w / 2), 15, 8));
    TimeSeriesStore store(opts(dir, {"a", "b"}));
    const std::vector<std::string> cams{"a", "b"};
    const auto m = store.query(cams, 0, 15 * (acked / 2 + 1));
    for (const auto& [key, counts] : oracle) {
      const size_t ci = key.first == "a" ? 0 : 1;
      const auto sec = static_cast<size_t>(key.second);
      REQUIRE_FALSE(m.is_missing(ci, sec));
      for (size_t k = 0; k < 8; ++k) REQUIRE(m.at(ci, sec, k) == counts[k]);
    }
    CHECK(store.record_count() >= oracle.size());
  }

  TEST_CASE("torn log tail is dropped on open") {
    testing::TempDir tmp("store");
    std::mt19937_64 rng(4);
    const auto s = random_summary(rng, "a", 0, 15, 8);
    {
      TimeSeriesStore store(opts(tmp.path(), {"a"}));
      store.ingest(s);
    }
    {
      std::ofstream out(tmp.path() / "p0.log", std::ios::binary | std::ios::app);
      out << "CFLR garbage";
    }
    TimeSeriesStore store(opts(tmp.path(), {"a"}));
    CHECK(store.record_count() == 15);
    const auto next = random_summary(rng, "a", 15, 15, 8);
    store.ingest(next);
    TimeSeriesStore reopened(opts(tmp.path(), {"a"}));
    CHECK(reopened.record_count() == 30);
    CHECK(reopened.get("a", 20) == next.rows[5].counts);
  }

  TEST_CASE("nowcast frames arrive within 250 ms of ingest") {
    testing::TempDir tmp("store");
    TimeSeriesStore store(opts(tmp.path(), {"a", "b"}));
    auto sub = store.nowcast().subscribe({"b"});
    std::mt19937_64 rng(6);
    const auto s = random_summary(rng, "b", 30, 15, 8);
    const auto t0 = std::chrono::steady_clock::now();
    std::thread writer([&] { store.ingest(s); });
    std::vector<NowcastFrame> frames;
    while (frames.size() < 15) {
      auto f = sub->pop(500ms);
      REQUIRE(f.has_value());
      frames.push_back(*f);
    }
    const auto lag = std::chrono::steady_clock::now() - t0;
    writer.join();
    CHECK(lag < 250ms);
    CHECK(frames.front().ts_s == 30);
    CHECK(frames.front().per_camera.at("b") == s.rows[0].counts);
    // camera filter
    store.ingest(random_summary(rng, "a", 30, 15, 8));
    CHECK_FALSE(sub->pop(20ms).has_value());
  }

  TEST_CASE("a slow subscriber is disconnected, others keep going") {
    testing::TempDir tmp("store");
    TimeSeriesStore store(opts(tmp.path(), {"a"}));
    auto slow = store.nowcast().subscribe({}, 4);
    auto fast = store.nowcast().subscribe({}, 64);
    std::mt19937_64 rng(7);
    store.ingest(random_summary(rng, "a", 0, 15, 8));
    CHECK(slow->overflowed());
    CHECK(testing::code_of([&] { slow->pop(1ms); }) == ErrorCode::kSubscriberOverflow);
    CHECK(fast->pending() == 15);
    CHECK(store.nowcast().subscriber_count() == 1);
  }

  TEST_CASE("errors") {
    testing::TempDir tmp("store");
    TimeSeriesStore store(opts(tmp.path(), {"a"}));
    std::mt19937_64 rng(8);
    CHECK(testing::code_of([&] { store.ingest(random_summary(rng, "zz", 0, 15, 8)); }) == ErrorCode::kUnknownCamera);
    const std::vector<std::string> bad{"zz"};
    CHECK(testing::code_of([&] { store.query(bad, 0, 10); }) == ErrorCode::kUnknownCamera);
    const std::vector<std::string> ok{"a"};
    CHECK(testing::code_of([&] { store.query(ok, 10, 10); }) == ErrorCode::kInvalidArgument);
    auto s = random_summary(rng, "a", 0, 15, 8);
    s.rows.pop_back();
    CHECK(testing::code_of([&] { store.ingest(s); }) == ErrorCode::kMalformedSummary);
    s = random_summary(rng, "a", 0, 15, 8);
    s.rows[2].ts_s = 9;
    CHECK(testing::code_of([&] { store.ingest(s); }) == ErrorCode::kMalformedSummary);
    s = random_summary(rng, "a", 0, 15, 3);
    CHECK(testing::code_of([&] { store.ingest(s); }) == ErrorCode::kMalformedSummary);
    CHECK(store.record_count() == 0);
    auto o = opts(tmp.path(), {"a"});
    o.num_classes = 4;
    CHECK(testing::code_of([&] { TimeSeriesStore other(o); }) == ErrorCode::kInvalidArgument);
  }

  TEST_CASE("compaction with an age limit purges old seconds") {
    testing::TempDir tmp("store");
    auto o = opts(tmp.path(), {"a"});
    o.max_age_s = 60;
    TimeSeriesStore store(o);
    std::mt19937_64 rng(9);
    for (int w = 0; w < 10; ++w) store.ingest(random_summary(rng, "a", 15 * w, 15, 8));
    store.compact();
    CHECK_FALSE(store.get("a", 10).has_value());
    CHECK(store.get("a", 149).has_value());
    CHECK(store.latest_second() == 149);
  }
}
