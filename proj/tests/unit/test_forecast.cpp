#include <doctest.h>

#include <cmath>
#include <random>

#include "cityfabric/errors.hpp"
#include "cityfabric/forecast.hpp"
#include "cityfabric/graph_gru.hpp"
#include "cityfabric/store.hpp"
#include "support.hpp"

using namespace cityfabric;

namespace {

// Same tensor as tests/oracles/rolling_rmse.py.
MinuteSeries fixed_series() {
  MinuteSeries s;
  s.junctions = {"a", "b", "c"};
  s.values.resize(3, 20);
  s.mask.resize(3, 20);
  for (int j = 0; j < 3; ++j)
    for (int t = 0; t < 20; ++t) {
      s.values(j, t) = ((7 * j + 13 * t) % 17) + 0.5 * j;
      s.mask(j, t) = (j + t) % 5 == 0;
    }
  return s;
}

MinuteSeries random_series(std::mt19937_64& rng, int J, int T) {
  MinuteSeries s;
  for (int j = 0; j < J; ++j) s.junctions.push_back("j" + std::to_string(j));
  s.values.resize(J, T);
  s.mask.resize(J, T);
  std::uniform_real_distribution<double> u(0, 300);
  for (int j = 0; j < J; ++j)
    for (int t = 0; t < T; ++t) {
      s.values(j, t) = u(rng);
      s.mask(j, t) = rng() % 6 == 0;
    }
  return s;
}

// Plain loops over std::vector; the model is only used through predict().
std::vector<double> brute_rmse(const ForecastModel& model, const MinuteSeries& s, int lag, int horizon) {
  const int J = static_cast<int>(s.values.rows()), T = static_cast<int>(s.values.cols());
  std::vector<double> out;
  for (int h = 0; h < horizon; ++h) {
    long double sq = 0;
    long n = 0;
    for (int o = lag; o + horizon <= T; ++o) {
      Eigen::MatrixXd window(J, lag);
      for (int j = 0; j < J; ++j)
        for (int k = 0; k < lag; ++k) window(j, k) = s.values(j, o - lag + k);
      const auto pred = model.predict(window, horizon);
      for (int j = 0; j < J; ++j) {
        if (s.mask(j, o + h)) continue;
        const long double e = pred(j, h) - s.values(j, o + h);
        sq += e * e;
        ++n;
      }
    }
    out.push_back(static_cast<double>(std::sqrt(sq / n)));
  }
  return out;
}

CoarseGraph triangle() {
  CoarseGraph cg;
  cg.vertex_ids = {"a", "b", "c"};
  cg.layout.resize(3);
  cg.edges = {{0, 1, 1, 1}, {0, 2, 2, 1}, {1, 2, 1, 1}};
  return cg;
}

}  // namespace

TEST_SUITE("forecast") {
  TEST_CASE("rolling RMSE on the fixed tensor matches the oracle script") {
    const auto s = fixed_series();
    const auto ha = evaluate(HistoricalAverage(), s, 3, 4);
    const std::vector<double> ha_want{6.3439570652544015, 5.868938953886336, 4.714045207910316, 4.830458915396479};
    const auto sn = evaluate(SeasonalNaive(2), s, 3, 4);
    const std::vector<double> sn_want{8.46919551830472, 8.455767262643882, 4.847679857416329, 4.847679857416329};
    for (size_t h = 0; h < 4; ++h) {
      CHECK(std::abs(ha[h] - ha_want[h]) <= 1e-9);
      CHECK(std::abs(sn[h] - sn_want[h]) <= 1e-9);
    }
  }

  TEST_CASE("rolling RMSE matches brute force on random tensors") {
    std::mt19937_64 rng(17);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const int J = 1 + static_cast<int>(rng() % 6), lag = 1 + static_cast<int>(rng() % 5),
                H = 1 + static_cast<int>(rng() % 5);
      const auto s = random_series(rng, J, lag + H + 5 + static_cast<int>(rng() % 20));
      HistoricalAverage ha;
      SeasonalNaive sn(lag);
      for (const ForecastModel* m : {static_cast<const ForecastModel*>(&ha), static_cast<const ForecastModel*>(&sn)}) {
        const auto got = evaluate(*m, s, lag, H);
        const auto want = brute_rmse(*m, s, lag, H);
        for (size_t h = 0; h < got.size(); ++h) worst = std::max(worst, std::abs(got[h] - want[h]));
      }
    }
    CHECK(worst <= 1e-9);
  }

  TEST_CASE("baselines") {
    Eigen::MatrixXd lag(2, 4);
    lag << 1, 2, 3, 4, 10, 0, 10, 0;
    const auto ha = HistoricalAverage().predict(lag, 3);
    CHECK(ha(0, 2) == 2.5);
    CHECK(ha(1, 0) == 5.0);
    const auto sn = SeasonalNaive(2).predict(lag, 3);
    CHECK(sn(0, 0) == 3.0);
    CHECK(sn(0, 1) == 4.0);
    CHECK(sn(0, 2) == 3.0);
    CHECK(testing::code_of([&] { SeasonalNaive(5).predict(lag, 1); }) == ErrorCode::kShapeMismatch);
  }

  TEST_CASE("predict keeps every step-th minute") {
    Eigen::MatrixXd lag(1, 5);
    lag << 1, 2, 3, 4, 5;
    const auto f = predict(SeasonalNaive(5), lag, {5, 4, 2}, {"a"}, 600);
    CHECK(f.step_minutes == std::vector<int>{2, 4});
    CHECK(f.values(0, 0) == 2.0);
    CHECK(f.values(0, 1) == 4.0);
    CHECK(testing::code_of([&] { predict(SeasonalNaive(5), lag, {5, 5, 2}, {"a"}); }) == ErrorCode::kInvalidArgument);
    CHECK(testing::code_of([&] { predict(SeasonalNaive(5), lag, {4, 4, 1}, {"a"}); }) == ErrorCode::kShapeMismatch);
  }

  TEST_CASE("evaluation needs one full window") {
    std::mt19937_64 rng(1);
    const auto s = random_series(rng, 2, 6);
    CHECK(testing::code_of([&] { evaluate(HistoricalAverage(), s, 3, 4); }) == ErrorCode::kShapeMismatch);
  }

  TEST_CASE("graph GRU gradient matches central differences") {
    std::mt19937_64 rng(3);
    auto series = random_series(rng, 3, 10);
    GraphGruOptions o;
    o.hidden = 4;
    o.lag = 3;
    o.horizon = 2;
    o.seed = 5;
    GraphGru model(triangle(), o);
    model.set_scale(150.0);
    const auto samples = model.make_samples(series);
    REQUIRE(samples.size() == 6);
    std::vector<const GruSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);

    Eigen::VectorXd grad;
    model.loss(batch, &grad);
    Eigen::VectorXd numeric(grad.size());
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      const double keep = model.params()[i];
      model.params()[i] = keep + h;
      const double up = model.loss(batch, nullptr);
      model.params()[i] = keep - h;
      const double down = model.loss(batch, nullptr);
      model.params()[i] = keep;
      numeric[i] = (up - down) / (2 * h);
    }
    REQUIRE(numeric.norm() > 1e-6);
    const double rel = (grad - numeric).norm() / numeric.norm();
    CHECK(rel <= 1e-4);
    for (Eigen::Index i = 0; i < grad.size(); ++i)
      REQUIRE(std::abs(grad[i] - numeric[i]) <= 1e-4 * std::max(1.0, std::abs(numeric[i])));
  }

  TEST_CASE("graph GRU training lowers the loss and is deterministic") {
    std::vector<SeriesSource> sources;
    for (int i = 0; i < 3; ++i) {
      SeriesSource src;
      src.desc.id = "cam" + std::to_string(i);
      src.desc.junction_id = std::string(1, static_cast<char>('a' + i));
      src.desc.index = static_cast<uint32_t>(i);
      src.desc.fps = 25;
      src.desc.trace_seed = 100 + static_cast<uint64_t>(i);
      src.process.rate_per_min = 200.0 + 50 * i;
      src.process.class_mix = default_class_mix(8);
      src.process.diurnal_amplitude = 0.4;
      src.process.diurnal_period_s = 1200;
      src.junction_id = src.desc.junction_id;
      sources.push_back(src);
    }
    const auto train = synthetic_minute_series(sources, {"a", "b", "c"}, 120, 1, 8);
    GraphGruOptions o;
    o.hidden = 6;
    o.epochs = 6;
    o.lr = 0.01;
    GraphGru m1(triangle(), o), m2(triangle(), o);
    const auto r1 = m1.fit(train);
    m2.fit(train);
    CHECK(r1.train_rmse.back() < r1.train_rmse.front());
    CHECK(m1.params() == m2.params());
    const Eigen::MatrixXd lag = train.values.rightCols(5);
    const auto p = m1.predict(lag, 5);
    CHECK(p.minCoeff() >= 0.0);
    CHECK(p.allFinite());
  }

  TEST_CASE("zero input gives a zero forecast") {
    GraphGru m(triangle(), GraphGruOptions{});
    CHECK(m.predict(Eigen::MatrixXd::Zero(3, 5), 5).isZero());
  }

  TEST_CASE("checkpoint round trip") {
    testing::TempDir tmp("gru");
    std::mt19937_64 rng(9);
    GraphGruOptions o;
    o.hidden = 5;
    GraphGru m(triangle(), o);
    m.set_scale(42.0);
    m.params() = Eigen::VectorXd::Random(m.params().size());
    m.save(tmp.path() / "m.bin");
    const auto back = GraphGru::load(tmp.path() / "m.bin", triangle());
    CHECK(back.params() == m.params());
    CHECK(back.scale() == 42.0);
    const auto lag = random_series(rng, 3, 5).values;
    CHECK(back.predict(lag, 5) == m.predict(lag, 5));

    CoarseGraph other;
    other.vertex_ids = {"a", "b"};
    other.layout.resize(2);
    other.edges = {{0, 1, 1, 1}};
    CHECK(testing::code_of([&] { GraphGru::load(tmp.path() / "m.bin", other); }) == ErrorCode::kShapeMismatch);
    CHECK(testing::code_of([&] { GraphGru::load(tmp.path() / "none.bin", other); }) == ErrorCode::kIo);
  }

  TEST_CASE("shape and dataset errors") {
    GraphGru m(triangle(), GraphGruOptions{});
    std::mt19937_64 rng(2);
    CHECK(testing::code_of([&] { m.fit(random_series(rng, 3, 9)); }) == ErrorCode::kEmptyDataset);
    CHECK(testing::code_of([&] { m.fit(random_series(rng, 4, 40)); }) == ErrorCode::kShapeMismatch);
    CHECK(testing::code_of([&] { m.predict(Eigen::MatrixXd::Zero(3, 4), 5); }) == ErrorCode::kShapeMismatch);
    CHECK(testing::code_of([&] { m.predict(Eigen::MatrixXd::Zero(3, 5), 6); }) == ErrorCode::kShapeMismatch);
  }

  TEST_CASE("minute series from the store") {
    testing::TempDir tmp("store");
    StoreOptions so;
    so.dir = tmp.path();
    so.cameras = {"c0", "c1", "c2"};
    so.sync = false;
    TimeSeriesStore store(so);
    for (const auto& cam : so.cameras) {
      for (int w = 0; w < 8; ++w) {
        if (cam == "c2" && w >= 4) continue;  // c2 only covers the first minute
        FlowSummary s{cam, 15 * w, 15, {}};
        for (int i = 0; i < 15; ++i) {
          Counts c(8, 0);
          c[0] = 1;
          c[3] = cam == "c1" ? 2 : 0;
          s.rows.push_back({15 * w + i, cam, c});
        }
        store.ingest(s);
      }
    }
    const std::vector<std::string> junctions{"J1", "J2"}, cams{"c0", "c1", "c2"}, map{"J1", "J1", "J2"};
    const auto ms = build_minute_series(store, junctions, cams, map, 0, 3);
    CHECK(ms.values(0, 0) == 60 + 180);
    CHECK(ms.values(0, 1) == 240);
    CHECK(ms.values(1, 0) == 60);
    CHECK(ms.mask(1, 1) == 1);
    CHECK(ms.mask(0, 2) == 1);
    CHECK(ms.mask(0, 1) == 0);
  }

  TEST_CASE("per-second totals fold into minutes") {
    std::vector<std::vector<double>> ps(1, std::vector<double>(130, 1.0));
    ps[0][61] = -1;
    const auto ms = minute_series_from_seconds({"a"}, ps);
    CHECK(ms.minutes() == 2);
    CHECK(ms.values(0, 0) == 60);
    CHECK(ms.values(0, 1) == 59);
  }
}
