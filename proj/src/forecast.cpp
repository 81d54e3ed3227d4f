#include "cityfabric/forecast.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/store.hpp"

namespace cityfabric {

MinuteSeries MinuteSeries::slice(Eigen::Index from, Eigen::Index count) const {
  if (from < 0 || count < 0 || from + count > minutes())
    throw Error(ErrorCode::kShapeMismatch, "minute slice out of range");
  MinuteSeries out;
  out.junctions = junctions;
  out.start_minute = start_minute + from;
  out.values = values.middleCols(from, count);
  out.mask = mask.middleCols(from, count);
  return out;
}

MinuteSeries build_minute_series(const TimeSeriesStore& store, std::span<const std::string> junctions,
                                 std::span<const std::string> cameras, std::span<const std::string> camera_junction,
                                 int64_t from_min, int64_t to_min) {
  if (cameras.size() != camera_junction.size())
    throw Error(ErrorCode::kShapeMismatch, "camera and junction lists differ in length");
  if (from_min >= to_min) throw Error(ErrorCode::kInvalidArgument, "minute range is empty");
  const auto J = static_cast<Eigen::Index>(junctions.size());
  const Eigen::Index M = to_min - from_min;
  std::vector<Eigen::Index> row_of(cameras.size(), -1);
  for (size_t c = 0; c < cameras.size(); ++c) {
    for (Eigen::Index j = 0; j < J; ++j)
      if (junctions[static_cast<size_t>(j)] == camera_junction[c]) row_of[c] = j;
  }
  MinuteSeries out;
  out.junctions.assign(junctions.begin(), junctions.end());
  out.start_minute = from_min;
  out.values = Eigen::MatrixXd::Zero(J, M);
  Eigen::MatrixXi present = Eigen::MatrixXi::Zero(J, M);
  if (!cameras.empty()) {
    auto m = store.query(cameras, from_min * 60, to_min * 60);
    for (size_t c = 0; c < cameras.size(); ++c) {
      const auto j = row_of[c];
      if (j < 0) continue;
      for (size_t s = 0; s < m.seconds(); ++s) {
        if (m.is_missing(c, s)) continue;
        const auto minute = static_cast<Eigen::Index>(s / 60);
        out.values(j, minute) += static_cast<double>(m.total(c, s));
        present(j, minute) = 1;
      }
    }
  }
  out.mask = (present.array() == 0).cast<uint8_t>();
  return out;
}

MinuteSeries minute_series_from_seconds(const std::vector<std::string>& junctions,
                                        const std::vector<std::vector<double>>& per_second) {
  if (per_second.size() != junctions.size())
    throw Error(ErrorCode::kShapeMismatch, "one per-second series per junction expected");
  size_t seconds = per_second.empty() ? 0 : per_second.front().size();
  for (const auto& row : per_second)
    if (row.size() != seconds) throw Error(ErrorCode::kShapeMismatch, "per-second series differ in length");
  const auto J = static_cast<Eigen::Index>(junctions.size());
  const auto M = static_cast<Eigen::Index>(seconds / 60);
  MinuteSeries out;
  out.junctions = junctions;
  out.values = Eigen::MatrixXd::Zero(J, M);
  out.mask = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Ones(J, M);
  for (Eigen::Index j = 0; j < J; ++j) {
    for (Eigen::Index m = 0; m < M; ++m) {
      for (Eigen::Index s = 0; s < 60; ++s) {
        const double v = per_second[static_cast<size_t>(j)][static_cast<size_t>(m * 60 + s)];
        if (v < 0.0) continue;
        out.values(j, m) += v;
        out.mask(j, m) = 0;
      }
    }
  }
  return out;
}

MinuteSeries synthetic_minute_series(std::span<const SeriesSource> sources, const std::vector<std::string>& junctions,
                                     int minutes, uint64_t salt, size_t num_classes) {
  const auto J = static_cast<Eigen::Index>(junctions.size());
  MinuteSeries out;
  out.junctions = junctions;
  out.values = Eigen::MatrixXd::Zero(J, minutes);
  out.mask = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(J, minutes);
  for (const auto& src : sources) {
    Eigen::Index row = -1;
    for (Eigen::Index j = 0; j < J; ++j)
      if (junctions[static_cast<size_t>(j)] == src.junction_id) row = j;
    if (row < 0) throw Error(ErrorCode::kReference, "junction '" + src.junction_id + "' not in series");
    StreamDescriptor d = src.desc;
    d.trace_seed = derive_seed(d.trace_seed, salt);
    TrafficProcess p = src.process;
    p.modulation.shared_seed = derive_seed(p.modulation.shared_seed, salt);
    const auto counts = arrival_counts(d, p, minutes * 60.0, num_classes);
    for (size_t s = 0; s < counts.size(); ++s) {
      uint64_t total = 0;
      for (auto c : counts[s]) total += c;
      out.values(row, static_cast<Eigen::Index>(s / 60)) += static_cast<double>(total);
    }
  }
  return out;
}

void ForecastRequest::validate() const {
  if (lag_minutes <= 0 || horizon_minutes <= 0 || step_minutes <= 0)
    throw Error(ErrorCode::kInvalidArgument, "lag, horizon and step must be > 0");
  if (horizon_minutes % step_minutes != 0)
    throw Error(ErrorCode::kInvalidArgument, "horizon must be divisible by step");
}

nlohmann::json forecast_to_json(const Forecast& f) {
  nlohmann::json per = nlohmann::json::object();
  for (size_t j = 0; j < f.junctions.size(); ++j) {
    std::vector<double> row(static_cast<size_t>(f.values.cols()));
    for (Eigen::Index k = 0; k < f.values.cols(); ++k) row[static_cast<size_t>(k)] = f.values(static_cast<Eigen::Index>(j), k);
    per[f.junctions[j]] = std::move(row);
  }
  return {{"issued_at_s", f.issued_at_s},
          {"model_id", f.model_id},
          {"step_minutes", f.step_minutes},
          {"per_junction", std::move(per)}};
}

Eigen::MatrixXd HistoricalAverage::predict(const Eigen::MatrixXd& lag, int horizon_minutes) const {
  if (lag.cols() < 1 || horizon_minutes < 1) throw Error(ErrorCode::kShapeMismatch, "empty lag window or horizon");
  const Eigen::VectorXd mean = lag.rowwise().mean().cwiseMax(0.0);
  return mean.replicate(1, horizon_minutes);
}

SeasonalNaive::SeasonalNaive(int period) : period_(period) {
  if (period < 1) throw Error(ErrorCode::kInvalidArgument, "seasonal period must be >= 1");
}

Eigen::MatrixXd SeasonalNaive::predict(const Eigen::MatrixXd& lag, int horizon_minutes) const {
  if (lag.cols() < period_)
    throw Error(ErrorCode::kShapeMismatch, "lag window shorter than the seasonal period");
  Eigen::MatrixXd out(lag.rows(), horizon_minutes);
  const Eigen::Index base = lag.cols() - period_;
  for (int h = 0; h < horizon_minutes; ++h) out.col(h) = lag.col(base + h % period_).cwiseMax(0.0);
  return out;
}

Forecast predict(const ForecastModel& model, const Eigen::MatrixXd& lag, const ForecastRequest& request,
                 const std::vector<std::string>& junctions, int64_t issued_at_s) {
  request.validate();
  if (lag.rows() != static_cast<Eigen::Index>(junctions.size()) || lag.cols() != request.lag_minutes)
    throw Error(ErrorCode::kShapeMismatch, "lag tensor must be [" + std::to_string(junctions.size()) + " x " +
                                               std::to_string(request.lag_minutes) + "]");
  const Eigen::MatrixXd full = model.predict(lag, request.horizon_minutes);
  Forecast f;
  f.issued_at_s = issued_at_s;
  f.model_id = model.id();
  f.junctions = junctions;
  f.values.resize(lag.rows(), request.steps());
  for (int k = 0; k < request.steps(); ++k) {
    const int minute = (k + 1) * request.step_minutes;
    f.step_minutes.push_back(minute);
    f.values.col(k) = full.col(minute - 1).cwiseMax(0.0);
  }
  return f;
}

std::vector<double> evaluate(const ForecastModel& model, const MinuteSeries& test, int lag_minutes,
                             int horizon_minutes) {
  const Eigen::Index T = test.minutes();
  if (lag_minutes < 1 || horizon_minutes < 1 || T < lag_minutes + horizon_minutes)
    throw Error(ErrorCode::kShapeMismatch, "test series too short for one evaluation window");
  std::vector<double> sse(static_cast<size_t>(horizon_minutes), 0.0);
  std::vector<double> n(static_cast<size_t>(horizon_minutes), 0.0);
  for (Eigen::Index o = lag_minutes; o + horizon_minutes <= T; ++o) {
    const Eigen::MatrixXd pred = model.predict(test.values.middleCols(o - lag_minutes, lag_minutes), horizon_minutes);
    for (int h = 0; h < horizon_minutes; ++h) {
      for (Eigen::Index j = 0; j < test.values.rows(); ++j) {
        if (test.mask(j, o + h)) continue;
        const double e = pred(j, h) - test.values(j, o + h);
        sse[static_cast<size_t>(h)] += e * e;
        n[static_cast<size_t>(h)] += 1.0;
      }
    }
  }
  std::vector<double> rmse(sse.size());
  for (size_t h = 0; h < sse.size(); ++h) rmse[h] = n[h] > 0 ? std::sqrt(sse[h] / n[h]) : 0.0;
  return rmse;
}

}  // namespace cityfabric
