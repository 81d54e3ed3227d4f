#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "cityfabric/emulator.hpp"
#include "cityfabric/graph.hpp"

namespace cityfabric {

class TimeSeriesStore;

// [junction x minute] totals with a missing mask (1 = no data for the whole minute).
struct MinuteSeries {
  std::vector<std::string> junctions;
  int64_t start_minute = 0;
  Eigen::MatrixXd values;
  Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;

  Eigen::Index minutes() const noexcept { return values.cols(); }
  MinuteSeries slice(Eigen::Index from, Eigen::Index count) const;
};

// Sums the cameras mapped to each junction over whole minutes [from_min, to_min).
// camera_junction[i] is the junction of store camera i; `junctions` fixes row order.
MinuteSeries build_minute_series(const TimeSeriesStore& store, std::span<const std::string> junctions,
                                 std::span<const std::string> cameras, std::span<const std::string> camera_junction,
                                 int64_t from_min, int64_t to_min);

// Per-second totals -> per-minute sums; trailing partial minutes are dropped.
// per_second[j][s] < 0 marks a missing second.
MinuteSeries minute_series_from_seconds(const std::vector<std::string>& junctions,
                                        const std::vector<std::vector<double>>& per_second);

struct SeriesSource {
  StreamDescriptor desc;
  TrafficProcess process;
  std::string junction_id;
};

// Generated minute totals for `minutes` minutes, with every trace and
// modulation seed salted so the result is independent of the live run.
MinuteSeries synthetic_minute_series(std::span<const SeriesSource> sources, const std::vector<std::string>& junctions,
                                     int minutes, uint64_t salt, size_t num_classes);

struct ForecastRequest {
  int lag_minutes = 5;
  int horizon_minutes = 5;
  int step_minutes = 1;
  void validate() const;
  int steps() const { return horizon_minutes / step_minutes; }
};

struct Forecast {
  int64_t issued_at_s = 0;
  std::string model_id;
  std::vector<std::string> junctions;
  std::vector<int> step_minutes;  // minutes ahead for each column
  Eigen::MatrixXd values;         // [junction x step], >= 0
};

nlohmann::json forecast_to_json(const Forecast& f);

struct FitReport {
  std::vector<double> train_rmse;  // per epoch
  std::vector<double> learning_rate;
  double seconds = 0.0;
};

class ForecastModel {
 public:
  virtual ~ForecastModel() = default;
  virtual std::string id() const = 0;
  // `train` is [junction x minute]; masked cells are excluded from the loss.
  virtual FitReport fit(const MinuteSeries& train) = 0;
  // lag: [junction x lag minutes] -> [junction x horizon minutes], clamped at 0.
  // Throws ShapeMismatch.
  virtual Eigen::MatrixXd predict(const Eigen::MatrixXd& lag, int horizon_minutes) const = 0;
  virtual int required_lag() const { return 1; }
};

class HistoricalAverage : public ForecastModel {
 public:
  std::string id() const override { return "historical_average"; }
  FitReport fit(const MinuteSeries&) override { return {}; }
  Eigen::MatrixXd predict(const Eigen::MatrixXd& lag, int horizon_minutes) const override;
};

// Repeats the last `period` minutes of the lag window.
class SeasonalNaive : public ForecastModel {
 public:
  explicit SeasonalNaive(int period = 5);
  std::string id() const override { return "seasonal_naive"; }
  FitReport fit(const MinuteSeries&) override { return {}; }
  Eigen::MatrixXd predict(const Eigen::MatrixXd& lag, int horizon_minutes) const override;
  int required_lag() const override { return period_; }

 private:
  int period_;
};

// Applies the model and keeps every step_minutes-th minute of the horizon.
Forecast predict(const ForecastModel& model, const Eigen::MatrixXd& lag, const ForecastRequest& request,
                 const std::vector<std::string>& junctions, int64_t issued_at_s = 0);

// Rolling-origin RMSE per horizon minute over every origin o in [lag, T - horizon].
// Targets masked in `test` are skipped.
std::vector<double> evaluate(const ForecastModel& model, const MinuteSeries& test, int lag_minutes,
                             int horizon_minutes);

}  // namespace cityfabric
