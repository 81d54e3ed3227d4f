#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "cityfabric/forecast.hpp"
#include "cityfabric/graph.hpp"

namespace cityfabric {

struct GraphGruOptions {
  int hidden = 32;
  int lag = 5;
  int horizon = 5;
  int epochs = 12;
  double lr = 0.005;
  double lr_decay = 0.9;  // per epoch
  int batch_size = 16;
  double clip_norm = 5.0;
  uint64_t seed = 7;
};

// One training window: inputs [junction x lag], targets [junction x horizon].
struct GruSample {
  Eigen::MatrixXd input;
  Eigen::MatrixXd target;
  Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> mask;  // 1 = skip target
};

// One-layer graph GRU with weights shared across nodes. Each step mixes a
// node's input and hidden state with its neighbours' through
// A_hat = D^-1 (I + A_w), where A_w holds super-edge weights:
//   X = [x, A_hat x], P = A_hat H
//   Z = sigmoid(X Wxz + P Whz + bz), R = sigmoid(X Wxr + P Whr + br)
//   C = tanh(X Wxc + (R * P) Whc),   H' = (1 - Z) * H + Z * C
// Output: Y = H_lag Wo + X_lag Wl. There are no input-path biases, so a
// zero input window gives a zero forecast.
class GraphGru : public ForecastModel {
 public:
  GraphGru(const CoarseGraph& graph, GraphGruOptions options);

  std::string id() const override { return "graph_gru"; }
  FitReport fit(const MinuteSeries& train) override;
  Eigen::MatrixXd predict(const Eigen::MatrixXd& lag, int horizon_minutes) const override;
  int required_lag() const override { return options_.lag; }

  std::vector<GruSample> make_samples(const MinuteSeries& series) const;
  // Mean masked squared error in scaled units; fills `grad` when non-null.
  double loss(const std::vector<const GruSample*>& batch, Eigen::VectorXd* grad) const;

  Eigen::VectorXd& params() noexcept { return params_; }
  const Eigen::VectorXd& params() const noexcept { return params_; }
  double scale() const noexcept { return scale_; }
  void set_scale(double s) { scale_ = s; }
  const GraphGruOptions& options() const noexcept { return options_; }
  const Eigen::SparseMatrix<double, Eigen::RowMajor>& propagation() const noexcept { return a_hat_; }

  void save(const std::filesystem::path& path) const;
  static GraphGru load(const std::filesystem::path& path, const CoarseGraph& graph);

 private:
  struct Views;
  Views views(const Eigen::VectorXd& p) const;
  double sample_loss(const GruSample& s, double weight, Eigen::VectorXd* grad) const;
  size_t param_count() const;

  GraphGruOptions options_;
  Eigen::Index nodes_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> a_hat_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> a_hat_t_;
  Eigen::VectorXd params_;
  double scale_ = 1.0;
};

}  // namespace cityfabric
