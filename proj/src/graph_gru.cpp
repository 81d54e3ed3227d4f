#include "cityfabric/graph_gru.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"
#include "cityfabric/rng.hpp"

namespace cityfabric {

namespace {

using Mat = Eigen::MatrixXd;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;

struct Layout {
  Eigen::Index H, S, L;
  Eigen::Index wxz, wxr, wxc, whz, whr, whc, bz, br, wo, wl, total;
  Layout(Eigen::Index h, Eigen::Index s, Eigen::Index l) : H(h), S(s), L(l) {
    Eigen::Index o = 0;
    wxz = o, o += 2 * H;
    wxr = o, o += 2 * H;
    wxc = o, o += 2 * H;
    whz = o, o += H * H;
    whr = o, o += H * H;
    whc = o, o += H * H;
    bz = o, o += H;
    br = o, o += H;
    wo = o, o += H * S;
    wl = o, o += L * S;
    total = o;
  }
};

Mat sigmoid(const Mat& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

}  // namespace

struct GraphGru::Views {
  CMap wxz, wxr, wxc, whz, whr, whc;
  Eigen::Map<const Eigen::RowVectorXd> bz, br;
  CMap wo, wl;
};

GraphGru::GraphGru(const CoarseGraph& graph, GraphGruOptions options)
    : options_(options), nodes_(static_cast<Eigen::Index>(graph.vertex_count())) {
  if (options_.hidden < 1 || options_.lag < 1 || options_.horizon < 1 || options_.batch_size < 1)
    throw Error(ErrorCode::kInvalidArgument, "hidden, lag, horizon and batch size must be >= 1");
  if (nodes_ == 0) throw Error(ErrorCode::kInvalidArgument, "graph has no vertices");

  std::vector<Eigen::Triplet<double>> trips;
  std::vector<double> degree(static_cast<size_t>(nodes_), 1.0);
  for (const auto& e : graph.edges) {
    degree[e.u] += e.weight;
    degree[e.v] += e.weight;
  }
  for (Eigen::Index v = 0; v < nodes_; ++v) trips.emplace_back(v, v, 1.0 / degree[static_cast<size_t>(v)]);
  for (const auto& e : graph.edges) {
    trips.emplace_back(e.u, e.v, e.weight / degree[e.u]);
    trips.emplace_back(e.v, e.u, e.weight / degree[e.v]);
  }
  a_hat_.resize(nodes_, nodes_);
  a_hat_.setFromTriplets(trips.begin(), trips.end());
  a_hat_t_ = a_hat_.transpose();

  const Layout lay(options_.hidden, options_.horizon, options_.lag);
  params_ = Eigen::VectorXd::Zero(lay.total);
  std::mt19937_64 rng(options_.seed);
  auto fill = [&](Eigen::Index off, Eigen::Index rows, Eigen::Index cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < rows * cols; ++i) params_[off + i] = u(rng);
  };
  const auto H = lay.H;
  fill(lay.wxz, 2, H);
  fill(lay.wxr, 2, H);
  fill(lay.wxc, 2, H);
  fill(lay.whz, H, H);
  fill(lay.whr, H, H);
  fill(lay.whc, H, H);
  fill(lay.wo, H, lay.S);
  params_.segment(lay.wo, H * lay.S) *= 0.1;
  // Linear skip starts as the lag mean.
  params_.segment(lay.wl, lay.L * lay.S).setConstant(1.0 / static_cast<double>(lay.L));
}

size_t GraphGru::param_count() const { return static_cast<size_t>(params_.size()); }

GraphGru::Views GraphGru::views(const Eigen::VectorXd& p) const {
  const Layout l(options_.hidden, options_.horizon, options_.lag);
  const double* d = p.data();
  return Views{CMap(d + l.wxz, 2, l.H),  CMap(d + l.wxr, 2, l.H),  CMap(d + l.wxc, 2, l.H),
               CMap(d + l.whz, l.H, l.H), CMap(d + l.whr, l.H, l.H), CMap(d + l.whc, l.H, l.H),
               Eigen::Map<const Eigen::RowVectorXd>(d + l.bz, l.H),
               Eigen::Map<const Eigen::RowVectorXd>(d + l.br, l.H),
               CMap(d + l.wo, l.H, l.S),  CMap(d + l.wl, l.L, l.S)};
}

std::vector<GruSample> GraphGru::make_samples(const MinuteSeries& series) const {
  if (series.values.rows() != nodes_)
    throw Error(ErrorCode::kShapeMismatch, "series has " + std::to_string(series.values.rows()) +
                                               " junctions, graph has " + std::to_string(nodes_));
  std::vector<GruSample> out;
  const Eigen::Index L = options_.lag, S = options_.horizon;
  for (Eigen::Index o = L; o + S <= series.minutes(); ++o) {
    GruSample s;
    s.input = series.values.middleCols(o - L, L);
    s.target = series.values.middleCols(o, S);
    s.mask = series.mask.middleCols(o, S);
    out.push_back(std::move(s));
  }
  return out;
}

double GraphGru::sample_loss(const GruSample& s, double weight, Eigen::VectorXd* grad) const {
  const Views w = views(params_);
  const Eigen::Index J = nodes_, H = options_.hidden, L = options_.lag;
  const double inv = 1.0 / scale_;

  const Mat xlag = s.input * inv;
  std::vector<Mat> X(static_cast<size_t>(L)), P(static_cast<size_t>(L)), Z(static_cast<size_t>(L)),
      R(static_cast<size_t>(L)), C(static_cast<size_t>(L)), Hs(static_cast<size_t>(L + 1));
  Hs[0] = Mat::Zero(J, H);
  for (Eigen::Index t = 0; t < L; ++t) {
    const auto k = static_cast<size_t>(t);
    X[k].resize(J, 2);
    X[k].col(0) = xlag.col(t);
    X[k].col(1) = a_hat_ * xlag.col(t);
    P[k] = a_hat_ * Hs[k];
    Z[k] = sigmoid((X[k] * w.wxz + P[k] * w.whz).rowwise() + w.bz);
    R[k] = sigmoid((X[k] * w.wxr + P[k] * w.whr).rowwise() + w.br);
    C[k] = (X[k] * w.wxc + R[k].cwiseProduct(P[k]) * w.whc).array().tanh().matrix();
    Hs[k + 1] = (1.0 - Z[k].array()).matrix().cwiseProduct(Hs[k]) + Z[k].cwiseProduct(C[k]);
  }
  const Mat Y = Hs[static_cast<size_t>(L)] * w.wo + xlag * w.wl;
  Mat err = Y - s.target * inv;
  for (Eigen::Index i = 0; i < err.rows(); ++i)
    for (Eigen::Index j = 0; j < err.cols(); ++j)
      if (s.mask(i, j)) err(i, j) = 0.0;
  const double sse = err.squaredNorm();
  if (!grad) return weight * sse;

  const Layout l(H, options_.horizon, L);
  double* g = grad->data();
  MMap gwxz(g + l.wxz, 2, H), gwxr(g + l.wxr, 2, H), gwxc(g + l.wxc, 2, H);
  MMap gwhz(g + l.whz, H, H), gwhr(g + l.whr, H, H), gwhc(g + l.whc, H, H);
  Eigen::Map<Eigen::RowVectorXd> gbz(g + l.bz, H), gbr(g + l.br, H);
  MMap gwo(g + l.wo, H, l.S), gwl(g + l.wl, L, l.S);

  const Mat dY = (2.0 * weight) * err;
  gwo.noalias() += Hs[static_cast<size_t>(L)].transpose() * dY;
  gwl.noalias() += xlag.transpose() * dY;
  Mat dH = dY * w.wo.transpose();
  for (Eigen::Index t = L - 1; t >= 0; --t) {
    const auto k = static_cast<size_t>(t);
    const Mat dZ = dH.cwiseProduct(C[k] - Hs[k]);
    const Mat dC = dH.cwiseProduct(Z[k]);
    Mat dHprev = dH.cwiseProduct((1.0 - Z[k].array()).matrix());
    const Mat dac = dC.cwiseProduct((1.0 - C[k].array().square()).matrix());
    const Mat Q = R[k].cwiseProduct(P[k]);
    gwxc.noalias() += X[k].transpose() * dac;
    gwhc.noalias() += Q.transpose() * dac;
    const Mat dQ = dac * w.whc.transpose();
    const Mat dR = dQ.cwiseProduct(P[k]);
    Mat dP = dQ.cwiseProduct(R[k]);
    const Mat daz = dZ.cwiseProduct(Z[k].cwiseProduct((1.0 - Z[k].array()).matrix()));
    const Mat dar = dR.cwiseProduct(R[k].cwiseProduct((1.0 - R[k].array()).matrix()));
    gwxz.noalias() += X[k].transpose() * daz;
    gwhz.noalias() += P[k].transpose() * daz;
    gbz += daz.colwise().sum();
    gwxr.noalias() += X[k].transpose() * dar;
    gwhr.noalias() += P[k].transpose() * dar;
    gbr += dar.colwise().sum();
    dP.noalias() += daz * w.whz.transpose();
    dP.noalias() += dar * w.whr.transpose();
    dHprev += a_hat_t_ * dP;
    dH = std::move(dHprev);
  }
  return weight * sse;
}

double GraphGru::loss(const std::vector<const GruSample*>& batch, Eigen::VectorXd* grad) const {
  double valid = 0.0;
  for (const auto* s : batch) valid += static_cast<double>((s->mask.array() == 0).count());
  if (grad) *grad = Eigen::VectorXd::Zero(params_.size());
  if (valid == 0.0) return 0.0;
  double total = 0.0;
  for (const auto* s : batch) total += sample_loss(*s, 1.0 / valid, grad);
  return total;
}

FitReport GraphGru::fit(const MinuteSeries& train) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto samples = make_samples(train);
  if (samples.empty())
    throw Error(ErrorCode::kEmptyDataset, "training series shorter than lag + horizon");

  double sum = 0.0, n = 0.0;
  for (Eigen::Index i = 0; i < train.values.rows(); ++i)
    for (Eigen::Index j = 0; j < train.values.cols(); ++j)
      if (!train.mask(i, j)) sum += train.values(i, j), n += 1.0;
  scale_ = (n > 0.0 && sum > 0.0) ? sum / n : 1.0;

  FitReport report;
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(derive_seed(options_.seed, 0x5f1u));

  Eigen::VectorXd m = Eigen::VectorXd::Zero(params_.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(params_.size());
  Eigen::VectorXd grad;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  long step = 0;
  double lr = options_.lr;

  std::vector<const GruSample*> all;
  for (const auto& s : samples) all.push_back(&s);

  for (int epoch = 0; epoch < options_.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(options_.batch_size)) {
      std::vector<const GruSample*> batch;
      for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(options_.batch_size)); ++i)
        batch.push_back(&samples[order[i]]);
      const double l = loss(batch, &grad);
      if (!std::isfinite(l) || !grad.allFinite()) {
        throw Error(ErrorCode::kDivergenceDetected,
                    "loss became non-finite at epoch " + std::to_string(epoch) + " (seed=" +
                        std::to_string(options_.seed) + ", hidden=" + std::to_string(options_.hidden) +
                        ", lag=" + std::to_string(options_.lag) + ", horizon=" + std::to_string(options_.horizon) +
                        ", lr=" + std::to_string(options_.lr) + ", batch=" + std::to_string(options_.batch_size) + ")");
      }
      const double norm = grad.norm();
      if (options_.clip_norm > 0.0 && norm > options_.clip_norm) grad *= options_.clip_norm / norm;
      ++step;
      m = b1 * m + (1.0 - b1) * grad;
      v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
      params_.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
    const double mse = loss(all, nullptr);
    if (!std::isfinite(mse))
      throw Error(ErrorCode::kDivergenceDetected, "training loss is NaN after epoch " + std::to_string(epoch) +
                                                      " (seed=" + std::to_string(options_.seed) + ")");
    report.train_rmse.push_back(std::sqrt(mse) * scale_);
    report.learning_rate.push_back(lr);
    lr *= options_.lr_decay;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Eigen::MatrixXd GraphGru::predict(const Eigen::MatrixXd& lag, int horizon_minutes) const {
  if (lag.rows() != nodes_ || lag.cols() != options_.lag)
    throw Error(ErrorCode::kShapeMismatch, "lag tensor must be [" + std::to_string(nodes_) + " x " +
                                               std::to_string(options_.lag) + "], got [" +
                                               std::to_string(lag.rows()) + " x " + std::to_string(lag.cols()) + "]");
  if (horizon_minutes < 1 || horizon_minutes > options_.horizon)
    throw Error(ErrorCode::kShapeMismatch, "model was trained for a " + std::to_string(options_.horizon) +
                                               "-minute horizon");
  const Views w = views(params_);
  const double inv = 1.0 / scale_;
  const Mat xlag = lag * inv;
  Mat H = Mat::Zero(nodes_, options_.hidden);
  Mat X(nodes_, 2);
  for (Eigen::Index t = 0; t < options_.lag; ++t) {
    X.col(0) = xlag.col(t);
    X.col(1) = a_hat_ * xlag.col(t);
    const Mat P = a_hat_ * H;
    const Mat Z = sigmoid((X * w.wxz + P * w.whz).rowwise() + w.bz);
    const Mat R = sigmoid((X * w.wxr + P * w.whr).rowwise() + w.br);
    const Mat C = (X * w.wxc + R.cwiseProduct(P) * w.whc).array().tanh().matrix();
    H = (1.0 - Z.array()).matrix().cwiseProduct(H) + Z.cwiseProduct(C);
  }
  const Mat Y = H * w.wo + xlag * w.wl;
  return (Y.leftCols(horizon_minutes) * scale_).cwiseMax(0.0);
}

void GraphGru::save(const std::filesystem::path& path) const {
  const Layout l(options_.hidden, options_.horizon, options_.lag);
  nlohmann::json header = {
      {"model_id", id()},
      {"seed", options_.seed},
      {"hidden", options_.hidden},
      {"lag", options_.lag},
      {"horizon", options_.horizon},
      {"nodes", nodes_},
      {"scale", scale_},
      {"param_count", params_.size()},
      {"shapes",
       {{"wxz", {2, l.H}}, {"wxr", {2, l.H}}, {"wxc", {2, l.H}}, {"whz", {l.H, l.H}}, {"whr", {l.H, l.H}},
        {"whc", {l.H, l.H}}, {"bz", {l.H}}, {"br", {l.H}}, {"wo", {l.H, l.S}}, {"wl", {l.L, l.S}}}}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  const auto len = static_cast<uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(params_.data()), static_cast<std::streamsize>(params_.size() * sizeof(double)));
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + path.string());
}

GraphGru GraphGru::load(const std::filesystem::path& path, const CoarseGraph& graph) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw Error(ErrorCode::kParse, "truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("checkpoint header: ") + e.what());
  }
  if (header.value("model_id", "") != "graph_gru") throw Error(ErrorCode::kParse, "not a graph_gru checkpoint");
  if (header.at("nodes").get<Eigen::Index>() != static_cast<Eigen::Index>(graph.vertex_count()))
    throw Error(ErrorCode::kShapeMismatch, "checkpoint was trained on a graph of a different size");
  GraphGruOptions opt;
  opt.seed = header.at("seed").get<uint64_t>();
  opt.hidden = header.at("hidden").get<int>();
  opt.lag = header.at("lag").get<int>();
  opt.horizon = header.at("horizon").get<int>();
  GraphGru model(graph, opt);
  model.scale_ = header.at("scale").get<double>();
  if (header.at("param_count").get<Eigen::Index>() != model.params_.size())
    throw Error(ErrorCode::kShapeMismatch, "checkpoint parameter count does not match its shapes");
  in.read(reinterpret_cast<char*>(model.params_.data()),
          static_cast<std::streamsize>(model.params_.size() * sizeof(double)));
  if (!in) throw Error(ErrorCode::kParse, "truncated checkpoint parameters");
  return model;
}

}  // namespace cityfabric
