#include "cityfabric/fl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "cityfabric/errors.hpp"
#include "cityfabric/rng.hpp"

namespace cityfabric {

std::vector<SampledFrame> stratified_sample(uint32_t stream, uint32_t fps, double duration_s, int window_s,
                                            uint64_t seed, int target_frames) {
  if (fps == 0 || duration_s <= 0.0) throw Error(ErrorCode::kInvalidArgument, "fps and duration must be > 0");
  const auto total = static_cast<int64_t>(std::llround(duration_s * fps));
  int64_t windows;
  std::function<int64_t(int64_t)> bound;
  if (target_frames > 0) {
    windows = target_frames;
    bound = [total, windows](int64_t i) { return i * total / windows; };
  } else {
    if (window_s <= 0) throw Error(ErrorCode::kInvalidArgument, "window_s must be > 0");
    const int64_t wf = static_cast<int64_t>(window_s) * fps;
    windows = total / wf;
    bound = [wf](int64_t i) { return i * wf; };
  }
  std::vector<SampledFrame> out;
  out.reserve(static_cast<size_t>(windows));
  for (int64_t i = 0; i < windows; ++i) {
    const int64_t lo = bound(i), hi = bound(i + 1);
    if (hi <= lo) continue;
    SplitMix64 rng(derive_seed(seed, stream, static_cast<uint64_t>(i)));
    const int64_t frame = lo + static_cast<int64_t>(rng.uniform() * static_cast<double>(hi - lo));
    out.push_back({stream, i, frame, frame_ts_ms(frame, fps)});
  }
  return out;
}

LabelOracle::LabelOracle(LabelOracleConfig config) : config_(config) {
  if (!(config_.tau > 0.0 && config_.tau < 1.0)) throw Error(ErrorCode::kInvalidArgument, "tau must be in (0, 1)");
  if (config_.num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "oracle needs at least one class");
  if (config_.noise_rate < 0.0 || config_.noise_rate > 1.0)
    throw Error(ErrorCode::kInvalidArgument, "noise_rate must be in [0, 1]");
}

FrameLabels LabelOracle::label(std::span<const GroundTruthLabel> objects, uint64_t frame_key) const {
  FrameLabels out;
  const auto C = config_.num_classes;
  for (const auto& obj : objects) {
    std::mt19937_64 rng(derive_seed(config_.seed, obj.tracking_id, static_cast<uint64_t>(obj.frame)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    LabeledItem item;
    item.true_class = obj.true_class;
    item.label = obj.true_class;
    if (C > 1 && u(rng) < config_.noise_rate) {
      const auto shift = 1 + static_cast<size_t>(u(rng) * static_cast<double>(C - 1)) % (C - 1);
      item.label = static_cast<uint16_t>((obj.true_class + shift) % C);
    }
    double p;
    if (config_.confidence.fixed > 0.0 && config_.confidence.fixed < 1.0) {
      p = config_.confidence.fixed;
    } else {
      std::gamma_distribution<double> ga(config_.confidence.alpha, 1.0), gb(config_.confidence.beta, 1.0);
      const double a = ga(rng), b = gb(rng);
      p = a / (a + b);
    }
    item.confidence = std::clamp(p, 1e-9, 1.0 - 1e-9);
    item.bbox = obj.bbox;
    item.stream = obj.stream;
    item.frame = obj.frame;
    item.tracking_id = obj.tracking_id;
    ++out.proposed;
    if (item.confidence >= config_.tau) out.items.push_back(item);
  }
  std::mt19937_64 lat(derive_seed(config_.seed, 0x1a7e, frame_key));
  std::gamma_distribution<double> g(config_.latency_shape, config_.latency_mean_s / config_.latency_shape);
  out.latency_s = g(lat);
  return out;
}

std::vector<double> object_features(uint16_t true_class, const BBox& bbox, uint64_t key, uint64_t feature_seed) {
  std::vector<double> x(kFeatureDim);
  std::mt19937_64 proto(derive_seed(feature_seed, 0xc1a55, true_class));
  std::mt19937_64 noise(derive_seed(feature_seed, 0x2015e, key));
  // separate distributions: libstdc++ caches the second Box-Muller draw
  std::normal_distribution<double> np(0.0, 1.0), nn(0.0, 1.0);
  for (size_t i = 0; i < kFeatureDim; ++i) x[i] = 0.35 * np(proto) + nn(noise);
  // A few geometric cues; class size priors are not modelled.
  x[0] += bbox.w;
  x[1] += bbox.h;
  x[2] += bbox.w * bbox.h * 4.0;
  x[3] += bbox.x + 0.5 * bbox.w - 0.5;
  return x;
}

ModelWeights LinearClassifier::init(uint64_t seed) const {
  ModelWeights w(dim());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.01);
  for (auto& v : w) v = n(rng);
  return w;
}

namespace {

void logits(const ModelWeights& w, size_t C, std::span<const double> x, std::vector<double>& out) {
  out.assign(C, 0.0);
  constexpr size_t D = kFeatureDim + 1;
  for (size_t c = 0; c < C; ++c) {
    const double* row = w.data() + c * D;
    double s = row[kFeatureDim];
    for (size_t i = 0; i < kFeatureDim; ++i) s += row[i] * x[i];
    out[c] = s;
  }
}

}  // namespace

uint16_t LinearClassifier::predict(const ModelWeights& w, std::span<const double> x) const {
  if (w.size() != dim()) throw Error(ErrorCode::kDimensionMismatch, "weight vector has the wrong size");
  std::vector<double> z;
  logits(w, num_classes, x, z);
  return static_cast<uint16_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

double LinearClassifier::accuracy(const ModelWeights& w, std::span<const Example> data) const {
  if (data.empty()) return 0.0;
  size_t ok = 0;
  for (const auto& e : data) ok += predict(w, e.x) == e.y;
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

ModelWeights LinearClassifier::train(ModelWeights w, std::span<const Example> data, int epochs, double lr,
                                     int batch_size, uint64_t seed) const {
  if (w.size() != dim()) throw Error(ErrorCode::kDimensionMismatch, "weight vector has the wrong size");
  if (data.empty()) return w;
  constexpr size_t D = kFeatureDim + 1;
  const size_t C = num_classes;
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(seed);
  std::vector<double> grad(w.size()), z;
  const auto bs = static_cast<size_t>(std::max(batch_size, 1));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += bs) {
      const size_t end = std::min(order.size(), start + bs);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (size_t k = start; k < end; ++k) {
        const auto& e = data[order[k]];
        logits(w, C, e.x, z);
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (auto& v : z) sum += (v = std::exp(v - mx));
        for (size_t c = 0; c < C; ++c) {
          const double d = z[c] / sum - (c == e.y ? 1.0 : 0.0);
          double* g = grad.data() + c * D;
          for (size_t i = 0; i < kFeatureDim; ++i) g[i] += d * e.x[i];
          g[kFeatureDim] += d;
        }
      }
      const double step = lr / static_cast<double>(end - start);
      for (size_t i = 0; i < w.size(); ++i) w[i] -= step * grad[i];
    }
  }
  return w;
}

ClientUpdate local_train(const LinearClassifier& clf, const ModelWeights& global, const ClientDataset& d,
                         const LocalTrainOptions& options) {
  if (d.examples.empty())
    throw Error(ErrorCode::kEmptyDataset, "client '" + d.client_id + "' has no labeled items");
  ClientUpdate u;
  u.client_id = d.client_id;
  u.weights = clf.train(global, d.examples, options.epochs, options.lr, options.batch_size, options.seed);
  u.n_samples = d.examples.size();
  return u;
}

ModelWeights fedavg(std::span<const ClientUpdate> updates) {
  uint64_t total = 0;
  size_t dim = 0;
  bool have_dim = false;
  for (const auto& u : updates) {
    if (u.n_samples == 0) continue;
    if (!have_dim) {
      dim = u.weights.size();
      have_dim = true;
    } else if (u.weights.size() != dim) {
      throw Error(ErrorCode::kDimensionMismatch, "client '" + u.client_id + "' sent " +
                                                     std::to_string(u.weights.size()) + " weights, expected " +
                                                     std::to_string(dim));
    }
    total += u.n_samples;
  }
  if (total == 0) throw Error(ErrorCode::kAllClientsEmpty, "no client contributed samples this round");
  ModelWeights out(dim, 0.0);
  const auto N = static_cast<double>(total);
  for (const auto& u : updates) {
    if (u.n_samples == 0) continue;
    const double a = static_cast<double>(u.n_samples) / N;
    for (size_t i = 0; i < dim; ++i) out[i] += a * u.weights[i];
  }
  return out;
}

namespace {

uint64_t client_seed(const FlConfig& cfg, size_t client) { return derive_seed(cfg.seed, 0xc11e47, client); }
uint64_t feature_seed(const FlConfig& cfg) { return derive_seed(cfg.seed, 0xfea7); }

}  // namespace

ClientDataset build_client_dataset(const FlConfig& config, size_t client_index, size_t num_classes) {
  const auto& cc = config.clients.at(client_index);
  ClientDataset d;
  d.client_id = cc.id;
  LabelOracleConfig oc;
  oc.num_classes = num_classes;
  oc.noise_rate = cc.noise_rate;
  oc.confidence = cc.confidence;
  oc.tau = config.tau;
  oc.latency_mean_s = cc.latency_mean_s;
  oc.latency_shape = cc.latency_shape;
  oc.seed = derive_seed(client_seed(config, client_index), 0x0ac1e);
  const LabelOracle oracle(oc);
  const double duration_s = config.duration_min * 60.0;
  const uint64_t fseed = feature_seed(config);

  TrafficProcess proc;
  proc.rate_per_min = cc.rate_per_min;
  proc.class_mix = cc.class_mix;
  proc.dwell_frames = 25.0;
  for (uint32_t s = 0; s < cc.streams; ++s) {
    StreamDescriptor desc;
    desc.id = cc.id + "/s" + std::to_string(s);
    desc.index = s;
    desc.fps = 25;
    desc.trace_seed = derive_seed(client_seed(config, client_index), s);
    const TraceIndex trace(desc, proc, duration_s);
    const auto frames =
        stratified_sample(s, desc.fps, duration_s, config.window_s, desc.trace_seed, config.target_frames);
    for (const auto& f : frames) {
      const auto objects = trace.objects_at(f.frame);
      auto labels = oracle.label(objects, derive_seed(desc.trace_seed, static_cast<uint64_t>(f.frame)));
      d.label_latency_total_s += labels.latency_s;
      d.proposed += labels.proposed;
      for (auto& item : labels.items) {
        Example e;
        e.x = object_features(item.true_class, item.bbox, derive_seed(desc.trace_seed, item.tracking_id), fseed);
        e.y = item.label;
        d.examples.push_back(std::move(e));
        d.items.push_back(item);
      }
    }
    d.frames.insert(d.frames.end(), frames.begin(), frames.end());
  }
  return d;
}

std::vector<Example> holdout_set(const FlConfig& config, size_t num_classes) {
  std::vector<Example> out;
  const uint64_t fseed = feature_seed(config);
  for (size_t c = 0; c < num_classes; ++c) {
    for (int i = 0; i < config.holdout_per_class; ++i) {
      const uint64_t key = derive_seed(derive_seed(config.seed, 0x401d), c, static_cast<uint64_t>(i));
      SplitMix64 rng(key);
      BBox b;
      b.w = static_cast<float>(0.05 + 0.2 * rng.uniform());
      b.h = static_cast<float>(0.05 + 0.2 * rng.uniform());
      b.x = static_cast<float>(rng.uniform() * (1.0 - b.w));
      b.y = static_cast<float>(rng.uniform() * (1.0 - b.h));
      out.push_back({object_features(static_cast<uint16_t>(c), b, key, fseed), static_cast<uint16_t>(c)});
    }
  }
  return out;
}

FlRunReport run_rounds(const FlConfig& config, size_t num_classes, const FlRunOptions& options) {
  FlRunReport report;
  auto emit = [&](nlohmann::json rec) {
    if (options.on_record) options.on_record(rec);
    report.log.push_back(std::move(rec));
  };
  const size_t K = config.clients.size();
  report.datasets.resize(K);
  auto build = [&](size_t k) { report.datasets[k] = build_client_dataset(config, k, num_classes); };
  if (config.concurrent) {
    std::vector<std::thread> pool;
    for (size_t k = 0; k < K; ++k) pool.emplace_back(build, k);
    for (auto& t : pool) t.join();
  } else {
    for (size_t k = 0; k < K; ++k) build(k);
  }

  const LinearClassifier clf{num_classes};
  const auto holdout = holdout_set(config, num_classes);
  ModelWeights global = clf.init(derive_seed(config.seed, 0x1417));
  report.initial_accuracy = clf.accuracy(global, holdout);
  emit({{"type", "round"}, {"round", 0}, {"accuracy", report.initial_accuracy}, {"total_samples", 0},
        {"participating", 0}});

  for (int r = 1; r <= config.rounds; ++r) {
    std::vector<ClientUpdate> updates(K);
    std::vector<double> train_s(K, 0.0);
    auto work = [&](size_t k) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto& d = report.datasets[k];
      if (d.examples.empty()) {
        updates[k] = ClientUpdate{d.client_id, {}, 0};
      } else {
        LocalTrainOptions lo{config.epochs, config.lr, config.batch_size,
                             derive_seed(client_seed(config, k), static_cast<uint64_t>(r))};
        updates[k] = local_train(clf, global, d, lo);
      }
      train_s[k] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    if (config.concurrent) {
      std::vector<std::thread> pool;
      for (size_t k = 0; k < K; ++k) pool.emplace_back(work, k);
      for (auto& t : pool) t.join();
    } else {
      for (size_t k = 0; k < K; ++k) work(k);
    }
    for (size_t k = 0; k < K; ++k) {
      const auto& d = report.datasets[k];
      std::vector<uint64_t> hist(num_classes, 0);
      for (const auto& it : d.items) ++hist[it.label];
      const auto frames = d.frames.size();
      emit({{"type", "client"},
            {"round", r},
            {"client", d.client_id},
            {"tier", config.clients[k].tier},
            {"streams", config.clients[k].streams},
            {"frames", frames},
            {"proposed", d.proposed},
            {"items", d.items.size()},
            {"class_histogram", hist},
            {"label_time_s", d.label_latency_total_s},
            {"label_latency_mean_s", frames ? d.label_latency_total_s / static_cast<double>(frames) : 0.0},
            {"train_time_s", train_s[k]},
            {"n_samples", updates[k].n_samples},
            {"skipped", updates[k].n_samples == 0}});
    }
    global = fedavg(updates);
    FlRoundRecord rec;
    rec.round = r;
    rec.accuracy = clf.accuracy(global, holdout);
    for (const auto& u : updates) {
      rec.total_samples += u.n_samples;
      rec.participating += u.n_samples > 0;
    }
    report.rounds.push_back(rec);
    emit({{"type", "round"},
          {"round", r},
          {"accuracy", rec.accuracy},
          {"total_samples", rec.total_samples},
          {"participating", rec.participating}});
  }
  report.final_weights = std::move(global);
  return report;
}

void write_round_log(std::ostream& os, const FlRunReport& report) {
  for (const auto& rec : report.log) os << rec.dump() << '\n';
}

}  // namespace cityfabric
