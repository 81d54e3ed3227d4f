#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cityfabric/emulator.hpp"
#include "cityfabric/scenario.hpp"

namespace cityfabric {

struct SampledFrame {
  uint32_t stream = 0;
  int64_t window = 0;
  int64_t frame = 0;
  int64_t ts_ms = 0;
  bool operator==(const SampledFrame&) const = default;
};

// One uniformly chosen frame per non-overlapping window_s window over
// [0, duration_s). With target_frames > 0 the span is instead split into
// exactly target_frames equal windows.
std::vector<SampledFrame> stratified_sample(uint32_t stream, uint32_t fps, double duration_s, int window_s,
                                            uint64_t seed, int target_frames = 0);

struct LabelOracleConfig {
  size_t num_classes = 8;
  double noise_rate = 0.0;
  ConfidenceModel confidence;
  double tau = 0.30;
  double latency_mean_s = 5.0;
  double latency_shape = 4.0;
  uint64_t seed = 0;
};

struct LabeledItem {
  uint16_t label = 0;
  uint16_t true_class = 0;
  BBox bbox;
  double confidence = 0.0;
  uint32_t stream = 0;
  int64_t frame = 0;
  uint64_t tracking_id = 0;
};

struct FrameLabels {
  std::vector<LabeledItem> items;  // confidence >= tau only
  size_t proposed = 0;             // before thresholding
  double latency_s = 0.0;          // simulated annotation time
};

// Stand-in for a promptable foundation model: keeps the true class with
// probability 1 - noise_rate, otherwise picks another class uniformly.
class LabelOracle {
 public:
  explicit LabelOracle(LabelOracleConfig config);
  // `frame_key` seeds the per-frame latency draw; per-object draws are keyed by tracking id and frame.
  FrameLabels label(std::span<const GroundTruthLabel> objects, uint64_t frame_key) const;
  const LabelOracleConfig& config() const noexcept { return config_; }

 private:
  LabelOracleConfig config_;
};

constexpr size_t kFeatureDim = 64;

// Deterministic synthetic appearance features for an object.
std::vector<double> object_features(uint16_t true_class, const BBox& bbox, uint64_t key, uint64_t feature_seed);

struct Example {
  std::vector<double> x;  // kFeatureDim
  uint16_t y = 0;
};

using ModelWeights = std::vector<double>;

// Multiclass linear softmax classifier, weights [C x (kFeatureDim + 1)] row-major.
struct LinearClassifier {
  size_t num_classes = 8;
  size_t dim() const noexcept { return num_classes * (kFeatureDim + 1); }
  ModelWeights init(uint64_t seed) const;
  uint16_t predict(const ModelWeights& w, std::span<const double> x) const;
  double accuracy(const ModelWeights& w, std::span<const Example> data) const;
  // Mini-batch gradient descent on cross-entropy; shuffling keyed by `seed`.
  ModelWeights train(ModelWeights w, std::span<const Example> data, int epochs, double lr, int batch_size,
                     uint64_t seed) const;
};

struct ClientDataset {
  std::string client_id;
  std::vector<LabeledItem> items;
  std::vector<Example> examples;  // one per item
  std::vector<SampledFrame> frames;
  double label_latency_total_s = 0.0;
  size_t proposed = 0;
};

struct ClientUpdate {
  std::string client_id;
  ModelWeights weights;
  uint64_t n_samples = 0;
};

struct LocalTrainOptions {
  int epochs = 3;
  double lr = 0.01;
  int batch_size = 32;
  uint64_t seed = 0;
};

// Throws EmptyDataset when the dataset has no examples.
ClientUpdate local_train(const LinearClassifier& clf, const ModelWeights& global, const ClientDataset& d,
                         const LocalTrainOptions& options);

// Sample-weighted elementwise mean. Throws DimensionMismatch or AllClientsEmpty.
ModelWeights fedavg(std::span<const ClientUpdate> updates);

struct FlRunOptions {
  std::function<void(const nlohmann::json&)> on_record;  // called for every round-log record
};

struct FlRoundRecord {
  int round = 0;
  double accuracy = 0.0;
  uint64_t total_samples = 0;
  size_t participating = 0;
};

struct FlRunReport {
  std::vector<ClientDataset> datasets;
  std::vector<FlRoundRecord> rounds;
  double initial_accuracy = 0.0;
  ModelWeights final_weights;
  std::vector<nlohmann::json> log;  // JSON-lines records
};

// Builds each client's D_k from its own generated streams, then runs FedAvg rounds.
FlRunReport run_rounds(const FlConfig& config, size_t num_classes, const FlRunOptions& options = {});

ClientDataset build_client_dataset(const FlConfig& config, size_t client_index, size_t num_classes);
std::vector<Example> holdout_set(const FlConfig& config, size_t num_classes);

void write_round_log(std::ostream& os, const FlRunReport& report);

}  // namespace cityfabric
