#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "cityfabric/forecast.hpp"

namespace cityfabric {

class ForecastSubscription {
 public:
  explicit ForecastSubscription(size_t bound) : bound_(bound) {}

  // Throws Error(kSubscriberOverflow) once disconnected.
  std::optional<std::shared_ptr<const Forecast>> pop(std::chrono::milliseconds timeout);
  bool overflowed() const noexcept { return overflowed_.load(); }

 private:
  friend class ForecastService;
  bool offer(std::shared_ptr<const Forecast> f);
  void close();

  size_t bound_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::shared_ptr<const Forecast>> queue_;
  std::atomic<bool> overflowed_{false};
  bool closed_ = false;
};

struct ForecastInput {
  Eigen::MatrixXd lag;  // [junction x lag minutes]
  int64_t now_s = 0;
};

struct ForecastServiceOptions {
  std::chrono::milliseconds period{5000};
  ForecastRequest request;
};

struct ForecastServiceStats {
  uint64_t ticks = 0;
  uint64_t forecasts = 0;
  uint64_t cache_hits = 0;
  uint64_t overruns = 0;
  uint64_t skipped_ticks = 0;
  std::vector<double> compute_ms;  // per issued forecast
};

// Issues a forecast every period. Consecutive ticks that see the same input
// window reuse the cached prediction. A tick whose computation outlasts the
// period is an overrun: it is logged and the next tick is skipped, never queued.
class ForecastService {
 public:
  using InputProvider = std::function<ForecastInput()>;

  ForecastService(std::shared_ptr<const ForecastModel> model, std::vector<std::string> junctions,
                  InputProvider provider, ForecastServiceOptions options);
  ~ForecastService();
  ForecastService(const ForecastService&) = delete;
  ForecastService& operator=(const ForecastService&) = delete;

  void start();
  void stop();
  bool running() const noexcept { return running_.load(); }

  // Runs a single tick synchronously (used by start()'s loop and by tests).
  std::shared_ptr<const Forecast> tick();

  std::shared_ptr<ForecastSubscription> subscribe(size_t bound = 64);
  std::shared_ptr<const Forecast> latest() const;
  ForecastServiceStats stats() const;

 private:
  void loop();

  std::shared_ptr<const ForecastModel> model_;
  std::vector<std::string> junctions_;
  InputProvider provider_;
  ForecastServiceOptions options_;

  mutable std::mutex mu_;
  std::condition_variable stop_cv_;
  std::shared_ptr<const Forecast> latest_;
  uint64_t cached_hash_ = 0;
  bool have_cache_ = false;
  std::vector<std::shared_ptr<ForecastSubscription>> subs_;
  ForecastServiceStats stats_;
  std::atomic<bool> running_{false};
  bool stop_requested_ = false;
  std::thread worker_;
};

uint64_t hash_matrix(const Eigen::MatrixXd& m);

}  // namespace cityfabric
