#include "cityfabric/forecast_service.hpp"

#include <cstring>

#include "cityfabric/errors.hpp"
#include "cityfabric/rng.hpp"

namespace cityfabric {

uint64_t hash_matrix(const Eigen::MatrixXd& m) {
  uint64_t h = splitmix64(static_cast<uint64_t>(m.rows()) * 0x100000001b3ULL + static_cast<uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    uint64_t bits;
    const double v = m.data()[i];
    std::memcpy(&bits, &v, sizeof bits);
    h = splitmix64(h ^ bits);
  }
  return h;
}

std::optional<std::shared_ptr<const Forecast>> ForecastSubscription::pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [this] { return !queue_.empty() || overflowed_.load() || closed_; });
  if (overflowed_.load()) throw Error(ErrorCode::kSubscriberOverflow, "forecast subscriber fell behind");
  if (queue_.empty()) return std::nullopt;
  auto f = std::move(queue_.front());
  queue_.pop_front();
  return f;
}

bool ForecastSubscription::offer(std::shared_ptr<const Forecast> f) {
  {
    std::lock_guard lock(mu_);
    if (overflowed_.load() || closed_) return false;
    if (queue_.size() >= bound_) {
      overflowed_ = true;
      queue_.clear();
    } else {
      queue_.push_back(std::move(f));
    }
  }
  cv_.notify_all();
  return !overflowed_.load();
}

void ForecastSubscription::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

ForecastService::ForecastService(std::shared_ptr<const ForecastModel> model, std::vector<std::string> junctions,
                                 InputProvider provider, ForecastServiceOptions options)
    : model_(std::move(model)), junctions_(std::move(junctions)), provider_(std::move(provider)), options_(options) {
  options_.request.validate();
  if (options_.period.count() <= 0) throw Error(ErrorCode::kInvalidArgument, "forecast period must be > 0");
}

ForecastService::~ForecastService() { stop(); }

std::shared_ptr<const Forecast> ForecastService::tick() {
  const auto t0 = std::chrono::steady_clock::now();
  ForecastInput input = provider_();
  const uint64_t h = hash_matrix(input.lag);
  std::shared_ptr<Forecast> f;
  bool hit = false;
  {
    std::lock_guard lock(mu_);
    if (have_cache_ && h == cached_hash_ && latest_) {
      f = std::make_shared<Forecast>(*latest_);
      hit = true;
    }
  }
  if (!hit) f = std::make_shared<Forecast>(predict(*model_, input.lag, options_.request, junctions_));
  f->issued_at_s = input.now_s;
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  std::vector<std::shared_ptr<ForecastSubscription>> subs;
  {
    std::lock_guard lock(mu_);
    latest_ = f;
    cached_hash_ = h;
    have_cache_ = true;
    ++stats_.forecasts;
    if (hit) ++stats_.cache_hits;
    stats_.compute_ms.push_back(ms);
    std::erase_if(subs_, [](const auto& s) { return s->overflowed(); });
    subs = subs_;
  }
  for (auto& s : subs) s->offer(f);
  return f;
}

void ForecastService::loop() {
  using clock = std::chrono::steady_clock;
  auto next = clock::now();
  bool skip = false;
  for (;;) {
    {
      std::unique_lock lock(mu_);
      if (stop_cv_.wait_until(lock, next, [this] { return stop_requested_; })) break;
      ++stats_.ticks;
      if (skip) ++stats_.skipped_ticks;
    }
    const auto started = clock::now();
    if (!skip) {
      tick();
      const auto elapsed = clock::now() - started;
      if (elapsed > options_.period) {
        std::lock_guard lock(mu_);
        ++stats_.overruns;
        skip = true;
      }
    } else {
      skip = false;
    }
    next += options_.period;
    // Never try to catch up on missed ticks.
    while (next <= clock::now()) next += options_.period;
  }
}

void ForecastService::start() {
  if (running_.exchange(true)) return;
  {
    std::lock_guard lock(mu_);
    stop_requested_ = false;
  }
  worker_ = std::thread([this] { loop(); });
}

void ForecastService::stop() {
  if (!running_.exchange(false)) return;
  {
    std::lock_guard lock(mu_);
    stop_requested_ = true;
  }
  stop_cv_.notify_all();
  if (worker_.joinable()) worker_.join();
  std::lock_guard lock(mu_);
  for (auto& s : subs_) s->close();
}

std::shared_ptr<ForecastSubscription> ForecastService::subscribe(size_t bound) {
  auto s = std::make_shared<ForecastSubscription>(bound);
  std::lock_guard lock(mu_);
  subs_.push_back(s);
  return s;
}

std::shared_ptr<const Forecast> ForecastService::latest() const {
  std::lock_guard lock(mu_);
  return latest_;
}

ForecastServiceStats ForecastService::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

}  // namespace cityfabric
