#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>

#include "cityfabric/errors.hpp"
#include "cityfabric/scenario.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("cityfabric-" + tag + "-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path scenario_path(const std::string& name) {
  return std::filesystem::path(CITYFABRIC_SOURCE_DIR) / "scenarios" / (name + ".json");
}

inline cityfabric::ScenarioConfig load(const std::string& name) {
  return cityfabric::load_scenario(scenario_path(name));
}

// Error code thrown by f, or nullopt when it returns normally.
template <typename F>
std::optional<cityfabric::ErrorCode> code_of(F&& f) {
  try {
    f();
  } catch (const cityfabric::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace testing
