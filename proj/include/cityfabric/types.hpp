#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cityfabric {

using Counts = std::vector<uint32_t>;

// Normalized bounding box; x + w <= 1 and y + h <= 1.
struct BBox {
  float x = 0.f;
  float y = 0.f;
  float w = 0.f;
  float h = 0.f;

  bool valid() const noexcept {
    return x >= 0.f && y >= 0.f && w >= 0.f && h >= 0.f && x + w <= 1.f && y + h <= 1.f;
  }
  bool operator==(const BBox&) const = default;
};

// One per-frame, per-vehicle observation. `stream` is the interned stream index.
struct DetectionEvent {
  uint32_t stream = 0;
  int64_t ts_ms = 0;
  uint64_t tracking_id = 0;
  uint16_t class_idx = 0;
  BBox bbox;

  bool operator==(const DetectionEvent&) const = default;
};

// Unique vehicles first observed by a camera during one second, per class.
struct FlowRecord {
  int64_t ts_s = 0;
  std::string camera_id;
  Counts counts;

  bool operator==(const FlowRecord&) const = default;
};

struct StreamDescriptor {
  std::string id;
  std::string junction_id;
  uint32_t index = 0;  // dense index assigned at scenario load
  uint32_t fps = 25;
  uint64_t trace_seed = 0;

  bool operator==(const StreamDescriptor&) const = default;
};

// Dense, stable class indices 0..C-1 over a configurable name list.
class ClassList {
 public:
  ClassList();  // the default 8-class list
  explicit ClassList(std::vector<std::string> names);

  size_t size() const noexcept { return names_.size(); }
  const std::string& name(size_t idx) const { return names_.at(idx); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  // Returns size() when the name is unknown.
  size_t index_of(std::string_view name) const;

  bool operator==(const ClassList& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
};

const std::vector<std::string>& default_class_names();

// Interns string identifiers to dense indices in insertion order.
class IdTable {
 public:
  // Returns false if the id already exists.
  bool insert(const std::string& id);
  bool contains(std::string_view id) const { return find(id) >= 0; }
  long find(std::string_view id) const;
  uint32_t at(std::string_view id) const;
  const std::string& name(uint32_t idx) const { return ids_.at(idx); }
  size_t size() const noexcept { return ids_.size(); }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, uint32_t> index_;
};

}  // namespace cityfabric
