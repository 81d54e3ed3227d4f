#include "cityfabric/errors.hpp"
#include "cityfabric/types.hpp"

namespace cityfabric {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kParse: return "ParseError";
    case ErrorCode::kReference: return "ReferenceError";
    case ErrorCode::kDuplicateId: return "DuplicateId";
    case ErrorCode::kCapacityExhausted: return "CapacityExhausted";
    case ErrorCode::kUnknownStream: return "UnknownStream";
    case ErrorCode::kIngestUnreachable: return "IngestUnreachable";
    case ErrorCode::kUnknownCamera: return "UnknownCamera";
    case ErrorCode::kMalformedSummary: return "MalformedSummary";
    case ErrorCode::kSubscriberOverflow: return "SubscriberOverflow";
    case ErrorCode::kIsolatedCameraVertex: return "IsolatedCameraVertex";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kDivergenceDetected: return "DivergenceDetected";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kAllClientsEmpty: return "AllClientsEmpty";
    case ErrorCode::kUnknownSegment: return "UnknownSegment";
    case ErrorCode::kInvalidState: return "InvalidState";
    case ErrorCode::kIo: return "IoError";
  }
  return "Error";
}

const std::vector<std::string>& default_class_names() {
  // Stand-in taxonomy; the deployed detector's full class list is not public.
  static const std::vector<std::string> names = {"two-wheeler", "three-wheeler", "sedan", "suv",
                                                 "hatchback",   "bus",           "truck", "van"};
  return names;
}

ClassList::ClassList() : names_(default_class_names()) {}

ClassList::ClassList(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw Error(ErrorCode::kInvalidArgument, "class list must not be empty");
  IdTable seen;
  for (const auto& n : names_) {
    if (!seen.insert(n)) throw Error(ErrorCode::kDuplicateId, "class '" + n + "' listed twice");
  }
}

size_t ClassList::index_of(std::string_view name) const {
  for (size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return names_.size();
}

bool IdTable::insert(const std::string& id) {
  auto [it, inserted] = index_.emplace(id, static_cast<uint32_t>(ids_.size()));
  if (inserted) ids_.push_back(id);
  return inserted;
}

long IdTable::find(std::string_view id) const {
  auto it = index_.find(std::string(id));
  return it == index_.end() ? -1 : static_cast<long>(it->second);
}

uint32_t IdTable::at(std::string_view id) const {
  long idx = find(id);
  if (idx < 0) throw Error(ErrorCode::kReference, "unknown id '" + std::string(id) + "'");
  return static_cast<uint32_t>(idx);
}

}  // namespace cityfabric
