#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cityfabric {

enum class ErrorCode {
  kInvalidArgument,
  kParse,
  kReference,
  kDuplicateId,
  kCapacityExhausted,
  kUnknownStream,
  kIngestUnreachable,
  kUnknownCamera,
  kMalformedSummary,
  kSubscriberOverflow,
  kIsolatedCameraVertex,
  kShapeMismatch,
  kDivergenceDetected,
  kEmptyDataset,
  kDimensionMismatch,
  kAllClientsEmpty,
  kUnknownSegment,
  kInvalidState,
  kIo,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the scheduler when no device can host a stream. The placement is
// left untouched; `step` is set when the failure happened inside a sweep.
class CapacityExhausted : public Error {
 public:
  CapacityExhausted(std::string stream_id, uint32_t fps, long step = -1)
      : Error(ErrorCode::kCapacityExhausted,
              "no device can host stream '" + stream_id + "' (" + std::to_string(fps) + " fps)" +
                  (step >= 0 ? " at sweep step " + std::to_string(step) : std::string())),
        stream_id_(std::move(stream_id)),
        step_(step) {}

  const std::string& stream_id() const noexcept { return stream_id_; }
  long step() const noexcept { return step_; }

 private:
  std::string stream_id_;
  long step_;
};

}  // namespace cityfabric
