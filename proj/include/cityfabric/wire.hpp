#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cityfabric/types.hpp"

namespace cityfabric::wire {

// Binary event frame: u32 payload length (always kEventPayloadBytes) followed by
//   u32 stream | i64 ts_ms | u64 tracking_id | u16 class_idx | u16 reserved |
//   f32 x | f32 y | f32 w | f32 h
// all little-endian. See schema/wire.md.
inline constexpr uint32_t kEventPayloadBytes = 40;
inline constexpr size_t kEventFrameBytes = 4 + kEventPayloadBytes;

void encode_event(const DetectionEvent& e, std::vector<uint8_t>& out);
// Decodes one frame at the front of `in`; returns bytes consumed or nullopt if incomplete.
std::optional<size_t> decode_event(std::span<const uint8_t> in, DetectionEvent& out);

void write_events(std::ostream& os, std::span<const DetectionEvent> events);
std::vector<DetectionEvent> read_events(std::istream& is);

// Newline-delimited JSON debug encoding.
std::string event_to_ndjson(const DetectionEvent& e);
DetectionEvent event_from_ndjson(const std::string& line);
void write_events_ndjson(std::ostream& os, std::span<const DetectionEvent> events);
std::vector<DetectionEvent> read_events_ndjson(std::istream& is);

}  // namespace cityfabric::wire
