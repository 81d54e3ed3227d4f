#include "cityfabric/wire.hpp"

#include <bit>
#include <cstring>
#include <iterator>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"

namespace cityfabric::wire {

static_assert(std::endian::native == std::endian::little, "wire codec assumes a little-endian host");

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, T value) {
  uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(const uint8_t* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

}  // namespace

void encode_event(const DetectionEvent& e, std::vector<uint8_t>& out) {
  put<uint32_t>(out, kEventPayloadBytes);
  put<uint32_t>(out, e.stream);
  put<int64_t>(out, e.ts_ms);
  put<uint64_t>(out, e.tracking_id);
  put<uint16_t>(out, e.class_idx);
  put<uint16_t>(out, 0);
  put<float>(out, e.bbox.x);
  put<float>(out, e.bbox.y);
  put<float>(out, e.bbox.w);
  put<float>(out, e.bbox.h);
}

std::optional<size_t> decode_event(std::span<const uint8_t> in, DetectionEvent& out) {
  if (in.size() < 4) return std::nullopt;
  const auto len = get<uint32_t>(in.data());
  if (len != kEventPayloadBytes)
    throw Error(ErrorCode::kParse, "bad event frame length " + std::to_string(len));
  if (in.size() < 4 + len) return std::nullopt;
  const uint8_t* p = in.data() + 4;
  out.stream = get<uint32_t>(p);
  out.ts_ms = get<int64_t>(p + 4);
  out.tracking_id = get<uint64_t>(p + 12);
  out.class_idx = get<uint16_t>(p + 20);
  out.bbox.x = get<float>(p + 24);
  out.bbox.y = get<float>(p + 28);
  out.bbox.w = get<float>(p + 32);
  out.bbox.h = get<float>(p + 36);
  return 4 + len;
}

void write_events(std::ostream& os, std::span<const DetectionEvent> events) {
  std::vector<uint8_t> buf;
  buf.reserve(kEventFrameBytes * 1024);
  for (const auto& e : events) {
    encode_event(e, buf);
    if (buf.size() >= kEventFrameBytes * 1024) {
      os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
      buf.clear();
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<DetectionEvent> read_events(std::istream& is) {
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::vector<DetectionEvent> events;
  std::span<const uint8_t> rest(bytes);
  while (!rest.empty()) {
    DetectionEvent e;
    auto used = decode_event(rest, e);
    if (!used) throw Error(ErrorCode::kParse, "truncated event frame");
    events.push_back(e);
    rest = rest.subspan(*used);
  }
  return events;
}

std::string event_to_ndjson(const DetectionEvent& e) {
  nlohmann::json j = {{"stream", e.stream},
                      {"ts_ms", e.ts_ms},
                      {"tracking_id", e.tracking_id},
                      {"class", e.class_idx},
                      {"bbox", {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h}}};
  return j.dump();
}

DetectionEvent event_from_ndjson(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    DetectionEvent e;
    e.stream = j.at("stream").get<uint32_t>();
    e.ts_ms = j.at("ts_ms").get<int64_t>();
    e.tracking_id = j.at("tracking_id").get<uint64_t>();
    e.class_idx = j.at("class").get<uint16_t>();
    const auto& b = j.at("bbox");
    e.bbox = BBox{b.at(0).get<float>(), b.at(1).get<float>(), b.at(2).get<float>(), b.at(3).get<float>()};
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::kParse, std::string("bad event line: ") + ex.what());
  }
}

void write_events_ndjson(std::ostream& os, std::span<const DetectionEvent> events) {
  for (const auto& e : events) os << event_to_ndjson(e) << '\n';
}

std::vector<DetectionEvent> read_events_ndjson(std::istream& is) {
  std::vector<DetectionEvent> events;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) events.push_back(event_from_ndjson(line));
  }
  return events;
}

}  // namespace cityfabric::wire
