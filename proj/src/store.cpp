#include "cityfabric/store.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <climits>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cityfabric/errors.hpp"

namespace cityfabric {

namespace {

constexpr uint32_t kLogMagic = 0x524C4643;    // "CFLR"
constexpr uint32_t kBlockMagic = 0x4B424643;  // "CFBK"
constexpr uint16_t kBlockVersion = 1;
constexpr int64_t kBlockSeconds = 60;
constexpr int kManifestVersion = 1;

size_t log_record_bytes(size_t c) { return 16 + 4 * c + 4; }
size_t block_bytes(size_t c) { return 24 + 4 * kBlockSeconds * c + 4; }

int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

template <typename T>
void put(std::vector<uint8_t>& out, T value) {
  uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(const uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

uint32_t crc(const uint8_t* data, size_t n) {
  return static_cast<uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

void encode_log_record(int64_t ts, const Counts& counts, std::vector<uint8_t>& out) {
  const size_t start = out.size();
  put<uint32_t>(out, kLogMagic);
  put<uint16_t>(out, static_cast<uint16_t>(counts.size()));
  put<uint16_t>(out, 0);
  put<int64_t>(out, ts);
  for (uint32_t c : counts) put<uint32_t>(out, c);
  put<uint32_t>(out, crc(out.data() + start, out.size() - start));
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Parses complete, checksummed log records; returns the byte offset after the last good record.
size_t parse_log(const std::vector<uint8_t>& bytes, size_t num_classes, std::map<int64_t, Counts>& out,
                 int64_t from_s = INT64_MIN, int64_t to_s = INT64_MAX) {
  const size_t rec = log_record_bytes(num_classes);
  size_t off = 0;
  while (off + rec <= bytes.size()) {
    const uint8_t* p = bytes.data() + off;
    if (get<uint32_t>(p) != kLogMagic || get<uint16_t>(p + 4) != num_classes) break;
    if (get<uint32_t>(p + rec - 4) != crc(p, rec - 4)) break;
    const auto ts = get<int64_t>(p + 8);
    if (ts >= from_s && ts < to_s) {
      Counts counts(num_classes);
      for (size_t k = 0; k < num_classes; ++k) counts[k] = get<uint32_t>(p + 16 + 4 * k);
      out[ts] = std::move(counts);
    }
    off += rec;
  }
  return off;
}

void parse_blocks(const std::vector<uint8_t>& bytes, size_t num_classes, const std::filesystem::path& path,
                  std::map<int64_t, Counts>& out, int64_t from_s = INT64_MIN, int64_t to_s = INT64_MAX) {
  const size_t bb = block_bytes(num_classes);
  if (bytes.size() % bb != 0) throw Error(ErrorCode::kIo, "block file has a partial block: " + path.string());
  for (size_t off = 0; off < bytes.size(); off += bb) {
    const uint8_t* p = bytes.data() + off;
    if (get<uint32_t>(p) != kBlockMagic || get<uint16_t>(p + 4) != kBlockVersion ||
        get<uint16_t>(p + 6) != num_classes || get<uint32_t>(p + bb - 4) != crc(p, bb - 4))
      throw Error(ErrorCode::kIo, "corrupt block in " + path.string());
    const auto start = get<int64_t>(p + 8);
    if (start + kBlockSeconds <= from_s || start >= to_s) continue;
    const auto mask = get<uint64_t>(p + 16);
    for (int64_t i = 0; i < kBlockSeconds; ++i) {
      if (!(mask & (uint64_t{1} << i))) continue;
      const int64_t ts = start + i;
      if (ts < from_s || ts >= to_s) continue;
      Counts counts(num_classes);
      const uint8_t* row = p + 24 + 4 * num_classes * static_cast<size_t>(i);
      for (size_t k = 0; k < num_classes; ++k) counts[k] = get<uint32_t>(row + 4 * k);
      out[ts] = std::move(counts);
    }
  }
}

void write_all(int fd, const std::vector<uint8_t>& buf, const std::string& what) {
  size_t done = 0;
  while (done < buf.size()) {
    const ssize_t n = ::write(fd, buf.data() + done, buf.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIo, "write failed: " + what + ": " + std::strerror(errno));
    }
    done += static_cast<size_t>(n);
  }
}

}  // namespace

uint64_t FlowMatrix::total(size_t cam, size_t sec) const {
  uint64_t t = 0;
  for (size_t k = 0; k < num_classes; ++k) t += at(cam, sec, k);
  return t;
}

// ---------------------------------------------------------------------------

NowcastSubscription::NowcastSubscription(std::vector<std::string> cameras, size_t buffer_bound)
    : cameras_(std::move(cameras)), bound_(std::max<size_t>(buffer_bound, 1)) {
  std::sort(cameras_.begin(), cameras_.end());
}

bool NowcastSubscription::wants(const std::string& camera) const {
  return cameras_.empty() || std::binary_search(cameras_.begin(), cameras_.end(), camera);
}

bool NowcastSubscription::offer(const NowcastFrame& frame) {
  std::lock_guard lock(mu_);
  if (overflowed_) return false;
  if (queue_.size() >= bound_) {
    overflowed_ = true;
    queue_.clear();
    cv_.notify_all();
    return false;
  }
  queue_.push_back(frame);
  cv_.notify_one();
  return true;
}

std::optional<NowcastFrame> NowcastSubscription::pop(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [this] { return !queue_.empty() || overflowed_.load(); });
  if (overflowed_) throw Error(ErrorCode::kSubscriberOverflow, "nowcast subscriber fell behind and was disconnected");
  if (queue_.empty()) return std::nullopt;
  NowcastFrame f = std::move(queue_.front());
  queue_.pop_front();
  return f;
}

size_t NowcastSubscription::pending() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

std::shared_ptr<NowcastSubscription> NowcastHub::subscribe(std::vector<std::string> cameras, size_t buffer_bound) {
  auto sub = std::make_shared<NowcastSubscription>(std::move(cameras), buffer_bound);
  std::lock_guard lock(mu_);
  subs_.push_back(sub);
  return sub;
}

size_t NowcastHub::subscriber_count() const {
  std::lock_guard lock(mu_);
  return subs_.size();
}

void NowcastHub::publish(const std::vector<FlowRecord>& changed_rows) {
  if (changed_rows.empty()) return;
  std::map<int64_t, std::map<std::string, Counts>> by_second;
  for (const auto& r : changed_rows) by_second[r.ts_s][r.camera_id] = r.counts;

  std::lock_guard lock(mu_);
  for (auto& [ts, cams] : by_second) {
    NowcastFrame frame;
    frame.seq = ++seq_;
    frame.ts_s = ts;
    frame.per_camera = std::move(cams);
    for (auto& sub : subs_) {
      if (sub->overflowed()) continue;
      if (sub->cameras_.empty()) {
        sub->offer(frame);
        continue;
      }
      NowcastFrame filtered;
      filtered.seq = frame.seq;
      filtered.ts_s = ts;
      for (const auto& [cam, counts] : frame.per_camera)
        if (sub->wants(cam)) filtered.per_camera.emplace(cam, counts);
      if (!filtered.per_camera.empty()) sub->offer(filtered);
    }
  }
  std::erase_if(subs_, [](const auto& s) { return s->overflowed() || s.use_count() == 1; });
}

// ---------------------------------------------------------------------------

struct TimeSeriesStore::Partition {
  std::string camera;
  std::filesystem::path log_path;
  std::filesystem::path block_path;
  int log_fd = -1;
  mutable std::shared_mutex mu;
  std::map<int64_t, Counts> tail;
  std::unordered_set<int64_t> keys;
  std::optional<int64_t> latest;
  int64_t tail_floor = INT64_MIN;
  size_t log_records = 0;

  ~Partition() {
    if (log_fd >= 0) ::close(log_fd);
  }
};

TimeSeriesStore::TimeSeriesStore(StoreOptions options) : options_(std::move(options)) {
  if (options_.num_classes == 0) throw Error(ErrorCode::kInvalidArgument, "num_classes must be > 0");
  if (options_.dir.empty()) throw Error(ErrorCode::kInvalidArgument, "store dir must be set");
  std::filesystem::create_directories(options_.dir);

  // The manifest pins class count and the camera -> partition file mapping.
  const auto manifest_path = options_.dir / "MANIFEST.json";
  std::vector<std::string> files_order;
  if (std::filesystem::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    auto j = nlohmann::json::parse(in);
    if (j.at("num_classes").get<size_t>() != options_.num_classes)
      throw Error(ErrorCode::kInvalidArgument, "store at " + options_.dir.string() + " has a different class count");
    files_order = j.at("cameras").get<std::vector<std::string>>();
  }
  for (const auto& cam : options_.cameras) {
    if (std::find(files_order.begin(), files_order.end(), cam) == files_order.end()) files_order.push_back(cam);
  }
  {
    nlohmann::json j = {{"format_version", kManifestVersion},
                        {"num_classes", options_.num_classes},
                        {"block_seconds", kBlockSeconds},
                        {"cameras", files_order}};
    const auto tmp = manifest_path.string() + ".tmp";
    std::ofstream(tmp) << j.dump(2) << '\n';
    std::filesystem::rename(tmp, manifest_path);
  }

  for (const auto& cam : options_.cameras) {
    if (index_.contains(cam)) throw Error(ErrorCode::kDuplicateId, "camera '" + cam + "' listed twice");
    const auto file_idx = std::find(files_order.begin(), files_order.end(), cam) - files_order.begin();
    auto p = std::make_unique<Partition>();
    p->camera = cam;
    p->log_path = options_.dir / ("p" + std::to_string(file_idx) + ".log");
    p->block_path = options_.dir / ("p" + std::to_string(file_idx) + ".blk");
    load_partition(*p);
    index_.emplace(cam, partitions_.size());
    partitions_.push_back(std::move(p));
  }
}

TimeSeriesStore::~TimeSeriesStore() = default;

void TimeSeriesStore::load_partition(Partition& p) {
  std::map<int64_t, Counts> all;
  parse_blocks(read_file(p.block_path), options_.num_classes, p.block_path, all);
  const auto log_bytes = read_file(p.log_path);
  std::map<int64_t, Counts> from_log;
  const size_t good = parse_log(log_bytes, options_.num_classes, from_log);
  p.log_records = good / log_record_bytes(options_.num_classes);
  for (auto& [ts, c] : from_log) all[ts] = std::move(c);

  p.log_fd = ::open(p.log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (p.log_fd < 0) throw Error(ErrorCode::kIo, "cannot open " + p.log_path.string() + ": " + std::strerror(errno));
  if (good != log_bytes.size()) {
    // Torn tail from an interrupted append: drop it.
    if (::ftruncate(p.log_fd, static_cast<off_t>(good)) != 0)
      throw Error(ErrorCode::kIo, "cannot truncate " + p.log_path.string());
  }

  for (const auto& [ts, c] : all) p.keys.insert(ts);
  if (!all.empty()) {
    p.latest = all.rbegin()->first;
    p.tail_floor = *p.latest - options_.tail_horizon_s;
    for (auto it = all.lower_bound(p.tail_floor); it != all.end(); ++it) p.tail.emplace(it->first, it->second);
  }
}

TimeSeriesStore::Partition& TimeSeriesStore::partition(const std::string& camera) const {
  auto it = index_.find(camera);
  if (it == index_.end()) throw Error(ErrorCode::kUnknownCamera, "camera '" + camera + "' is not known");
  return *partitions_[it->second];
}

void TimeSeriesStore::read_disk(const Partition& p, int64_t from_s, int64_t to_s,
                                std::map<int64_t, Counts>& out) const {
  ++disk_reads_;
  parse_blocks(read_file(p.block_path), options_.num_classes, p.block_path, out, from_s, to_s);
  parse_log(read_file(p.log_path), options_.num_classes, out, from_s, to_s);
}

IngestAck TimeSeriesStore::ingest(const FlowSummary& summary) {
  Partition& p = partition(summary.camera_id);
  if (summary.window_len_s <= 0 || summary.rows.size() != static_cast<size_t>(summary.window_len_s))
    throw Error(ErrorCode::kMalformedSummary, "summary for '" + summary.camera_id + "' has " +
                                                  std::to_string(summary.rows.size()) + " rows, expected " +
                                                  std::to_string(summary.window_len_s));
  for (size_t i = 0; i < summary.rows.size(); ++i) {
    const auto& r = summary.rows[i];
    if (r.ts_s != summary.window_start_s + static_cast<int64_t>(i))
      throw Error(ErrorCode::kMalformedSummary, "rows must cover consecutive seconds from window_start_s");
    if (r.counts.size() != options_.num_classes)
      throw Error(ErrorCode::kMalformedSummary, "row has " + std::to_string(r.counts.size()) + " classes, expected " +
                                                    std::to_string(options_.num_classes));
  }

  IngestAck ack;
  std::vector<FlowRecord> changed;
  {
    std::unique_lock lock(p.mu);
    std::map<int64_t, Counts> old_disk;
    if (summary.window_start_s < p.tail_floor) read_disk(p, summary.window_start_s, p.tail_floor, old_disk);

    std::vector<uint8_t> buf;
    for (const auto& r : summary.rows) {
      ++ack.records_written;
      const Counts* existing = nullptr;
      if (r.ts_s >= p.tail_floor) {
        auto it = p.tail.find(r.ts_s);
        if (it != p.tail.end()) existing = &it->second;
      } else {
        auto it = old_disk.find(r.ts_s);
        if (it != old_disk.end()) existing = &it->second;
      }
      if (existing && *existing == r.counts) continue;
      encode_log_record(r.ts_s, r.counts, buf);
      ++ack.records_changed;
      changed.push_back(FlowRecord{r.ts_s, summary.camera_id, r.counts});
    }
    if (!buf.empty()) {
      write_all(p.log_fd, buf, p.log_path.string());
      if (options_.sync && ::fdatasync(p.log_fd) != 0)
        throw Error(ErrorCode::kIo, "fdatasync failed on " + p.log_path.string());
      p.log_records += changed.size();
    }
    for (const auto& r : changed) {
      p.keys.insert(r.ts_s);
      if (r.ts_s >= p.tail_floor) p.tail[r.ts_s] = r.counts;
      if (!p.latest || r.ts_s > *p.latest) p.latest = r.ts_s;
    }
    if (p.latest) {
      const int64_t floor = *p.latest - options_.tail_horizon_s;
      if (floor > p.tail_floor) {
        p.tail.erase(p.tail.begin(), p.tail.lower_bound(floor));
        p.tail_floor = floor;
      }
    }
    if (options_.compact_after_records > 0 && p.log_records >= options_.compact_after_records) {
      compact_partition(p);
      ++compactions_;
    }
  }
  ++ingests_;
  hub_.publish(changed);
  return ack;
}

FlowMatrix TimeSeriesStore::query(std::span<const std::string> cameras, int64_t from_s, int64_t to_s) const {
  if (from_s >= to_s) throw Error(ErrorCode::kInvalidArgument, "query requires from < to");
  FlowMatrix m;
  m.cameras.assign(cameras.begin(), cameras.end());
  m.from_s = from_s;
  m.to_s = to_s;
  m.num_classes = options_.num_classes;
  const size_t secs = m.seconds();
  m.counts.assign(cameras.size() * secs * m.num_classes, 0);
  m.missing.assign(cameras.size() * secs, 1);

  for (size_t ci = 0; ci < cameras.size(); ++ci) {
    const Partition& p = partition(cameras[ci]);
    std::shared_lock lock(p.mu);
    std::map<int64_t, Counts> disk;
    if (from_s < p.tail_floor) read_disk(p, from_s, std::min(to_s, p.tail_floor), disk);
    auto fill = [&](int64_t ts, const Counts& c) {
      const auto sec = static_cast<size_t>(ts - from_s);
      m.missing[ci * secs + sec] = 0;
      std::copy(c.begin(), c.end(), m.counts.begin() + static_cast<long>((ci * secs + sec) * m.num_classes));
    };
    for (const auto& [ts, c] : disk) fill(ts, c);
    for (auto it = p.tail.lower_bound(std::max(from_s, p.tail_floor)); it != p.tail.end() && it->first < to_s; ++it)
      fill(it->first, it->second);
  }
  return m;
}

std::optional<Counts> TimeSeriesStore::get(const std::string& camera, int64_t ts_s) const {
  const std::string cams[] = {camera};
  auto m = query(cams, ts_s, ts_s + 1);
  if (m.is_missing(0, 0)) return std::nullopt;
  return Counts(m.counts.begin(), m.counts.end());
}

void TimeSeriesStore::compact() {
  for (auto& p : partitions_) {
    std::unique_lock lock(p->mu);
    compact_partition(*p);
  }
  ++compactions_;
}

void TimeSeriesStore::compact_partition(Partition& p) {
  std::map<int64_t, Counts> all;
  parse_blocks(read_file(p.block_path), options_.num_classes, p.block_path, all);
  parse_log(read_file(p.log_path), options_.num_classes, all);
  if (options_.max_age_s > 0 && p.latest) {
    const int64_t cutoff = *p.latest - options_.max_age_s;
    all.erase(all.begin(), all.lower_bound(cutoff));
    std::erase_if(p.keys, [cutoff](int64_t ts) { return ts < cutoff; });
    p.tail.erase(p.tail.begin(), p.tail.lower_bound(cutoff));
  }

  const size_t c = options_.num_classes;
  std::vector<uint8_t> out;
  auto it = all.begin();
  while (it != all.end()) {
    const int64_t start = floor_div(it->first, kBlockSeconds) * kBlockSeconds;
    const size_t begin = out.size();
    put<uint32_t>(out, kBlockMagic);
    put<uint16_t>(out, kBlockVersion);
    put<uint16_t>(out, static_cast<uint16_t>(c));
    put<int64_t>(out, start);
    put<uint64_t>(out, 0);
    out.resize(out.size() + 4 * kBlockSeconds * c, 0);
    uint64_t mask = 0;
    for (; it != all.end() && it->first < start + kBlockSeconds; ++it) {
      const auto i = static_cast<size_t>(it->first - start);
      mask |= uint64_t{1} << i;
      std::memcpy(out.data() + begin + 24 + 4 * c * i, it->second.data(), 4 * c);
    }
    std::memcpy(out.data() + begin + 16, &mask, sizeof(mask));
    put<uint32_t>(out, crc(out.data() + begin, out.size() - begin));
  }

  const auto tmp = p.block_path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::kIo, "cannot create " + tmp);
  try {
    write_all(fd, out, tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::fsync(fd);
  ::close(fd);
  std::filesystem::rename(tmp, p.block_path);
  // A crash before this truncate only leaves duplicate records that replay idempotently.
  if (::ftruncate(p.log_fd, 0) != 0) throw Error(ErrorCode::kIo, "cannot truncate " + p.log_path.string());
  p.log_records = 0;
}

uint64_t TimeSeriesStore::record_count() const {
  uint64_t n = 0;
  for (const auto& p : partitions_) {
    std::shared_lock lock(p->mu);
    n += p->keys.size();
  }
  return n;
}

std::optional<int64_t> TimeSeriesStore::latest_second() const {
  std::optional<int64_t> latest;
  for (const auto& p : partitions_) {
    std::shared_lock lock(p->mu);
    if (p->latest && (!latest || *p->latest > *latest)) latest = p->latest;
  }
  return latest;
}

StoreStats TimeSeriesStore::stats() const {
  return StoreStats{record_count(), disk_reads_.load(), ingests_.load(), compactions_.load()};
}

}  // namespace cityfabric
