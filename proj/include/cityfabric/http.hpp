#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include <nlohmann/json.hpp>

#include "cityfabric/edge_worker.hpp"
#include "cityfabric/errors.hpp"
#include "cityfabric/gateway.hpp"

namespace cityfabric {

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// Routes one /v1 request against the gateway. Pure with respect to sockets so
// tests can drive it directly. Errors become {"error", "message"} bodies.
HttpResponse handle_request(Gateway& gw, std::string_view method, std::string_view target, std::string_view body);

int http_status_for(ErrorCode code);

// Splits "path?a=1&b=2" and percent-decodes the query values.
struct Target {
  std::string path;
  std::map<std::string, std::string> query;
};
Target parse_target(std::string_view target);

struct HttpServerOptions {
  std::string address = "127.0.0.1";
  uint16_t port = 8080;  // 0 picks an ephemeral port
  size_t ws_buffer = 1024;
  std::chrono::milliseconds ws_poll{200};
};

// HTTP + WebSocket front end, one thread per connection.
class HttpServer {
 public:
  HttpServer(Gateway& gw, HttpServerOptions options = {});
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  void start();
  void stop();
  uint16_t port() const noexcept { return port_; }

 private:
  struct Impl;
  Gateway& gw_;
  HttpServerOptions options_;
  std::unique_ptr<Impl> impl_;
  uint16_t port_ = 0;
};

// ---- clients ----

struct ClientResponse {
  int status = 0;
  std::string body;
};

// One-shot HTTP/1.1 request. Throws Error(kIngestUnreachable) when the connection fails.
ClientResponse http_request(const std::string& host, uint16_t port, std::string_view method, std::string_view target,
                            std::string_view body = {});

// Summary sink posting to /v1/ingest over a persistent connection; reconnects on failure.
class HttpSummarySink : public SummarySink {
 public:
  HttpSummarySink(std::string host, uint16_t port);
  ~HttpSummarySink() override;
  Ack send(const FlowSummary& summary) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Minimal blocking WebSocket reader for tests and the CLI.
class WsClient {
 public:
  WsClient(const std::string& host, uint16_t port, const std::string& target);
  ~WsClient();
  // Returns the next text frame, or nullopt once the server closed the socket.
  std::optional<std::string> read();
  void close();
  // Close reason sent by the server, if any.
  std::string close_reason() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cityfabric
