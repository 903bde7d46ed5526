#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "mulm/error.hpp"
#include "mulm/handoff.hpp"
#include "mulm/model.hpp"
#include "mulm/tokenizer.hpp"

namespace mulm {

struct ServiceConfig {
  std::filesystem::path weights_path;
  std::filesystem::path tokenizer_path;
  CloudEndpointConfig cloud;
  std::size_t word_budget = 4;
  RecoveryMode mode = RecoveryMode::explicit_correction;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string log_level = "info";
  bool no_cloud = false;
  SamplingPolicy policy{0.0f, 256};

  /// ConfigError on out-of-range values; with check_files, also when the
  /// weights or tokenizer file is missing.
  void validate(bool check_files = true) const;
  /// Fields absent from `j` keep their current values.
  void merge_json(const nlohmann::json& j);
  /// Everything except secrets (the token itself is never stored here).
  nlohmann::json to_json() const;
};

/// Reads one UTF-8 JSON config file. Throws IoError or ConfigError.
ServiceConfig load_service_config(const std::filesystem::path& path);

struct RespondRequest {
  std::string query;
  std::size_t word_budget = 4;
  RecoveryMode mode = RecoveryMode::explicit_correction;
};

/// Thrown for client mistakes; maps to HTTP 400.
class RequestError : public Error {
 public:
  using Error::Error;
};

/// Parses a /v1/respond body, filling omitted fields from the config.
RespondRequest parse_respond_request(std::string_view body, const ServiceConfig& defaults);

/// SSE frame for one session event: `event: <type>` and a JSON data line
/// {session, seq, type, t_ms, text?, token_id?, ...detail}.
std::string format_session_event(std::string_view session_id, std::size_t seq,
                                 const SessionEvent& ev);

/// Session runner shared by the HTTP routes and the CLI.
class Service {
 public:
  using SourceFactory =
      std::function<std::unique_ptr<ContinuationSource>(const ServiceConfig&, const RespondRequest&)>;
  using ClockFactory = std::function<std::unique_ptr<Clock>()>;
  /// Receives each formatted frame; returning false aborts the session.
  using FrameWriter = std::function<bool(std::string_view)>;

  Service(ServiceConfig config, std::shared_ptr<const Model> model,
          std::shared_ptr<const TokenizerModel> tok, SourceFactory sources = {},
          ClockFactory clocks = {});

  /// Loads weights and tokenizer named by the config; fails fast.
  static std::unique_ptr<Service> from_config(ServiceConfig config);

  const ServiceConfig& config() const noexcept { return config_; }
  const Model& model() const noexcept { return *model_; }
  const TokenizerModel& tokenizer() const noexcept { return *tok_; }

  /// Throws RequestError when the rendered prompt cannot fit the context.
  void check_fits(const RespondRequest& req) const;

  /// Runs one session, writing SSE frames in order. Internal failures become
  /// an `error` frame. Returns the session id.
  std::string respond(const RespondRequest& req, const FrameWriter& write);

  nlohmann::json health() const;
  std::size_t sessions_started() const noexcept { return next_session_.load(); }

 private:
  ServiceConfig config_;
  std::shared_ptr<const Model> model_;
  std::shared_ptr<const TokenizerModel> tok_;
  SourceFactory sources_;
  ClockFactory clocks_;
  std::atomic<std::size_t> next_session_{0};
};

/// HTTP front end: POST /v1/respond, GET /v1/health, GET /v1/config.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds host:port (port 0 picks a free one) and returns the bound port.
  /// Throws TransportError when the address cannot be bound.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mulm
