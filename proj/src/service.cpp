#include "mulm/service.hpp"

#include <atomic>
#include <chrono>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "mulm/error.hpp"
#include "mulm/sse.hpp"
#include "mulm/weights_io.hpp"

namespace mulm {

namespace {

using nlohmann::json;

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

// Thrown from the frame writer when the client went away.
struct ClientGone {};

}  // namespace

void ServiceConfig::validate(bool check_files) const {
  if (word_budget == 0 || word_budget > kMaxWordBudget) {
    throw ConfigError("word_budget must be in 1..32, got " + std::to_string(word_budget));
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range");
  if (policy.temperature < 0.0f) throw ConfigError("temperature must be >= 0");
  if (policy.max_tokens == 0) throw ConfigError("max_tokens must be >= 1");
  if (log_level != "debug" && log_level != "info" && log_level != "warn" && log_level != "error") {
    throw ConfigError("log_level must be debug, info, warn or error");
  }
  if (!no_cloud) cloud.validate();
  if (check_files) {
    if (weights_path.empty() || !std::filesystem::is_regular_file(weights_path)) {
      throw ConfigError("weights file not found: " + weights_path.string());
    }
    if (tokenizer_path.empty() || !std::filesystem::is_regular_file(tokenizer_path)) {
      throw ConfigError("tokenizer file not found: " + tokenizer_path.string());
    }
  }
}

void ServiceConfig::merge_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::string s;
  if (j.contains("weights")) {
    take(j, "weights", s);
    weights_path = s;
  }
  if (j.contains("tokenizer")) {
    take(j, "tokenizer", s);
    tokenizer_path = s;
  }
  take(j, "word_budget", word_budget);
  if (j.contains("mode")) {
    take(j, "mode", s);
    mode = parse_recovery_mode(s);
  }
  take(j, "host", host);
  take(j, "port", port);
  take(j, "log_level", log_level);
  take(j, "no_cloud", no_cloud);
  take(j, "temperature", policy.temperature);
  take(j, "max_tokens", policy.max_tokens);
  if (j.contains("cloud")) {
    const auto& c = j["cloud"];
    if (!c.is_object()) throw ConfigError("config field 'cloud' must be an object");
    for (const char* secret : {"token", "api_key", "auth_token"}) {
      if (c.contains(secret)) {
        throw ConfigError(std::string("cloud.") + secret +
                          " is not accepted in config files; set the environment variable named "
                          "by cloud.auth_token_env instead");
      }
    }
    take(c, "base_url", cloud.base_url);
    take(c, "model", cloud.model);
    take(c, "auth_token_env", cloud.auth_token_env);
    take(c, "timeout_ms", cloud.timeout_ms);
    take(c, "max_tokens", cloud.max_tokens);
    take(c, "retries", cloud.retries);
  }
}

json ServiceConfig::to_json() const {
  return json{{"weights", weights_path.string()},
              {"tokenizer", tokenizer_path.string()},
              {"word_budget", word_budget},
              {"mode", to_string(mode)},
              {"host", host},
              {"port", port},
              {"log_level", log_level},
              {"no_cloud", no_cloud},
              {"temperature", policy.temperature},
              {"max_tokens", policy.max_tokens},
              {"cloud",
               {{"base_url", cloud.base_url},
                {"model", cloud.model},
                {"auth_token_env", cloud.auth_token_env},
                {"timeout_ms", cloud.timeout_ms},
                {"max_tokens", cloud.max_tokens},
                {"retries", cloud.retries}}}};
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  ServiceConfig cfg;
  cfg.merge_json(j);
  // Relative model paths are relative to the config file.
  const auto base = path.parent_path();
  if (!cfg.weights_path.empty() && cfg.weights_path.is_relative()) cfg.weights_path = base / cfg.weights_path;
  if (!cfg.tokenizer_path.empty() && cfg.tokenizer_path.is_relative()) {
    cfg.tokenizer_path = base / cfg.tokenizer_path;
  }
  return cfg;
}

RespondRequest parse_respond_request(std::string_view body, const ServiceConfig& defaults) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw RequestError("body must be a JSON object");
  RespondRequest req;
  req.word_budget = defaults.word_budget;
  req.mode = defaults.mode;
  if (!j.contains("query") || !j["query"].is_string()) {
    throw RequestError("'query' must be a string");
  }
  req.query = j["query"].get<std::string>();
  if (req.query.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw RequestError("'query' must not be empty");
  }
  if (j.contains("word_budget") && !j["word_budget"].is_null()) {
    const auto& b = j["word_budget"];
    if (!b.is_number_integer()) throw RequestError("'word_budget' must be an integer");
    const auto v = b.get<std::int64_t>();
    if (v < 1 || v > static_cast<std::int64_t>(kMaxWordBudget)) {
      throw RequestError("'word_budget' must be in 1..32");
    }
    req.word_budget = static_cast<std::size_t>(v);
  }
  if (j.contains("mode") && !j["mode"].is_null()) {
    if (!j["mode"].is_string()) throw RequestError("'mode' must be a string");
    try {
      req.mode = parse_recovery_mode(j["mode"].get<std::string>());
    } catch (const ConfigError& e) {
      throw RequestError(e.what());
    }
  }
  return req;
}

std::string format_session_event(std::string_view session_id, std::size_t seq,
                                 const SessionEvent& ev) {
  json data{{"session", session_id}, {"seq", seq}, {"type", to_string(ev.type)}, {"t_ms", ev.t_ms}};
  if (ev.type == EventType::opener_token || ev.type == EventType::continuation_token) {
    data["text"] = ev.text_delta;
  }
  if (ev.token_id) data["token_id"] = *ev.token_id;
  if (ev.detail.is_object()) {
    for (const auto& [k, v] : ev.detail.items()) data[k] = v;
  }
  return format_sse(to_string(ev.type), data.dump(-1, ' ', false, json::error_handler_t::replace));
}

Service::Service(ServiceConfig config, std::shared_ptr<const Model> model,
                 std::shared_ptr<const TokenizerModel> tok, SourceFactory sources,
                 ClockFactory clocks)
    : config_(std::move(config)),
      model_(std::move(model)),
      tok_(std::move(tok)),
      sources_(std::move(sources)),
      clocks_(std::move(clocks)) {
  if (!model_ || !tok_) throw ConfigError("service needs a model and a tokenizer");
  config_.validate(false);
  if (tok_->vocab_size() > model_->config().vocab_size) {
    throw ConfigError("tokenizer vocabulary (" + std::to_string(tok_->vocab_size()) +
                      ") exceeds the model's (" + std::to_string(model_->config().vocab_size) + ")");
  }
  if (!sources_) {
    sources_ = [this](const ServiceConfig& cfg,
                      const RespondRequest&) -> std::unique_ptr<ContinuationSource> {
      if (cfg.no_cloud) return std::make_unique<LocalContinuation>(*model_, *tok_, cfg.policy);
      return std::make_unique<ChatCompletionsClient>(cfg.cloud);
    };
  }
  if (!clocks_) clocks_ = [] { return std::make_unique<SteadyClock>(); };
}

std::unique_ptr<Service> Service::from_config(ServiceConfig config) {
  config.validate(true);
  auto loaded = load_weights(config.weights_path);
  auto model = std::make_shared<const Model>(loaded.config, std::move(loaded.weights));
  auto tok = std::make_shared<const TokenizerModel>(TokenizerModel::load(config.tokenizer_path));
  return std::make_unique<Service>(std::move(config), std::move(model), std::move(tok));
}

void Service::check_fits(const RespondRequest& req) const {
  const auto prompt = render_chat(*tok_, ChatTranscript::single(req.query), true);
  if (prompt.size() >= model_->config().max_seq_len) {
    throw RequestError("query is too long: " + std::to_string(prompt.size()) +
                       " prompt tokens for a context of " +
                       std::to_string(model_->config().max_seq_len));
  }
}

std::string Service::respond(const RespondRequest& req, const FrameWriter& write) {
  const std::string id = "s-" + std::to_string(++next_session_);
  const auto clock = clocks_();
  std::size_t seq = 0;
  bool terminal = false;
  auto emit = [&](const SessionEvent& ev) {
    if (ev.type == EventType::done || ev.type == EventType::error) terminal = true;
    if (!write(format_session_event(id, seq++, ev))) throw ClientGone{};
  };
  try {
    auto source = sources_(config_, req);
    CollaborativeOptions opts;
    opts.policy = config_.policy;
    opts.clock = clock.get();
    run_collaborative(req.query, req.word_budget, req.mode, *model_, *tok_, *source, emit, opts);
  } catch (const ClientGone&) {
  } catch (const std::exception& e) {
    if (!terminal) {
      try {
        emit(SessionEvent{EventType::error, 0.0, "", std::nullopt,
                          json{{"message", e.what()}, {"degraded", false}}});
      } catch (const ClientGone&) {
      }
    }
  }
  return id;
}

json Service::health() const {
  const auto& c = model_->config();
  return json{{"status", "ok"},
              {"model",
               {{"hidden_size", c.hidden_size},
                {"n_layers", c.n_layers},
                {"vocab_size", c.vocab_size},
                {"parameters", param_count(c)}}},
              {"tokenizer_vocab", tok_->vocab_size()},
              {"sessions", sessions_started()}};
}

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;
  // httplib's stop() is a no-op until listen has started, so a stop racing
  // a fresh serve() thread has to wait for it.
  std::mutex mu;
  bool stopped = false;
  std::atomic<bool> serving{false};
};

HttpServer::HttpServer(Service& service) : impl_(new Impl{service}) {
  auto& svr = impl_->server;
  // httplib defaults to SO_REUSEPORT, which lets a second server silently
  // share an occupied port.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  Service* svc = &service;
  auto json_reply = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };

  svr.Post("/v1/respond", [svc, json_reply](const httplib::Request& req, httplib::Response& res) {
    RespondRequest parsed;
    try {
      parsed = parse_respond_request(req.body, svc->config());
      svc->check_fits(parsed);
    } catch (const RequestError& e) {
      json_reply(res, 400, json{{"error", e.what()}});
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [svc, parsed](std::size_t, httplib::DataSink& sink) {
          svc->respond(parsed, [&sink](std::string_view frame) {
            return sink.write(frame.data(), frame.size());
          });
          sink.done();
          return true;
        });
  });
  svr.Get("/v1/health", [svc, json_reply](const httplib::Request&, httplib::Response& res) {
    json_reply(res, 200, svc->health());
  });
  svr.Get("/v1/config", [svc, json_reply](const httplib::Request&, httplib::Response& res) {
    json_reply(res, 200, svc->config().to_json());
  });
  svr.set_error_handler([json_reply](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) json_reply(res, res.status, json{{"error", httplib::status_message(res.status)}});
  });
  if (service.config().log_level == "debug") {
    svr.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      std::cerr << req.method << ' ' << req.path << ' ' << res.status << '\n';
    });
  }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  auto& svr = impl_->server;
  const int bound = port == 0 ? svr.bind_to_any_port(host) : (svr.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw TransportError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::serve() {
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    if (impl_->stopped) return;
    impl_->serving = true;
  }
  impl_->server.listen_after_bind();
  impl_->serving = false;
}

void HttpServer::stop() {
  if (!impl_) return;
  {
    std::lock_guard<std::mutex> lock(impl_->mu);
    impl_->stopped = true;
  }
  while (impl_->serving && !impl_->server.is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  impl_->server.stop();
}

}  // namespace mulm
