#include "mulm/handoff.hpp"

#include <cstdlib>

#include <httplib.h>

#include "mulm/error.hpp"
#include "mulm/prompts.hpp"
#include "mulm/sse.hpp"

namespace mulm {

namespace {

using nlohmann::json;

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // endpoint path
};

SplitUrl split_endpoint(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("cloud base URL needs a scheme: " + base_url);
  const auto path_start = base_url.find('/', scheme_end + 3);
  SplitUrl u;
  u.origin = base_url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : base_url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  if (prefix.size() >= 3 && prefix.compare(prefix.size() - 3, 3, "/v1") == 0) {
    u.path = prefix + "/chat/completions";
  } else {
    u.path = prefix + "/v1/chat/completions";
  }
  return u;
}

bool is_closing_punct(std::string_view s) {
  static constexpr std::string_view kAscii = ",.;:!?)]}%'\"";
  if (s.empty()) return false;
  if (kAscii.find(s.front()) != std::string_view::npos) return true;
  for (std::string_view u : {"…", "’", "”", "»"}) {
    if (s.substr(0, u.size()) == u) return true;
  }
  return false;
}

// Decodes the code point starting at s[i]; malformed input yields U+FFFD.
char32_t decode_at(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) return b0;
  int len = (b0 & 0xE0) == 0xC0 ? 2 : (b0 & 0xF0) == 0xE0 ? 3 : (b0 & 0xF8) == 0xF0 ? 4 : 0;
  if (len == 0 || i + len > s.size()) return 0xFFFD;
  char32_t cp = b0 & (0x7F >> len);
  for (int k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0xFFFD;
    cp = (cp << 6) | (b & 0x3F);
  }
  return cp;
}

bool starts_with_space(std::string_view s) { return !s.empty() && is_unicode_space(decode_at(s, 0)); }

bool ends_with_space(std::string_view s) {
  if (s.empty()) return false;
  std::size_t i = s.size() - 1;
  while (i > 0 && (static_cast<unsigned char>(s[i]) & 0xC0) == 0x80) --i;
  return is_unicode_space(decode_at(s, i));
}

std::string_view correction_source(RecoveryMode mode) {
  return mode == RecoveryMode::explicit_correction ? "marker" : "adjudicated";
}

std::string_view flag_name(CorrectionFlag f) {
  switch (f) {
    case CorrectionFlag::yes: return "yes";
    case CorrectionFlag::no: return "no";
    case CorrectionFlag::unknown: return "unknown";
  }
  return "unknown";
}

}  // namespace

RecoveryMode parse_recovery_mode(std::string_view name) {
  if (name == "explicit" || name == "explicit_correction") return RecoveryMode::explicit_correction;
  if (name == "natural" || name == "natural_recovery") return RecoveryMode::natural_recovery;
  if (name == "humor" || name == "humor_aware") return RecoveryMode::humor_aware;
  throw ConfigError("unknown recovery mode '" + std::string(name) +
                    "' (expected explicit, natural or humor)");
}

std::string_view to_string(RecoveryMode mode) noexcept {
  switch (mode) {
    case RecoveryMode::explicit_correction: return "explicit";
    case RecoveryMode::natural_recovery: return "natural";
    case RecoveryMode::humor_aware: return "humor";
  }
  return "explicit";
}

std::vector<ChatMessage> build_continuation_prompt(std::string_view query, std::string_view opener,
                                                   RecoveryMode mode) {
  if (query.empty()) throw DomainError("continuation prompt needs a non-empty query");
  std::string system(prompts::continuation());
  switch (mode) {
    case RecoveryMode::explicit_correction: system += prompts::mode_explicit(); break;
    case RecoveryMode::natural_recovery: system += prompts::mode_natural(); break;
    case RecoveryMode::humor_aware: system += prompts::mode_humor(); break;
  }
  std::string user = "[User question]\n";
  user += query;
  user += "\n\n[Already-spoken opener]\n";
  user += opener;
  return {ChatMessage{"system", std::move(system)}, ChatMessage{"user", std::move(user)}};
}

void CloudEndpointConfig::validate() const {
  if (timeout_ms <= 0) throw ConfigError("cloud timeout must be positive");
  if (max_tokens <= 0) throw ConfigError("cloud max_tokens must be positive");
  if (retries < 0) throw ConfigError("cloud retries must be >= 0");
  split_endpoint(base_url);
}

ChatCompletionsClient::ChatCompletionsClient(CloudEndpointConfig config)
    : config_(std::move(config)) {
  config_.validate();
}

json ChatCompletionsClient::request_body(std::span<const ChatMessage> messages) const {
  json msgs = json::array();
  for (const auto& m : messages) msgs.push_back(json{{"role", m.role}, {"content", m.content}});
  return json{{"model", config_.model},
              {"messages", std::move(msgs)},
              {"stream", true},
              {"temperature", 0},
              {"max_tokens", config_.max_tokens}};
}

StreamOutcome ChatCompletionsClient::stream(const ContinuationRequest& request,
                                            const DeltaCallback& on_delta) {
  const SplitUrl url = split_endpoint(config_.base_url);
  const std::string body = request_body(request.messages).dump();

  for (int attempt = 0;; ++attempt) {
    StreamOutcome out;
    const auto started = std::chrono::steady_clock::now();
    auto elapsed_ms = [&] {
      return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
          .count();
    };

    httplib::Client cli(url.origin);
    const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);

    httplib::Request req;
    req.method = "POST";
    req.path = url.path;
    req.body = body;
    req.set_header("Content-Type", "application/json");
    req.set_header("Accept", "text/event-stream");
    if (const char* token = std::getenv(config_.auth_token_env.c_str()); token && *token) {
      req.set_header("Authorization", std::string("Bearer ") + token);
    }

    int status = 0;
    bool event_stream = true;
    bool timed_out = false;
    bool finished = false;
    std::string raw;  // error bodies and non-streaming replies
    std::optional<ProtocolError> stream_error;

    SseParser parser([&](const SseEvent& ev) {
      if (finished || stream_error) return;
      if (ev.data == "[DONE]") {
        finished = true;
        return;
      }
      json chunk = json::parse(ev.data, nullptr, false);
      if (chunk.is_discarded()) return;
      if (chunk.contains("error")) {
        stream_error.emplace(status, chunk["error"].dump());
        return;
      }
      if (chunk.contains("correction") && chunk["correction"].is_boolean()) {
        out.adjudicated_correction = chunk["correction"].get<bool>();
      }
      if (!chunk.contains("choices") || chunk["choices"].empty()) return;
      const auto& choice = chunk["choices"][0];
      if (!choice.contains("delta")) return;
      const auto& delta = choice["delta"];
      if (!delta.contains("content") || !delta["content"].is_string()) return;
      const auto text = delta["content"].get<std::string>();
      if (text.empty()) return;
      out.text += text;
      ++out.deltas;
      on_delta(text);
    });

    req.response_handler = [&](const httplib::Response& res) {
      status = res.status;
      event_stream = res.get_header_value("Content-Type").find("text/event-stream") !=
                     std::string::npos;
      return true;
    };
    req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t, std::uint64_t) {
      if (!out.ttfb_ms) out.ttfb_ms = elapsed_ms();
      if (status < 200 || status >= 300 || !event_stream) {
        raw.append(data, len);
      } else {
        parser.feed(std::string_view(data, len));
      }
      if (stream_error) return false;
      if (elapsed_ms() > config_.timeout_ms) {
        timed_out = true;
        return false;
      }
      return true;
    };

    auto res = cli.send(req);
    if (stream_error) throw *stream_error;
    if (!res) {
      const auto err = res.error();
      if (timed_out || elapsed_ms() >= config_.timeout_ms) {
        throw TimeoutError("continuator timed out after " + std::to_string(config_.timeout_ms) +
                               " ms",
                           out.text);
      }
      if (out.deltas == 0 && attempt < config_.retries) continue;
      throw TransportError("continuator request failed: " + httplib::to_string(err));
    }
    if (res->status < 200 || res->status >= 300) {
      throw ProtocolError(res->status, raw.empty() ? res->body : raw);
    }
    if (event_stream) {
      parser.finish();
      if (stream_error) throw *stream_error;
    } else {
      // Endpoint ignored stream=true and answered with one JSON document.
      json doc = json::parse(raw.empty() ? res->body : raw, nullptr, false);
      if (doc.is_discarded() || !doc.contains("choices") || doc["choices"].empty()) {
        throw ProtocolError(res->status, raw.empty() ? res->body : raw);
      }
      const auto text = doc["choices"][0].value("message", json::object()).value("content", "");
      if (!text.empty()) {
        out.text = text;
        out.deltas = 1;
        on_delta(text);
      }
    }
    return out;
  }
}

StreamOutcome request_continuation(const CloudEndpointConfig& endpoint,
                                   std::span<const ChatMessage> messages,
                                   const DeltaCallback& on_delta) {
  ChatCompletionsClient client(endpoint);
  ContinuationRequest req;
  req.messages.assign(messages.begin(), messages.end());
  return client.stream(req, on_delta);
}

StreamOutcome ScriptedContinuation::stream(const ContinuationRequest&,
                                           const DeltaCallback& on_delta) {
  StreamOutcome out;
  out.ttfb_ms = 0.0;
  for (std::size_t i = 0; i < script_.deltas.size(); ++i) {
    if (script_.fail_after && i == *script_.fail_after) {
      throw TransportError(script_.failure_message);
    }
    out.text += script_.deltas[i];
    ++out.deltas;
    on_delta(script_.deltas[i]);
  }
  if (script_.fail_after && *script_.fail_after >= script_.deltas.size()) {
    throw TransportError(script_.failure_message);
  }
  out.adjudicated_correction = script_.adjudicated_correction;
  return out;
}

StreamOutcome LocalContinuation::stream(const ContinuationRequest& request,
                                        const DeltaCallback& on_delta) {
  StreamOutcome out;
  std::size_t skip = request.opener.size();
  GenerationHooks hooks;
  hooks.sink = [&](const OpenerToken& t) {
    std::string_view delta = t.text_delta;
    const std::size_t drop = std::min(skip, delta.size());
    skip -= drop;
    delta.remove_prefix(drop);
    if (delta.empty()) return;
    if (!out.ttfb_ms) out.ttfb_ms = t.t_ms;
    out.text.append(delta);
    ++out.deltas;
    on_delta(delta);
  };
  generate_opener(*model_, *tok_, ChatTranscript::single(request.query), std::nullopt, policy_,
                  hooks);
  return out;
}

StreamOutcome FallbackContinuation::stream(const ContinuationRequest& request,
                                           const DeltaCallback& on_delta) {
  std::size_t delivered = 0;
  try {
    return primary_->stream(request, [&](std::string_view d) {
      ++delivered;
      on_delta(d);
    });
  } catch (const Error& e) {
    if (delivered > 0) throw;
    if (on_fallback_) on_fallback_(e);
  }
  return fallback_->stream(request, on_delta);
}

std::string_view stitch_separator(std::string_view opener, std::string_view continuation) {
  if (opener.empty() || continuation.empty()) return "";
  if (ends_with_space(opener) || starts_with_space(continuation) ||
      is_closing_punct(continuation)) {
    return "";
  }
  return " ";
}

std::string stitch(std::string_view opener, std::string_view continuation) {
  std::string out(opener);
  out += stitch_separator(opener, continuation);
  out += continuation;
  return out;
}

CorrectionFlag detect_correction(std::string_view continuation, RecoveryMode mode,
                                 std::optional<bool> adjudicated) {
  if (mode != RecoveryMode::explicit_correction) {
    if (!adjudicated) return CorrectionFlag::unknown;
    return *adjudicated ? CorrectionFlag::yes : CorrectionFlag::no;
  }
  static constexpr std::string_view kMarker = "Correction:";
  std::size_t start = 0;
  while (start <= continuation.size()) {
    const auto nl = continuation.find('\n', start);
    std::string_view line = continuation.substr(
        start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    const auto first = line.find_first_not_of(" \t\r");
    if (first != std::string_view::npos && line.substr(first, kMarker.size()) == kMarker) {
      return CorrectionFlag::yes;
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return CorrectionFlag::no;
}

std::size_t restart_overlap(std::string_view opener, std::string_view continuation) {
  const auto first = continuation.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return 0;
  continuation.remove_prefix(first);
  std::size_t n = 0;
  while (n < opener.size() && n < continuation.size() && opener[n] == continuation[n]) ++n;
  return n;
}

CorrectionRate compute_correction_rate(std::span<const ContinuationResult> results) {
  std::vector<CorrectionFlag> flags;
  flags.reserve(results.size());
  for (const auto& r : results) flags.push_back(r.corrected);
  return compute_correction_rate(std::span<const CorrectionFlag>(flags));
}

std::string_view to_string(EventType type) noexcept {
  switch (type) {
    case EventType::opener_token: return "opener_token";
    case EventType::handoff: return "handoff";
    case EventType::continuation_token: return "continuation_token";
    case EventType::correction: return "correction";
    case EventType::done: return "done";
    case EventType::error: return "error";
  }
  return "error";
}

bool matches_event_grammar(std::span<const EventType> types) {
  std::size_t i = 0;
  while (i < types.size() && types[i] == EventType::opener_token) ++i;
  if (i == 0) return false;
  if (i >= types.size() || types[i] != EventType::handoff) return false;
  ++i;
  while (i < types.size() &&
         (types[i] == EventType::continuation_token || types[i] == EventType::correction)) {
    ++i;
  }
  if (i + 1 != types.size()) return false;
  return types[i] == EventType::done || types[i] == EventType::error;
}

CollaborativeResult run_collaborative(std::string_view query, std::optional<std::size_t> word_budget,
                                      RecoveryMode mode, const Model& model,
                                      const TokenizerModel& tok, ContinuationSource& source,
                                      const EventSink& sink, const CollaborativeOptions& options) {
  static const SteadyClock steady;
  const Clock& clock = options.clock ? *options.clock : steady;
  CollaborativeResult result;
  const Micros t0 = clock.now();
  auto rel = [&](Micros t) { return to_ms(t - t0); };

  std::size_t opener_events = 0;
  GenerationHooks hooks;
  hooks.clock = &clock;
  hooks.request_received = t0;
  hooks.seed = options.seed;
  hooks.sink = [&](const OpenerToken& t) {
    ++opener_events;
    sink(SessionEvent{EventType::opener_token, t.t_ms, t.text_delta, t.token_id, json::object()});
  };
  result.opener = generate_opener(model, tok, ChatTranscript::single(std::string(query)),
                                  word_budget, options.policy, hooks);
  const OpenerResult& opener = result.opener;
  if (opener_events == 0) {
    // Keep the stream grammar (at least one opener_token) for empty openers.
    sink(SessionEvent{EventType::opener_token, rel(clock.now()), "", std::nullopt, json::object()});
  }

  SessionTimeline& tl = result.timeline;
  tl = opener.timeline;
  tl.done.reset();

  ContinuationRequest request{std::string(query), opener.text,
                              build_continuation_prompt(query, opener.text, mode)};
  tl.handoff_dispatched = clock.now();
  sink(SessionEvent{EventType::handoff, rel(*tl.handoff_dispatched), "", std::nullopt,
                    json{{"opener", opener.text},
                         {"word_count", opener.word_count},
                         {"stop_reason", to_string(opener.stop_reason)},
                         {"mode", to_string(mode)}}});

  ContinuationResult& cont = result.continuation;
  bool marker_seen = false;
  bool separator_sent = false;
  auto on_delta = [&](std::string_view delta) {
    if (delta.empty()) return;
    const Micros now = clock.now();
    if (!tl.cloud_first_byte) tl.cloud_first_byte = now;
    std::string visible;
    if (!separator_sent) {
      visible = stitch_separator(opener.text, delta);
      separator_sent = true;
    }
    visible.append(delta);
    cont.continuation_text.append(delta);
    ++cont.tokens_received;
    sink(SessionEvent{EventType::continuation_token, rel(now), std::move(visible), std::nullopt,
                      json::object()});
    if (!marker_seen && mode == RecoveryMode::explicit_correction &&
        detect_correction(cont.continuation_text, mode) == CorrectionFlag::yes) {
      marker_seen = true;
      sink(SessionEvent{EventType::correction, rel(clock.now()), "", std::nullopt,
                        json{{"mode", to_string(mode)}, {"source", correction_source(mode)}}});
    }
  };

  std::optional<bool> adjudicated;
  try {
    const StreamOutcome outcome = source.stream(request, on_delta);
    adjudicated = outcome.adjudicated_correction;
  } catch (const Error& e) {
    result.degraded = true;
    result.error = e.what();
  }

  cont.stitched_text = stitch(opener.text, cont.continuation_text);
  cont.corrected = detect_correction(cont.continuation_text, mode, adjudicated);
  if (tl.cloud_first_byte) cont.ttfb_cloud_ms = to_ms(*tl.cloud_first_byte - *tl.handoff_dispatched);
  cont.restart_overlap = restart_overlap(opener.text, cont.continuation_text);
  cont.duplication_warning = !opener.text.empty() && cont.restart_overlap == opener.text.size();

  if (!result.degraded && !marker_seen && cont.corrected == CorrectionFlag::yes) {
    sink(SessionEvent{EventType::correction, rel(clock.now()), "", std::nullopt,
                      json{{"mode", to_string(mode)}, {"source", correction_source(mode)}}});
  }

  tl.done = clock.now();
  json metrics{{"ttft_ms", compute_ttft(tl)},
               {"word_count", opener.word_count},
               {"cloud_ttfb_ms", tl.cloud_first_byte ? json(cont.ttfb_cloud_ms) : json(nullptr)},
               {"corrected", flag_name(cont.corrected)},
               {"duplication_warning", cont.duplication_warning},
               {"restart_overlap", cont.restart_overlap},
               {"tokens_received", cont.tokens_received}};
  if (const auto t = compute_time_to_n_words(tl, opener.word_count)) {
    metrics["time_to_opener_ms"] = *t;
  }
  if (result.degraded) {
    sink(SessionEvent{EventType::error, rel(*tl.done), "", std::nullopt,
                      json{{"message", result.error},
                           {"degraded", true},
                           {"stitched", cont.stitched_text},
                           {"metrics", std::move(metrics)}}});
  } else {
    sink(SessionEvent{EventType::done, rel(*tl.done), "", std::nullopt,
                      json{{"stitched", cont.stitched_text}, {"metrics", std::move(metrics)}}});
  }
  return result;
}

}  // namespace mulm
