#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mulm/clock.hpp"
#include "mulm/error.hpp"
#include "mulm/decoder.hpp"
#include "mulm/metrics.hpp"

namespace mulm {

enum class RecoveryMode { explicit_correction, natural_recovery, humor_aware };

/// Accepts "explicit"/"natural"/"humor" and the full enumerator names.
RecoveryMode parse_recovery_mode(std::string_view name);
std::string_view to_string(RecoveryMode mode) noexcept;

struct ChatMessage {
  std::string role;
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

/// System message: the general continuation instruction followed by the
/// mode's instruction block. User message: the query and the opener in
/// delimited sections.
std::vector<ChatMessage> build_continuation_prompt(std::string_view query, std::string_view opener,
                                                   RecoveryMode mode);

struct CloudEndpointConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string model = "continuator";
  std::string auth_token_env = "MULM_CLOUD_TOKEN";  // name of the env var, never the token
  int timeout_ms = 30000;
  int max_tokens = 512;
  int retries = 1;  // extra attempts on transport errors before any byte arrived

  void validate() const;
};

struct ContinuationRequest {
  std::string query;
  std::string opener;
  std::vector<ChatMessage> messages;
};

struct StreamOutcome {
  std::string text;
  std::size_t deltas = 0;
  std::optional<double> ttfb_ms;
  std::optional<bool> adjudicated_correction;  // only if the endpoint said so
};

using DeltaCallback = std::function<void(std::string_view)>;

/// Anything that can stream a continuation: the remote chat endpoint, the
/// local model (standalone baseline) or a scripted fixture.
class ContinuationSource {
 public:
  virtual ~ContinuationSource() = default;
  /// Calls on_delta in arrival order. Throws TransportError, TimeoutError or
  /// ProtocolError.
  virtual StreamOutcome stream(const ContinuationRequest& request,
                               const DeltaCallback& on_delta) = 0;
};

/// Streams from an OpenAI-style /v1/chat/completions endpoint.
class ChatCompletionsClient final : public ContinuationSource {
 public:
  explicit ChatCompletionsClient(CloudEndpointConfig config);
  StreamOutcome stream(const ContinuationRequest& request, const DeltaCallback& on_delta) override;

  /// JSON body sent for `messages`.
  nlohmann::json request_body(std::span<const ChatMessage> messages) const;

 private:
  CloudEndpointConfig config_;
};

/// Single call against the endpoint, with the configured retry policy.
StreamOutcome request_continuation(const CloudEndpointConfig& endpoint,
                                   std::span<const ChatMessage> messages,
                                   const DeltaCallback& on_delta);

/// Replays canned deltas; used by tests, demos and the mock server.
class ScriptedContinuation final : public ContinuationSource {
 public:
  struct Script {
    std::vector<std::string> deltas;
    std::optional<bool> adjudicated_correction;
    // Thrown after `fail_after` deltas when set.
    std::optional<std::size_t> fail_after;
    std::string failure_message = "scripted transport failure";
  };
  explicit ScriptedContinuation(Script script) : script_(std::move(script)) {}
  StreamOutcome stream(const ContinuationRequest& request, const DeltaCallback& on_delta) override;

 private:
  Script script_;
};

/// Continues with the local model itself (no cloud). The continuation is the
/// part of the unbounded greedy answer that follows the opener.
class LocalContinuation final : public ContinuationSource {
 public:
  LocalContinuation(const Model& model, const TokenizerModel& tok, SamplingPolicy policy)
      : model_(&model), tok_(&tok), policy_(policy) {}
  StreamOutcome stream(const ContinuationRequest& request, const DeltaCallback& on_delta) override;

 private:
  const Model* model_;
  const TokenizerModel* tok_;
  SamplingPolicy policy_;
};

/// Uses `primary`; if it fails before delivering any delta, reports the
/// failure through `on_fallback` and streams from `fallback` instead.
/// Failures after the first delta are rethrown.
class FallbackContinuation final : public ContinuationSource {
 public:
  using Notice = std::function<void(const Error&)>;
  FallbackContinuation(ContinuationSource& primary, ContinuationSource& fallback, Notice on_fallback)
      : primary_(&primary), fallback_(&fallback), on_fallback_(std::move(on_fallback)) {}
  StreamOutcome stream(const ContinuationRequest& request, const DeltaCallback& on_delta) override;

 private:
  ContinuationSource* primary_;
  ContinuationSource* fallback_;
  Notice on_fallback_;
};

/// opener + separator + continuation. The separator is a single space unless
/// either side is empty, the opener ends in whitespace, or the continuation
/// starts with whitespace or closing punctuation.
std::string stitch(std::string_view opener, std::string_view continuation);
std::string_view stitch_separator(std::string_view opener, std::string_view continuation);

/// Explicit mode: yes iff some line starts (after indentation) with
/// "Correction:". Other modes: the adjudicated flag if supplied, else unknown.
CorrectionFlag detect_correction(std::string_view continuation, RecoveryMode mode,
                                 std::optional<bool> adjudicated = std::nullopt);

/// Length of the common prefix of the opener and the continuation with
/// leading whitespace removed.
std::size_t restart_overlap(std::string_view opener, std::string_view continuation);

struct ContinuationResult {
  std::string continuation_text;
  std::string stitched_text;
  CorrectionFlag corrected = CorrectionFlag::unknown;
  double ttfb_cloud_ms = 0.0;
  std::size_t tokens_received = 0;
  bool duplication_warning = false;  // continuation restarted with the whole opener
  std::size_t restart_overlap = 0;
};

CorrectionRate compute_correction_rate(std::span<const ContinuationResult> results);

enum class EventType { opener_token, handoff, continuation_token, correction, done, error };
std::string_view to_string(EventType type) noexcept;

struct SessionEvent {
  EventType type;
  double t_ms = 0.0;
  std::string text_delta;         // opener_token / continuation_token
  std::optional<TokenId> token_id;
  nlohmann::json detail = nlohmann::json::object();  // type-specific fields
};

using EventSink = std::function<void(const SessionEvent&)>;

/// opener_token+ handoff (continuation_token | correction)* (done | error)
bool matches_event_grammar(std::span<const EventType> types);

struct CollaborativeOptions {
  SamplingPolicy policy;
  const Clock* clock = nullptr;
  std::uint64_t seed = 0;
};

struct CollaborativeResult {
  OpenerResult opener;
  ContinuationResult continuation;
  SessionTimeline timeline;
  bool degraded = false;  // continuator failed; the opener stands alone
  std::string error;
};

/// Generates and commits the opener (streamed as opener_token events), then
/// dispatches the continuation request and streams it. Continuator failures
/// become an `error` event; the committed opener is never retracted.
CollaborativeResult run_collaborative(std::string_view query, std::optional<std::size_t> word_budget,
                                      RecoveryMode mode, const Model& model,
                                      const TokenizerModel& tok, ContinuationSource& source,
                                      const EventSink& sink, const CollaborativeOptions& options = {});

}  // namespace mulm
