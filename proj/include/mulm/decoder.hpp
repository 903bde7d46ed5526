#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mulm/clock.hpp"
#include "mulm/metrics.hpp"
#include "mulm/model.hpp"
#include "mulm/tokenizer.hpp"

namespace mulm {

struct SamplingPolicy {
  float temperature = 0.0f;  // 0 selects argmax
  std::size_t max_tokens = 64;
};

/// Temperature 0: argmax with the lowest index winning ties. Otherwise a
/// categorical draw from softmax(logits / T).
TokenId sample(std::span<const float> logits, const SamplingPolicy& policy, std::mt19937_64& rng);

bool is_unicode_space(char32_t cp) noexcept;

/// Number of maximal runs of non-whitespace code points.
std::size_t count_words(std::string_view text);

enum class StopReason { word_budget, end_token, max_tokens };
std::string_view to_string(StopReason r) noexcept;

inline constexpr std::size_t kMaxWordBudget = 32;

struct OpenerTiming {
  double prefill_ms = 0.0;
  double first_decode_ms = 0.0;
  double total_ms = 0.0;
};

struct OpenerResult {
  std::string text;
  std::vector<TokenId> token_ids;
  std::size_t word_count = 0;
  std::size_t prompt_tokens = 0;
  OpenerTiming timing;
  StopReason stop_reason = StopReason::end_token;
  SessionTimeline timeline;
};

/// One committed piece of opener text.
struct OpenerToken {
  std::string text_delta;
  TokenId token_id = 0;
  double t_ms = 0.0;  // since request_received
};

using OpenerSink = std::function<void(const OpenerToken&)>;

struct GenerationHooks {
  OpenerSink sink;                         // called once per non-empty delta
  const Clock* clock = nullptr;            // defaults to a steady clock
  std::optional<Micros> request_received;  // defaults to clock->now() on entry
  std::uint64_t seed = 0;                  // sampling RNG, only used when T > 0
};

/// Generates and commits the opener. With a budget (1..32) decoding stops
/// once a token would start word budget+1; the committed text then ends at
/// the budget-th word. Trailing whitespace is only ever committed together
/// with the following word, so the sink never emits anything later retracted.
/// Passing std::nullopt decodes without a word budget.
OpenerResult generate_opener(const Model& model, const TokenizerModel& tok,
                             const ChatTranscript& transcript,
                             std::optional<std::size_t> word_budget, const SamplingPolicy& policy,
                             const GenerationHooks& hooks = {});

}  // namespace mulm
