#include "mulm/decoder.hpp"

#include <cmath>

#include "mulm/error.hpp"

namespace mulm {

namespace {

// Decodes one code point starting at text[i]; malformed bytes decode as a
// single non-space unit.
char32_t next_code_point(std::string_view text, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  int len = 1;
  char32_t cp = b0;
  if (b0 >= 0xC0 && b0 < 0xE0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if (b0 >= 0xE0 && b0 < 0xF0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xF0 && b0 < 0xF8) {
    len = 4;
    cp = b0 & 0x07;
  }
  if (len == 1 || i + len > text.size()) {
    ++i;
    return b0 < 0x80 ? cp : 0xFFFD;
  }
  for (int k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(text[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += static_cast<std::size_t>(len);
  return cp;
}

// Applies the word budget to decoded text as it streams in.
class WordCommitter {
 public:
  explicit WordCommitter(std::optional<std::size_t> budget) : budget_(budget) {}

  // Returns the part of `piece` that becomes visible now.
  std::string feed(std::string_view piece, Micros stamp, std::vector<Micros>& word_times) {
    std::string out;
    std::size_t i = 0;
    while (i < piece.size() && !stopped_) {
      const std::size_t start = i;
      const char32_t cp = next_code_point(piece, i);
      const std::string_view unit = piece.substr(start, i - start);
      if (is_unicode_space(cp)) {
        if (in_word_) {
          in_word_ = false;
          word_times.push_back(last_word_stamp_);
          if (budget_ && words_ == *budget_) {
            stopped_ = true;
            break;
          }
        }
        held_ws_.append(unit);
      } else {
        if (!in_word_) {
          ++words_;
          in_word_ = true;
          out += held_ws_;
          held_ws_.clear();
        }
        out.append(unit);
        last_word_stamp_ = stamp;
      }
    }
    return out;
  }

  void close(std::vector<Micros>& word_times) {
    if (in_word_) {
      in_word_ = false;
      word_times.push_back(last_word_stamp_);
    }
  }

  bool stopped() const noexcept { return stopped_; }
  std::size_t words() const noexcept { return words_; }

 private:
  std::optional<std::size_t> budget_;
  std::size_t words_ = 0;
  bool in_word_ = false;
  bool stopped_ = false;
  std::string held_ws_;
  Micros last_word_stamp_ = 0;
};

}  // namespace

TokenId sample(std::span<const float> logits, const SamplingPolicy& policy, std::mt19937_64& rng) {
  if (logits.empty()) throw DomainError("sample: empty logits");
  if (policy.temperature <= 0.0f) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
  }
  std::vector<float> scaled(logits.begin(), logits.end());
  for (float& v : scaled) v /= policy.temperature;
  const auto probs = softmax(scaled);
  // 53-bit uniform in [0, 1)
  const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  // rounding left a sliver above the cumulative sum: last non-zero entry
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0f) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(probs.size() - 1);
}

bool is_unicode_space(char32_t cp) noexcept {
  return (cp >= 0x09 && cp <= 0x0D) || cp == 0x20 || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
         (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F ||
         cp == 0x205F || cp == 0x3000;
}

std::size_t count_words(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool space = is_unicode_space(next_code_point(text, i));
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

std::string_view to_string(StopReason r) noexcept {
  switch (r) {
    case StopReason::word_budget: return "word_budget";
    case StopReason::end_token: return "end_token";
    case StopReason::max_tokens: return "max_tokens";
  }
  return "unknown";
}

OpenerResult generate_opener(const Model& model, const TokenizerModel& tok,
                             const ChatTranscript& transcript,
                             std::optional<std::size_t> word_budget, const SamplingPolicy& policy,
                             const GenerationHooks& hooks) {
  if (word_budget && (*word_budget < 1 || *word_budget > kMaxWordBudget)) {
    throw DomainError("word budget must be in 1.." + std::to_string(kMaxWordBudget));
  }
  if (policy.temperature < 0.0f || !std::isfinite(policy.temperature)) {
    throw DomainError("temperature must be finite and >= 0");
  }
  static const SteadyClock steady;
  const Clock& clock = hooks.clock ? *hooks.clock : steady;

  OpenerResult r;
  SessionTimeline& tl = r.timeline;
  tl.request_received = hooks.request_received ? *hooks.request_received : clock.now();
  const Micros t0 = *tl.request_received;

  const auto prompt = render_chat(tok, transcript, true);
  if (prompt.size() > model.config().max_seq_len) {
    throw ContextOverflowError("rendered prompt of " + std::to_string(prompt.size()) +
                               " tokens exceeds context of " +
                               std::to_string(model.config().max_seq_len));
  }
  r.prompt_tokens = prompt.size();
  auto pre = model.prefill(prompt);
  tl.prefill_done = clock.now();

  std::mt19937_64 rng(hooks.seed);
  StreamingDecoder stream(tok);
  WordCommitter committer(word_budget);
  std::vector<float> logits = std::move(pre.logits);
  KVCache cache = std::move(pre.cache);
  r.stop_reason = StopReason::max_tokens;

  auto emit = [&](const std::string& delta, TokenId id, Micros stamp) {
    if (delta.empty()) return;
    r.text += delta;
    if (hooks.sink) hooks.sink(OpenerToken{delta, id, to_ms(stamp - t0)});
  };

  for (std::size_t step = 0; step < policy.max_tokens; ++step) {
    const TokenId next = sample(logits, policy, rng);
    // Ids past the tokenizer's vocabulary have no spelling; they end the turn
    // like a marker does.
    if (tok.is_special(next) || static_cast<std::size_t>(next) >= tok.vocab_size()) {
      if (step == 0) tl.first_token = clock.now();
      r.stop_reason = StopReason::end_token;
      break;
    }
    const std::string piece = stream.push(next);
    const Micros stamp = clock.now();
    if (step == 0) tl.first_token = stamp;
    const std::string delta = committer.feed(piece, stamp, tl.word_times);
    r.token_ids.push_back(next);
    tl.token_times.push_back(stamp);
    emit(delta, next, stamp);
    if (committer.stopped()) {
      r.stop_reason = StopReason::word_budget;
      tl.budget_reached = stamp;
      break;
    }
    if (step + 1 == policy.max_tokens || cache.current_len() >= model.config().max_seq_len) break;
    logits = model.decode_step(next, cache);
  }
  if (!committer.stopped()) {
    const std::string tail = stream.finish();
    if (!tail.empty()) {
      const Micros stamp = clock.now();
      const std::string delta = committer.feed(tail, stamp, tl.word_times);
      emit(delta, r.token_ids.empty() ? TokenId{0} : r.token_ids.back(), stamp);
      if (committer.stopped()) {
        r.stop_reason = StopReason::word_budget;
        tl.budget_reached = stamp;
      }
    }
    committer.close(tl.word_times);
  }
  if (!tl.first_token) tl.first_token = clock.now();  // max_tokens == 0

  r.word_count = committer.words();
  tl.done = clock.now();
  r.timing.prefill_ms = to_ms(*tl.prefill_done - t0);
  r.timing.first_decode_ms = to_ms(*tl.first_token - *tl.prefill_done);
  r.timing.total_ms = to_ms(*tl.done - t0);
  return r;
}

}  // namespace mulm
