#include "mulm/metrics.hpp"

#include <algorithm>

#include "mulm/error.hpp"

namespace mulm {

bool SessionTimeline::is_ordered() const {
  std::optional<Micros> last;
  auto step = [&](std::optional<Micros> v) {
    if (!v) return true;
    if (last && *v < *last) return false;
    last = v;
    return true;
  };
  if (!step(request_received) || !step(prefill_done) || !step(first_token)) return false;
  for (Micros t : token_times) {
    if (!step(t)) return false;
  }
  if (!std::is_sorted(word_times.begin(), word_times.end())) return false;
  if (!word_times.empty() && request_received && word_times.front() < *request_received) {
    return false;
  }
  return step(budget_reached) && step(handoff_dispatched) && step(cloud_first_byte) &&
         step(done);
}

std::string CorrectionRate::formatted() const {
  return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10);
}

double compute_ttft(const SessionTimeline& tl) {
  if (!tl.request_received || !tl.first_token) {
    throw IncompleteTimelineError("ttft needs request_received and first_token");
  }
  return to_ms(*tl.first_token - *tl.request_received);
}

std::optional<double> compute_time_to_n_words(const SessionTimeline& tl, std::size_t n) {
  if (n == 0) return 0.0;
  if (!tl.request_received) {
    throw IncompleteTimelineError("time-to-words needs request_received");
  }
  if (tl.word_times.size() < n) return std::nullopt;
  return to_ms(tl.word_times[n - 1] - *tl.request_received);
}

Throughputs compute_throughputs(double prefill_s, double decode_s, double total_s,
                                std::uint64_t prompt_tokens, std::uint64_t generated_tokens) {
  if (prompt_tokens == 0 || generated_tokens == 0) {
    throw DomainError("throughput: token counts must be positive");
  }
  if (!(prefill_s > 0.0) || !(decode_s > 0.0) || !(total_s > 0.0)) {
    throw DomainError("throughput: zero-length span");
  }
  Throughputs t;
  t.prompt = static_cast<double>(prompt_tokens) / prefill_s;
  t.generation = static_cast<double>(generated_tokens) / decode_s;
  t.end_to_end = static_cast<double>(prompt_tokens + generated_tokens) / total_s;
  return t;
}

Throughputs compute_throughputs(const SessionTimeline& tl, std::uint64_t prompt_tokens,
                                std::uint64_t generated_tokens) {
  if (!tl.request_received || !tl.prefill_done || !tl.done) {
    throw IncompleteTimelineError("throughput needs request_received, prefill_done and done");
  }
  const double prefill_s = to_ms(*tl.prefill_done - *tl.request_received) / 1000.0;
  const double decode_s = to_ms(*tl.done - *tl.prefill_done) / 1000.0;
  const double total_s = to_ms(*tl.done - *tl.request_received) / 1000.0;
  return compute_throughputs(prefill_s, decode_s, total_s, prompt_tokens, generated_tokens);
}

double compute_dynamic_energy(const EnergyReading& r) {
  if (r.generated_tokens == 0) throw DomainError("energy: token count must be positive");
  if (r.after_mj < r.before_mj) throw DomainError("energy: cumulative reading decreased");
  if (!(r.duration_s > 0.0)) throw DomainError("energy: window duration must be positive");
  const double dynamic = (r.after_mj - r.before_mj) - r.idle_power_mw * r.duration_s;
  return std::max(0.0, dynamic / static_cast<double>(r.generated_tokens));
}

CorrectionRate compute_correction_rate(std::span<const CorrectionFlag> flags) {
  if (flags.empty()) throw DomainError("correction rate: no results");
  std::int64_t corrected = 0;
  for (auto f : flags) {
    if (f == CorrectionFlag::unknown) {
      throw ProvenanceError("correction rate: a result has no definite correction flag");
    }
    if (f == CorrectionFlag::yes) ++corrected;
  }
  const auto n = static_cast<std::int64_t>(flags.size());
  // round-half-up of 1000 * corrected / n
  return CorrectionRate{(2000 * corrected + n) / (2 * n)};
}

}  // namespace mulm
