#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mulm/clock.hpp"

namespace mulm {

/// Per-session timestamps on one monotonic clock. Cloud fields stay empty
/// for standalone runs.
struct SessionTimeline {
  std::optional<Micros> request_received;
  std::optional<Micros> prefill_done;
  std::optional<Micros> first_token;
  std::vector<Micros> token_times;  // every committed opener token
  std::vector<Micros> word_times;   // [n-1] = commit of the nth word's final token
  std::optional<Micros> budget_reached;
  std::optional<Micros> handoff_dispatched;
  std::optional<Micros> cloud_first_byte;
  std::optional<Micros> done;

  /// True when every present stamp is non-decreasing in declaration order.
  bool is_ordered() const;
};

struct EnergyReading {
  double before_mj = 0.0;
  double after_mj = 0.0;
  double duration_s = 0.0;
  double idle_power_mw = 0.0;
  std::uint64_t generated_tokens = 0;
};

struct Throughputs {
  double end_to_end = 0.0;  // tokens/s
  double generation = 0.0;
  double prompt = 0.0;
};

enum class CorrectionFlag { no, yes, unknown };

/// One-decimal percentage, e.g. 84 of 1000 -> tenths 84 -> "8.4".
struct CorrectionRate {
  std::int64_t tenths = 0;
  double percent() const noexcept { return static_cast<double>(tenths) / 10.0; }
  std::string formatted() const;
};

/// first_token - request_received. Throws IncompleteTimelineError.
double compute_ttft(const SessionTimeline& tl);

/// Empty when fewer than n words were committed; 0 for n == 0.
std::optional<double> compute_time_to_n_words(const SessionTimeline& tl, std::size_t n);

/// prompt = P / prefill span, generation = G / (done - prefill_done),
/// end_to_end = (P + G) / (done - request_received).
Throughputs compute_throughputs(const SessionTimeline& tl, std::uint64_t prompt_tokens,
                                std::uint64_t generated_tokens);
Throughputs compute_throughputs(double prefill_s, double decode_s, double total_s,
                                std::uint64_t prompt_tokens, std::uint64_t generated_tokens);

/// ((after - before) - idle * duration) / tokens, floored at 0.
double compute_dynamic_energy(const EnergyReading& r);

/// Throws DomainError on an empty list, ProvenanceError on any unknown flag.
CorrectionRate compute_correction_rate(std::span<const CorrectionFlag> flags);

}  // namespace mulm
