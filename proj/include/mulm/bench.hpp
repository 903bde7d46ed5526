#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mulm/clock.hpp"
#include "mulm/decoder.hpp"
#include "mulm/metrics.hpp"

namespace mulm {

/// Meter readings ingested from a file; duration defaults to the window.
struct EnergyLog {
  double before_mj = 0.0;
  double after_mj = 0.0;
  double idle_power_mw = 0.0;
  std::optional<double> duration_s;
};

/// JSON {before_mj, after_mj, idle_power_mw, duration_s?}. Throws IoError or
/// FormatError.
EnergyLog read_energy_log(const std::filesystem::path& path);

struct BenchOptions {
  std::string prompt = "What is the capital of France?";
  std::size_t warmup = 3;
  double window_s = 90.0;
  std::optional<std::size_t> word_budget;  // none: full answers
  SamplingPolicy policy{0.0f, 128};
  std::optional<EnergyLog> energy;
  const Clock* clock = nullptr;  // defaults to a steady clock
};

struct BenchRun {
  std::size_t prompt_tokens = 0;
  std::size_t generated_tokens = 0;
  SessionTimeline timeline;
};

struct BenchReport {
  BenchOptions options;
  ModelConfig model;
  std::size_t warmup_runs = 0;
  std::vector<BenchRun> runs;  // only runs that finished inside the window
  double measured_s = 0.0;     // window start to last counted run end
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  /// run,token_index,t_ms rows; t_ms is relative to the run's request.
  void write_token_csv(std::ostream& out) const;
};

/// Warm-up runs, then repeated single-turn inference on the fixed prompt for
/// a fixed window. A run counts only when it ends inside the window; a
/// window shorter than one run yields zero runs and a warning.
BenchReport run_bench(const Model& model, const TokenizerModel& tok, const BenchOptions& options);

}  // namespace mulm
