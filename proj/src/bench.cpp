#include "mulm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mulm/error.hpp"

namespace mulm {

namespace {

using nlohmann::json;

json summary(const std::vector<double>& xs) {
  if (xs.empty()) return nullptr;
  double sum = 0.0;
  for (const double x : xs) sum += x;
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
  return json{{"mean", sum / static_cast<double>(n)},
              {"median", median},
              {"min", sorted.front()},
              {"max", sorted.back()}};
}

}  // namespace

EnergyLog read_energy_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open energy log " + path.string());
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw FormatError("energy log is not a JSON object");
  EnergyLog log;
  try {
    log.before_mj = j.at("before_mj").get<double>();
    log.after_mj = j.at("after_mj").get<double>();
    log.idle_power_mw = j.value("idle_power_mw", 0.0);
    if (j.contains("duration_s")) log.duration_s = j["duration_s"].get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("energy log: ") + e.what());
  }
  if (log.after_mj < log.before_mj) throw FormatError("energy log: after_mj < before_mj");
  if (log.duration_s && *log.duration_s <= 0.0) throw FormatError("energy log: duration_s <= 0");
  return log;
}

BenchReport run_bench(const Model& model, const TokenizerModel& tok, const BenchOptions& options) {
  if (!(options.window_s >= 0.0)) throw ConfigError("bench window must be >= 0 s");
  if (options.word_budget && (*options.word_budget == 0 || *options.word_budget > kMaxWordBudget)) {
    throw ConfigError("bench word budget must be in 1..32");
  }
  static const SteadyClock steady;
  const Clock& clock = options.clock ? *options.clock : steady;
  const auto transcript = ChatTranscript::single(options.prompt);

  BenchReport report;
  report.options = options;
  report.model = model.config();

  auto once = [&] {
    GenerationHooks hooks;
    hooks.clock = &clock;
    OpenerResult r = generate_opener(model, tok, transcript, options.word_budget, options.policy, hooks);
    return BenchRun{r.prompt_tokens, r.token_ids.size(), std::move(r.timeline)};
  };

  for (std::size_t i = 0; i < options.warmup; ++i) {
    once();
    ++report.warmup_runs;
  }

  const Micros start = clock.now();
  const auto window = static_cast<Micros>(std::llround(options.window_s * 1e6));
  const Micros end = start + window;
  Micros last_end = start;
  while (clock.now() < end) {
    BenchRun run = once();
    if (!run.timeline.done || *run.timeline.done > end) break;
    last_end = *run.timeline.done;
    report.runs.push_back(std::move(run));
  }
  report.measured_s = static_cast<double>(last_end - start) / 1e6;
  if (report.runs.empty()) {
    report.warnings.push_back("window of " + std::to_string(options.window_s) +
                              " s is shorter than one run; no runs were measured");
  }
  if (options.energy && report.runs.empty()) {
    report.warnings.push_back("energy log ignored: no generated tokens in the window");
  }
  return report;
}

json BenchReport::to_json() const {
  std::vector<double> ttft;
  std::vector<double> t4;
  double prefill_s = 0.0;
  double decode_s = 0.0;
  double total_s = 0.0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t generated = 0;
  for (const auto& r : runs) {
    ttft.push_back(compute_ttft(r.timeline));
    if (const auto t = compute_time_to_n_words(r.timeline, 4)) t4.push_back(*t);
    prefill_s += to_ms(*r.timeline.prefill_done - *r.timeline.request_received) / 1e3;
    decode_s += to_ms(*r.timeline.done - *r.timeline.prefill_done) / 1e3;
    total_s += to_ms(*r.timeline.done - *r.timeline.request_received) / 1e3;
    prompt_tokens += r.prompt_tokens;
    generated += r.generated_tokens;
  }

  json config{{"prompt", options.prompt},
              {"warmup", options.warmup},
              {"window_s", options.window_s},
              {"word_budget", options.word_budget ? json(*options.word_budget) : json(nullptr)},
              {"temperature", options.policy.temperature},
              {"max_tokens", options.policy.max_tokens},
              {"model",
               {{"hidden_size", model.hidden_size},
                {"n_layers", model.n_layers},
                {"vocab_size", model.vocab_size},
                {"parameters", param_count(model)}}}};

  json out{{"config", std::move(config)},
           {"warmup_runs", warmup_runs},
           {"runs", runs.size()},
           {"measured_s", measured_s},
           {"prompt_tokens", prompt_tokens},
           {"generated_tokens", generated},
           {"tokens_per_run", runs.empty() ? json(nullptr) : json(runs.front().generated_tokens)},
           {"ttft_ms", ttft.empty() ? json(nullptr) : summary(ttft)["mean"]},
           {"ttft_ms_stats", summary(ttft)},
           {"time_to_4_words_ms", t4.empty() ? json(nullptr) : summary(t4)["mean"]},
           {"time_to_4_words_ms_stats", summary(t4)},
           {"throughputs", nullptr},
           {"warnings", warnings}};
  if (!runs.empty() && prefill_s > 0.0 && decode_s > 0.0 && total_s > 0.0 && generated > 0) {
    const auto tp = compute_throughputs(prefill_s, decode_s, total_s, prompt_tokens, generated);
    out["throughputs"] = {{"prompt", tp.prompt},
                          {"generation", tp.generation},
                          {"end_to_end", tp.end_to_end}};
  }
  if (options.energy && generated > 0) {
    EnergyReading r;
    r.before_mj = options.energy->before_mj;
    r.after_mj = options.energy->after_mj;
    r.idle_power_mw = options.energy->idle_power_mw;
    r.duration_s = options.energy->duration_s.value_or(options.window_s);
    r.generated_tokens = generated;
    out["energy_mj_per_token"] = compute_dynamic_energy(r);
  }
  return out;
}

void BenchReport::write_token_csv(std::ostream& out) const {
  out << "run,token_index,t_ms\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& tl = runs[i].timeline;
    for (std::size_t k = 0; k < tl.token_times.size(); ++k) {
      out << i << ',' << k << ',' << to_ms(tl.token_times[k] - *tl.request_received) << '\n';
    }
  }
}

}  // namespace mulm
