// mulm: on-device opener generation, cloud handoff, serving and tooling.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "mulm/bench.hpp"
#include "mulm/dedup.hpp"
#include "mulm/error.hpp"
#include "mulm/handoff.hpp"
#include "mulm/model.hpp"
#include "mulm/service.hpp"
#include "mulm/tokenizer.hpp"
#include "mulm/weights_io.hpp"

namespace {

using namespace mulm;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::string with_commas(std::uint64_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// Options shared by the commands that load a model.
struct ModelFlags {
  std::string config;
  std::string weights;
  std::string tokenizer;
  std::optional<float> temperature;
  std::optional<std::size_t> max_tokens;

  void add(CLI::App* app) {
    app->add_option("--config", config, "JSON config file");
    app->add_option("--weights", weights, "weights container (.mulm)");
    app->add_option("--tokenizer", tokenizer, "tokenizer JSON");
    app->add_option("--temperature", temperature, "sampling temperature (0 = greedy)");
    app->add_option("--max-tokens", max_tokens, "decode step limit");
  }

  ServiceConfig resolve() const {
    ServiceConfig cfg = config.empty() ? ServiceConfig{} : load_service_config(config);
    if (!weights.empty()) cfg.weights_path = weights;
    if (!tokenizer.empty()) cfg.tokenizer_path = tokenizer;
    if (temperature) cfg.policy.temperature = *temperature;
    if (max_tokens) cfg.policy.max_tokens = *max_tokens;
    return cfg;
  }
};

struct CloudFlags {
  std::optional<std::string> url;
  std::optional<std::string> model;
  std::optional<int> timeout_ms;

  void add(CLI::App* app) {
    app->add_option("--cloud-url", url, "continuator base URL");
    app->add_option("--cloud-model", model, "continuator model name");
    app->add_option("--cloud-timeout-ms", timeout_ms, "continuator timeout");
  }
  void apply(CloudEndpointConfig& c) const {
    if (url) c.base_url = *url;
    if (model) c.model = *model;
    if (timeout_ms) c.timeout_ms = *timeout_ms;
  }
};

int cmd_param_count(std::optional<std::size_t> d, std::optional<std::size_t> layers) {
  std::vector<std::pair<std::size_t, std::size_t>> rows = {{256, 8}, {256, 16}, {384, 8}, {512, 8}, {384, 16}};
  if (layers && !d) throw CLI::ValidationError("--layers", "needs --d");
  if (d) rows.emplace_back(*d, layers.value_or(8));
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::uint64_t>> out;
  for (const auto& [dd, ll] : rows) out.push_back({{dd, ll}, param_count(ModelConfig::variant(dd, ll))});
  std::printf("%-8s %-7s %-14s %s\n", "hidden", "layers", "parameters", "approx");
  for (const auto& [geom, n] : out) {
    std::printf("%-8zu %-7zu %-14s %s\n", geom.first, geom.second, with_commas(n).c_str(),
                format_param_millions(n).c_str());
  }
  return kExitOk;
}

int cmd_chat(const ServiceConfig& base, const std::optional<std::size_t>& budget,
             const std::optional<std::string>& mode, bool no_cloud, bool show_seam) {
  ServiceConfig cfg = base;
  if (budget) cfg.word_budget = *budget;
  if (mode) cfg.mode = parse_recovery_mode(*mode);
  cfg.no_cloud = cfg.no_cloud || no_cloud;
  cfg.validate(true);
  auto loaded = load_weights(cfg.weights_path);
  const Model model(loaded.config, std::move(loaded.weights));
  const TokenizerModel tok = TokenizerModel::load(cfg.tokenizer_path);

  std::string line;
  while (true) {
    std::cerr << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (cfg.no_cloud) {
      GenerationHooks hooks;
      hooks.sink = [](const OpenerToken& t) { std::cout << t.text_delta << std::flush; };
      generate_opener(model, tok, ChatTranscript::single(line), std::nullopt, cfg.policy, hooks);
      std::cout << std::endl;
      continue;
    }
    ChatCompletionsClient cloud(cfg.cloud);
    LocalContinuation local(model, tok, cfg.policy);
    FallbackContinuation source(cloud, local, [](const Error& e) {
      std::cerr << "\n[cloud unavailable: " << e.what() << "; continuing on-device]\n" << std::flush;
    });
    CollaborativeOptions opts;
    opts.policy = cfg.policy;
    run_collaborative(line, cfg.word_budget, cfg.mode, model, tok, source,
                      [&](const SessionEvent& ev) {
                        switch (ev.type) {
                          case EventType::opener_token:
                          case EventType::continuation_token:
                            std::cout << ev.text_delta << std::flush;
                            break;
                          case EventType::handoff:
                            if (show_seam) std::cout << "│" << std::flush;
                            break;
                          case EventType::correction:
                            break;
                          case EventType::done:
                            std::cout << std::endl;
                            break;
                          case EventType::error:
                            std::cout << std::endl;
                            std::cerr << "[cloud stream failed: " << ev.detail.value("message", "")
                                      << "; the opener above stands]\n";
                            break;
                        }
                      },
                      opts);
  }
  return kExitOk;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(ServiceConfig cfg) {
  auto service = Service::from_config(std::move(cfg));
  HttpServer server(*service);
  const int port = server.bind(service->config().host, service->config().port);
  std::cerr << "listening on http://" << service->config().host << ':' << port << '\n';
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.serve();
  g_server = nullptr;
  return kExitOk;
}

int cmd_bench(const ServiceConfig& cfg, BenchOptions opts, const std::string& energy_log,
              const std::string& csv, const std::string& out) {
  cfg.validate(true);
  auto loaded = load_weights(cfg.weights_path);
  const Model model(loaded.config, std::move(loaded.weights));
  const TokenizerModel tok = TokenizerModel::load(cfg.tokenizer_path);
  opts.policy = cfg.policy;
  if (!energy_log.empty()) opts.energy = read_energy_log(energy_log);
  const BenchReport report = run_bench(model, tok, opts);
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  const std::string text = report.to_json().dump(2);
  if (out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    f << text << '\n';
  }
  if (!csv.empty()) {
    std::ofstream f(csv);
    if (!f) throw IoError("cannot write " + csv);
    report.write_token_csv(f);
  }
  return kExitOk;
}

std::vector<Document> read_document_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return read_documents(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

int cmd_dedup(const std::string& eval_path, const std::vector<std::string>& train_paths,
              const DedupConfig& cfg, const std::string& out) {
  cfg.validate();
  const auto eval = read_document_file(eval_path);
  std::vector<TrainView> views;
  for (const auto& p : train_paths) {
    for (const auto& doc : read_document_file(p)) {
      auto v = extract_views(doc, cfg.view_window, cfg.view_stride);
      views.insert(views.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
    }
  }
  const auto flags = flag_contaminated(eval, views, cfg);
  const std::string text = to_json(flags).dump(2);
  if (out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    f << text << '\n';
  }
  std::cerr << flagged_ids(flags).size() << " of " << eval.size() << " eval prompts flagged\n";
  return kExitOk;
}

int cmd_tokenizer_train(const std::vector<std::string>& inputs, std::size_t vocab_size,
                        const std::string& out) {
  std::vector<std::string> corpus;
  for (const auto& p : inputs) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p);
    std::ostringstream ss;
    ss << in.rdbuf();
    corpus.push_back(ss.str());
  }
  const auto tok = train_bpe(corpus, vocab_size);
  tok.save(out);
  std::cerr << "wrote " << out << " (" << tok.vocab_size() << " tokens, " << tok.merges().size()
            << " merges)\n";
  return kExitOk;
}

int cmd_init_model(std::size_t d, std::size_t layers, std::optional<std::size_t> vocab,
                   const std::string& tokenizer, std::uint64_t seed, float scale,
                   const std::string& out) {
  ModelConfig cfg = ModelConfig::variant(d, layers);
  if (vocab) {
    cfg.vocab_size = *vocab;
  } else if (!tokenizer.empty()) {
    cfg.vocab_size = TokenizerModel::load(tokenizer).vocab_size();
  }
  cfg.validate();
  save_weights(out, cfg, Weights::random(cfg, seed, scale));
  std::cerr << "wrote " << out << " (" << with_commas(param_count(cfg)) << " parameters)\n";
  return kExitOk;
}

// Minimal chat-completions endpoint that streams a fixed reply word by word.
int cmd_mock_cloud(const std::string& host, int port, const std::string& reply, int delay_ms) {
  httplib::Server svr;
  auto handler = [&](const httplib::Request&, httplib::Response& res) {
    res.set_chunked_content_provider("text/event-stream", [&](std::size_t, httplib::DataSink& sink) {
      std::size_t i = 0;
      while (i < reply.size()) {
        std::size_t j = reply.find(' ', i + 1);
        if (j == std::string::npos) j = reply.size();
        const json chunk{{"choices", {{{"delta", {{"content", reply.substr(i, j - i)}}}}}}};
        const std::string frame = "data: " + chunk.dump() + "\n\n";
        if (!sink.write(frame.data(), frame.size())) return false;
        if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        i = j;
      }
      const std::string end = "data: [DONE]\n\n";
      sink.write(end.data(), end.size());
      sink.done();
      return true;
    });
  };
  svr.Post("/v1/chat/completions", handler);
  const int bound = port == 0 ? svr.bind_to_any_port(host) : (svr.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw TransportError("cannot bind " + host + ":" + std::to_string(port));
  std::cerr << "mock continuator on http://" << host << ':' << bound << '\n';
  svr.listen_after_bind();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mulm: micro language model opener + cloud continuation"};
  app.require_subcommand(1);

  // param-count
  auto* pc = app.add_subcommand("param-count", "print parameter counts of model geometries");
  std::optional<std::size_t> pc_d;
  std::optional<std::size_t> pc_layers;
  pc->add_option("--d", pc_d, "hidden size of an extra geometry");
  pc->add_option("--layers", pc_layers, "layers of the extra geometry (default 8)");

  // chat
  auto* chat = app.add_subcommand("chat", "interactive opener + continuation");
  ModelFlags chat_model;
  CloudFlags chat_cloud;
  chat_model.add(chat);
  chat_cloud.add(chat);
  std::optional<std::size_t> chat_budget;
  std::optional<std::string> chat_mode;
  bool chat_no_cloud = false;
  bool chat_seam = false;
  chat->add_option("--budget", chat_budget, "opener word budget (1-32)");
  chat->add_option("--mode", chat_mode, "recovery mode: explicit, natural or humor");
  chat->add_flag("--no-cloud", chat_no_cloud, "answer with the local model only");
  chat->add_flag("--seam", chat_seam, "mark the handoff point in the output");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP service with SSE streaming");
  ModelFlags serve_model;
  CloudFlags serve_cloud;
  serve_model.add(serve);
  serve_cloud.add(serve);
  std::optional<std::string> serve_host;
  std::optional<int> serve_port;
  std::optional<std::size_t> serve_budget;
  std::optional<std::string> serve_mode;
  std::optional<std::string> serve_log;
  bool serve_no_cloud = false;
  serve->add_option("--host", serve_host, "listen address");
  serve->add_option("--port", serve_port, "listen port (0 = any free port)");
  serve->add_option("--budget", serve_budget, "default word budget");
  serve->add_option("--mode", serve_mode, "default recovery mode");
  serve->add_option("--log-level", serve_log, "debug, info, warn or error");
  serve->add_flag("--no-cloud", serve_no_cloud, "continue with the local model");

  // bench
  auto* bench = app.add_subcommand("bench", "fixed-window latency/throughput benchmark");
  ModelFlags bench_model;
  bench_model.add(bench);
  BenchOptions bench_opts;
  std::string bench_energy;
  std::string bench_csv;
  std::string bench_out;
  bench->add_option("--window", bench_opts.window_s, "measurement window in seconds")->capture_default_str();
  bench->add_option("--warmup", bench_opts.warmup, "warm-up runs")->capture_default_str();
  bench->add_option("--prompt", bench_opts.prompt, "fixed prompt")->capture_default_str();
  bench->add_option("--budget", bench_opts.word_budget, "stop each run at this many words");
  bench->add_option("--energy-log", bench_energy, "JSON meter readings {before_mj, after_mj, idle_power_mw}");
  bench->add_option("--csv", bench_csv, "write per-token timestamps here");
  bench->add_option("--out", bench_out, "write the JSON report here instead of stdout");

  // tokenizer-train
  auto* tt = app.add_subcommand("tokenizer-train", "train a byte-level BPE tokenizer");
  std::vector<std::string> tt_inputs;
  std::size_t tt_vocab = ModelConfig::kVocabSize;
  std::string tt_out;
  tt->add_option("--input", tt_inputs, "text files")->required();
  tt->add_option("--vocab-size", tt_vocab, "target vocabulary size")->capture_default_str();
  tt->add_option("--out", tt_out, "output tokenizer JSON")->required();

  // dedup
  auto* dd = app.add_subcommand("dedup", "flag eval prompts contained in training data");
  std::string dd_eval;
  std::vector<std::string> dd_train;
  std::string dd_out;
  DedupConfig dd_cfg;
  dd->add_option("--eval", dd_eval, "eval prompts, one JSON {id, text} per line")->required();
  dd->add_option("--train", dd_train, "training documents, same format")->required();
  dd->add_option("--k", dd_cfg.k, "shingle width in tokens")->capture_default_str();
  dd->add_option("--candidate-k", dd_cfg.candidate_k, "shingle width used for LSH retrieval")->capture_default_str();
  dd->add_option("--hashes", dd_cfg.hashes, "MinHash functions")->capture_default_str();
  dd->add_option("--bands", dd_cfg.bands, "LSH bands")->capture_default_str();
  dd->add_option("--threshold", dd_cfg.threshold, "containment threshold")->capture_default_str();
  dd->add_option("--seed", dd_cfg.seed, "hash seed");
  dd->add_option("--window", dd_cfg.view_window, "max tokens per train view")->capture_default_str();
  dd->add_option("--stride", dd_cfg.view_stride, "view window stride")->capture_default_str();
  dd->add_option("--threads", dd_cfg.threads, "worker threads (0 = all cores)");
  dd->add_option("--out", dd_out, "output JSON (default stdout)");

  // init-model
  auto* im = app.add_subcommand("init-model", "write randomly initialised weights");
  std::size_t im_d = 256;
  std::size_t im_layers = 8;
  std::optional<std::size_t> im_vocab;
  std::string im_tok;
  std::uint64_t im_seed = 1;
  float im_scale = 0.1f;
  std::string im_out;
  im->add_option("--d", im_d, "hidden size")->capture_default_str();
  im->add_option("--layers", im_layers, "layers")->capture_default_str();
  im->add_option("--vocab", im_vocab, "vocabulary size (default: tokenizer's, else 12288)");
  im->add_option("--tokenizer", im_tok, "take the vocabulary size from this tokenizer");
  im->add_option("--seed", im_seed, "RNG seed")->capture_default_str();
  im->add_option("--scale", im_scale, "projection init scale")->capture_default_str();
  im->add_option("--out", im_out, "output weights file")->required();

  // mock-cloud
  auto* mc = app.add_subcommand("mock-cloud", "stream a canned continuation for demos");
  std::string mc_host = "127.0.0.1";
  int mc_port = 8000;
  std::string mc_reply = " is a placeholder continuation from the mock endpoint.";
  int mc_delay = 50;
  mc->add_option("--host", mc_host)->capture_default_str();
  mc->add_option("--port", mc_port)->capture_default_str();
  mc->add_option("--reply", mc_reply, "text to stream");
  mc->add_option("--delay-ms", mc_delay, "pause between deltas")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*pc) return cmd_param_count(pc_d, pc_layers);
    if (*chat) {
      ServiceConfig cfg = chat_model.resolve();
      chat_cloud.apply(cfg.cloud);
      return cmd_chat(cfg, chat_budget, chat_mode, chat_no_cloud, chat_seam);
    }
    if (*serve) {
      ServiceConfig cfg = serve_model.resolve();
      serve_cloud.apply(cfg.cloud);
      if (serve_host) cfg.host = *serve_host;
      if (serve_port) cfg.port = *serve_port;
      if (serve_budget) cfg.word_budget = *serve_budget;
      if (serve_mode) cfg.mode = parse_recovery_mode(*serve_mode);
      if (serve_log) cfg.log_level = *serve_log;
      cfg.no_cloud = cfg.no_cloud || serve_no_cloud;
      return cmd_serve(std::move(cfg));
    }
    if (*bench) return cmd_bench(bench_model.resolve(), bench_opts, bench_energy, bench_csv, bench_out);
    if (*tt) return cmd_tokenizer_train(tt_inputs, tt_vocab, tt_out);
    if (*dd) return cmd_dedup(dd_eval, dd_train, dd_cfg, dd_out);
    if (*im) return cmd_init_model(im_d, im_layers, im_vocab, im_tok, im_seed, im_scale, im_out);
    if (*mc) return cmd_mock_cloud(mc_host, mc_port, mc_reply, mc_delay);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
