#include <doctest.h>

#include <cstdlib>
#include <random>
#include <string>
#include <vector>

#include "mock_cloud.hpp"
#include "mulm/handoff.hpp"
#include "mulm/prompts.hpp"
#include "scripted.hpp"

using namespace mulm;

namespace {

const std::string kVincent =
    "Vincent van Gogh was a significant figure in the development of modern art.";

struct Recorder {
  std::vector<SessionEvent> events;
  EventSink sink() {
    return [this](const SessionEvent& e) { events.push_back(e); };
  }
  std::vector<EventType> types() const {
    std::vector<EventType> t;
    for (const auto& e : events) t.push_back(e.type);
    return t;
  }
  std::string visible() const {
    std::string s;
    for (const auto& e : events) s += e.text_delta;
    return s;
  }
  std::size_t count(EventType t) const {
    std::size_t n = 0;
    for (const auto& e : events) n += e.type == t;
    return n;
  }
};

ScriptedContinuation scripted_source(std::vector<std::string> deltas,
                                     std::optional<bool> adjudicated = std::nullopt) {
  ScriptedContinuation::Script s;
  s.deltas = std::move(deltas);
  s.adjudicated_correction = adjudicated;
  return ScriptedContinuation(std::move(s));
}

CloudEndpointConfig endpoint_for(const mock::Cloud& cloud, int timeout_ms = 2000) {
  CloudEndpointConfig c;
  c.base_url = cloud.url();
  c.timeout_ms = timeout_ms;
  c.auth_token_env = "MULM_TEST_CLOUD_TOKEN";
  return c;
}

ContinuationRequest simple_request() {
  return ContinuationRequest{"q", "opener", build_continuation_prompt("q", "opener", RecoveryMode::explicit_correction)};
}

}  // namespace

TEST_CASE("recovery mode names") {
  CHECK(parse_recovery_mode("explicit") == RecoveryMode::explicit_correction);
  CHECK(parse_recovery_mode("natural_recovery") == RecoveryMode::natural_recovery);
  CHECK(parse_recovery_mode("humor") == RecoveryMode::humor_aware);
  CHECK(to_string(RecoveryMode::natural_recovery) == "natural");
  CHECK_THROWS_AS(parse_recovery_mode("sarcastic"), ConfigError);
}

TEST_CASE("continuation prompt is the verbatim instruction plus the mode block") {
  const auto explicit_msgs = build_continuation_prompt("Who was Van Gogh?", "Vincent van Gogh was",
                                                       RecoveryMode::explicit_correction);
  REQUIRE(explicit_msgs.size() == 2);
  CHECK(explicit_msgs[0].role == "system");
  CHECK(explicit_msgs[0].content == std::string(prompts::continuation()) + std::string(prompts::mode_explicit()));
  CHECK(explicit_msgs[0].content.find("start a new line with \"Correction: \"") != std::string::npos);
  CHECK(explicit_msgs[1].role == "user");
  CHECK(explicit_msgs[1].content ==
        "[User question]\nWho was Van Gogh?\n\n[Already-spoken opener]\nVincent van Gogh was");

  const auto natural = build_continuation_prompt("q", "o", RecoveryMode::natural_recovery);
  CHECK(natural[0].content.find("ONE short bridging sentence (<= 12 words)") != std::string::npos);
  CHECK(natural[0].content.rfind(std::string(prompts::continuation()), 0) == 0);
  const auto humor = build_continuation_prompt("q", "o", RecoveryMode::humor_aware);
  CHECK(humor[0].content.find("deliberate creative detour") != std::string::npos);
  CHECK(prompts::continuation().find("Write ONLY the continuation (no new opener, no meta).") !=
        std::string_view::npos);

  const auto empty_opener = build_continuation_prompt("q", "", RecoveryMode::explicit_correction);
  CHECK(empty_opener[1].content == "[User question]\nq\n\n[Already-spoken opener]\n");
  CHECK_THROWS_AS(build_continuation_prompt("", "o", RecoveryMode::explicit_correction), DomainError);
}

TEST_CASE("stitch rule on simple inputs") {
  CHECK(stitch("Hello", ", world") == "Hello, world");
  CHECK(stitch("", "Full answer.") == "Full answer.");
  CHECK(stitch("Opener", "") == "Opener");
  CHECK(stitch("a", "b") == "a b");
  CHECK(stitch("a ", "b") == "a b");
  CHECK(stitch("a", "\nb") == "a\nb");
  CHECK(stitch("a", "… b") == "a… b");
  CHECK(stitch("a", "’s b") == "a’s b");
  CHECK(stitch("a", "(b)") == "a (b)");
}

TEST_CASE("stitch on case-study pairs") {
  CHECK(stitch("Vincent van Gogh was a significant figure in", "the development of modern art") ==
        "Vincent van Gogh was a significant figure in the development of modern art");
  CHECK(stitch("[Scene: A bustling city street, with people walking", "past jazz clubs glowing with warm light") ==
        "[Scene: A bustling city street, with people walking past jazz clubs glowing with warm light");
  CHECK(stitch("Nordstrom, a company that specializes in the design",
               "and retail of high-quality apparel, footwear, and accessories") ==
        "Nordstrom, a company that specializes in the design and retail of high-quality apparel, footwear, "
        "and accessories");
  CHECK(stitch("TFLite Micro is a company that specializes in", "\n\nCorrection: TFLite Micro is not a company.") ==
        "TFLite Micro is a company that specializes in\n\nCorrection: TFLite Micro is not a company.");
  CHECK(stitch("The size of a space needle is determined", "Wait, that’s not about age") ==
        "The size of a space needle is determined Wait, that’s not about age");
  CHECK(stitch("Mayana is a popular mobile phone game.", "Correction: In the San Francisco area") ==
        "Mayana is a popular mobile phone game. Correction: In the San Francisco area");
}

TEST_CASE("stitch never drops characters or doubles a junction space") {
  std::mt19937_64 rng(2);
  const std::vector<std::string> parts{"", " ", "a", "b c", ",", ".", "\n", "…", "é", "x ", " y", ")"};
  for (int i = 0; i < 2000; ++i) {
    std::string a, b;
    for (int k = 0; k < 3; ++k) {
      a += parts[std::uniform_int_distribution<std::size_t>(0, parts.size() - 1)(rng)];
      b += parts[std::uniform_int_distribution<std::size_t>(0, parts.size() - 1)(rng)];
    }
    const auto s = stitch(a, b);
    CHECK((s.size() == a.size() + b.size() || s.size() == a.size() + b.size() + 1));
    CHECK(s.rfind(a, 0) == 0);
    CHECK(s.compare(s.size() - b.size(), b.size(), b) == 0);
    if (s.size() == a.size() + b.size() + 1) {
      CHECK(s[a.size()] == ' ');
      CHECK_FALSE(a.back() == ' ');
      CHECK_FALSE(b.front() == ' ');
    }
  }
}

TEST_CASE("correction detection") {
  const auto ex = RecoveryMode::explicit_correction;
  CHECK(detect_correction("\n\nCorrection: TFLite Micro is not a company, but a framework.", ex) ==
        CorrectionFlag::yes);
  CHECK(detect_correction("the development of modern art", ex) == CorrectionFlag::no);
  CHECK(detect_correction("  Correction: indented", ex) == CorrectionFlag::yes);
  CHECK(detect_correction("line one\r\nCorrection: two", ex) == CorrectionFlag::yes);
  CHECK(detect_correction("no Correction: mid-line", ex) == CorrectionFlag::no);
  CHECK(detect_correction("correction: lowercase", ex) == CorrectionFlag::no);
  CHECK(detect_correction("", ex) == CorrectionFlag::no);
  // Pure in the text: adjudication is ignored in explicit mode.
  CHECK(detect_correction("plain", ex, true) == CorrectionFlag::no);
  CHECK(detect_correction("Wait, that’s not right", RecoveryMode::natural_recovery) == CorrectionFlag::unknown);
  CHECK(detect_correction("x", RecoveryMode::humor_aware, true) == CorrectionFlag::yes);
  CHECK(detect_correction("Correction: x", RecoveryMode::natural_recovery, false) == CorrectionFlag::no);
}

TEST_CASE("restart overlap and correction rate over results") {
  CHECK(restart_overlap("Vincent van Gogh was", " Vincent van Gogh was a prolific painter") == 20);
  CHECK(restart_overlap("Vincent van Gogh was", "a significant figure") == 0);
  CHECK(restart_overlap("abc", "   ") == 0);

  std::vector<ContinuationResult> results(1000);
  for (std::size_t i = 0; i < results.size(); ++i)
    results[i].corrected = i < 84 ? CorrectionFlag::yes : CorrectionFlag::no;
  CHECK(compute_correction_rate(results).formatted() == "8.4");
  results[5].corrected = CorrectionFlag::unknown;
  CHECK_THROWS_AS(compute_correction_rate(results), ProvenanceError);
}

TEST_CASE("event grammar") {
  using E = EventType;
  CHECK(matches_event_grammar(std::vector<E>{E::opener_token, E::handoff, E::done}));
  CHECK(matches_event_grammar(std::vector<E>{E::opener_token, E::opener_token, E::handoff, E::continuation_token,
                                             E::correction, E::continuation_token, E::done}));
  CHECK(matches_event_grammar(std::vector<E>{E::opener_token, E::handoff, E::continuation_token, E::error}));
  CHECK_FALSE(matches_event_grammar(std::vector<E>{}));
  CHECK_FALSE(matches_event_grammar(std::vector<E>{E::handoff, E::done}));
  CHECK_FALSE(matches_event_grammar(std::vector<E>{E::opener_token, E::done}));
  CHECK_FALSE(matches_event_grammar(std::vector<E>{E::opener_token, E::handoff}));
  CHECK_FALSE(matches_event_grammar(std::vector<E>{E::opener_token, E::handoff, E::done, E::done}));
  CHECK_FALSE(matches_event_grammar(
      std::vector<E>{E::opener_token, E::handoff, E::continuation_token, E::opener_token, E::done}));
}

TEST_CASE("collaborative session streams opener then continuation") {
  const auto cm = scripted::make_chain_model(kVincent);
  auto source = scripted_source({"the development", " of modern art."});
  Recorder rec;
  const auto r = run_collaborative("Who was Vincent van Gogh?", 8, RecoveryMode::explicit_correction, *cm.model,
                                   cm.tok, source, rec.sink());
  CHECK(matches_event_grammar(rec.types()));
  CHECK(r.opener.text == "Vincent van Gogh was a significant figure in");
  CHECK(rec.visible() == kVincent);
  CHECK(rec.visible().rfind(r.opener.text, 0) == 0);
  CHECK(r.continuation.stitched_text == kVincent);
  CHECK(r.continuation.corrected == CorrectionFlag::no);
  CHECK(r.continuation.tokens_received == 2);
  CHECK_FALSE(r.continuation.duplication_warning);
  CHECK_FALSE(r.degraded);

  const auto& handoff = rec.events[rec.count(EventType::opener_token)];
  REQUIRE(handoff.type == EventType::handoff);
  CHECK(handoff.detail["opener"] == r.opener.text);
  CHECK(handoff.detail["word_count"] == 8);
  CHECK(handoff.detail["mode"] == "explicit");
  const auto& done = rec.events.back();
  CHECK(done.type == EventType::done);
  CHECK(done.detail["stitched"] == kVincent);
  CHECK(done.detail["metrics"]["corrected"] == "no");
  CHECK(done.detail["metrics"]["word_count"] == 8);
}

TEST_CASE("explicit correction is flagged once as the marker arrives") {
  const auto cm = scripted::make_chain_model("TFLite Micro is a company that specializes in chips");
  auto source = scripted_source({"\n\nCorrec", "tion: TFLite Micro is not a company.", "\nCorrection: again"});
  Recorder rec;
  const auto r = run_collaborative("What is TFLite Micro?", 8, RecoveryMode::explicit_correction, *cm.model, cm.tok,
                                   source, rec.sink());
  CHECK(r.opener.text == "TFLite Micro is a company that specializes in");
  CHECK(matches_event_grammar(rec.types()));
  CHECK(rec.count(EventType::correction) == 1);
  // The correction event follows the delta that completed the marker.
  for (std::size_t i = 0; i < rec.events.size(); ++i) {
    if (rec.events[i].type != EventType::correction) continue;
    REQUIRE(i >= 2);
    CHECK(rec.events[i - 1].text_delta == "tion: TFLite Micro is not a company.");
  }
  CHECK(r.continuation.corrected == CorrectionFlag::yes);
  CHECK(r.continuation.stitched_text ==
        "TFLite Micro is a company that specializes in\n\nCorrection: TFLite Micro is not a company.\nCorrection: again");
}

TEST_CASE("other modes use the adjudicated flag") {
  const std::string opener = "The size of a space needle is determined";
  const auto cm = scripted::make_chain_model(opener);
  const std::string natural =
      "Wait, that’s not about age---my circuits must’ve shorted. Let’s reboot that thought.\n\nThe Space Needle in "
      "Seattle opened to the public on April 21, 1962, for the World’s Fair, making it 62 years old as of 2024.";
  {
    auto source = scripted_source({natural}, true);
    Recorder rec;
    const auto r = run_collaborative("How old is the Space Needle?", 8, RecoveryMode::natural_recovery, *cm.model,
                                     cm.tok, source, rec.sink());
    CHECK(r.opener.text == opener);
    CHECK(r.opener.stop_reason == StopReason::end_token);
    CHECK(r.continuation.stitched_text == opener + " " + natural);
    CHECK(r.continuation.corrected == CorrectionFlag::yes);
    CHECK(rec.count(EventType::correction) == 1);
    CHECK(rec.types()[rec.events.size() - 2] == EventType::correction);
    CHECK(rec.events.back().detail["metrics"]["corrected"] == "yes");
  }
  {
    const std::string humor =
        " by its structural design---oh wait, we're talking age, not size! Classic mix-up.";
    auto source = scripted_source({humor});
    Recorder rec;
    const auto r = run_collaborative("How old is the Space Needle?", 8, RecoveryMode::humor_aware, *cm.model, cm.tok,
                                     source, rec.sink());
    CHECK(r.continuation.stitched_text == opener + humor);
    CHECK(r.continuation.corrected == CorrectionFlag::unknown);
    CHECK(rec.count(EventType::correction) == 0);
    CHECK(rec.events.back().detail["metrics"]["corrected"] == "unknown");
  }
  {
    // Four-word budget on the same query.
    auto source = scripted_source({"space needle is determined by its design."});
    Recorder rec;
    const auto r = run_collaborative("How old is the Space Needle?", 4, RecoveryMode::humor_aware, *cm.model, cm.tok,
                                     source, rec.sink());
    CHECK(r.opener.text == "The size of a");
    CHECK(r.continuation.stitched_text == "The size of a space needle is determined by its design.");
  }
}

TEST_CASE("restarted continuation raises the duplication warning") {
  const auto cm = scripted::make_chain_model(kVincent);
  auto source = scripted_source({"Vincent van Gogh was a prolific and emotionally charged painter."});
  Recorder rec;
  const auto r = run_collaborative("Who was Vincent van Gogh?", 4, RecoveryMode::explicit_correction, *cm.model,
                                   cm.tok, source, rec.sink());
  CHECK(r.opener.text == "Vincent van Gogh was");
  CHECK(r.continuation.duplication_warning);
  CHECK(r.continuation.restart_overlap == r.opener.text.size());
  CHECK(rec.events.back().detail["metrics"]["duplication_warning"] == true);
}

TEST_CASE("continuator failure degrades without retracting the opener") {
  const auto cm = scripted::make_chain_model(kVincent);
  ScriptedContinuation::Script s;
  s.deltas = {"the development", " of modern art."};
  s.fail_after = 1;
  ScriptedContinuation source(s);
  Recorder rec;
  const auto r = run_collaborative("q", 8, RecoveryMode::explicit_correction, *cm.model, cm.tok, source, rec.sink());
  CHECK(r.degraded);
  CHECK(matches_event_grammar(rec.types()));
  CHECK(rec.events.back().type == EventType::error);
  CHECK(rec.events.back().detail["degraded"] == true);
  CHECK(rec.visible() == "Vincent van Gogh was a significant figure in the development");
  CHECK(rec.visible().rfind(r.opener.text, 0) == 0);

  ScriptedContinuation::Script none;
  none.fail_after = 0;
  ScriptedContinuation dead(none);
  Recorder rec2;
  const auto r2 = run_collaborative("q", 4, RecoveryMode::explicit_correction, *cm.model, cm.tok, dead, rec2.sink());
  CHECK(r2.degraded);
  CHECK(rec2.visible() == "Vincent van Gogh was");
  CHECK(rec2.events.back().detail["stitched"] == "Vincent van Gogh was");
}

TEST_CASE("empty opener still yields a well-formed stream") {
  const auto cm = scripted::make_chain_model(kVincent);
  Weights w = cm.model->weights();
  const auto a = static_cast<std::size_t>(TokenizerModel::kAssistantId);
  for (std::size_t j = 0; j < w.layers[0].w_down.cols(); ++j) w.layers[0].w_down(a, j) = 0.0f;
  w.layers[0].w_down(a, TokenizerModel::kEndId) = 1.0f;
  const Model silent(cm.model->config(), std::move(w));
  auto source = scripted_source({"Full answer."});
  Recorder rec;
  const auto r = run_collaborative("q", 4, RecoveryMode::explicit_correction, silent, cm.tok, source, rec.sink());
  CHECK(r.opener.text.empty());
  CHECK(matches_event_grammar(rec.types()));
  CHECK(rec.visible() == "Full answer.");
  CHECK_FALSE(r.continuation.duplication_warning);
}

TEST_CASE("handoff is dispatched right after the opener is final") {
  const auto cm = scripted::make_chain_model(kVincent);
  ManualClock clock(5'000'000, 1000);
  CollaborativeOptions opts;
  opts.clock = &clock;
  auto source = scripted_source({"the development of modern art."});
  Recorder rec;
  const auto r = run_collaborative("q", 8, RecoveryMode::explicit_correction, *cm.model, cm.tok, source, rec.sink(),
                                   opts);
  REQUIRE(r.opener.timeline.done.has_value());
  REQUIRE(r.timeline.handoff_dispatched.has_value());
  CHECK(*r.timeline.handoff_dispatched >= *r.opener.timeline.done);
  CHECK(*r.timeline.handoff_dispatched - *r.opener.timeline.done <= 5000);
  CHECK(r.timeline.is_ordered());
  for (std::size_t i = 1; i < rec.events.size(); ++i) CHECK(rec.events[i].t_ms >= rec.events[i - 1].t_ms);
  const auto& m = rec.events.back().detail["metrics"];
  CHECK(m["ttft_ms"].get<double>() == 2.0);
  CHECK(m["cloud_ttfb_ms"].get<double>() > 0.0);
}

TEST_CASE("local continuation completes the greedy answer") {
  const auto cm = scripted::make_chain_model(kVincent);
  LocalContinuation local(*cm.model, cm.tok, SamplingPolicy{0.0f, 256});
  Recorder rec;
  const auto r = run_collaborative("q", 4, RecoveryMode::explicit_correction, *cm.model, cm.tok, local, rec.sink());
  CHECK(r.continuation.continuation_text == " a significant figure in the development of modern art.");
  CHECK(r.continuation.stitched_text == kVincent);
  CHECK(rec.visible() == kVincent);
}

TEST_CASE("fallback only before the first delta") {
  ScriptedContinuation::Script bad;
  bad.fail_after = 0;
  ScriptedContinuation dead(bad);
  auto good = scripted_source({"backup"});
  int notices = 0;
  FallbackContinuation fb(dead, good, [&](const Error&) { ++notices; });
  std::string got;
  const auto out = fb.stream(simple_request(), [&](std::string_view d) { got += d; });
  CHECK(notices == 1);
  CHECK(got == "backup");
  CHECK(out.text == "backup");

  ScriptedContinuation::Script late;
  late.deltas = {"one", "two"};
  late.fail_after = 1;
  ScriptedContinuation partial(late);
  auto good2 = scripted_source({"backup"});
  FallbackContinuation fb2(partial, good2, [&](const Error&) { ++notices; });
  std::string got2;
  CHECK_THROWS_AS(fb2.stream(simple_request(), [&](std::string_view d) { got2 += d; }), TransportError);
  CHECK(got2 == "one");
  CHECK(notices == 1);
}

TEST_CASE("endpoint config validation") {
  CloudEndpointConfig c;
  CHECK_NOTHROW(c.validate());
  c.timeout_ms = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.base_url = "localhost:8000";
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.max_tokens = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("chat completions client streams deltas in order") {
  mock::Behaviour b;
  b.deltas = {"the development", " of modern", " art."};
  mock::Cloud cloud(b);
  setenv("MULM_TEST_CLOUD_TOKEN", "sekrit", 1);
  ChatCompletionsClient client(endpoint_for(cloud));
  std::vector<std::string> got;
  const auto out = client.stream(simple_request(), [&](std::string_view d) { got.emplace_back(d); });
  CHECK(got == b.deltas);
  CHECK(out.text == "the development of modern art.");
  CHECK(out.deltas == 3);
  CHECK(out.ttfb_ms.has_value());
  CHECK(cloud.last_auth() == "Bearer sekrit");
  const auto body = cloud.last_body();
  CHECK(body["stream"] == true);
  CHECK(body["temperature"] == 0);
  CHECK(body["model"] == "continuator");
  CHECK(body["max_tokens"] == 512);
  REQUIRE(body["messages"].size() == 2);
  CHECK(body["messages"][0]["role"] == "system");
  CHECK(body["messages"][1]["content"] == simple_request().messages[1].content);
  unsetenv("MULM_TEST_CLOUD_TOKEN");

  // Base URL already ending in /v1.
  auto cfg = endpoint_for(cloud);
  cfg.base_url += "/v1";
  std::string all;
  request_continuation(cfg, simple_request().messages, [&](std::string_view d) { all += d; });
  CHECK(all == "the development of modern art.");
  CHECK(cloud.last_auth().empty());
}

TEST_CASE("chat completions client error paths") {
  SUBCASE("401 becomes a protocol error with status and body") {
    mock::Behaviour b;
    b.status = 401;
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud));
    try {
      client.stream(simple_request(), [](std::string_view) {});
      FAIL("expected ProtocolError");
    } catch (const ProtocolError& e) {
      CHECK(e.status() == 401);
      CHECK(e.body().find("unauthorized") != std::string::npos);
    }
  }
  SUBCASE("stall past the timeout keeps partial text") {
    mock::Behaviour b;
    b.deltas = {"first", " second", " third"};
    b.stall_after = 2;
    b.stall_ms = 1500;
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud, 400));
    std::string got;
    try {
      client.stream(simple_request(), [&](std::string_view d) { got += d; });
      FAIL("expected TimeoutError");
    } catch (const TimeoutError& e) {
      CHECK(e.partial_text() == "first second");
      CHECK(got == "first second");
    }
  }
  SUBCASE("dropped connection is retried once") {
    mock::Behaviour b;
    b.deltas = {"ok"};
    b.drop_first = 1;
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud));
    const auto out = client.stream(simple_request(), [](std::string_view) {});
    CHECK(out.text == "ok");
    CHECK(cloud.requests() == 2);
  }
  SUBCASE("transport error when retries are exhausted") {
    mock::Behaviour b;
    b.deltas = {"ok"};
    b.drop_first = 5;
    mock::Cloud cloud(b);
    auto cfg = endpoint_for(cloud);
    cfg.retries = 0;
    ChatCompletionsClient client(cfg);
    CHECK_THROWS_AS(client.stream(simple_request(), [](std::string_view) {}), TransportError);
    CHECK(cloud.requests() == 1);
  }
  SUBCASE("refused connection") {
    CloudEndpointConfig cfg;
    cfg.base_url = "http://127.0.0.1:1";
    cfg.timeout_ms = 1000;
    ChatCompletionsClient client(cfg);
    CHECK_THROWS_AS(client.stream(simple_request(), [](std::string_view) {}), TransportError);
  }
}

TEST_CASE("chat completions client fallbacks and extensions") {
  SUBCASE("non-streaming JSON reply") {
    mock::Behaviour b;
    b.deltas = {"whole ", "answer"};
    b.non_stream = true;
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud));
    std::vector<std::string> got;
    const auto out = client.stream(simple_request(), [&](std::string_view d) { got.emplace_back(d); });
    CHECK(got == std::vector<std::string>{"whole answer"});
    CHECK(out.deltas == 1);
  }
  SUBCASE("adjudicated correction flag") {
    mock::Behaviour b;
    b.deltas = {"Wait, that is not right."};
    b.extra_final = nlohmann::json{{"correction", true}};
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud));
    const auto out = client.stream(simple_request(), [](std::string_view) {});
    REQUIRE(out.adjudicated_correction.has_value());
    CHECK(*out.adjudicated_correction);
  }
  SUBCASE("error chunk inside the stream") {
    mock::Behaviour b;
    b.deltas = {"partial"};
    b.extra_final = nlohmann::json{{"error", {{"message", "overloaded"}}}};
    mock::Cloud cloud(b);
    ChatCompletionsClient client(endpoint_for(cloud));
    CHECK_THROWS_AS(client.stream(simple_request(), [](std::string_view) {}), ProtocolError);
  }
}

TEST_CASE("collaborative session against the HTTP continuator") {
  const auto cm = scripted::make_chain_model(kVincent);
  mock::Behaviour b;
  b.deltas = {"the development", " of modern art."};
  mock::Cloud cloud(b);
  ChatCompletionsClient client(endpoint_for(cloud));
  Recorder rec;
  const auto r =
      run_collaborative("Who was Vincent van Gogh?", 8, RecoveryMode::natural_recovery, *cm.model, cm.tok, client,
                        rec.sink());
  CHECK(matches_event_grammar(rec.types()));
  CHECK(r.continuation.stitched_text == kVincent);
  const auto body = cloud.last_body();
  CHECK(body["messages"][1]["content"] ==
        "[User question]\nWho was Vincent van Gogh?\n\n[Already-spoken opener]\n"
        "Vincent van Gogh was a significant figure in");
}
