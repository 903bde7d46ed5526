#include "mulm/dedup.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <optional>
#include <thread>

#include "mulm/error.hpp"
#include "mulm/tokenizer.hpp"

namespace mulm {

namespace {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool is_ascii_space(unsigned char c) { return c == ' ' || (c >= '\t' && c <= '\r'); }

bool is_ascii_punct(unsigned char c) {
  return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') || (c >= '[' && c <= '`') ||
         (c >= '{' && c <= '~');
}

std::vector<std::string_view> split_tokens(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < s.size() && s[i] != ' ') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

std::size_t intersection_size(const std::vector<std::uint64_t>& a,
                              const std::vector<std::uint64_t>& b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; results are written
// by index so the outcome does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_ascii_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (is_ascii_punct(c)) continue;
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
  }
  return out;
}

std::vector<std::string> shingle_texts(std::string_view text, std::size_t k) {
  if (k == 0) throw DomainError("shingle width must be >= 1");
  const std::string norm = normalize_text(text);
  const auto tokens = split_tokens(norm);
  std::vector<std::string> out;
  if (tokens.size() < k) return out;
  for (std::size_t i = 0; i + k <= tokens.size(); ++i) {
    std::string s(tokens[i]);
    for (std::size_t j = 1; j < k; ++j) {
      s += ' ';
      s += tokens[i + j];
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::uint64_t hash_shingle(std::string_view shingle) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : shingle) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

ShingleSet shingle(std::string_view text, std::size_t k, std::string source_id) {
  ShingleSet s;
  s.source_id = std::move(source_id);
  s.k = k;
  for (const auto& sh : shingle_texts(text, k)) s.shingles.push_back(hash_shingle(sh));
  std::sort(s.shingles.begin(), s.shingles.end());
  s.shingles.erase(std::unique(s.shingles.begin(), s.shingles.end()), s.shingles.end());
  return s;
}

double containment(const ShingleSet& q, const ShingleSet& x) {
  if (q.empty()) throw DomainError("containment of an empty shingle set is undefined");
  return static_cast<double>(intersection_size(q.shingles, x.shingles)) /
         static_cast<double>(q.size());
}

double jaccard(const ShingleSet& a, const ShingleSet& b) {
  const std::size_t inter = intersection_size(a.shingles, b.shingles);
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MinHashSignature minhash_signature(const ShingleSet& s, std::size_t h, std::uint64_t seed) {
  if (h == 0) throw DomainError("minhash needs at least one hash function");
  if (s.empty()) throw DomainError("minhash of an empty shingle set");
  MinHashSignature sig;
  sig.source_id = s.source_id;
  sig.seed = seed;
  sig.mins.resize(h);
  for (std::size_t i = 0; i < h; ++i) {
    const std::uint64_t a = splitmix64(seed + 2 * i) | 1ULL;
    const std::uint64_t b = splitmix64(seed + 2 * i + 1);
    std::uint64_t m = ~0ULL;
    for (const std::uint64_t x : s.shingles) m = std::min(m, a * x + b);
    sig.mins[i] = m;
  }
  return sig;
}

double signature_agreement(const MinHashSignature& a, const MinHashSignature& b) {
  if (a.mins.size() != b.mins.size() || a.mins.empty()) {
    throw DomainError("signatures must have the same non-zero length");
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.mins.size(); ++i) same += a.mins[i] == b.mins[i];
  return static_cast<double>(same) / static_cast<double>(a.mins.size());
}

LshIndex::LshIndex(std::size_t bands, std::size_t rows) : bands_(bands), rows_(rows) {
  if (bands == 0 || rows == 0) throw ConfigError("LSH needs at least one band and one row");
  buckets_.resize(bands);
}

void LshIndex::check(const MinHashSignature& sig) const {
  if (sig.mins.size() != bands_ * rows_) {
    throw ConfigError("signature length " + std::to_string(sig.mins.size()) + " != bands " +
                      std::to_string(bands_) + " x rows " + std::to_string(rows_));
  }
}

std::uint64_t LshIndex::band_key(const MinHashSignature& sig, std::size_t band) const {
  check(sig);
  std::uint64_t key = splitmix64(band);
  for (std::size_t r = 0; r < rows_; ++r) key = splitmix64(key ^ sig.mins[band * rows_ + r]);
  return key;
}

std::size_t LshIndex::add(const MinHashSignature& sig) {
  check(sig);
  const std::size_t slot = count_++;
  for (std::size_t b = 0; b < bands_; ++b) buckets_[b][band_key(sig, b)].push_back(slot);
  return slot;
}

std::vector<std::size_t> LshIndex::query(const MinHashSignature& sig) const {
  check(sig);
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < bands_; ++b) {
    const auto it = buckets_[b].find(band_key(sig, b));
    if (it != buckets_[b].end()) out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> lsh_candidates(
    std::span<const MinHashSignature> signatures, std::size_t bands, std::size_t rows) {
  LshIndex index(bands, rows);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < signatures.size(); ++j) {
    for (const std::size_t i : index.query(signatures[j])) pairs.emplace_back(i, j);
    index.add(signatures[j]);
  }
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

std::vector<TrainView> extract_views(const Document& doc, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ConfigError("view window and stride must be >= 1");
  // Turn markers and blank lines both end a segment.
  std::vector<std::string> segments;
  std::string current;
  auto flush = [&] {
    if (current.find_first_not_of(" \t\r\n") != std::string::npos) segments.push_back(current);
    current.clear();
  };
  const std::string_view text = doc.text;
  std::size_t i = 0;
  while (i < text.size()) {
    bool cut = false;
    for (const std::string_view m : {kUserMarker, kAssistantMarker, kEndMarker}) {
      if (text.substr(i, m.size()) == m) {
        flush();
        i += m.size();
        cut = true;
        break;
      }
    }
    if (cut) continue;
    if (text[i] == '\n') {
      std::size_t j = i + 1;
      while (j < text.size() && (text[j] == ' ' || text[j] == '\t' || text[j] == '\r')) ++j;
      if (j < text.size() && text[j] == '\n') {
        flush();
        i = j + 1;
        continue;
      }
    }
    current += text[i++];
  }
  flush();

  std::vector<TrainView> views;
  for (const auto& seg : segments) {
    // Whitespace tokens of the raw segment; windows keep the original words.
    std::vector<std::string_view> words;
    std::string_view rest = seg;
    while (!rest.empty()) {
      const auto b = rest.find_first_not_of(" \t\r\n");
      if (b == std::string_view::npos) break;
      rest.remove_prefix(b);
      const auto e = rest.find_first_of(" \t\r\n");
      words.push_back(rest.substr(0, e));
      rest.remove_prefix(e == std::string_view::npos ? rest.size() : e);
    }
    if (words.size() <= window) {
      views.push_back(TrainView{doc.id, seg});
      continue;
    }
    for (std::size_t start = 0;; start += stride) {
      const std::size_t end = std::min(words.size(), start + window);
      std::string v;
      for (std::size_t w = start; w < end; ++w) {
        if (!v.empty()) v += ' ';
        v += words[w];
      }
      views.push_back(TrainView{doc.id, std::move(v)});
      if (end == words.size()) break;
    }
  }
  return views;
}

std::size_t DedupConfig::rows() const {
  if (bands == 0 || hashes % bands != 0) {
    throw ConfigError("hashes (" + std::to_string(hashes) + ") must be a multiple of bands (" +
                      std::to_string(bands) + ")");
  }
  return hashes / bands;
}

void DedupConfig::validate() const {
  if (k == 0 || candidate_k == 0) throw ConfigError("shingle widths must be >= 1");
  if (hashes == 0) throw ConfigError("hashes must be >= 1");
  rows();
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("threshold must be in (0, 1]");
  if (view_window == 0 || view_stride == 0) throw ConfigError("view window/stride must be >= 1");
}

std::vector<ContaminationFlag> flag_contaminated(std::span<const Document> eval_prompts,
                                                 std::span<const TrainView> train_views,
                                                 const DedupConfig& config) {
  config.validate();
  if (train_views.empty()) throw DomainError("train index is empty");
  const std::size_t rows = config.rows();

  struct Indexed {
    ShingleSet exact;
    std::optional<MinHashSignature> sig;
  };
  std::vector<Indexed> views(train_views.size());
  parallel_for(train_views.size(), config.threads, [&](std::size_t i) {
    views[i].exact = shingle(train_views[i].text, config.k);
    const ShingleSet cand = shingle(train_views[i].text, config.candidate_k);
    if (!cand.empty()) views[i].sig = minhash_signature(cand, config.hashes, config.seed);
  });

  // Slots are assigned in view order, so the index is identical regardless
  // of how the signature work was scheduled.
  LshIndex index(config.bands, rows);
  std::vector<std::size_t> slot_to_view;
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (!views[i].sig) continue;
    index.add(*views[i].sig);
    slot_to_view.push_back(i);
  }

  std::vector<std::vector<ContaminationFlag>> per_eval(eval_prompts.size());
  parallel_for(eval_prompts.size(), config.threads, [&](std::size_t e) {
    const ShingleSet q = shingle(eval_prompts[e].text, config.k);
    const ShingleSet qc = shingle(eval_prompts[e].text, config.candidate_k);
    if (q.empty() || qc.empty()) return;
    const auto sig = minhash_signature(qc, config.hashes, config.seed);
    std::map<std::string, double> best;
    for (const std::size_t slot : index.query(sig)) {
      const std::size_t v = slot_to_view[slot];
      const double c = containment(q, views[v].exact);
      if (c >= config.threshold) {
        auto [it, fresh] = best.emplace(train_views[v].doc_id, c);
        if (!fresh) it->second = std::max(it->second, c);
      }
    }
    for (const auto& [train_id, c] : best) {
      per_eval[e].push_back(ContaminationFlag{eval_prompts[e].id, train_id, c});
    }
  });

  std::vector<ContaminationFlag> flags;
  for (auto& v : per_eval) flags.insert(flags.end(), v.begin(), v.end());
  std::sort(flags.begin(), flags.end(), [](const auto& a, const auto& b) {
    return std::tie(a.eval_id, a.train_id) < std::tie(b.eval_id, b.train_id);
  });
  // Duplicate eval ids in the input collapse to one entry per pair.
  std::vector<ContaminationFlag> unique;
  for (auto& f : flags) {
    if (!unique.empty() && unique.back().eval_id == f.eval_id &&
        unique.back().train_id == f.train_id) {
      unique.back().containment = std::max(unique.back().containment, f.containment);
    } else {
      unique.push_back(std::move(f));
    }
  }
  return unique;
}

std::vector<std::string> flagged_ids(std::span<const ContaminationFlag> flags) {
  std::vector<std::string> ids;
  for (const auto& f : flags) ids.push_back(f.eval_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::vector<Document> read_documents(std::istream& in) {
  std::vector<Document> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    const auto where = " on line " + std::to_string(line_no);
    if (j.is_discarded() || !j.is_object()) throw FormatError("invalid JSON" + where);
    if (!j.contains("id") || !j.contains("text") || !j["text"].is_string()) {
      throw FormatError("expected {id, text}" + where);
    }
    const auto& id = j["id"];
    if (!id.is_string() && !id.is_number_integer()) {
      throw FormatError("id must be a string or integer" + where);
    }
    docs.push_back(Document{id.is_string() ? id.get<std::string>() : id.dump(),
                            j["text"].get<std::string>()});
  }
  return docs;
}

nlohmann::json to_json(std::span<const ContaminationFlag> flags) {
  auto out = nlohmann::json::array();
  for (const auto& f : flags) {
    out.push_back({{"eval_id", f.eval_id}, {"train_id", f.train_id}, {"containment", f.containment}});
  }
  return out;
}

}  // namespace mulm
