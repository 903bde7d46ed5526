#include "mulm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mulm/error.hpp"

namespace mulm {

namespace {

using nlohmann::json;

constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::string_view in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) |
                            (static_cast<unsigned char>(in[i + 1]) << 8) |
                            static_cast<unsigned char>(in[i + 2]);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i + 1 == in.size()) {
    const std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    const std::uint32_t v = (static_cast<unsigned char>(in[i]) << 16) |
                            (static_cast<unsigned char>(in[i + 1]) << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view in) {
  std::array<int, 256> table{};
  table.fill(-1);
  for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(kB64[i])] = i;
  std::string out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char ch : in) {
    if (ch == '=') break;
    const int v = table[static_cast<unsigned char>(ch)];
    if (v < 0) throw FormatError("tokenizer: invalid base64 in vocab");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((acc >> bits) & 0xFF);
    }
  }
  return out;
}

// Length of a well-formed UTF-8 sequence starting with `lead`, 0 if `lead`
// cannot start one.
int utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if (lead >= 0xC2 && lead <= 0xDF) return 2;
  if (lead >= 0xE0 && lead <= 0xEF) return 3;
  if (lead >= 0xF0 && lead <= 0xF4) return 4;
  return 0;
}

bool valid_continuation(unsigned char lead, int index, unsigned char b) {
  if (index == 1) {
    if (lead == 0xE0) return b >= 0xA0 && b <= 0xBF;
    if (lead == 0xED) return b >= 0x80 && b <= 0x9F;
    if (lead == 0xF0) return b >= 0x90 && b <= 0xBF;
    if (lead == 0xF4) return b >= 0x80 && b <= 0x8F;
  }
  return b >= 0x80 && b <= 0xBF;
}

}  // namespace

TokenizerModel::TokenizerModel() {
  vocab_.reserve(kFirstMergeId);
  for (int b = 0; b < 256; ++b) vocab_.emplace_back(1, static_cast<char>(b));
  vocab_.emplace_back(kUserMarker);
  vocab_.emplace_back(kAssistantMarker);
  vocab_.emplace_back(kEndMarker);
}

TokenizerModel::TokenizerModel(std::vector<std::pair<TokenId, TokenId>> merges)
    : TokenizerModel() {
  for (const auto& [a, b] : merges) {
    const auto n = static_cast<TokenId>(vocab_.size());
    if (a < 0 || b < 0 || a >= n || b >= n || is_special(a) || is_special(b)) {
      throw DomainError("tokenizer: merge references invalid id");
    }
    ranks_.emplace(pair_key(a, b), static_cast<std::uint32_t>(merges_.size()));
    merges_.emplace_back(a, b);
    vocab_.push_back(vocab_[a] + vocab_[b]);
  }
}

const std::string& TokenizerModel::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw DomainError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab_.size()));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

std::map<std::string, TokenId> TokenizerModel::special_tokens() const {
  return {{std::string(kUserMarker), kUserId},
          {std::string(kAssistantMarker), kAssistantId},
          {std::string(kEndMarker), kEndId}};
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    const bool ws = is_ascii_space(static_cast<unsigned char>(text[i]));
    const bool prev_ws = is_ascii_space(static_cast<unsigned char>(text[i - 1]));
    if (ws && !prev_ws) {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

void TokenizerModel::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) ids.push_back(static_cast<TokenId>(c));
  while (ids.size() > 1) {
    std::uint32_t best_rank = UINT32_MAX;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto it = ranks_.find(pair_key(ids[i], ids[i + 1]));
      if (it != ranks_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == UINT32_MAX) break;
    const auto [a, b] = merges_[best_rank];
    const TokenId merged = kFirstMergeId + static_cast<TokenId>(best_rank);
    std::vector<TokenId> next;
    next.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == a && ids[i + 1] == b) {
        next.push_back(merged);
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids.swap(next);
  }
  out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<TokenId> TokenizerModel::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
  return out;
}

std::string TokenizerModel::decode(std::span<const TokenId> ids) const {
  StreamingDecoder dec(*this);
  std::string out;
  for (TokenId id : ids) out += dec.push(id);
  out += dec.finish();
  return out;
}

std::string StreamingDecoder::push(TokenId id) { return push_bytes(tok_->token_bytes(id)); }

std::string StreamingDecoder::push_bytes(std::string_view bytes) {
  pending_.append(bytes);
  std::string out;
  std::size_t i = 0;
  while (i < pending_.size()) {
    const auto lead = static_cast<unsigned char>(pending_[i]);
    const int len = utf8_length(lead);
    if (len == 0) {
      out += kReplacement;
      ++i;
      continue;
    }
    if (len == 1) {
      out += static_cast<char>(lead);
      ++i;
      continue;
    }
    int ok = 1;
    while (ok < len && i + ok < pending_.size() &&
           valid_continuation(lead, ok, static_cast<unsigned char>(pending_[i + ok]))) {
      ++ok;
    }
    if (ok == len) {
      out.append(pending_, i, static_cast<std::size_t>(len));
      i += static_cast<std::size_t>(len);
    } else if (i + ok == pending_.size()) {
      break;  // incomplete but still well-formed so far: withhold
    } else {
      out += kReplacement;
      i += static_cast<std::size_t>(ok);
    }
  }
  pending_.erase(0, i);
  return out;
}

std::string StreamingDecoder::finish() {
  std::string out = pending_.empty() ? std::string() : std::string(kReplacement);
  pending_.clear();
  return out;
}

TokenizerModel train_bpe(std::span<const std::string> corpus, std::size_t vocab_size) {
  if (vocab_size < static_cast<std::size_t>(TokenizerModel::kFirstMergeId)) {
    throw DomainError("train_bpe: vocab_size must be at least " +
                      std::to_string(TokenizerModel::kFirstMergeId));
  }
  std::unordered_map<std::string_view, std::int64_t> chunk_counts;
  for (const auto& doc : corpus) {
    for (auto chunk : pretokenize(doc)) ++chunk_counts[chunk];
  }
  if (chunk_counts.empty()) throw DomainError("train_bpe: empty corpus");

  struct Word {
    std::vector<TokenId> ids;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.ids.push_back(static_cast<TokenId>(c));
    words.push_back(std::move(w));
  }

  TokenizerModel base;
  std::vector<std::string> piece;  // bytes of every id allocated so far
  for (std::size_t id = 0; id < base.vocab_size(); ++id) {
    piece.push_back(base.token_bytes(static_cast<TokenId>(id)));
  }
  std::vector<std::pair<TokenId, TokenId>> merges;

  while (piece.size() < vocab_size) {
    std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) {
        pair_counts[pair_key(w.ids[i], w.ids[i + 1])] += w.count;
      }
    }
    std::uint64_t best = 0;
    std::int64_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count < best_count) continue;
      if (count > best_count) {
        best = key;
        best_count = count;
        continue;
      }
      const auto a = static_cast<TokenId>(key >> 32), b = static_cast<TokenId>(key & 0xFFFFFFFF);
      const auto ba = static_cast<TokenId>(best >> 32), bb = static_cast<TokenId>(best & 0xFFFFFFFF);
      // Equal byte pairs can only arise from distinct ids spelling the same
      // bytes; fall back to the ids themselves.
      if (std::tie(piece[a], piece[b], key) < std::tie(piece[ba], piece[bb], best)) best = key;
    }
    if (best_count < 2) break;

    const auto a = static_cast<TokenId>(best >> 32);
    const auto b = static_cast<TokenId>(best & 0xFFFFFFFF);
    const auto merged = static_cast<TokenId>(piece.size());
    merges.emplace_back(a, b);
    piece.push_back(piece[a] + piece[b]);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.ids.size(); ++i) {
        if (i + 1 < w.ids.size() && w.ids[i] == a && w.ids[i + 1] == b) {
          w.ids[out++] = merged;
          ++i;
        } else {
          w.ids[out++] = w.ids[i];
        }
      }
      w.ids.resize(out);
    }
  }
  return TokenizerModel(std::move(merges));
}

std::string TokenizerModel::to_json() const {
  json vocab = json::object();
  for (std::size_t id = 0; id < vocab_.size(); ++id) {
    vocab[std::to_string(id)] = base64_encode(vocab_[id]);
  }
  json merges = json::array();
  for (const auto& [a, b] : merges_) merges.push_back(json::array({a, b}));
  json j{{"version", 1},
         {"vocab", std::move(vocab)},
         {"merges", std::move(merges)},
         {"special_tokens", special_tokens()}};
  return j.dump();
}

TokenizerModel TokenizerModel::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("tokenizer: invalid JSON: ") + e.what());
  }
  if (j.value("version", 0) != 1) throw FormatError("tokenizer: unsupported version");
  std::vector<std::pair<TokenId, TokenId>> merges;
  for (const auto& m : j.at("merges")) {
    merges.emplace_back(m.at(0).get<TokenId>(), m.at(1).get<TokenId>());
  }
  TokenizerModel tok(std::move(merges));
  const auto& vocab = j.at("vocab");
  if (vocab.size() != tok.vocab_size()) {
    throw FormatError("tokenizer: vocab size disagrees with merge list");
  }
  for (const auto& [key, value] : vocab.items()) {
    const auto id = static_cast<TokenId>(std::stol(key));
    if (base64_decode(value.get<std::string>()) != tok.token_bytes(id)) {
      throw FormatError("tokenizer: vocab entry " + key + " disagrees with merges");
    }
  }
  if (j.contains("special_tokens") &&
      j["special_tokens"].get<std::map<std::string, TokenId>>() != tok.special_tokens()) {
    throw FormatError("tokenizer: special token table does not match this build");
  }
  return tok;
}

TokenizerModel TokenizerModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tokenizer file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void TokenizerModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write tokenizer file " + path.string());
  out << to_json() << '\n';
}

void ChatTranscript::validate() const {
  if (turns.empty()) throw DomainError("chat transcript is empty");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const Role expected = i % 2 == 0 ? Role::user : Role::assistant;
    if (turns[i].role != expected) {
      throw DomainError("chat transcript roles must alternate starting with user");
    }
    if (turns[i].text.empty()) throw DomainError("chat transcript contains an empty turn");
  }
}

std::vector<TokenId> render_chat(const TokenizerModel& tok, const ChatTranscript& transcript,
                                 bool add_generation_prefix) {
  transcript.validate();
  std::vector<TokenId> ids;
  for (const auto& turn : transcript.turns) {
    ids.push_back(turn.role == Role::user ? TokenizerModel::kUserId
                                          : TokenizerModel::kAssistantId);
    const auto text = tok.encode(turn.text);
    ids.insert(ids.end(), text.begin(), text.end());
    ids.push_back(TokenizerModel::kEndId);
  }
  if (add_generation_prefix) ids.push_back(TokenizerModel::kAssistantId);
  return ids;
}

}  // namespace mulm
