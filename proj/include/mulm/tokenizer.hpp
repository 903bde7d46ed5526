#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mulm/model.hpp"

namespace mulm {

inline constexpr std::string_view kUserMarker = "<|user|>";
inline constexpr std::string_view kAssistantMarker = "<|assistant|>";
inline constexpr std::string_view kEndMarker = "<|end|>";

/// Byte-level BPE. Ids 0..255 are raw bytes, then the special markers, then
/// one id per merge in priority order.
class TokenizerModel {
 public:
  static constexpr TokenId kUserId = 256;
  static constexpr TokenId kAssistantId = 257;
  static constexpr TokenId kEndId = 258;
  static constexpr std::size_t kNumSpecial = 3;
  static constexpr TokenId kFirstMergeId = 259;

  /// Base alphabet + specials, no merges.
  TokenizerModel();
  /// Rebuilds vocab from an ordered merge list; throws DomainError if a merge
  /// references an unknown or special id.
  explicit TokenizerModel(std::vector<std::pair<TokenId, TokenId>> merges);

  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const noexcept { return merges_; }
  const std::string& token_bytes(TokenId id) const;
  bool is_special(TokenId id) const noexcept { return id >= kUserId && id <= kEndId; }
  std::map<std::string, TokenId> special_tokens() const;

  std::vector<TokenId> encode(std::string_view text) const;
  /// Batch decode; special ids render as their marker spelling. Invalid or
  /// incomplete UTF-8 is replaced with U+FFFD.
  std::string decode(std::span<const TokenId> ids) const;

  std::string to_json() const;
  static TokenizerModel from_json(std::string_view text);
  static TokenizerModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<std::string> vocab_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  // (left, right) -> merge rank; the merged id is kFirstMergeId + rank.
  std::unordered_map<std::uint64_t, std::uint32_t> ranks_;
};

/// Whitespace pre-tokenization: a chunk is a run of whitespace followed by a
/// run of non-whitespace, so leading spaces stay attached to words.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair
/// (ties broken by the lexicographically smallest byte pair) until the vocab
/// reaches vocab_size or no pair occurs at least twice.
TokenizerModel train_bpe(std::span<const std::string> corpus, std::size_t vocab_size);

/// Incremental UTF-8 assembly for streamed tokens. Bytes of an incomplete
/// multi-byte sequence are withheld until the sequence completes; finish()
/// replaces any leftover with U+FFFD. One instance per session.
class StreamingDecoder {
 public:
  explicit StreamingDecoder(const TokenizerModel& tok) : tok_(&tok) {}
  std::string push(TokenId id);
  std::string push_bytes(std::string_view bytes);
  std::string finish();

 private:
  const TokenizerModel* tok_;
  std::string pending_;
};

enum class Role { user, assistant };

struct ChatTurn {
  Role role;
  std::string text;
};

struct ChatTranscript {
  std::vector<ChatTurn> turns;

  static ChatTranscript single(std::string query) {
    return ChatTranscript{{ChatTurn{Role::user, std::move(query)}}};
  }
  /// Throws DomainError unless roles alternate starting with user and no
  /// turn is empty.
  void validate() const;
};

/// <|user|> text <|end|> <|assistant|> text <|end|> ... ; with
/// add_generation_prefix the sequence ends with an opening <|assistant|>.
std::vector<TokenId> render_chat(const TokenizerModel& tok, const ChatTranscript& transcript,
                                 bool add_generation_prefix);

}  // namespace mulm
