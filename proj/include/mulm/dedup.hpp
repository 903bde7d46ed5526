#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace mulm {

/// ASCII lowercase, ASCII punctuation removed, whitespace runs collapsed to
/// one space, no leading/trailing space. Non-ASCII bytes pass through.
std::string normalize_text(std::string_view text);

/// The k-token windows of the normalized text, joined by single spaces, in
/// order of appearance (duplicates kept).
std::vector<std::string> shingle_texts(std::string_view text, std::size_t k);

/// FNV-1a 64 followed by the splitmix64 finalizer.
std::uint64_t hash_shingle(std::string_view shingle);

struct ShingleSet {
  std::string source_id;
  std::size_t k = 0;
  std::vector<std::uint64_t> shingles;  // sorted, unique

  std::size_t size() const noexcept { return shingles.size(); }
  bool empty() const noexcept { return shingles.empty(); }
};

/// Throws DomainError for k == 0.
ShingleSet shingle(std::string_view text, std::size_t k, std::string source_id = {});

/// |q ∩ x| / |q|. Throws DomainError when q is empty.
double containment(const ShingleSet& q, const ShingleSet& x);
/// |a ∩ b| / |a ∪ b|; 0 for two empty sets.
double jaccard(const ShingleSet& a, const ShingleSet& b);

struct MinHashSignature {
  std::string source_id;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> mins;
};

/// h_i(x) = a_i * x + b_i (mod 2^64) with a_i = splitmix64(seed + 2i) | 1 and
/// b_i = splitmix64(seed + 2i + 1). Throws DomainError on an empty set or h == 0.
MinHashSignature minhash_signature(const ShingleSet& s, std::size_t h, std::uint64_t seed);

/// Fraction of positions where the two signatures agree.
double signature_agreement(const MinHashSignature& a, const MinHashSignature& b);

/// Banded index: a query returns every stored signature sharing at least one
/// band bucket with it.
class LshIndex {
 public:
  /// Throws ConfigError when bands or rows is zero.
  LshIndex(std::size_t bands, std::size_t rows);

  /// Returns the slot of the inserted signature. Throws ConfigError when
  /// the signature length is not bands * rows.
  std::size_t add(const MinHashSignature& sig);
  /// Sorted slots.
  std::vector<std::size_t> query(const MinHashSignature& sig) const;
  std::size_t size() const noexcept { return count_; }

  std::uint64_t band_key(const MinHashSignature& sig, std::size_t band) const;

 private:
  void check(const MinHashSignature& sig) const;

  std::size_t bands_;
  std::size_t rows_;
  std::size_t count_ = 0;
  std::vector<std::unordered_map<std::uint64_t, std::vector<std::size_t>>> buckets_;
};

/// All pairs (i < j) sharing a band bucket, sorted. Throws ConfigError unless
/// every signature has exactly bands * rows entries.
std::vector<std::pair<std::size_t, std::size_t>> lsh_candidates(
    std::span<const MinHashSignature> signatures, std::size_t bands, std::size_t rows);

struct Document {
  std::string id;
  std::string text;
};

struct TrainView {
  std::string doc_id;
  std::string text;
};

/// Splits a serialized training example at chat markers and blank lines;
/// segments longer than `window` tokens become overlapping windows advanced
/// by `stride` tokens.
std::vector<TrainView> extract_views(const Document& doc, std::size_t window = 128,
                                     std::size_t stride = 64);

struct DedupConfig {
  std::size_t k = 5;            // shingle width for the exact containment check
  std::size_t candidate_k = 1;  // shingle width hashed for LSH retrieval
  std::size_t hashes = 256;
  std::size_t bands = 16;
  double threshold = 0.8;
  std::uint64_t seed = 0x6d756c6d64656475ULL;
  std::size_t view_window = 128;
  std::size_t view_stride = 64;
  unsigned threads = 0;  // 0: hardware concurrency

  /// rows per band; throws ConfigError unless bands divides hashes.
  std::size_t rows() const;
  void validate() const;
};

struct ContaminationFlag {
  std::string eval_id;
  std::string train_id;
  double containment = 0.0;
  bool operator==(const ContaminationFlag&) const = default;
};

/// LSH candidates confirmed by exact containment >= threshold. One entry per
/// (eval_id, train_id) holding the best view's containment, sorted by ids.
/// Throws DomainError when there are no train views. Eval prompts shorter
/// than k tokens have no shingles and are never flagged.
std::vector<ContaminationFlag> flag_contaminated(std::span<const Document> eval_prompts,
                                                 std::span<const TrainView> train_views,
                                                 const DedupConfig& config);

/// Sorted, unique eval ids from a flag list.
std::vector<std::string> flagged_ids(std::span<const ContaminationFlag> flags);

/// One JSON object {id, text} per non-blank line. Numeric ids are accepted.
/// Throws FormatError with the line number on malformed input.
std::vector<Document> read_documents(std::istream& in);
nlohmann::json to_json(std::span<const ContaminationFlag> flags);

}  // namespace mulm
