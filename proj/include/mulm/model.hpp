#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <span>
#include <vector>

#include "mulm/tensor.hpp"

namespace mulm {

using TokenId = std::int32_t;

/// Architecture hyperparameters for one decoder-only variant.
struct ModelConfig {
  std::size_t hidden_size = 0;
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t intermediate_size = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  double rope_theta = 1e6;
  float norm_eps = 1e-5f;

  static constexpr std::size_t kVocabSize = 12288;
  static constexpr std::size_t kMaxSeqLen = 1024;
  static constexpr double kRopeTheta = 1e6;
  static constexpr std::size_t kHeads = 8;
  static constexpr std::size_t kKvHeads = 2;

  /// Published geometry for hidden size d and L layers: 8 query heads,
  /// 2 KV heads, head_dim d/8, FFN width per ffn_intermediate_size().
  static ModelConfig variant(std::size_t hidden_size, std::size_t n_layers);

  std::size_t q_dim() const noexcept { return n_heads * head_dim; }
  std::size_t kv_dim() const noexcept { return n_kv_heads * head_dim; }
  std::size_t group_size() const noexcept { return n_heads / n_kv_heads; }

  /// Structural checks; throws ConfigError.
  void validate() const;
  /// True when the config also satisfies the published-family constants
  /// (vocab, context, theta, FFN rounding).
  bool is_reference_family() const noexcept;

  bool operator==(const ModelConfig&) const = default;
};

/// Smallest multiple of 64 that is >= ceil(8d/3).
std::size_t ffn_intermediate_size(std::size_t hidden_size);

/// Trainable parameters with the output head tied to the token embedding.
std::uint64_t param_count(const ModelConfig& config);

/// Millions label as used in published size tables: the count is rounded to
/// the nearest thousand first, then to two decimals (half-up both times),
/// e.g. 28,844,544 -> 28,845K -> "28.85M".
std::string format_param_millions(std::uint64_t params);

/// FLOPs-matched optimizer-step budget: round(ref_steps * ref_params / params).
std::uint64_t compute_step_budget(std::uint64_t params, std::uint64_t ref_params,
                                  std::uint64_t ref_steps);

/// Attention of one query position over `len` cached positions. q holds
/// n_heads heads of head_dim; keys/values hold len rows of n_kv_heads heads.
/// Query head h reads KV head h / (n_heads / n_kv_heads). Scores are scaled
/// by 1/sqrt(head_dim).
void grouped_query_attention(std::span<const float> q, std::span<const float> keys,
                             std::span<const float> values, std::size_t len, std::size_t n_heads,
                             std::size_t n_kv_heads, std::size_t head_dim, std::span<float> out);

struct LayerWeights {
  std::vector<float> attn_norm;
  Tensor2D wq;  // d × q_dim
  Tensor2D wk;  // d × kv_dim
  Tensor2D wv;  // d × kv_dim
  Tensor2D wo;  // q_dim × d
  std::vector<float> ffn_norm;
  Tensor2D w_gate;  // d × m
  Tensor2D w_up;    // d × m
  Tensor2D w_down;  // m × d

  bool operator==(const LayerWeights&) const = default;
};

/// Bias-free weights. There is no separate output head: logits are computed
/// against tok_embedding.
struct Weights {
  Tensor2D tok_embedding;  // V × d
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;

  /// All projections zero, all norm gains one, embedding zero.
  static Weights zeros(const ModelConfig& config);
  /// Uniform(-scale, scale) projections and embedding, unit gains.
  /// Bit-reproducible for a given seed.
  static Weights random(const ModelConfig& config, std::uint64_t seed, float scale = 0.1f);

  /// Throws IntegrityError if any tensor disagrees with the config.
  void check_shapes(const ModelConfig& config) const;

  bool operator==(const Weights&) const = default;
};

/// Per-session key/value history. Rows are positions, columns kv_dim.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t kv_dim, std::size_t capacity);

  std::size_t current_len() const noexcept { return len_; }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t n_layers() const noexcept { return keys_.size(); }
  std::size_t kv_dim() const noexcept { return kv_dim_; }

  std::span<const float> keys(std::size_t layer) const noexcept {
    return {keys_[layer].data(), len_ * kv_dim_};
  }
  std::span<const float> values(std::size_t layer) const noexcept {
    return {values_[layer].data(), len_ * kv_dim_};
  }

 private:
  friend class Model;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
  std::size_t kv_dim_ = 0;
  std::size_t capacity_ = 0;
  std::size_t len_ = 0;
};

struct PrefillResult {
  std::vector<float> logits;  // next-token logits after the last prompt token
  KVCache cache;
};

/// Immutable loaded model; safe to share between sessions.
class Model {
 public:
  Model(ModelConfig config, Weights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const Weights& weights() const noexcept { return weights_; }

  KVCache new_cache() const;

  /// Causal forward over the whole prompt, filling a fresh cache.
  /// Throws DomainError on an empty prompt, ContextOverflowError when the
  /// prompt exceeds max_seq_len.
  PrefillResult prefill(std::span<const TokenId> tokens) const;

  /// Appends one position to `cache` and returns next-token logits.
  std::vector<float> decode_step(TokenId token, KVCache& cache) const;

  /// Debug path: logits for every position (tokens.size() × V).
  Tensor2D forward_all(std::span<const TokenId> tokens) const;

 private:
  Tensor2D run_prompt(std::span<const TokenId> tokens, KVCache& cache, bool all_positions) const;
  void check_token(TokenId token) const;

  ModelConfig config_;
  Weights weights_;
};

}  // namespace mulm
