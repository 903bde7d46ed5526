#include "mulm/model.hpp"

#include <cmath>
#include <string>

#include "mulm/error.hpp"

namespace mulm {

namespace {

// splitmix64; the standard distributions are not bit-specified across
// library implementations, so uniform floats are derived by hand.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  // Uniform in [-1, 1).
  float symmetric() noexcept {
    const auto bits = static_cast<std::uint32_t>(next() >> 40);  // 24 bits
    return static_cast<float>(bits) * (2.0f / 16777216.0f) - 1.0f;
  }

 private:
  std::uint64_t state_;
};

void fill(Tensor2D& t, SplitMix64& rng, float scale) {
  for (float& v : t.data()) v = rng.symmetric() * scale;
}

void expect_shape(const Tensor2D& t, std::size_t rows, std::size_t cols, const std::string& name) {
  if (t.rows() != rows || t.cols() != cols) {
    throw IntegrityError(name + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + ", got " + std::to_string(t.rows()) + "x" +
                         std::to_string(t.cols()));
  }
}

void expect_len(const std::vector<float>& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw IntegrityError(name + ": expected length " + std::to_string(n) + ", got " +
                         std::to_string(v.size()));
  }
}

// Causal attention of one query head over the first `len` cached positions.
void attend(std::span<const float> q, std::span<const float> keys,
            std::span<const float> values, std::size_t len, std::size_t kv_dim,
            std::size_t kv_offset, std::size_t head_dim, std::span<float> out) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  std::vector<float> scores(len);
  for (std::size_t t = 0; t < len; ++t) {
    const float* k = keys.data() + t * kv_dim + kv_offset;
    float dot = 0.0f;
    for (std::size_t i = 0; i < head_dim; ++i) dot += q[i] * k[i];
    scores[t] = dot * scale;
  }
  const auto weights = softmax(scores);
  for (std::size_t i = 0; i < head_dim; ++i) out[i] = 0.0f;
  for (std::size_t t = 0; t < len; ++t) {
    const float* v = values.data() + t * kv_dim + kv_offset;
    const float w = weights[t];
    for (std::size_t i = 0; i < head_dim; ++i) out[i] += w * v[i];
  }
}

}  // namespace

void grouped_query_attention(std::span<const float> q, std::span<const float> keys,
                             std::span<const float> values, std::size_t len, std::size_t n_heads,
                             std::size_t n_kv_heads, std::size_t head_dim, std::span<float> out) {
  if (n_heads == 0 || n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw DimensionError("attention: n_heads must be a positive multiple of n_kv_heads");
  }
  const std::size_t kv_dim = n_kv_heads * head_dim;
  if (q.size() != n_heads * head_dim || out.size() != q.size() || len == 0 ||
      keys.size() < len * kv_dim || values.size() < len * kv_dim) {
    throw DimensionError("attention: buffer sizes do not match the head geometry");
  }
  const std::size_t group = n_heads / n_kv_heads;
  for (std::size_t head = 0; head < n_heads; ++head) {
    const std::size_t g = head / group;
    attend(q.subspan(head * head_dim, head_dim), keys, values, len, kv_dim, g * head_dim, head_dim,
           out.subspan(head * head_dim, head_dim));
  }
}

ModelConfig ModelConfig::variant(std::size_t hidden_size, std::size_t n_layers) {
  ModelConfig c;
  c.hidden_size = hidden_size;
  c.n_layers = n_layers;
  c.n_heads = kHeads;
  c.n_kv_heads = kKvHeads;
  c.head_dim = hidden_size / kHeads;
  c.intermediate_size = ffn_intermediate_size(hidden_size);
  c.vocab_size = kVocabSize;
  c.max_seq_len = kMaxSeqLen;
  c.rope_theta = kRopeTheta;
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (hidden_size == 0) fail("hidden_size must be positive");
  if (n_layers == 0) fail("n_layers must be positive");
  if (n_heads == 0 || n_kv_heads == 0) fail("head counts must be positive");
  if (head_dim == 0 || head_dim % 2 != 0) fail("head_dim must be positive and even");
  if (hidden_size != n_heads * head_dim) fail("hidden_size != n_heads * head_dim");
  if (n_kv_heads > n_heads || n_heads % n_kv_heads != 0) {
    fail("n_heads must be a multiple of n_kv_heads");
  }
  if (intermediate_size == 0) fail("intermediate_size must be positive");
  if (vocab_size == 0) fail("vocab_size must be positive");
  if (max_seq_len == 0) fail("max_seq_len must be positive");
  if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) fail("rope_theta must be positive");
  if (!(norm_eps > 0.0f)) fail("norm_eps must be positive");
}

bool ModelConfig::is_reference_family() const noexcept {
  return vocab_size == kVocabSize && max_seq_len == kMaxSeqLen && rope_theta == kRopeTheta &&
         intermediate_size == ffn_intermediate_size(hidden_size) && n_kv_heads < n_heads;
}

std::size_t ffn_intermediate_size(std::size_t hidden_size) {
  const std::size_t raw = (8 * hidden_size + 2) / 3;  // ceil(8d/3)
  return ((raw + 63) / 64) * 64;
}

std::uint64_t param_count(const ModelConfig& c) {
  const std::uint64_t d = c.hidden_size;
  const std::uint64_t q = c.q_dim();
  const std::uint64_t kv = c.kv_dim();
  const std::uint64_t m = c.intermediate_size;
  const std::uint64_t per_layer = 2 * d + d * q + 2 * d * kv + q * d + 3 * d * m;
  return static_cast<std::uint64_t>(c.vocab_size) * d + c.n_layers * per_layer + d;
}

std::string format_param_millions(std::uint64_t params) {
  const std::uint64_t thousands = (params + 500) / 1000;
  const std::uint64_t hundredths = (thousands + 5) / 10;
  std::string frac = std::to_string(hundredths % 100);
  if (frac.size() < 2) frac.insert(0, "0");
  return std::to_string(hundredths / 100) + "." + frac + "M";
}

std::uint64_t compute_step_budget(std::uint64_t params, std::uint64_t ref_params,
                                  std::uint64_t ref_steps) {
  if (params == 0 || ref_params == 0 || ref_steps == 0) {
    throw DomainError("step budget: all inputs must be positive");
  }
  const long double ratio = static_cast<long double>(ref_steps) *
                            static_cast<long double>(ref_params) /
                            static_cast<long double>(params);
  return static_cast<std::uint64_t>(std::llround(ratio));
}

Weights Weights::zeros(const ModelConfig& c) {
  c.validate();
  Weights w;
  w.tok_embedding = Tensor2D(c.vocab_size, c.hidden_size);
  w.layers.resize(c.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm.assign(c.hidden_size, 1.0f);
    l.wq = Tensor2D(c.hidden_size, c.q_dim());
    l.wk = Tensor2D(c.hidden_size, c.kv_dim());
    l.wv = Tensor2D(c.hidden_size, c.kv_dim());
    l.wo = Tensor2D(c.q_dim(), c.hidden_size);
    l.ffn_norm.assign(c.hidden_size, 1.0f);
    l.w_gate = Tensor2D(c.hidden_size, c.intermediate_size);
    l.w_up = Tensor2D(c.hidden_size, c.intermediate_size);
    l.w_down = Tensor2D(c.intermediate_size, c.hidden_size);
  }
  w.final_norm.assign(c.hidden_size, 1.0f);
  return w;
}

Weights Weights::random(const ModelConfig& c, std::uint64_t seed, float scale) {
  Weights w = zeros(c);
  SplitMix64 rng(seed);
  fill(w.tok_embedding, rng, 1.0f);
  for (auto& l : w.layers) {
    for (Tensor2D* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down}) {
      fill(*t, rng, scale);
    }
  }
  return w;
}

void Weights::check_shapes(const ModelConfig& c) const {
  expect_shape(tok_embedding, c.vocab_size, c.hidden_size, "tok_embedding");
  if (layers.size() != c.n_layers) {
    throw IntegrityError("expected " + std::to_string(c.n_layers) + " layers, got " +
                         std::to_string(layers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    expect_len(l.attn_norm, c.hidden_size, p + "attn_norm");
    expect_shape(l.wq, c.hidden_size, c.q_dim(), p + "wq");
    expect_shape(l.wk, c.hidden_size, c.kv_dim(), p + "wk");
    expect_shape(l.wv, c.hidden_size, c.kv_dim(), p + "wv");
    expect_shape(l.wo, c.q_dim(), c.hidden_size, p + "wo");
    expect_len(l.ffn_norm, c.hidden_size, p + "ffn_norm");
    expect_shape(l.w_gate, c.hidden_size, c.intermediate_size, p + "w_gate");
    expect_shape(l.w_up, c.hidden_size, c.intermediate_size, p + "w_up");
    expect_shape(l.w_down, c.intermediate_size, c.hidden_size, p + "w_down");
  }
  expect_len(final_norm, c.hidden_size, "final_norm");
}

KVCache::KVCache(std::size_t n_layers, std::size_t kv_dim, std::size_t capacity)
    : keys_(n_layers), values_(n_layers), kv_dim_(kv_dim), capacity_(capacity) {}

Model::Model(ModelConfig config, Weights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  weights_.check_shapes(config_);
}

KVCache Model::new_cache() const {
  return KVCache(config_.n_layers, config_.kv_dim(), config_.max_seq_len);
}

void Model::check_token(TokenId token) const {
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw DomainError("token id " + std::to_string(token) + " outside vocabulary of " +
                      std::to_string(config_.vocab_size));
  }
}

PrefillResult Model::prefill(std::span<const TokenId> tokens) const {
  PrefillResult r{{}, new_cache()};
  Tensor2D logits = run_prompt(tokens, r.cache, false);
  r.logits.assign(logits.data().begin(), logits.data().end());
  return r;
}

Tensor2D Model::forward_all(std::span<const TokenId> tokens) const {
  KVCache cache = new_cache();
  return run_prompt(tokens, cache, true);
}

Tensor2D Model::run_prompt(std::span<const TokenId> tokens, KVCache& cache,
                           bool all_positions) const {
  const auto& c = config_;
  if (tokens.empty()) throw DomainError("prefill: empty prompt");
  if (tokens.size() > c.max_seq_len) {
    throw ContextOverflowError("prefill: prompt of " + std::to_string(tokens.size()) +
                               " tokens exceeds context of " + std::to_string(c.max_seq_len));
  }
  for (TokenId t : tokens) check_token(t);

  const std::size_t n = tokens.size();
  const std::size_t d = c.hidden_size;
  const std::size_t hd = c.head_dim;

  Tensor2D h(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    const auto e = weights_.tok_embedding.row(static_cast<std::size_t>(tokens[p]));
    std::copy(e.begin(), e.end(), h.row(p).begin());
  }

  auto normalize_rows = [&](const Tensor2D& x, std::span<const float> gain) {
    Tensor2D out(x.rows(), x.cols());
    for (std::size_t p = 0; p < x.rows(); ++p) {
      const auto y = rmsnorm(x.row(p), gain, c.norm_eps);
      std::copy(y.begin(), y.end(), out.row(p).begin());
    }
    return out;
  };

  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& lw = weights_.layers[li];
    const Tensor2D xn = normalize_rows(h, lw.attn_norm);
    Tensor2D q = matmul(xn, lw.wq);
    Tensor2D k = matmul(xn, lw.wk);
    const Tensor2D v = matmul(xn, lw.wv);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t head = 0; head < c.n_heads; ++head) {
        apply_rope_inplace(q.row(p).subspan(head * hd, hd), p, c.rope_theta);
      }
      for (std::size_t head = 0; head < c.n_kv_heads; ++head) {
        apply_rope_inplace(k.row(p).subspan(head * hd, hd), p, c.rope_theta);
      }
    }
    cache.keys_[li].assign(k.data().begin(), k.data().end());
    cache.values_[li].assign(v.data().begin(), v.data().end());

    Tensor2D attn(n, c.q_dim());
    for (std::size_t p = 0; p < n; ++p) {
      grouped_query_attention(q.row(p), k.data(), v.data(), p + 1, c.n_heads, c.n_kv_heads, hd,
                              attn.row(p));
    }
    const Tensor2D o = matmul(attn, lw.wo);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += o.data()[i];

    const Tensor2D fn = normalize_rows(h, lw.ffn_norm);
    Tensor2D gate = matmul(fn, lw.w_gate);
    const Tensor2D up = matmul(fn, lw.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate.data()[i] = silu(gate.data()[i]) * up.data()[i];
    const Tensor2D down = matmul(gate, lw.w_down);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += down.data()[i];
  }
  cache.len_ = n;

  const std::size_t first = all_positions ? 0 : n - 1;
  Tensor2D logits(n - first, c.vocab_size);
  for (std::size_t p = first; p < n; ++p) {
    const auto hn = rmsnorm(h.row(p), weights_.final_norm, c.norm_eps);
    const auto row = matvec_transposed(weights_.tok_embedding, hn);
    std::copy(row.begin(), row.end(), logits.row(p - first).begin());
  }
  return logits;
}

std::vector<float> Model::decode_step(TokenId token, KVCache& cache) const {
  const auto& c = config_;
  check_token(token);
  if (cache.n_layers() != c.n_layers || cache.kv_dim() != c.kv_dim()) {
    throw DimensionError("decode_step: cache geometry does not match model");
  }
  if (cache.current_len() >= c.max_seq_len) {
    throw ContextOverflowError("decode_step: context of " + std::to_string(c.max_seq_len) +
                               " tokens is full");
  }
  const std::size_t pos = cache.current_len();
  const std::size_t hd = c.head_dim;

  const auto e = weights_.tok_embedding.row(static_cast<std::size_t>(token));
  std::vector<float> h(e.begin(), e.end());
  std::vector<float> attn(c.q_dim());

  for (std::size_t li = 0; li < c.n_layers; ++li) {
    const auto& lw = weights_.layers[li];
    const auto xn = rmsnorm(h, lw.attn_norm, c.norm_eps);
    auto q = matvec(xn, lw.wq);
    auto k = matvec(xn, lw.wk);
    const auto v = matvec(xn, lw.wv);
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      apply_rope_inplace(std::span<float>(q).subspan(head * hd, hd), pos, c.rope_theta);
    }
    for (std::size_t head = 0; head < c.n_kv_heads; ++head) {
      apply_rope_inplace(std::span<float>(k).subspan(head * hd, hd), pos, c.rope_theta);
    }
    auto& keys = cache.keys_[li];
    auto& values = cache.values_[li];
    keys.insert(keys.end(), k.begin(), k.end());
    values.insert(values.end(), v.begin(), v.end());

    grouped_query_attention(q, keys, values, pos + 1, c.n_heads, c.n_kv_heads, hd, attn);
    const auto o = matvec(attn, lw.wo);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += o[i];

    const auto fn = rmsnorm(h, lw.ffn_norm, c.norm_eps);
    const auto f = swiglu_ffn(fn, lw.w_gate, lw.w_up, lw.w_down);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += f[i];
  }
  cache.len_ = pos + 1;

  const auto hn = rmsnorm(h, weights_.final_norm, c.norm_eps);
  return matvec_transposed(weights_.tok_embedding, hn);
}

}  // namespace mulm
