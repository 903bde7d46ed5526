#pragma once
// A hand-wired model whose greedy output is a fixed token chain. Embeddings
// are one-hot, attention is zeroed out, and the FFN maps token i to a large
// activation on next(i), so argmax(logits after i) == next(i) at any position.

#include <memory>
#include <string>
#include <vector>

#include "mulm/model.hpp"
#include "mulm/tokenizer.hpp"

namespace scripted {

struct ChainModel {
  mulm::TokenizerModel tok;
  std::unique_ptr<mulm::Model> model;
  std::vector<mulm::TokenId> chain;  // tokens of the scripted answer
};

inline mulm::TokenizerModel train_on(const std::string& text, std::size_t copies = 4) {
  std::vector<std::string> corpus(copies, text);
  return mulm::train_bpe(corpus, 1024);
}

// After <|assistant|> the model emits `answer` token by token, then <|end|>.
inline ChainModel make_chain_model(const std::string& answer) {
  ChainModel cm;
  cm.tok = train_on(answer);
  cm.chain = cm.tok.encode(answer);
  const std::size_t d = (cm.tok.vocab_size() + 15) / 16 * 16;

  mulm::ModelConfig c;
  c.hidden_size = d;
  c.n_layers = 1;
  c.n_heads = 8;
  c.n_kv_heads = 2;
  c.head_dim = d / 8;
  c.intermediate_size = d;
  c.vocab_size = d;
  c.max_seq_len = 512;

  mulm::Weights w = mulm::Weights::zeros(c);
  std::vector<std::size_t> next(d, static_cast<std::size_t>(mulm::TokenizerModel::kEndId));
  mulm::TokenId prev = mulm::TokenizerModel::kAssistantId;
  for (const mulm::TokenId t : cm.chain) {
    next[static_cast<std::size_t>(prev)] = static_cast<std::size_t>(t);
    prev = t;
  }
  for (std::size_t i = 0; i < d; ++i) {
    w.tok_embedding(i, i) = 1.0f;
    w.layers[0].w_gate(i, i) = 1.0f;
    w.layers[0].w_up(i, i) = 1.0f;
    w.layers[0].w_down(i, next[i]) = 1.0f;
  }
  cm.model = std::make_unique<mulm::Model>(c, std::move(w));
  return cm;
}

}  // namespace scripted
