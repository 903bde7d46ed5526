#include "mulm/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <nlohmann/json.hpp>

#include "mulm/error.hpp"
#include "mulm/tokenizer.hpp"

namespace mulm {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'M', 'U', 'L', 'M'};

struct TensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;  // 0 marks a 1-D tensor
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::span<const std::uint8_t> b, std::size_t at, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(get_u32(b, at + 4 * i));
  }
}

std::size_t align_up(std::size_t n) {
  return (n + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
}

// Canonical order: embedding, then per layer in field order, then final norm.
template <typename Visit>
void for_each_tensor(const ModelConfig& c, Visit&& visit) {
  visit(TensorRef{"tok_embedding", c.vocab_size, c.hidden_size});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    visit(TensorRef{p + "attn_norm", c.hidden_size, 0});
    visit(TensorRef{p + "wq", c.hidden_size, c.q_dim()});
    visit(TensorRef{p + "wk", c.hidden_size, c.kv_dim()});
    visit(TensorRef{p + "wv", c.hidden_size, c.kv_dim()});
    visit(TensorRef{p + "wo", c.q_dim(), c.hidden_size});
    visit(TensorRef{p + "ffn_norm", c.hidden_size, 0});
    visit(TensorRef{p + "w_gate", c.hidden_size, c.intermediate_size});
    visit(TensorRef{p + "w_up", c.hidden_size, c.intermediate_size});
    visit(TensorRef{p + "w_down", c.intermediate_size, c.hidden_size});
  }
  visit(TensorRef{"final_norm", c.hidden_size, 0});
}

std::span<const float> tensor_data(const Weights& w, const std::string& name) {
  if (name == "tok_embedding") return w.tok_embedding.data();
  if (name == "final_norm") return w.final_norm;
  const auto dot = name.find('.', 7);
  const std::size_t layer = std::stoul(name.substr(7, dot - 7));
  const std::string field = name.substr(dot + 1);
  const auto& l = w.layers.at(layer);
  if (field == "attn_norm") return l.attn_norm;
  if (field == "ffn_norm") return l.ffn_norm;
  if (field == "wq") return l.wq.data();
  if (field == "wk") return l.wk.data();
  if (field == "wv") return l.wv.data();
  if (field == "wo") return l.wo.data();
  if (field == "w_gate") return l.w_gate.data();
  if (field == "w_up") return l.w_up.data();
  return l.w_down.data();
}

std::span<float> tensor_data(Weights& w, const std::string& name) {
  const auto c = tensor_data(static_cast<const Weights&>(w), name);
  return {const_cast<float*>(c.data()), c.size()};
}

json config_to_json(const ModelConfig& c) {
  return json{{"hidden_size", c.hidden_size},     {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},             {"n_kv_heads", c.n_kv_heads},
              {"head_dim", c.head_dim},           {"intermediate_size", c.intermediate_size},
              {"vocab_size", c.vocab_size},       {"max_seq_len", c.max_seq_len},
              {"rope_theta", c.rope_theta},       {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.intermediate_size = j.at("intermediate_size").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.norm_eps = j.at("norm_eps").get<float>();
  return c;
}

}  // namespace

std::vector<std::uint8_t> serialize_weights(const ModelConfig& config, const Weights& weights) {
  config.validate();
  weights.check_shapes(config);

  // Offsets depend on the header length, which depends on the offsets' digit
  // counts; iterate until the layout is stable.
  json header;
  std::string header_text;
  std::size_t data_start = 0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    json manifest = json::array();
    std::size_t offset = data_start;
    for_each_tensor(config, [&](const TensorRef& t) {
      offset = align_up(offset);
      json shape = t.cols == 0 ? json::array({t.rows}) : json::array({t.rows, t.cols});
      manifest.push_back(json{{"name", t.name}, {"shape", shape}, {"offset", offset}});
      offset += 4 * t.rows * (t.cols == 0 ? 1 : t.cols);
    });
    header = config_to_json(config);
    header["param_count"] = param_count(config);
    header["chat_markers"] = json{{"user", std::string(kUserMarker)},
                                  {"assistant", std::string(kAssistantMarker)},
                                  {"end", std::string(kEndMarker)}};
    header["tensors"] = std::move(manifest);
    header_text = header.dump();
    const std::size_t needed = align_up(12 + header_text.size());
    if (needed == data_start) break;
    data_start = needed;
  }

  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kWeightsFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.insert(out.end(), header_text.begin(), header_text.end());
  for (const auto& entry : header["tensors"]) {
    const std::size_t offset = entry["offset"].get<std::size_t>();
    out.resize(offset, 0);
    put_floats(out, tensor_data(weights, entry["name"].get<std::string>()));
  }
  return out;
}

LoadedWeights parse_weights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("weights: bad magic, expected MULM");
  }
  if (bytes.size() < 12) throw IoError("weights: truncated preamble");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kWeightsFormatVersion) {
    throw FormatError("weights: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(header_len)) {
    throw IoError("weights: truncated header");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("weights: header is not valid JSON: ") + e.what());
  }

  LoadedWeights out;
  try {
    out.config = config_from_json(header);
  } catch (const json::exception& e) {
    throw FormatError(std::string("weights: header missing config field: ") + e.what());
  }
  out.config.validate();
  if (!header.contains("param_count") ||
      header["param_count"].get<std::uint64_t>() != param_count(out.config)) {
    throw IntegrityError("weights: declared param_count does not match config (expected " +
                         std::to_string(param_count(out.config)) + ")");
  }

  out.weights = Weights::zeros(out.config);
  const auto& manifest = header.at("tensors");
  std::size_t index = 0;
  for_each_tensor(out.config, [&](const TensorRef& t) {
    if (index >= manifest.size()) throw IntegrityError("weights: manifest missing " + t.name);
    const auto& entry = manifest[index++];
    if (entry.at("name").get<std::string>() != t.name) {
      throw IntegrityError("weights: expected tensor " + t.name + ", found " +
                           entry.at("name").get<std::string>());
    }
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto expected = t.cols == 0 ? std::vector<std::size_t>{t.rows}
                                      : std::vector<std::size_t>{t.rows, t.cols};
    if (shape != expected) throw IntegrityError("weights: shape mismatch for " + t.name);
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    if (offset % kTensorAlignment != 0) {
      throw FormatError("weights: tensor " + t.name + " is not 64-byte aligned");
    }
    auto dst = tensor_data(out.weights, t.name);
    if (offset + 4 * dst.size() > bytes.size()) {
      throw IoError("weights: payload truncated in " + t.name);
    }
    get_floats(bytes, offset, dst);
  });
  if (index != manifest.size()) throw IntegrityError("weights: manifest has extra tensors");
  return out;
}

LoadedWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_weights(bytes);
}

void save_weights(const std::filesystem::path& path, const ModelConfig& config,
                  const Weights& weights) {
  const auto bytes = serialize_weights(config, weights);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace mulm
