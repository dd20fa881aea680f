#include "rocr/model.hpp"

#include <algorithm>
#include <cmath>

#include "rocr/error.hpp"
#include "rocr/io.hpp"

namespace rocr {

namespace fs = std::filesystem;

std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kLayerNorm: return "layernorm";
    case NormKind::kRmsNorm: return "rmsnorm";
    case NormKind::kNone: return "none";
  }
  return "none";
}

std::string_view to_string(MlpKind kind) { return kind == MlpKind::kGated ? "gated" : "two-matrix"; }

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
    case Activation::kSilu: return "silu";
  }
  return "gelu";
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) fail(ErrorKind::kConfig, std::string("config: ") + name + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(d_mlp, "d_mlp");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) fail(ErrorKind::kConfig, "config: d_model must be divisible by n_heads");
  if (rope && d_head() % 2 != 0) fail(ErrorKind::kConfig, "config: rotary embeddings need an even head width");
  if (!(norm_eps > 0.0)) fail(ErrorKind::kConfig, "config: norm_eps must be positive");
  if (!(rope_theta > 0.0)) fail(ErrorKind::kConfig, "config: rope_theta must be positive");
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kKnown = {"n_layers",  "d_model",    "d_mlp",      "n_heads",
                                                  "vocab_size", "max_seq_len", "norm_kind", "mlp_kind",
                                                  "activation", "rope",       "rope_theta", "norm_eps"};
  if (!j.is_object()) fail(ErrorKind::kParse, "config.json: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      fail(ErrorKind::kParse, "config.json: unknown key '" + key + "'");
    }
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    const auto norm = j.at("norm_kind").get<std::string>();
    if (norm == "layernorm") {
      c.norm_kind = NormKind::kLayerNorm;
    } else if (norm == "rmsnorm") {
      c.norm_kind = NormKind::kRmsNorm;
    } else if (norm == "none") {
      c.norm_kind = NormKind::kNone;
    } else {
      fail(ErrorKind::kParse, "config.json: unknown norm_kind '" + norm + "'");
    }
    const auto mlp = j.at("mlp_kind").get<std::string>();
    if (mlp == "two-matrix") {
      c.mlp_kind = MlpKind::kTwoMatrix;
    } else if (mlp == "gated") {
      c.mlp_kind = MlpKind::kGated;
    } else {
      fail(ErrorKind::kParse, "config.json: unknown mlp_kind '" + mlp + "'");
    }
    const auto act = j.value("activation", std::string(c.mlp_kind == MlpKind::kGated ? "silu" : "gelu"));
    if (act == "relu") {
      c.activation = Activation::kRelu;
    } else if (act == "gelu") {
      c.activation = Activation::kGelu;
    } else if (act == "silu") {
      c.activation = Activation::kSilu;
    } else {
      fail(ErrorKind::kParse, "config.json: unknown activation '" + act + "'");
    }
    c.rope = j.value("rope", true);
    c.rope_theta = j.value("rope_theta", 10000.0);
    c.norm_eps = j.value("norm_eps", 1e-5);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("config.json: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},
          {"d_model", d_model},
          {"d_mlp", d_mlp},
          {"n_heads", n_heads},
          {"vocab_size", vocab_size},
          {"max_seq_len", max_seq_len},
          {"norm_kind", std::string(to_string(norm_kind))},
          {"mlp_kind", std::string(to_string(mlp_kind))},
          {"activation", std::string(to_string(activation))},
          {"rope", rope},
          {"rope_theta", rope_theta},
          {"norm_eps", norm_eps}};
}

std::vector<std::pair<std::string, std::vector<std::int64_t>>> required_tensors(const ModelConfig& c) {
  const std::int64_t d = c.d_model, f = c.d_mlp, v = c.vocab_size;
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
  out.push_back({"embed", {v, d}});
  out.push_back({"unembed", {v, d}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string ls = std::to_string(l);
    for (const char* p : {"q", "k", "v", "o"}) out.push_back({"attn." + ls + "." + p, {d, d}});
    if (c.mlp_kind == MlpKind::kTwoMatrix) {
      out.push_back({"mlp." + ls + ".fc", {f, d}});
      out.push_back({"mlp." + ls + ".proj", {d, f}});
    } else {
      out.push_back({"mlp." + ls + ".gate", {f, d}});
      out.push_back({"mlp." + ls + ".up", {f, d}});
      out.push_back({"mlp." + ls + ".down", {d, f}});
    }
    if (c.norm_kind != NormKind::kNone) {
      out.push_back({"norm." + ls + ".attn", {d}});
      out.push_back({"norm." + ls + ".mlp", {d}});
      if (c.norm_kind == NormKind::kLayerNorm) {
        out.push_back({"norm." + ls + ".attn_bias", {d}});
        out.push_back({"norm." + ls + ".mlp_bias", {d}});
      }
    }
  }
  if (c.norm_kind != NormKind::kNone) {
    out.push_back({"norm.final", {d}});
    if (c.norm_kind == NormKind::kLayerNorm) out.push_back({"norm.final_bias", {d}});
  }
  return out;
}

namespace {

Mat to_matrix(const Tensor& t) {
  const auto rows = t.shape[0];
  const auto cols = t.shape.size() > 1 ? t.shape[1] : 1;
  Mat m(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) m(r, c) = t.data[r * cols + c];
  }
  return m;
}

Tensor from_matrix(const Mat& m, DType dtype) {
  Tensor t;
  t.dtype = dtype;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = m(r, c);
  }
  return t;
}

Tensor from_vector(const Vec& v, DType dtype) {
  Tensor t;
  t.dtype = dtype;
  t.shape = {v.size()};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

}  // namespace

ModelBundle bundle_from_tensors(const ModelConfig& config, Tokenizer tokenizer, const TensorMap& tensors) {
  config.validate();
  if (tokenizer.vocab_size() != static_cast<std::size_t>(config.vocab_size)) {
    fail(ErrorKind::kShape, "tokenizer vocab size " + std::to_string(tokenizer.vocab_size()) +
                                " does not match config vocab_size " + std::to_string(config.vocab_size));
  }
  ModelBundle b;
  b.config = config;
  b.tokenizer = std::move(tokenizer);
  bool any_f64 = false;
  for (const auto& [name, shape] : required_tensors(config)) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::kMissingTensor, "missing tensor '" + name + "'");
    if (it->second.shape != shape) {
      fail(ErrorKind::kShape, "tensor '" + name + "' has shape " + shape_string(it->second.shape) + ", expected " +
                                  shape_string(shape));
    }
    for (double v : it->second.data) {
      if (!std::isfinite(v)) fail(ErrorKind::kCorruption, "tensor '" + name + "' contains a non-finite value");
    }
    any_f64 = any_f64 || it->second.dtype == DType::kF64;
  }
  b.storage_dtype = any_f64 ? DType::kF64 : DType::kF32;

  auto mat = [&](const std::string& name) { return to_matrix(tensors.at(name)); };
  auto vec = [&](const std::string& name) -> Vec { return to_matrix(tensors.at(name)).col(0); };
  b.embed = mat("embed");
  b.unembed = mat("unembed");
  b.layers.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string ls = std::to_string(l);
    auto& lw = b.layers[l];
    lw.wq = mat("attn." + ls + ".q");
    lw.wk = mat("attn." + ls + ".k");
    lw.wv = mat("attn." + ls + ".v");
    lw.wo = mat("attn." + ls + ".o");
    if (config.mlp_kind == MlpKind::kTwoMatrix) {
      lw.fc = mat("mlp." + ls + ".fc");
      lw.proj = mat("mlp." + ls + ".proj");
    } else {
      lw.gate = mat("mlp." + ls + ".gate");
      lw.up = mat("mlp." + ls + ".up");
      lw.down = mat("mlp." + ls + ".down");
    }
    if (config.norm_kind != NormKind::kNone) {
      lw.attn_norm.weight = vec("norm." + ls + ".attn");
      lw.mlp_norm.weight = vec("norm." + ls + ".mlp");
      if (config.norm_kind == NormKind::kLayerNorm) {
        lw.attn_norm.bias = vec("norm." + ls + ".attn_bias");
        lw.mlp_norm.bias = vec("norm." + ls + ".mlp_bias");
      }
    }
  }
  if (config.norm_kind != NormKind::kNone) {
    b.final_norm.weight = vec("norm.final");
    if (config.norm_kind == NormKind::kLayerNorm) b.final_norm.bias = vec("norm.final_bias");
  }
  return b;
}

Mat& ModelBundle::down_projection(int layer) {
  if (layer < 0 || layer >= config.n_layers) {
    fail(ErrorKind::kIndex, "layer " + std::to_string(layer) + " out of range");
  }
  return config.mlp_kind == MlpKind::kTwoMatrix ? layers[layer].proj : layers[layer].down;
}

const Mat& ModelBundle::down_projection(int layer) const {
  return const_cast<ModelBundle*>(this)->down_projection(layer);
}

TensorMap ModelBundle::to_tensors() const {
  TensorMap t;
  const DType dt = storage_dtype;
  t["embed"] = from_matrix(embed, dt);
  t["unembed"] = from_matrix(unembed, dt);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string ls = std::to_string(l);
    const auto& lw = layers[l];
    t["attn." + ls + ".q"] = from_matrix(lw.wq, dt);
    t["attn." + ls + ".k"] = from_matrix(lw.wk, dt);
    t["attn." + ls + ".v"] = from_matrix(lw.wv, dt);
    t["attn." + ls + ".o"] = from_matrix(lw.wo, dt);
    if (config.mlp_kind == MlpKind::kTwoMatrix) {
      t["mlp." + ls + ".fc"] = from_matrix(lw.fc, dt);
      t["mlp." + ls + ".proj"] = from_matrix(lw.proj, dt);
    } else {
      t["mlp." + ls + ".gate"] = from_matrix(lw.gate, dt);
      t["mlp." + ls + ".up"] = from_matrix(lw.up, dt);
      t["mlp." + ls + ".down"] = from_matrix(lw.down, dt);
    }
    if (config.norm_kind != NormKind::kNone) {
      t["norm." + ls + ".attn"] = from_vector(lw.attn_norm.weight, dt);
      t["norm." + ls + ".mlp"] = from_vector(lw.mlp_norm.weight, dt);
      if (config.norm_kind == NormKind::kLayerNorm) {
        t["norm." + ls + ".attn_bias"] = from_vector(lw.attn_norm.bias, dt);
        t["norm." + ls + ".mlp_bias"] = from_vector(lw.mlp_norm.bias, dt);
      }
    }
  }
  if (config.norm_kind != NormKind::kNone) {
    t["norm.final"] = from_vector(final_norm.weight, dt);
    if (config.norm_kind == NormKind::kLayerNorm) t["norm.final_bias"] = from_vector(final_norm.bias, dt);
  }
  return t;
}

std::string ModelBundle::apply_template(const std::string& text) const {
  if (!chat_template) return text;
  const auto pos = chat_template->find("{input}");
  if (pos == std::string::npos) return *chat_template;
  return chat_template->substr(0, pos) + text + chat_template->substr(pos + 7);
}

std::string ModelBundle::digest() const {
  // Hash the full 64-bit view so in-memory edits below f32 resolution still
  // change the digest.
  TensorMap tensors = to_tensors();
  for (auto& [name, t] : tensors) t.dtype = DType::kF64;
  const auto bytes = serialize_safetensors(tensors);
  Sha256 h;
  h.update(config.to_json().dump());
  h.update(tokenizer.to_json().dump());
  h.update(chat_template.value_or(""));
  h.update(bytes);
  return h.hex();
}

ModelBundle load_model(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::kIo, "model directory '" + dir.string() + "' does not exist");
  nlohmann::json config_json, tokenizer_json;
  try {
    config_json = nlohmann::json::parse(read_text_file(dir / "config.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("config.json: ") + e.what());
  }
  try {
    tokenizer_json = nlohmann::json::parse(read_text_file(dir / "tokenizer.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, std::string("tokenizer.json: ") + e.what());
  }
  const ModelConfig config = ModelConfig::from_json(config_json);
  Tokenizer tokenizer = Tokenizer::from_json(tokenizer_json);
  const TensorMap tensors = read_safetensors(dir / "model.safetensors");
  ModelBundle bundle = bundle_from_tensors(config, std::move(tokenizer), tensors);
  if (fs::exists(dir / "template.txt")) {
    std::string tmpl = read_text_file(dir / "template.txt");
    while (!tmpl.empty() && (tmpl.back() == '\n' || tmpl.back() == '\r')) tmpl.pop_back();
    if (tmpl.find("{input}") == std::string::npos) {
      fail(ErrorKind::kParse, "template.txt must contain the {input} placeholder");
    }
    bundle.chat_template = std::move(tmpl);
  }
  return bundle;
}

void save_model(const ModelBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  write_text_file(dir / "config.json", bundle.config.to_json().dump(2) + "\n");
  write_text_file(dir / "tokenizer.json", bundle.tokenizer.to_json().dump(2) + "\n");
  write_safetensors(dir / "model.safetensors", bundle.to_tensors());
  if (bundle.chat_template) {
    write_text_file(dir / "template.txt", *bundle.chat_template + "\n");
  } else if (fs::exists(dir / "template.txt")) {
    fs::remove(dir / "template.txt");
  }
}

}  // namespace rocr
