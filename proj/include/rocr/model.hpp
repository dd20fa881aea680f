#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rocr/safetensors.hpp"
#include "rocr/tokenizer.hpp"

namespace rocr {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// `none` is not a norm found in released checkpoints; it exists so handcrafted
// fixture models can expose the raw residual stream to the MLP.
enum class NormKind { kLayerNorm, kRmsNorm, kNone };
enum class MlpKind { kTwoMatrix, kGated };
enum class Activation { kRelu, kGelu, kSilu };

struct ModelConfig {
  int n_layers = 1;
  int d_model = 1;
  int d_mlp = 1;
  int n_heads = 1;
  int vocab_size = 1;
  int max_seq_len = 1;
  NormKind norm_kind = NormKind::kRmsNorm;
  MlpKind mlp_kind = MlpKind::kTwoMatrix;
  Activation activation = Activation::kGelu;
  bool rope = true;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  int d_head() const { return d_model / n_heads; }

  // Throws kConfig on any violated invariant.
  void validate() const;

  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct NormWeights {
  Vec weight;
  Vec bias;  // layernorm only; empty otherwise
};

// Weight matrices use the [out, in] convention: y = W x.
struct LayerWeights {
  Mat wq, wk, wv, wo;      // d_model x d_model
  Mat fc, proj;            // two-matrix: d_mlp x d_model, d_model x d_mlp
  Mat gate, up, down;      // gated:      d_mlp x d_model (x2), d_model x d_mlp
  NormWeights attn_norm, mlp_norm;
};

struct ModelBundle {
  ModelConfig config;
  Tokenizer tokenizer;
  Mat embed;    // vocab x d_model
  Mat unembed;  // vocab x d_model
  std::vector<LayerWeights> layers;
  NormWeights final_norm;
  std::optional<std::string> chat_template;  // contains "{input}"
  DType storage_dtype = DType::kF32;

  int n_layers() const { return config.n_layers; }

  // The MLP down-projection of layer l (proj or down depending on mlp_kind).
  Mat& down_projection(int layer);
  const Mat& down_projection(int layer) const;

  // Builds the tensor map under canonical names (embed, unembed,
  // attn.{l}.{q,k,v,o}, mlp.{l}.{fc,proj|gate,up,down}, norm.{l}.{attn,mlp},
  // norm.{l}.{attn_bias,mlp_bias}, norm.final, norm.final_bias).
  TensorMap to_tensors() const;

  // Applies the chat template (if any) to a raw prompt.
  std::string apply_template(const std::string& text) const;

  std::string digest() const;
};

// Canonical tensor names and shapes required by a config.
std::vector<std::pair<std::string, std::vector<std::int64_t>>> required_tensors(const ModelConfig& config);

// Validates names, shapes and finiteness, then assembles a bundle.
ModelBundle bundle_from_tensors(const ModelConfig& config, Tokenizer tokenizer, const TensorMap& tensors);

// Reads config.json, model.safetensors, tokenizer.json and optional
// template.txt from a directory.
ModelBundle load_model(const std::filesystem::path& dir);
void save_model(const ModelBundle& bundle, const std::filesystem::path& dir);

std::string_view to_string(NormKind kind);
std::string_view to_string(MlpKind kind);
std::string_view to_string(Activation kind);

}  // namespace rocr
