#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "differ/objectives.hpp"
#include "differ/rng.hpp"
#include "differ/types.hpp"

namespace differ {

enum class EncoderKind { kToyMlp, kToyTransformer, kPluggable };

std::string encoder_kind_name(EncoderKind kind);
EncoderKind encoder_kind_from_name(const std::string& name);

struct ModelConfig {
  Index feature_dim = 64;      // D, width of the entangled image feature
  Index subspace_dim = 32;     // d, width of each projected subspace
  Index num_nonbiometric = 2;  // N, number of non-biometric projection heads
  Index num_classes = 2;       // C
  Index num_cameras = 1;
  EncoderKind encoder_kind = EncoderKind::kToyMlp;

  // toy-mlp
  Index input_dim = 96;
  Index hidden_dim = 128;

  // toy-transformer; the input vector is a flat image_side x image_side image
  Index image_side = 16;
  Index patch_size = 4;
  Index embed_dim = 32;
  Index num_heads = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// One trainable array: float32 storage, float64 gradient accumulator.
struct Param {
  std::string name;
  MatrixF value;
  Matrix grad;
  bool decay = true;

  void setup(std::string param_name, Index rows, Index cols, bool apply_decay);
  void init_truncated_normal(Rng& rng, double sigma = 0.02);
  Matrix values() const { return value.cast<double>(); }
};

struct FeatureBundle {
  Vector f_i;      // D
  Vector f_i_b;    // d
  Matrix f_i_n;    // N x d
  Vector logits;   // C
};

// Batched counterpart used by the trainer; rows are samples.
struct FeatureBatch {
  Matrix f_i;
  Matrix logits;
  Matrix f_i_b;
  std::vector<Matrix> f_i_n;
};

// Pluggable visual encoder contract. Training implementations cache the
// activations of the last forward() call for the matching backward().
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Index input_dim() const = 0;
  virtual Index feature_dim() const = 0;
  virtual Matrix forward(const Matrix& inputs, const std::vector<int>& cameras) = 0;
  virtual void backward(const Matrix& grad_features) = 0;
  virtual Matrix infer(const Matrix& inputs, const std::vector<int>& cameras) const = 0;
  virtual std::vector<Param*> params() = 0;
};

// y = x W^T + b with cached input for the backward pass.
class AffineHead {
 public:
  AffineHead(std::string name, Index out_dim, Index in_dim);
  void init(Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out);
  Matrix apply(const Matrix& x) const;
  Vector apply(const Vector& x) const;

  std::vector<Param*> params();
  const Param& weight() const { return weight_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  Param weight_;  // out x in
  Param bias_;    // out
  Matrix cached_input_;
};

// Visual encoder plus classifier, biometric head and N non-biometric heads
// behind gradient reversal.
class DifferModel {
 public:
  DifferModel(const ModelConfig& config, std::uint64_t seed);
  DifferModel(const ModelConfig& config, std::unique_ptr<Encoder> encoder, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  GrlConfig& grl() { return grl_; }
  const GrlConfig& grl() const { return grl_; }
  Encoder& encoder() { return *encoder_; }

  // Single-sample operations.
  Vector encode_image(const VectorF& input, int camera) const;
  Vector project_biometric(const Vector& f_i) const;
  Vector project_nonbiometric(const Vector& f_i, Index k) const;
  Vector classify(const Vector& f_i) const;
  FeatureBundle forward_bundle(const VectorF& input, int camera) const;

  // Training path. with_grl=false ablates gradient reversal (the forward
  // values are identical either way).
  FeatureBatch forward_batch(const Matrix& inputs, const std::vector<int>& cameras,
                             bool with_grl = true);
  void backward_batch(const Matrix& grad_logits, const Matrix& grad_f_i, const Matrix& grad_f_b,
                      const std::vector<Matrix>& grad_f_n);

  // Inference without touching training caches.
  Matrix infer_features(const Matrix& inputs, const std::vector<int>& cameras) const;

  std::vector<Param*> params();
  void zero_grads();

  void save(const std::filesystem::path& path) const;
  static DifferModel load(const std::filesystem::path& path);

 private:
  void validate_batch(const Matrix& inputs, const std::vector<int>& cameras) const;

  ModelConfig config_;
  GrlConfig grl_;
  std::unique_ptr<Encoder> encoder_;
  AffineHead classifier_;
  AffineHead head_b_;
  std::vector<AffineHead> heads_n_;
  bool cached_with_grl_ = true;
};

}  // namespace differ
