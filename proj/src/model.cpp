#include "differ/model.hpp"

#include <cmath>
#include <numbers>

#include "differ/archive.hpp"
#include "differ/error.hpp"

namespace differ {

std::string encoder_kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kToyMlp:
      return "toy-mlp";
    case EncoderKind::kToyTransformer:
      return "toy-transformer";
    case EncoderKind::kPluggable:
      return "pluggable";
  }
  throw ValidationError("unknown encoder kind");
}

EncoderKind encoder_kind_from_name(const std::string& name) {
  if (name == "toy-mlp") return EncoderKind::kToyMlp;
  if (name == "toy-transformer") return EncoderKind::kToyTransformer;
  if (name == "pluggable") return EncoderKind::kPluggable;
  throw ValidationError("unknown encoder kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (feature_dim <= 0) throw ValidationError("model: feature_dim must be positive");
  if (subspace_dim <= 0) throw ValidationError("model: subspace_dim must be positive");
  if (subspace_dim > feature_dim) {
    throw ValidationError("model: subspace_dim must not exceed feature_dim");
  }
  if (num_nonbiometric < 0) throw ValidationError("model: num_nonbiometric must be >= 0");
  if (num_classes < 2) throw ValidationError("model: num_classes must be >= 2");
  if (num_cameras <= 0) throw ValidationError("model: num_cameras must be positive");
  if (encoder_kind == EncoderKind::kToyMlp) {
    if (input_dim <= 0 || hidden_dim <= 0) {
      throw ValidationError("model: toy-mlp dims must be positive");
    }
  } else if (encoder_kind == EncoderKind::kToyTransformer) {
    if (image_side <= 0 || patch_size <= 0 || embed_dim <= 0 || num_heads <= 0) {
      throw ValidationError("model: toy-transformer dims must be positive");
    }
    if (image_side % patch_size != 0) {
      throw ValidationError("model: image_side must be divisible by patch_size");
    }
    if (embed_dim % num_heads != 0) {
      throw ValidationError("model: embed_dim must be divisible by num_heads");
    }
  }
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["feature_dim"] = feature_dim;
  j["subspace_dim"] = subspace_dim;
  j["num_nonbiometric"] = num_nonbiometric;
  j["num_classes"] = num_classes;
  j["num_cameras"] = num_cameras;
  j["encoder_kind"] = encoder_kind_name(encoder_kind);
  j["input_dim"] = input_dim;
  j["hidden_dim"] = hidden_dim;
  j["image_side"] = image_side;
  j["patch_size"] = patch_size;
  j["embed_dim"] = embed_dim;
  j["num_heads"] = num_heads;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
  cfg.subspace_dim = j.value("subspace_dim", cfg.subspace_dim);
  cfg.num_nonbiometric = j.value("num_nonbiometric", cfg.num_nonbiometric);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.num_cameras = j.value("num_cameras", cfg.num_cameras);
  if (j.contains("encoder_kind")) {
    cfg.encoder_kind = encoder_kind_from_name(j.at("encoder_kind").get<std::string>());
  }
  cfg.input_dim = j.value("input_dim", cfg.input_dim);
  cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
  cfg.image_side = j.value("image_side", cfg.image_side);
  cfg.patch_size = j.value("patch_size", cfg.patch_size);
  cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
  cfg.num_heads = j.value("num_heads", cfg.num_heads);
  return cfg;
}

void Param::setup(std::string param_name, Index rows, Index cols, bool apply_decay) {
  name = std::move(param_name);
  value = MatrixF::Zero(rows, cols);
  grad = Matrix::Zero(rows, cols);
  decay = apply_decay;
}

void Param::init_truncated_normal(Rng& rng, double sigma) {
  for (Index r = 0; r < value.rows(); ++r) {
    for (Index c = 0; c < value.cols(); ++c) {
      value(r, c) = static_cast<float>(rng.truncated_normal(sigma));
    }
  }
}

namespace {

void check_cameras(const std::vector<int>& cameras, Index num_cameras, Index batch) {
  if (static_cast<Index>(cameras.size()) != batch) {
    throw ValidationError("model: camera ids do not match batch size");
  }
  for (int cam : cameras) {
    if (cam < 0 || cam >= num_cameras) {
      throw ValidationError("model: camera id " + std::to_string(cam) + " out of range [0, " +
                            std::to_string(num_cameras) + ")");
    }
  }
}

// --- toy-mlp -----------------------------------------------------------

// Two affine layers with tanh in between; the camera embedding is added to
// the first hidden pre-activation.
class MlpEncoder final : public Encoder {
 public:
  MlpEncoder(const ModelConfig& cfg, Rng& rng)
      : input_dim_(cfg.input_dim), hidden_dim_(cfg.hidden_dim), out_dim_(cfg.feature_dim),
        num_cameras_(cfg.num_cameras) {
    w1_.setup("encoder.w1", hidden_dim_, input_dim_, true);
    b1_.setup("encoder.b1", hidden_dim_, 1, false);
    cam_.setup("encoder.cam_embed", num_cameras_, hidden_dim_, false);
    w2_.setup("encoder.w2", out_dim_, hidden_dim_, true);
    b2_.setup("encoder.b2", out_dim_, 1, false);
    w1_.init_truncated_normal(rng);
    cam_.init_truncated_normal(rng);
    w2_.init_truncated_normal(rng);
  }

  Index input_dim() const override { return input_dim_; }
  Index feature_dim() const override { return out_dim_; }

  Matrix forward(const Matrix& inputs, const std::vector<int>& cameras) override {
    cached_inputs_ = inputs;
    cached_cameras_ = cameras;
    return run(inputs, cameras, &cached_hidden_);
  }

  Matrix infer(const Matrix& inputs, const std::vector<int>& cameras) const override {
    return run(inputs, cameras, nullptr);
  }

  void backward(const Matrix& grad_features) override {
    const Matrix w2 = w2_.values();
    w2_.grad.noalias() += grad_features.transpose() * cached_hidden_;
    b2_.grad.noalias() += grad_features.colwise().sum().transpose();
    const Matrix grad_hidden = grad_features * w2;
    const Matrix grad_pre =
        grad_hidden.array() * (1.0 - cached_hidden_.array().square());
    w1_.grad.noalias() += grad_pre.transpose() * cached_inputs_;
    b1_.grad.noalias() += grad_pre.colwise().sum().transpose();
    for (Index i = 0; i < grad_pre.rows(); ++i) {
      cam_.grad.row(cached_cameras_[static_cast<std::size_t>(i)]) += grad_pre.row(i);
    }
  }

  std::vector<Param*> params() override { return {&w1_, &b1_, &cam_, &w2_, &b2_}; }

 private:
  Matrix run(const Matrix& inputs, const std::vector<int>& cameras, Matrix* hidden_out) const {
    check_cameras(cameras, num_cameras_, inputs.rows());
    const Matrix w1 = w1_.values();
    const Matrix cam = cam_.values();
    Matrix pre = inputs * w1.transpose();
    pre.rowwise() += b1_.values().col(0).transpose();
    for (Index i = 0; i < pre.rows(); ++i) {
      pre.row(i) += cam.row(cameras[static_cast<std::size_t>(i)]);
    }
    const Matrix hidden = pre.array().tanh();
    if (hidden_out) *hidden_out = hidden;
    Matrix out = hidden * w2_.values().transpose();
    out.rowwise() += b2_.values().col(0).transpose();
    return out;
  }

  Index input_dim_, hidden_dim_, out_dim_, num_cameras_;
  Param w1_, b1_, cam_, w2_, b2_;
  Matrix cached_inputs_, cached_hidden_;
  std::vector<int> cached_cameras_;
};

// --- toy-transformer ---------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

constexpr double kLnEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;   // T x E
  Vector inv;    // T
};

Matrix layernorm_forward(const Matrix& x, const Param& gamma, const Param& beta,
                         LayerNormCache* cache) {
  const Index t = x.rows(), e = x.cols();
  const Vector g = gamma.values().col(0);
  const Vector b = beta.values().col(0);
  Matrix y(t, e);
  Matrix xhat(t, e);
  Vector inv(t);
  for (Index r = 0; r < t; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv[r] = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = (x.row(r).array() - mu) * inv[r];
    y.row(r) = xhat.row(r).cwiseProduct(g.transpose()) + b.transpose();
  }
  if (cache) {
    cache->xhat = xhat;
    cache->inv = inv;
  }
  return y;
}

Matrix layernorm_backward(const Matrix& grad_y, const LayerNormCache& cache, Param& gamma,
                          Param& beta) {
  const Index t = grad_y.rows(), e = grad_y.cols();
  const Vector g = gamma.values().col(0);
  Matrix grad_x(t, e);
  for (Index r = 0; r < t; ++r) {
    const Eigen::RowVectorXd dxhat = grad_y.row(r).cwiseProduct(g.transpose());
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
    grad_x.row(r) =
        (dxhat.array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat) * cache.inv[r];
    gamma.grad.col(0) += grad_y.row(r).cwiseProduct(cache.xhat.row(r)).transpose();
    beta.grad.col(0) += grad_y.row(r).transpose();
  }
  return grad_x;
}

struct AttentionCache {
  Matrix input;                 // block input, T x E
  LayerNormCache ln1;
  Matrix normed;                // T x E
  Matrix q, k, v;               // T x E
  std::vector<Matrix> probs;    // per head, T x T
  Matrix concat;                // T x E
  Matrix mid;                   // input + attention output
  LayerNormCache ln2;
  Matrix normed2;               // T x E
  Matrix mlp_pre;               // T x M
  Matrix mlp_act;               // T x M
};

struct TransformerBlockParams {
  Param ln1_g, ln1_b;
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  Param ln2_g, ln2_b;
  Param mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  void setup(const std::string& prefix, Index e, Index m) {
    ln1_g.setup(prefix + ".ln1.gamma", e, 1, true);
    ln1_b.setup(prefix + ".ln1.beta", e, 1, false);
    wq.setup(prefix + ".attn.wq", e, e, true);
    bq.setup(prefix + ".attn.bq", e, 1, false);
    wk.setup(prefix + ".attn.wk", e, e, true);
    bk.setup(prefix + ".attn.bk", e, 1, false);
    wv.setup(prefix + ".attn.wv", e, e, true);
    bv.setup(prefix + ".attn.bv", e, 1, false);
    wo.setup(prefix + ".attn.wo", e, e, true);
    bo.setup(prefix + ".attn.bo", e, 1, false);
    ln2_g.setup(prefix + ".ln2.gamma", e, 1, true);
    ln2_b.setup(prefix + ".ln2.beta", e, 1, false);
    mlp_w1.setup(prefix + ".mlp.w1", m, e, true);
    mlp_b1.setup(prefix + ".mlp.b1", m, 1, false);
    mlp_w2.setup(prefix + ".mlp.w2", e, m, true);
    mlp_b2.setup(prefix + ".mlp.b2", e, 1, false);
  }

  void init(Rng& rng) {
    ln1_g.value.setOnes();
    ln2_g.value.setOnes();
    wq.init_truncated_normal(rng);
    wk.init_truncated_normal(rng);
    wv.init_truncated_normal(rng);
    wo.init_truncated_normal(rng);
    mlp_w1.init_truncated_normal(rng);
    mlp_w2.init_truncated_normal(rng);
  }

  std::vector<Param*> params() {
    return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
            &ln2_g, &ln2_b, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2};
  }
};

// Two pre-norm blocks over patch tokens plus a classification token; the
// camera embedding joins the positional embedding on every token.
class TransformerEncoder final : public Encoder {
 public:
  TransformerEncoder(const ModelConfig& cfg, Rng& rng)
      : side_(cfg.image_side), patch_(cfg.patch_size), embed_(cfg.embed_dim),
        heads_(cfg.num_heads), out_dim_(cfg.feature_dim), num_cameras_(cfg.num_cameras) {
    grid_ = side_ / patch_;
    tokens_ = grid_ * grid_ + 1;
    mlp_dim_ = 4 * embed_;
    patch_w_.setup("encoder.patch.w", embed_, patch_ * patch_, true);
    patch_b_.setup("encoder.patch.b", embed_, 1, false);
    cls_.setup("encoder.cls", 1, embed_, false);
    pos_.setup("encoder.pos_embed", tokens_, embed_, false);
    cam_.setup("encoder.cam_embed", num_cameras_, embed_, false);
    blocks_[0].setup("encoder.block0", embed_, mlp_dim_);
    blocks_[1].setup("encoder.block1", embed_, mlp_dim_);
    lnf_g_.setup("encoder.lnf.gamma", embed_, 1, true);
    lnf_b_.setup("encoder.lnf.beta", embed_, 1, false);
    out_w_.setup("encoder.out.w", out_dim_, embed_, true);
    out_b_.setup("encoder.out.b", out_dim_, 1, false);

    patch_w_.init_truncated_normal(rng);
    cls_.init_truncated_normal(rng);
    pos_.init_truncated_normal(rng);
    cam_.init_truncated_normal(rng);
    blocks_[0].init(rng);
    blocks_[1].init(rng);
    lnf_g_.value.setOnes();
    out_w_.init_truncated_normal(rng);
  }

  Index input_dim() const override { return side_ * side_; }
  Index feature_dim() const override { return out_dim_; }

  Matrix forward(const Matrix& inputs, const std::vector<int>& cameras) override {
    caches_.assign(static_cast<std::size_t>(inputs.rows()), SampleCache{});
    cached_cameras_ = cameras;
    return run(inputs, cameras, &caches_);
  }

  Matrix infer(const Matrix& inputs, const std::vector<int>& cameras) const override {
    return run(inputs, cameras, nullptr);
  }

  void backward(const Matrix& grad_features) override {
    for (Index s = 0; s < grad_features.rows(); ++s) {
      backward_sample(grad_features.row(s).transpose(), caches_[static_cast<std::size_t>(s)],
                      cached_cameras_[static_cast<std::size_t>(s)]);
    }
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out = {&patch_w_, &patch_b_, &cls_, &pos_, &cam_};
    for (auto& block : blocks_) {
      for (Param* p : block.params()) out.push_back(p);
    }
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    out.push_back(&out_w_);
    out.push_back(&out_b_);
    return out;
  }

 private:
  struct SampleCache {
    Matrix patches;          // n x patch^2
    AttentionCache block[2];
    Matrix final_input;      // T x E, input to the final layernorm
    LayerNormCache lnf;
    Matrix final_normed;     // T x E
  };

  Matrix patchify(const Eigen::RowVectorXd& flat) const {
    Matrix patches(grid_ * grid_, patch_ * patch_);
    for (Index gy = 0; gy < grid_; ++gy) {
      for (Index gx = 0; gx < grid_; ++gx) {
        const Index row = gy * grid_ + gx;
        for (Index py = 0; py < patch_; ++py) {
          for (Index px = 0; px < patch_; ++px) {
            patches(row, py * patch_ + px) = flat[(gy * patch_ + py) * side_ + gx * patch_ + px];
          }
        }
      }
    }
    return patches;
  }

  Matrix run(const Matrix& inputs, const std::vector<int>& cameras,
             std::vector<SampleCache>* caches) const {
    check_cameras(cameras, num_cameras_, inputs.rows());
    if (inputs.cols() != side_ * side_) {
      throw ValidationError("model: transformer expects flat " + std::to_string(side_) + "x" +
                            std::to_string(side_) + " inputs");
    }
    Matrix features(inputs.rows(), out_dim_);
    for (Index s = 0; s < inputs.rows(); ++s) {
      SampleCache local;
      SampleCache* cache = caches ? &(*caches)[static_cast<std::size_t>(s)] : &local;
      features.row(s) =
          forward_sample(inputs.row(s), cameras[static_cast<std::size_t>(s)], *cache).transpose();
    }
    return features;
  }

  Vector forward_sample(const Eigen::RowVectorXd& flat, int camera, SampleCache& cache) const {
    cache.patches = patchify(flat);
    Matrix x(tokens_, embed_);
    x.row(0) = cls_.values().row(0);
    x.bottomRows(tokens_ - 1) = cache.patches * patch_w_.values().transpose();
    x.bottomRows(tokens_ - 1).rowwise() += patch_b_.values().col(0).transpose();
    x += pos_.values();
    x.rowwise() += cam_.values().row(camera);

    for (int b = 0; b < 2; ++b) {
      x = block_forward(blocks_[b], x, cache.block[b]);
    }
    cache.final_input = x;
    cache.final_normed = layernorm_forward(x, lnf_g_, lnf_b_, &cache.lnf);
    return out_w_.values() * cache.final_normed.row(0).transpose() + out_b_.values().col(0);
  }

  Matrix block_forward(const TransformerBlockParams& p, const Matrix& input,
                       AttentionCache& cache) const {
    const Index dh = embed_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.input = input;
    cache.normed = layernorm_forward(input, p.ln1_g, p.ln1_b, &cache.ln1);
    cache.q = cache.normed * p.wq.values().transpose();
    cache.q.rowwise() += p.bq.values().col(0).transpose();
    cache.k = cache.normed * p.wk.values().transpose();
    cache.k.rowwise() += p.bk.values().col(0).transpose();
    cache.v = cache.normed * p.wv.values().transpose();
    cache.v.rowwise() += p.bv.values().col(0).transpose();

    cache.probs.assign(static_cast<std::size_t>(heads_), Matrix());
    cache.concat.resize(tokens_, embed_);
    for (Index h = 0; h < heads_; ++h) {
      const auto qh = cache.q.middleCols(h * dh, dh);
      const auto kh = cache.k.middleCols(h * dh, dh);
      const auto vh = cache.v.middleCols(h * dh, dh);
      Matrix scores = qh * kh.transpose() * scale;
      Matrix& probs = cache.probs[static_cast<std::size_t>(h)];
      probs.resize(tokens_, tokens_);
      for (Index r = 0; r < tokens_; ++r) {
        const double row_max = scores.row(r).maxCoeff();
        Eigen::RowVectorXd e = (scores.row(r).array() - row_max).exp();
        probs.row(r) = e / e.sum();
      }
      cache.concat.middleCols(h * dh, dh) = probs * vh;
    }
    Matrix attn_out = cache.concat * p.wo.values().transpose();
    attn_out.rowwise() += p.bo.values().col(0).transpose();
    cache.mid = input + attn_out;

    cache.normed2 = layernorm_forward(cache.mid, p.ln2_g, p.ln2_b, &cache.ln2);
    cache.mlp_pre = cache.normed2 * p.mlp_w1.values().transpose();
    cache.mlp_pre.rowwise() += p.mlp_b1.values().col(0).transpose();
    cache.mlp_act = cache.mlp_pre.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp_out = cache.mlp_act * p.mlp_w2.values().transpose();
    mlp_out.rowwise() += p.mlp_b2.values().col(0).transpose();
    return cache.mid + mlp_out;
  }

  void backward_sample(const Vector& grad_feature, SampleCache& cache, int camera) {
    out_w_.grad.noalias() += grad_feature * cache.final_normed.row(0);
    out_b_.grad.col(0) += grad_feature;
    Matrix grad_normed = Matrix::Zero(tokens_, embed_);
    grad_normed.row(0) = (out_w_.values().transpose() * grad_feature).transpose();
    Matrix grad_x = layernorm_backward(grad_normed, cache.lnf, lnf_g_, lnf_b_);

    for (int b = 1; b >= 0; --b) {
      grad_x = block_backward(blocks_[b], grad_x, cache.block[b]);
    }

    pos_.grad += grad_x;
    cls_.grad.row(0) += grad_x.row(0);
    cam_.grad.row(camera) += grad_x.colwise().sum();
    const Matrix grad_tokens = grad_x.bottomRows(tokens_ - 1);
    patch_w_.grad.noalias() += grad_tokens.transpose() * cache.patches;
    patch_b_.grad.col(0) += grad_tokens.colwise().sum().transpose();
  }

  Matrix block_backward(TransformerBlockParams& p, const Matrix& grad_out,
                        AttentionCache& cache) {
    const Index dh = embed_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch.
    const Matrix grad_mlp_out = grad_out;
    p.mlp_w2.grad.noalias() += grad_mlp_out.transpose() * cache.mlp_act;
    p.mlp_b2.grad.col(0) += grad_mlp_out.colwise().sum().transpose();
    Matrix grad_act = grad_mlp_out * p.mlp_w2.values();
    Matrix grad_pre =
        grad_act.cwiseProduct(cache.mlp_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    p.mlp_w1.grad.noalias() += grad_pre.transpose() * cache.normed2;
    p.mlp_b1.grad.col(0) += grad_pre.colwise().sum().transpose();
    const Matrix grad_normed2 = grad_pre * p.mlp_w1.values();
    Matrix grad_mid = grad_out + layernorm_backward(grad_normed2, cache.ln2, p.ln2_g, p.ln2_b);

    // Attention branch.
    const Matrix grad_attn_out = grad_mid;
    p.wo.grad.noalias() += grad_attn_out.transpose() * cache.concat;
    p.bo.grad.col(0) += grad_attn_out.colwise().sum().transpose();
    const Matrix grad_concat = grad_attn_out * p.wo.values();

    Matrix grad_q = Matrix::Zero(tokens_, embed_);
    Matrix grad_k = Matrix::Zero(tokens_, embed_);
    Matrix grad_v = Matrix::Zero(tokens_, embed_);
    for (Index h = 0; h < heads_; ++h) {
      const auto qh = cache.q.middleCols(h * dh, dh);
      const auto kh = cache.k.middleCols(h * dh, dh);
      const auto vh = cache.v.middleCols(h * dh, dh);
      const Matrix& probs = cache.probs[static_cast<std::size_t>(h)];
      const auto grad_oh = grad_concat.middleCols(h * dh, dh);
      const Matrix grad_probs = grad_oh * vh.transpose();
      grad_v.middleCols(h * dh, dh) = probs.transpose() * grad_oh;
      Matrix grad_scores(tokens_, tokens_);
      for (Index r = 0; r < tokens_; ++r) {
        const double inner = grad_probs.row(r).dot(probs.row(r));
        grad_scores.row(r) =
            (probs.row(r).array() * (grad_probs.row(r).array() - inner)).matrix();
      }
      grad_q.middleCols(h * dh, dh) = grad_scores * kh * scale;
      grad_k.middleCols(h * dh, dh) = grad_scores.transpose() * qh * scale;
    }

    p.wq.grad.noalias() += grad_q.transpose() * cache.normed;
    p.bq.grad.col(0) += grad_q.colwise().sum().transpose();
    p.wk.grad.noalias() += grad_k.transpose() * cache.normed;
    p.bk.grad.col(0) += grad_k.colwise().sum().transpose();
    p.wv.grad.noalias() += grad_v.transpose() * cache.normed;
    p.bv.grad.col(0) += grad_v.colwise().sum().transpose();

    const Matrix grad_normed =
        grad_q * p.wq.values() + grad_k * p.wk.values() + grad_v * p.wv.values();
    return grad_mid + layernorm_backward(grad_normed, cache.ln1, p.ln1_g, p.ln1_b);
  }

  Index side_, patch_, embed_, heads_, out_dim_, num_cameras_;
  Index grid_, tokens_, mlp_dim_;
  Param patch_w_, patch_b_, cls_, pos_, cam_;
  TransformerBlockParams blocks_[2];
  Param lnf_g_, lnf_b_;
  Param out_w_, out_b_;
  std::vector<SampleCache> caches_;
  std::vector<int> cached_cameras_;
};

std::unique_ptr<Encoder> make_encoder(const ModelConfig& cfg, Rng& rng) {
  switch (cfg.encoder_kind) {
    case EncoderKind::kToyMlp:
      return std::make_unique<MlpEncoder>(cfg, rng);
    case EncoderKind::kToyTransformer:
      return std::make_unique<TransformerEncoder>(cfg, rng);
    case EncoderKind::kPluggable:
      throw ValidationError("model: a pluggable encoder must be supplied programmatically");
  }
  throw ValidationError("model: unknown encoder kind");
}

}  // namespace

// --- AffineHead --------------------------------------------------------

AffineHead::AffineHead(std::string name, Index out_dim, Index in_dim) {
  weight_.setup(name + ".weight", out_dim, in_dim, true);
  bias_.setup(name + ".bias", out_dim, 1, false);
}

void AffineHead::init(Rng& rng) { weight_.init_truncated_normal(rng); }

Matrix AffineHead::forward(const Matrix& x) {
  cached_input_ = x;
  return apply(x);
}

Matrix AffineHead::apply(const Matrix& x) const {
  Matrix out = x * weight_.values().transpose();
  out.rowwise() += bias_.values().col(0).transpose();
  return out;
}

Vector AffineHead::apply(const Vector& x) const {
  return weight_.values() * x + bias_.values().col(0);
}

Matrix AffineHead::backward(const Matrix& grad_out) {
  weight_.grad.noalias() += grad_out.transpose() * cached_input_;
  bias_.grad.col(0) += grad_out.colwise().sum().transpose();
  return grad_out * weight_.values();
}

std::vector<Param*> AffineHead::params() { return {&weight_, &bias_}; }

// --- DifferModel -------------------------------------------------------

namespace {

std::unique_ptr<Encoder> build_encoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  return make_encoder(cfg, rng);
}

}  // namespace

DifferModel::DifferModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), classifier_("classifier", config.num_classes, config.feature_dim),
      head_b_("head_b", config.subspace_dim, config.feature_dim) {
  Rng rng(seed, /*stream=*/1);
  encoder_ = build_encoder(config_, rng);
  classifier_.init(rng);
  head_b_.init(rng);
  heads_n_.reserve(static_cast<std::size_t>(config_.num_nonbiometric));
  for (Index k = 0; k < config_.num_nonbiometric; ++k) {
    heads_n_.emplace_back("head_n" + std::to_string(k), config_.subspace_dim,
                          config_.feature_dim);
    heads_n_.back().init(rng);
  }
}

DifferModel::DifferModel(const ModelConfig& config, std::unique_ptr<Encoder> encoder,
                         std::uint64_t seed)
    : config_(config), classifier_("classifier", config.num_classes, config.feature_dim),
      head_b_("head_b", config.subspace_dim, config.feature_dim) {
  config_.validate();
  if (!encoder) throw ValidationError("model: null encoder");
  if (encoder->feature_dim() != config_.feature_dim) {
    throw ValidationError("model: encoder feature dim does not match config");
  }
  encoder_ = std::move(encoder);
  Rng rng(seed, /*stream=*/2);
  classifier_.init(rng);
  head_b_.init(rng);
  for (Index k = 0; k < config_.num_nonbiometric; ++k) {
    heads_n_.emplace_back("head_n" + std::to_string(k), config_.subspace_dim,
                          config_.feature_dim);
    heads_n_.back().init(rng);
  }
}

void DifferModel::validate_batch(const Matrix& inputs, const std::vector<int>& cameras) const {
  if (inputs.cols() != encoder_->input_dim()) {
    throw ValidationError("model: input dim " + std::to_string(inputs.cols()) +
                          " does not match encoder input dim " +
                          std::to_string(encoder_->input_dim()));
  }
  check_cameras(cameras, config_.num_cameras, inputs.rows());
  if (!inputs.allFinite()) throw ValidationError("model: non-finite input");
}

Vector DifferModel::encode_image(const VectorF& input, int camera) const {
  Matrix batch = input.cast<double>().transpose();
  validate_batch(batch, {camera});
  return encoder_->infer(batch, {camera}).row(0).transpose();
}

Vector DifferModel::project_biometric(const Vector& f_i) const { return head_b_.apply(f_i); }

Vector DifferModel::project_nonbiometric(const Vector& f_i, Index k) const {
  if (k < 0 || k >= config_.num_nonbiometric) {
    throw ValidationError("model: non-biometric factor index " + std::to_string(k) +
                          " out of range");
  }
  // Gradient reversal is the identity on the forward pass.
  const Vector reversed = grl_forward(f_i);
  return heads_n_[static_cast<std::size_t>(k)].apply(reversed);
}

Vector DifferModel::classify(const Vector& f_i) const { return classifier_.apply(f_i); }

FeatureBundle DifferModel::forward_bundle(const VectorF& input, int camera) const {
  FeatureBundle bundle;
  bundle.f_i = encode_image(input, camera);
  bundle.logits = classify(bundle.f_i);
  bundle.f_i_b = project_biometric(bundle.f_i);
  bundle.f_i_n.resize(config_.num_nonbiometric, config_.subspace_dim);
  for (Index k = 0; k < config_.num_nonbiometric; ++k) {
    bundle.f_i_n.row(k) = project_nonbiometric(bundle.f_i, k).transpose();
  }
  return bundle;
}

FeatureBatch DifferModel::forward_batch(const Matrix& inputs, const std::vector<int>& cameras,
                                        bool with_grl) {
  validate_batch(inputs, cameras);
  cached_with_grl_ = with_grl;
  FeatureBatch batch;
  batch.f_i = encoder_->forward(inputs, cameras);
  batch.logits = classifier_.forward(batch.f_i);
  batch.f_i_b = head_b_.forward(batch.f_i);
  batch.f_i_n.reserve(heads_n_.size());
  for (auto& head : heads_n_) {
    batch.f_i_n.push_back(head.forward(grl_forward(batch.f_i)));
  }
  return batch;
}

void DifferModel::backward_batch(const Matrix& grad_logits, const Matrix& grad_f_i,
                                 const Matrix& grad_f_b, const std::vector<Matrix>& grad_f_n) {
  if (grad_f_n.size() != heads_n_.size()) {
    throw ValidationError("model: expected " + std::to_string(heads_n_.size()) +
                          " non-biometric gradients");
  }
  Matrix grad_feature = grad_f_i;
  grad_feature += classifier_.backward(grad_logits);
  grad_feature += head_b_.backward(grad_f_b);
  for (std::size_t k = 0; k < heads_n_.size(); ++k) {
    const Matrix head_grad = heads_n_[k].backward(grad_f_n[k]);
    grad_feature += cached_with_grl_ ? grl_backward(head_grad, grl_) : head_grad;
  }
  encoder_->backward(grad_feature);
}

Matrix DifferModel::infer_features(const Matrix& inputs, const std::vector<int>& cameras) const {
  validate_batch(inputs, cameras);
  return encoder_->infer(inputs, cameras);
}

std::vector<Param*> DifferModel::params() {
  std::vector<Param*> out = encoder_->params();
  for (Param* p : classifier_.params()) out.push_back(p);
  for (Param* p : head_b_.params()) out.push_back(p);
  for (auto& head : heads_n_) {
    for (Param* p : head.params()) out.push_back(p);
  }
  return out;
}

void DifferModel::zero_grads() {
  for (Param* p : params()) p->grad.setZero();
}

void DifferModel::save(const std::filesystem::path& path) const {
  ArrayArchive archive;
  auto& self = const_cast<DifferModel&>(*this);
  for (Param* p : self.params()) archive.put(p->name, p->value);
  archive.set_meta("kind", "checkpoint");
  archive.set_meta("model_config", config_.to_json());
  archive.set_meta("grl_coefficient", grl_.coefficient);
  archive.save(path);
}

DifferModel DifferModel::load(const std::filesystem::path& path) {
  const ArrayArchive archive = ArrayArchive::load(path);
  const ModelConfig cfg = ModelConfig::from_json(archive.meta("model_config"));
  DifferModel model(cfg, /*seed=*/0);
  if (archive.has_meta("grl_coefficient")) {
    model.grl_.coefficient = archive.meta("grl_coefficient").get<double>();
  }
  for (Param* p : model.params()) {
    const MatrixF& stored = archive.array(p->name);
    if (stored.rows() != p->value.rows() || stored.cols() != p->value.cols()) {
      throw IoError("checkpoint: array '" + p->name + "' has unexpected shape");
    }
    p->value = stored;
  }
  return model;
}

}  // namespace differ
