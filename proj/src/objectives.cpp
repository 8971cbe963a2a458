#include "differ/objectives.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "differ/error.hpp"

namespace differ {
namespace {

void require_finite(const Matrix& x, const char* what) {
  if (!x.allFinite()) {
    throw ValidationError(std::string(what) + ": input contains non-finite values");
  }
}

void check_grl(const GrlConfig& cfg) {
  if (!(cfg.coefficient > 0.0)) {
    throw ValidationError("grl: coefficient must be positive");
  }
}

// Row-normalized copies plus norms; rejects zero rows.
struct NormalizedRows {
  Matrix unit;
  Vector norms;
};

NormalizedRows normalize_rows(const Matrix& m, const char* what) {
  NormalizedRows out;
  out.unit.resize(m.rows(), m.cols());
  out.norms.resize(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0)) {
      throw ValidationError(std::string(what) + ": zero-norm row at index " + std::to_string(i));
    }
    out.norms[i] = n;
    out.unit.row(i) = m.row(i) / n;
  }
  return out;
}

void check_contrastive_shapes(const Matrix& image_feats, const Matrix& text_feats,
                              double temperature) {
  if (image_feats.rows() < 1) {
    throw ValidationError("contrastive_loss: batch must be non-empty");
  }
  if (image_feats.rows() != text_feats.rows()) {
    throw ValidationError("contrastive_loss: image batch " + std::to_string(image_feats.rows()) +
                          " vs text batch " + std::to_string(text_feats.rows()));
  }
  if (image_feats.cols() != text_feats.cols()) {
    throw ValidationError("contrastive_loss: feature dims differ");
  }
  if (!(temperature > 0.0)) {
    throw ValidationError("contrastive_loss: temperature must be positive");
  }
  require_finite(image_feats, "contrastive_loss");
  require_finite(text_feats, "contrastive_loss");
}

void check_labels(Index batch, std::size_t labels, const char* what) {
  if (static_cast<std::size_t>(batch) != labels) {
    throw ValidationError(std::string(what) + ": " + std::to_string(labels) + " labels for batch " +
                          std::to_string(batch));
  }
}

Matrix pairwise_euclidean(const Matrix& feats) {
  const Index b = feats.rows();
  Matrix d(b, b);
  for (Index i = 0; i < b; ++i) {
    d(i, i) = 0.0;
    for (Index j = i + 1; j < b; ++j) {
      const double dist = std::sqrt((feats.row(i) - feats.row(j)).squaredNorm());
      d(i, j) = dist;
      d(j, i) = dist;
    }
  }
  return d;
}

}  // namespace

Matrix grl_forward(const Matrix& x) {
  require_finite(x, "grl_forward");
  return x;
}

Matrix grl_backward(const Matrix& upstream_grad, const GrlConfig& cfg) {
  check_grl(cfg);
  require_finite(upstream_grad, "grl_backward");
  return (-cfg.coefficient) * upstream_grad;
}

double contrastive_loss(const Matrix& image_feats, const Matrix& text_feats, double temperature) {
  check_contrastive_shapes(image_feats, text_feats, temperature);
  const auto img = normalize_rows(image_feats, "contrastive_loss(image)");
  const auto txt = normalize_rows(text_feats, "contrastive_loss(text)");
  const Index b = image_feats.rows();
  const Matrix sim = (img.unit * txt.unit.transpose()) / temperature;

  double loss = 0.0;
  for (Index k = 0; k < b; ++k) {
    const double row_max = sim.row(k).maxCoeff();
    double denom = 0.0;
    for (Index j = 0; j < b; ++j) denom += std::exp(sim(k, j) - row_max);
    loss += std::log(denom) - (sim(k, k) - row_max);
  }
  return loss / static_cast<double>(b);
}

Matrix contrastive_loss_grad(const Matrix& image_feats, const Matrix& text_feats,
                             double temperature) {
  check_contrastive_shapes(image_feats, text_feats, temperature);
  const auto img = normalize_rows(image_feats, "contrastive_loss(image)");
  const auto txt = normalize_rows(text_feats, "contrastive_loss(text)");
  const Index b = image_feats.rows();
  const Matrix cos = img.unit * txt.unit.transpose();
  const Matrix sim = cos / temperature;

  // dL/dS = (softmax(S) - I) / B, then chain through the cosine.
  Matrix dsim(b, b);
  for (Index k = 0; k < b; ++k) {
    const double row_max = sim.row(k).maxCoeff();
    Vector p = (sim.row(k).array() - row_max).exp().matrix().transpose();
    p /= p.sum();
    dsim.row(k) = p.transpose();
    dsim(k, k) -= 1.0;
  }
  dsim /= static_cast<double>(b);

  Matrix grad = Matrix::Zero(image_feats.rows(), image_feats.cols());
  for (Index k = 0; k < b; ++k) {
    // d cos(u, v_j)/du = (v_hat_j - cos * u_hat) / |u|
    const Vector weighted_txt = txt.unit.transpose() * dsim.row(k).transpose();
    const double cos_weight = dsim.row(k).dot(cos.row(k));
    grad.row(k) =
        (weighted_txt.transpose() - cos_weight * img.unit.row(k)) / (temperature * img.norms[k]);
  }
  return grad;
}

double cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels) {
  check_labels(logits.rows(), labels.size(), "cross_entropy_loss");
  require_finite(logits, "cross_entropy_loss");
  const Index b = logits.rows();
  const Index c = logits.cols();
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw ValidationError("cross_entropy_loss: label " + std::to_string(y) +
                            " out of range for " + std::to_string(c) + " classes");
    }
    const double row_max = logits.row(i).maxCoeff();
    double denom = 0.0;
    for (Index j = 0; j < c; ++j) denom += std::exp(logits(i, j) - row_max);
    loss += std::log(denom) - (logits(i, y) - row_max);
  }
  return loss / static_cast<double>(b);
}

Matrix cross_entropy_loss_grad(const Matrix& logits, const std::vector<int>& labels) {
  check_labels(logits.rows(), labels.size(), "cross_entropy_loss");
  require_finite(logits, "cross_entropy_loss");
  const Index b = logits.rows();
  const Index c = logits.cols();
  Matrix grad(b, c);
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw ValidationError("cross_entropy_loss: label " + std::to_string(y) +
                            " out of range for " + std::to_string(c) + " classes");
    }
    const double row_max = logits.row(i).maxCoeff();
    Vector p = (logits.row(i).array() - row_max).exp().matrix().transpose();
    p /= p.sum();
    grad.row(i) = p.transpose();
    grad(i, y) -= 1.0;
  }
  return grad / static_cast<double>(b);
}

TripletMining batch_hard_mining(const Matrix& feats, const std::vector<int>& labels) {
  check_labels(feats.rows(), labels.size(), "batch_hard_triplet_loss");
  require_finite(feats, "batch_hard_triplet_loss");
  const Index b = feats.rows();
  const Matrix dist = pairwise_euclidean(feats);

  TripletMining mining;
  mining.positive.assign(static_cast<std::size_t>(b), -1);
  mining.negative.assign(static_cast<std::size_t>(b), -1);
  for (Index i = 0; i < b; ++i) {
    double worst_pos = -1.0;
    double best_neg = std::numeric_limits<double>::infinity();
    Index pos = -1, neg = -1;
    for (Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        if (dist(i, j) > worst_pos) {
          worst_pos = dist(i, j);
          pos = j;
        }
      } else if (dist(i, j) < best_neg) {
        best_neg = dist(i, j);
        neg = j;
      }
    }
    if (pos < 0) {
      throw ValidationError("batch_hard_triplet_loss: label " +
                            std::to_string(labels[static_cast<std::size_t>(i)]) +
                            " has a single instance in the batch");
    }
    if (neg < 0) {
      throw ValidationError("batch_hard_triplet_loss: label " +
                            std::to_string(labels[static_cast<std::size_t>(i)]) +
                            " has no negative in the batch");
    }
    mining.positive[static_cast<std::size_t>(i)] = pos;
    mining.negative[static_cast<std::size_t>(i)] = neg;
  }
  return mining;
}

double batch_hard_triplet_loss(const Matrix& feats, const std::vector<int>& labels,
                               const TripletConfig& cfg) {
  if (cfg.margin < 0.0) throw ValidationError("batch_hard_triplet_loss: margin must be >= 0");
  const auto mining = batch_hard_mining(feats, labels);
  const Index b = feats.rows();
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    const Index p = mining.positive[static_cast<std::size_t>(i)];
    const Index n = mining.negative[static_cast<std::size_t>(i)];
    const double d_ap = std::sqrt((feats.row(i) - feats.row(p)).squaredNorm());
    const double d_an = std::sqrt((feats.row(i) - feats.row(n)).squaredNorm());
    loss += std::max(0.0, d_ap - d_an + cfg.margin);
  }
  if (cfg.reduction == TripletConfig::Reduction::kMean) loss /= static_cast<double>(b);
  return loss;
}

Matrix batch_hard_triplet_loss_grad(const Matrix& feats, const std::vector<int>& labels,
                                    const TripletConfig& cfg) {
  if (cfg.margin < 0.0) throw ValidationError("batch_hard_triplet_loss: margin must be >= 0");
  const auto mining = batch_hard_mining(feats, labels);
  const Index b = feats.rows();
  Matrix grad = Matrix::Zero(feats.rows(), feats.cols());
  for (Index i = 0; i < b; ++i) {
    const Index p = mining.positive[static_cast<std::size_t>(i)];
    const Index n = mining.negative[static_cast<std::size_t>(i)];
    const double d_ap = std::sqrt((feats.row(i) - feats.row(p)).squaredNorm());
    const double d_an = std::sqrt((feats.row(i) - feats.row(n)).squaredNorm());
    if (d_ap - d_an + cfg.margin <= 0.0) continue;
    if (d_ap > 0.0) {
      const Eigen::RowVectorXd unit_ap = (feats.row(i) - feats.row(p)) / d_ap;
      grad.row(i) += unit_ap;
      grad.row(p) -= unit_ap;
    }
    if (d_an > 0.0) {
      const Eigen::RowVectorXd unit_an = (feats.row(i) - feats.row(n)) / d_an;
      grad.row(i) -= unit_an;
      grad.row(n) += unit_an;
    }
  }
  if (cfg.reduction == TripletConfig::Reduction::kMean) grad /= static_cast<double>(b);
  return grad;
}

double id_loss(double cls, double tri, const LossWeights& w) {
  return w.lambda_c * cls + w.lambda_t * tri;
}

double total_loss(double id, double c_b, const std::vector<double>& c_n, const LossWeights& w) {
  double sum_n = 0.0;
  for (double v : c_n) sum_n += v;
  return w.lambda_id * id + w.lambda_b * c_b + w.lambda_n * sum_n;
}

}  // namespace differ
