#pragma once

#include <vector>

#include "differ/types.hpp"

namespace differ {

// Gradient reversal: identity on the forward pass, multiplies the upstream
// gradient by -coefficient on the backward pass.
struct GrlConfig {
  double coefficient = 1.0;  // must be > 0
};

struct TripletConfig {
  enum class Reduction { kSum, kMean };
  double margin = 0.3;  // must be >= 0
  Reduction reduction = Reduction::kSum;
};

struct LossWeights {
  double lambda_id = 1.0;
  double lambda_b = 1.0;
  double lambda_n = 1.0;
  double lambda_c = 1.0;
  double lambda_t = 1.0;
};

Matrix grl_forward(const Matrix& x);
Matrix grl_backward(const Matrix& upstream_grad, const GrlConfig& cfg = {});

// Image-to-text contrastive loss over cosine similarities: row k of the image
// batch is matched against text row k, with all text rows as the softmax
// denominator.
double contrastive_loss(const Matrix& image_feats, const Matrix& text_feats,
                        double temperature = 1.0);
// Gradient with respect to image_feats.
Matrix contrastive_loss_grad(const Matrix& image_feats, const Matrix& text_feats,
                             double temperature = 1.0);

double cross_entropy_loss(const Matrix& logits, const std::vector<int>& labels);
Matrix cross_entropy_loss_grad(const Matrix& logits, const std::vector<int>& labels);

// Hardest positive / hardest negative indices per anchor, mined over the
// full B x B Euclidean distance matrix. Ties resolve to the lowest index.
struct TripletMining {
  std::vector<Index> positive;
  std::vector<Index> negative;
};
TripletMining batch_hard_mining(const Matrix& feats, const std::vector<int>& labels);

double batch_hard_triplet_loss(const Matrix& feats, const std::vector<int>& labels,
                               const TripletConfig& cfg = {});
Matrix batch_hard_triplet_loss_grad(const Matrix& feats, const std::vector<int>& labels,
                                    const TripletConfig& cfg = {});

double id_loss(double cls, double tri, const LossWeights& w);
double total_loss(double id, double c_b, const std::vector<double>& c_n, const LossWeights& w);

}  // namespace differ
