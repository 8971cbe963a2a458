#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "differ/data.hpp"
#include "differ/evalkit.hpp"
#include "differ/model.hpp"
#include "differ/objectives.hpp"
#include "differ/semantics.hpp"

namespace differ {

// Linear warmup to base_lr, then cosine decay to zero at the last step.
struct LrSchedule {
  double warmup_initial_lr = 8.42e-7;
  double base_lr = 2e-6;
  Index warmup_steps = 0;
  Index total_steps = 1;
};

double lr_schedule(Index step, const LrSchedule& schedule);

struct TrainConfig {
  Index epochs = 60;
  double base_lr = 2e-6;
  double warmup_initial_lr = 8.42e-7;
  Index warmup_epochs = 5;
  double weight_decay = 0.05;
  std::string optimizer = "sgd";
  double momentum = 0.9;
  std::uint64_t seed = 0;
  LossWeights weights;
  double grl_coefficient = 1.0;
  TripletConfig triplet;
  double contrastive_temperature = 1.0;
  std::vector<Aspect> factors = {Aspect::kClothing, Aspect::kHair};
  Index eval_cadence = 10;  // epochs between evaluations; 0 disables
  Index batch_p = 2;
  Index batch_k = 4;
  std::string text_backend = "oracle";  // oracle | cached
  Metric eval_metric = Metric::kEuclidean;

  void validate() const;
};

LrSchedule make_lr_schedule(const TrainConfig& cfg, Index steps_per_epoch);

// Supplies the per-sample text features that supervise each subspace.
class TextFeatureProvider {
 public:
  virtual ~TextFeatureProvider() = default;
  virtual Vector feature(const Dataset& dataset, Index sample, Aspect aspect) = 0;
};

// Ground-truth factors of the synthetic dataset, padded and normalized.
class OracleTextProvider final : public TextFeatureProvider {
 public:
  explicit OracleTextProvider(Index dim) : dim_(dim) {}
  Vector feature(const Dataset& dataset, Index sample, Aspect aspect) override;

 private:
  Index dim_;
};

// Embeds cached descriptions. The biometric subspace uses the per-identity
// summary text; per-image descriptions back the other aspects unless the
// clothing-summary flag is set.
class CachedTextProvider final : public TextFeatureProvider {
 public:
  CachedTextProvider(Index dim, DescriptionCache& cache, PromptCatalog catalog,
                     std::string model, std::uint64_t embed_seed, bool use_clothing_summary);
  Vector feature(const Dataset& dataset, Index sample, Aspect aspect) override;

 private:
  std::string cached_text(const Dataset& dataset, Index sample, Aspect aspect);

  HashTextEmbedder embedder_;
  DescriptionCache& cache_;
  PromptCatalog catalog_;
  std::string model_;
  bool use_clothing_summary_;
  std::map<std::string, Vector> memo_;
};

struct LossBreakdown {
  double total = 0.0;
  double id = 0.0;
  double cls = 0.0;
  double tri = 0.0;
  double cb = 0.0;
  std::vector<double> cn;
  double lr = 0.0;
};

struct FitResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::filesystem::path metrics_path;
  Index steps = 0;
  double best_rank1 = -1.0;
};

// Checkpoints bundle the model archive with optimizer state for resuming.
struct TrainState {
  Index step = 0;
  Index epoch = 0;
  std::string config_sha256;
};

class Trainer {
 public:
  Trainer(DifferModel& model, TrainConfig config, const Dataset& train_data,
          TextFeatureProvider& texts);

  void attach_eval(const Dataset& query, const Dataset& gallery);

  LossBreakdown train_step(const std::vector<Index>& batch);
  // Runs epochs [epoch, stop) where stop is cfg.epochs or stop_after_epoch.
  FitResult fit(const std::filesystem::path& out_dir, const std::string& config_sha256,
                const std::filesystem::path& resume_from = {}, Index stop_after_epoch = -1);

  void save_checkpoint(const std::filesystem::path& path, const std::string& config_sha256) const;
  void restore_checkpoint(const std::filesystem::path& path, const std::string& config_sha256);

  double evaluate_rank1() const;
  Index global_step() const { return state_.step; }
  Index epoch() const { return state_.epoch; }
  const LrSchedule& schedule() const { return schedule_; }
  const PkSampler& sampler() const { return sampler_; }

 private:
  void sgd_update(double lr);

  DifferModel& model_;
  TrainConfig cfg_;
  const Dataset& data_;
  TextFeatureProvider& texts_;
  PkSampler sampler_;
  LrSchedule schedule_;
  std::vector<MatrixF> momentum_;
  std::map<int, int> class_of_pid_;
  TrainState state_;
  const Dataset* eval_query_ = nullptr;
  const Dataset* eval_gallery_ = nullptr;
};

// Feature extraction over a whole dataset in deterministic batches.
Matrix extract_features(const DifferModel& model, const Dataset& dataset);

IdMeta id_meta(const Dataset& dataset);

}  // namespace differ
