#include "differ/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "differ/archive.hpp"
#include "differ/error.hpp"
#include "differ/sha256.hpp"

namespace differ {

double lr_schedule(Index step, const LrSchedule& s) {
  if (step < 0) throw ValidationError("lr_schedule: negative step");
  if (step < s.warmup_steps) {
    const double progress = static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    return s.warmup_initial_lr + (s.base_lr - s.warmup_initial_lr) * progress;
  }
  const Index decay_span = std::max<Index>(1, s.total_steps - 1 - s.warmup_steps);
  const double progress = std::min(
      1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay_span));
  return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
  if (!(base_lr > 0.0) || !(warmup_initial_lr > 0.0)) {
    throw ValidationError("train: learning rates must be positive");
  }
  if (warmup_epochs < 0) throw ValidationError("train: warmup_epochs must be >= 0");
  if (weight_decay < 0.0) throw ValidationError("train: weight_decay must be >= 0");
  if (optimizer != "sgd") throw ValidationError("train: unsupported optimizer '" + optimizer + "'");
  if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("train: momentum must be in [0,1)");
  if (weights.lambda_id < 0 || weights.lambda_b < 0 || weights.lambda_n < 0 ||
      weights.lambda_c < 0 || weights.lambda_t < 0) {
    throw ValidationError("train: loss weights must be >= 0");
  }
  if (!(grl_coefficient > 0.0)) throw ValidationError("train: grl_coefficient must be positive");
  if (triplet.margin < 0.0) throw ValidationError("train: triplet margin must be >= 0");
  if (!(contrastive_temperature > 0.0)) {
    throw ValidationError("train: contrastive_temperature must be positive");
  }
  if (batch_p < 2 || batch_k < 2) throw ValidationError("train: need batch_p >= 2 and batch_k >= 2");
  if (eval_cadence < 0) throw ValidationError("train: eval_cadence must be >= 0");
  if (text_backend != "oracle" && text_backend != "cached") {
    throw ValidationError("train: unknown text_backend '" + text_backend + "'");
  }
  for (Aspect a : factors) {
    if (aspect_is_summary(a) || a == Aspect::kBiometric) {
      throw ValidationError("train: '" + aspect_name(a) + "' is not a non-biometric factor");
    }
  }
}

LrSchedule make_lr_schedule(const TrainConfig& cfg, Index steps_per_epoch) {
  LrSchedule s;
  s.warmup_initial_lr = cfg.warmup_initial_lr;
  s.base_lr = cfg.base_lr;
  s.warmup_steps = cfg.warmup_epochs * steps_per_epoch;
  s.total_steps = std::max<Index>(1, cfg.epochs * steps_per_epoch);
  return s;
}

// --- Text feature providers ---------------------------------------------

Vector OracleTextProvider::feature(const Dataset& dataset, Index sample, Aspect aspect) {
  return dataset.oracle_text_feature(sample, aspect, dim_);
}

CachedTextProvider::CachedTextProvider(Index dim, DescriptionCache& cache, PromptCatalog catalog,
                                       std::string model, std::uint64_t embed_seed,
                                       bool use_clothing_summary)
    : embedder_(dim, embed_seed), cache_(cache), catalog_(std::move(catalog)),
      model_(std::move(model)), use_clothing_summary_(use_clothing_summary) {}

std::string CachedTextProvider::cached_text(const Dataset& dataset, Index sample, Aspect aspect) {
  const Sample& s = dataset.samples.at(static_cast<std::size_t>(sample));
  switch (aspect) {
    case Aspect::kBiometric: {
      // Per-identity summary supervises the biometric subspace.
      const std::string key = "pid:" + std::to_string(s.pid);
      if (auto text = cache_.lookup_by_identity(key, aspect_name(Aspect::kBiometricSummary),
                                                model_)) {
        return *text;
      }
      throw IoError("text provider: no cached biometric summary for " + key +
                    "; run the describe command first");
    }
    case Aspect::kClothing:
      if (use_clothing_summary_) {
        const std::string key = "cloth:" + std::to_string(s.clothid);
        if (auto text = cache_.lookup_by_identity(key, aspect_name(Aspect::kClothingSummary),
                                                  model_)) {
          return *text;
        }
        throw IoError("text provider: no cached clothing summary for " + key);
      }
      [[fallthrough]];
    default: {
      const std::string prompt_sha = sha256_hex(catalog_.prompt(aspect));
      if (auto text = cache_.lookup(s.image_id, aspect_name(aspect), prompt_sha, model_)) {
        return *text;
      }
      throw IoError("text provider: no cached '" + aspect_name(aspect) + "' description for '" +
                    s.image_id + "'; run the describe command first");
    }
  }
}

Vector CachedTextProvider::feature(const Dataset& dataset, Index sample, Aspect aspect) {
  const std::string text = cached_text(dataset, sample, aspect);
  const std::string memo_key = aspect_name(aspect) + "\x1f" + text;
  const auto it = memo_.find(memo_key);
  if (it != memo_.end()) return it->second;
  const Vector v = embedder_.embed(text);
  memo_.emplace(memo_key, v);
  return v;
}

// --- Trainer --------------------------------------------------------------

Trainer::Trainer(DifferModel& model, TrainConfig config, const Dataset& train_data,
                 TextFeatureProvider& texts)
    : model_(model), cfg_(std::move(config)), data_(train_data), texts_(texts),
      sampler_(train_data.pids_for([&] {
                 std::vector<Index> all(static_cast<std::size_t>(train_data.size()));
                 for (Index i = 0; i < train_data.size(); ++i)
                   all[static_cast<std::size_t>(i)] = i;
                 return all;
               }()),
               cfg_.batch_p, cfg_.batch_k, cfg_.seed) {
  cfg_.validate();
  if (static_cast<Index>(cfg_.factors.size()) != model_.config().num_nonbiometric) {
    throw ValidationError("train: " + std::to_string(cfg_.factors.size()) +
                          " factors configured but the model has " +
                          std::to_string(model_.config().num_nonbiometric) +
                          " non-biometric heads");
  }
  model_.grl().coefficient = cfg_.grl_coefficient;

  std::set<int> pids;
  for (const auto& s : data_.samples) pids.insert(s.pid);
  if (static_cast<Index>(pids.size()) != model_.config().num_classes) {
    throw ValidationError("train: dataset has " + std::to_string(pids.size()) +
                          " identities but the classifier has " +
                          std::to_string(model_.config().num_classes) + " classes");
  }
  int next = 0;
  for (int pid : pids) class_of_pid_[pid] = next++;

  const Index steps_per_epoch = static_cast<Index>(sampler_.epoch(0).size());
  if (steps_per_epoch == 0 && cfg_.epochs > 0) {
    throw ValidationError("train: sampler produces no batches");
  }
  schedule_ = make_lr_schedule(cfg_, std::max<Index>(1, steps_per_epoch));

  for (Param* p : model_.params()) {
    momentum_.push_back(MatrixF::Zero(p->value.rows(), p->value.cols()));
  }
}

void Trainer::attach_eval(const Dataset& query, const Dataset& gallery) {
  eval_query_ = &query;
  eval_gallery_ = &gallery;
}

LossBreakdown Trainer::train_step(const std::vector<Index>& batch) {
  const Matrix inputs = data_.inputs_for(batch);
  const std::vector<int> cams = data_.camids_for(batch);
  const std::vector<int> pids = data_.pids_for(batch);
  const Index b = static_cast<Index>(batch.size());
  const Index d = model_.config().subspace_dim;

  std::vector<int> classes(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto it = class_of_pid_.find(pids[i]);
    if (it == class_of_pid_.end()) {
      throw ValidationError("train: pid " + std::to_string(pids[i]) + " not in training set");
    }
    classes[i] = it->second;
  }

  Matrix text_b(b, d);
  std::vector<Matrix> text_n(cfg_.factors.size(), Matrix(b, d));
  for (Index i = 0; i < b; ++i) {
    text_b.row(i) = texts_.feature(data_, batch[static_cast<std::size_t>(i)],
                                   Aspect::kBiometric).transpose();
    for (std::size_t k = 0; k < cfg_.factors.size(); ++k) {
      text_n[k].row(i) = texts_.feature(data_, batch[static_cast<std::size_t>(i)],
                                        cfg_.factors[k]).transpose();
    }
  }

  FeatureBatch features;
  try {
    features = model_.forward_batch(inputs, cams, /*with_grl=*/true);
  } catch (const ValidationError& e) {
    if (std::string(e.what()).find("non-finite") != std::string::npos) {
      throw IoError(std::string("train_step: forward diverged to non-finite values (") +
                    e.what() + "); check the learning rate");
    }
    throw;
  }
  if (!features.f_i.allFinite() || !features.logits.allFinite()) {
    throw IoError("train_step: forward diverged to non-finite features; check the learning rate");
  }

  LossBreakdown out;
  out.cls = cross_entropy_loss(features.logits, classes);
  out.tri = batch_hard_triplet_loss(features.f_i, pids, cfg_.triplet);
  out.id = id_loss(out.cls, out.tri, cfg_.weights);
  out.cb = contrastive_loss(features.f_i_b, text_b, cfg_.contrastive_temperature);
  out.cn.resize(cfg_.factors.size());
  for (std::size_t k = 0; k < cfg_.factors.size(); ++k) {
    out.cn[k] = contrastive_loss(features.f_i_n[k], text_n[k], cfg_.contrastive_temperature);
  }
  out.total = total_loss(out.id, out.cb, out.cn, cfg_.weights);

  if (!std::isfinite(out.total)) {
    std::string dump = "train_step: non-finite total loss; components: cls=" +
                       std::to_string(out.cls) + " tri=" + std::to_string(out.tri) +
                       " cb=" + std::to_string(out.cb);
    for (std::size_t k = 0; k < out.cn.size(); ++k) {
      dump += " cn" + std::to_string(k) + "=" + std::to_string(out.cn[k]);
    }
    throw IoError(dump);
  }

  const double w_cls = cfg_.weights.lambda_id * cfg_.weights.lambda_c;
  const double w_tri = cfg_.weights.lambda_id * cfg_.weights.lambda_t;
  const Matrix grad_logits = w_cls * cross_entropy_loss_grad(features.logits, classes);
  const Matrix grad_f_i =
      w_tri * batch_hard_triplet_loss_grad(features.f_i, pids, cfg_.triplet);
  const Matrix grad_f_b =
      cfg_.weights.lambda_b *
      contrastive_loss_grad(features.f_i_b, text_b, cfg_.contrastive_temperature);
  std::vector<Matrix> grad_f_n;
  grad_f_n.reserve(cfg_.factors.size());
  for (std::size_t k = 0; k < cfg_.factors.size(); ++k) {
    grad_f_n.push_back(cfg_.weights.lambda_n * contrastive_loss_grad(features.f_i_n[k], text_n[k],
                                                                     cfg_.contrastive_temperature));
  }

  model_.zero_grads();
  model_.backward_batch(grad_logits, grad_f_i, grad_f_b, grad_f_n);

  out.lr = lr_schedule(state_.step, schedule_);
  sgd_update(out.lr);
  ++state_.step;
  return out;
}

void Trainer::sgd_update(double lr) {
  const auto params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    Matrix g = p->grad;
    if (p->decay && cfg_.weight_decay > 0.0) g += cfg_.weight_decay * p->values();
    const Matrix v = cfg_.momentum * momentum_[i].cast<double>() + g;
    momentum_[i] = v.cast<float>();
    p->value = (p->values() - lr * momentum_[i].cast<double>()).cast<float>();
  }
}

double Trainer::evaluate_rank1() const {
  if (!eval_query_ || !eval_gallery_) throw ValidationError("train: no evaluation split attached");
  const Matrix qf = extract_features(model_, *eval_query_);
  const Matrix gf = extract_features(model_, *eval_gallery_);
  const Matrix dist = pairwise_distances(qf, gf, cfg_.eval_metric);
  const ProtocolMask mask =
      build_protocol_mask(id_meta(*eval_query_), id_meta(*eval_gallery_), Protocol::kGeneral);
  const EvalResult result = cmc_map(dist, mask);
  return result.cmc.empty() ? 0.0 : result.cmc[0];
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

FitResult Trainer::fit(const std::filesystem::path& out_dir, const std::string& config_sha256,
                       const std::filesystem::path& resume_from, Index stop_after_epoch) {
  std::filesystem::create_directories(out_dir);
  if (!resume_from.empty()) restore_checkpoint(resume_from, config_sha256);

  FitResult result;
  result.final_checkpoint = out_dir / "final.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  result.metrics_path = out_dir / "metrics.csv";

  std::ofstream metrics(result.metrics_path, std::ios::trunc | std::ios::binary);
  if (!metrics) throw IoError("train: cannot open '" + result.metrics_path.string() + "'");
  metrics << "step,epoch,lr,loss_total,loss_id,loss_cb";
  for (Index k = 0; k < static_cast<Index>(cfg_.factors.size()); ++k) {
    metrics << ",loss_cn_" << k;
  }
  metrics << "\n";

  if (sampler_.uses_replacement()) {
    std::fprintf(stderr, "train: some ids have fewer than K instances; sampling with replacement\n");
  }

  const Index stop =
      stop_after_epoch >= 0 ? std::min(stop_after_epoch, cfg_.epochs) : cfg_.epochs;
  for (Index e = state_.epoch; e < stop; ++e) {
    const auto batches = sampler_.epoch(e);
    for (const auto& batch : batches) {
      const LossBreakdown loss = train_step(batch);
      metrics << state_.step - 1 << ',' << e << ',' << format_double(loss.lr) << ','
              << format_double(loss.total) << ',' << format_double(loss.id) << ','
              << format_double(loss.cb);
      for (double cn : loss.cn) metrics << ',' << format_double(cn);
      metrics << "\n";
      ++result.steps;
    }
    state_.epoch = e + 1;
    if (eval_query_ && cfg_.eval_cadence > 0 && (e + 1) % cfg_.eval_cadence == 0) {
      const double rank1 = evaluate_rank1();
      if (rank1 > result.best_rank1) {
        result.best_rank1 = rank1;
        save_checkpoint(result.best_checkpoint, config_sha256);
      }
    }
  }
  metrics.flush();
  if (!metrics) throw IoError("train: metrics write failed");

  save_checkpoint(result.final_checkpoint, config_sha256);
  if (!std::filesystem::exists(result.best_checkpoint)) {
    save_checkpoint(result.best_checkpoint, config_sha256);
  }
  return result;
}

void Trainer::save_checkpoint(const std::filesystem::path& path,
                              const std::string& config_sha256) const {
  ArrayArchive archive;
  auto& model = const_cast<DifferModel&>(model_);
  const auto params = model.params();
  for (Param* p : params) archive.put(p->name, p->value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    archive.put("opt.momentum." + params[i]->name, momentum_[i]);
  }
  archive.set_meta("kind", "checkpoint");
  archive.set_meta("model_config", model_.config().to_json());
  archive.set_meta("grl_coefficient", model_.grl().coefficient);
  nlohmann::json state;
  state["step"] = state_.step;
  state["epoch"] = state_.epoch;
  state["config_sha256"] = config_sha256;
  archive.set_meta("train_state", state);
  archive.save(path);
}

void Trainer::restore_checkpoint(const std::filesystem::path& path,
                                 const std::string& config_sha256) {
  const ArrayArchive archive = ArrayArchive::load(path);
  if (!archive.has_meta("train_state")) {
    throw ValidationError("resume: '" + path.string() + "' has no optimizer state");
  }
  const auto& state = archive.meta("train_state");
  const std::string stored_sha = state.at("config_sha256").get<std::string>();
  if (stored_sha != config_sha256) {
    throw ValidationError("resume: config hash mismatch (checkpoint " + stored_sha.substr(0, 12) +
                          "..., current " + config_sha256.substr(0, 12) + "...)");
  }
  const auto params = model_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    const MatrixF& stored = archive.array(p->name);
    if (stored.rows() != p->value.rows() || stored.cols() != p->value.cols()) {
      throw IoError("resume: array '" + p->name + "' has unexpected shape");
    }
    p->value = stored;
    momentum_[i] = archive.array("opt.momentum." + p->name);
  }
  state_.step = state.at("step").get<Index>();
  state_.epoch = state.at("epoch").get<Index>();
}

Matrix extract_features(const DifferModel& model, const Dataset& dataset) {
  const Index n = dataset.size();
  if (n == 0) throw ValidationError("extract_features: empty dataset");
  const Index chunk = 64;
  Matrix features(n, model.config().feature_dim);
  for (Index start = 0; start < n; start += chunk) {
    const Index count = std::min(chunk, n - start);
    std::vector<Index> rows(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) rows[static_cast<std::size_t>(i)] = start + i;
    features.middleRows(start, count) =
        model.infer_features(dataset.inputs_for(rows), dataset.camids_for(rows));
  }
  return features;
}

IdMeta id_meta(const Dataset& dataset) {
  IdMeta meta;
  meta.pid.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    meta.pid.push_back(s.pid);
    meta.camid.push_back(s.camid);
    meta.clothid.push_back(s.clothid);
  }
  return meta;
}

}  // namespace differ
