#include <fstream>
#include <sstream>

#include "doctest.h"

#include "differ/engine.hpp"
#include "differ/error.hpp"
#include "test_support.hpp"

using namespace differ;

namespace {

SynthConfig engine_data_config() {
  SynthConfig cfg;
  cfg.num_ids = 8;
  cfg.outfits_per_id = 2;
  cfg.images_per_outfit = 6;
  cfg.num_cameras = 3;
  cfg.d_b = 6;
  cfg.d_c = 6;
  cfg.d_h = 4;
  cfg.d_p = 4;
  cfg.input_dim = 24;
  cfg.noise_sigma = 0.05;
  cfg.seed = 11;
  return cfg;
}

ModelConfig engine_model_config() {
  ModelConfig cfg;
  cfg.feature_dim = 16;
  cfg.subspace_dim = 8;
  cfg.num_nonbiometric = 2;
  cfg.num_classes = 8;
  cfg.num_cameras = 3;
  cfg.encoder_kind = EncoderKind::kToyMlp;
  cfg.input_dim = 24;
  cfg.hidden_dim = 24;
  return cfg;
}

TrainConfig engine_train_config() {
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.base_lr = 0.05;
  cfg.warmup_initial_lr = 0.005;
  cfg.warmup_epochs = 1;
  cfg.weight_decay = 1e-4;
  cfg.momentum = 0.9;
  cfg.seed = 5;
  cfg.factors = {Aspect::kClothing, Aspect::kHair};
  cfg.eval_cadence = 0;
  cfg.batch_p = 2;
  cfg.batch_k = 4;
  return cfg;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("lr schedule pins") {
  TrainConfig cfg;  // documented defaults
  const LrSchedule schedule = make_lr_schedule(cfg, 100);
  CHECK(lr_schedule(0, schedule) == 8.42e-7);
  CHECK(lr_schedule(schedule.warmup_steps, schedule) == 2e-6);
  CHECK(lr_schedule(schedule.total_steps - 1, schedule) <= 1e-12);
  CHECK(lr_schedule(schedule.total_steps - 1, schedule) >= 0.0);

  // Linear interior of the warmup and the cosine midpoint.
  const double mid_warmup = lr_schedule(schedule.warmup_steps / 2, schedule);
  CHECK(mid_warmup > 8.42e-7);
  CHECK(mid_warmup < 2e-6);
  const Index mid = schedule.warmup_steps + (schedule.total_steps - 1 - schedule.warmup_steps) / 2;
  CHECK(lr_schedule(mid, schedule) == doctest::Approx(1e-6).epsilon(1e-3));

  CHECK_THROWS_AS(lr_schedule(-1, schedule), ValidationError);
}

TEST_CASE("zeroed lambdas leave the heads untouched") {
  const Dataset data = generate_dataset(engine_data_config());
  DifferModel model(engine_model_config(), 1);
  TrainConfig cfg = engine_train_config();
  cfg.weights.lambda_b = 0.0;
  cfg.weights.lambda_n = 0.0;
  cfg.weight_decay = 0.0;  // decay would move the heads regardless of the loss
  OracleTextProvider texts(model.config().subspace_dim);
  Trainer trainer(model, cfg, data, texts);

  std::map<std::string, MatrixF> heads_before;
  for (Param* p : model.params()) {
    if (p->name.rfind("head_", 0) == 0) heads_before[p->name] = p->value;
  }
  const auto batch = trainer.sampler().epoch(0).front();
  trainer.train_step(batch);
  for (Param* p : model.params()) {
    if (p->name.rfind("head_", 0) == 0) {
      CHECK(p->value == heads_before.at(p->name));
    } else if (p->name.rfind("encoder.", 0) == 0) {
      // The identity losses still update the encoder.
    }
  }
}

TEST_CASE("fixed seed gives identical loss trajectories for 100+ steps") {
  const Dataset data = generate_dataset(engine_data_config());

  auto run = [&](std::vector<double>& totals) {
    DifferModel model(engine_model_config(), 2);
    TrainConfig cfg = engine_train_config();
    cfg.epochs = 40;
    OracleTextProvider texts(model.config().subspace_dim);
    Trainer trainer(model, cfg, data, texts);
    Index steps = 0;
    for (Index e = 0; e < cfg.epochs && steps < 110; ++e) {
      for (const auto& batch : trainer.sampler().epoch(e)) {
        totals.push_back(trainer.train_step(batch).total);
        if (++steps >= 110) break;
      }
    }
  };
  std::vector<double> a, b;
  run(a);
  run(b);
  REQUIRE(a.size() >= 100);
  CHECK(a == b);  // bitwise identical trajectories
}

TEST_CASE("one batch overfits to under 10% of the initial loss") {
  const Dataset data = generate_dataset(engine_data_config());
  DifferModel model(engine_model_config(), 3);
  TrainConfig cfg = engine_train_config();
  cfg.epochs = 20;  // schedule horizon only; we drive steps manually
  cfg.base_lr = 0.2;
  cfg.warmup_initial_lr = 0.02;
  cfg.weight_decay = 0.0;
  // Identity losses only: the contrastive terms have an intrinsic floor on
  // a PK batch because K images share one target text.
  cfg.weights.lambda_b = 0.0;
  cfg.weights.lambda_n = 0.0;
  OracleTextProvider texts(model.config().subspace_dim);
  Trainer trainer(model, cfg, data, texts);

  const auto batch = trainer.sampler().epoch(0).front();
  const double initial = trainer.train_step(batch).total;
  double last = initial;
  for (int i = 0; i < 199; ++i) last = trainer.train_step(batch).total;
  CHECK(last < 0.1 * initial);
}

TEST_CASE("fit writes one metrics row per step and resumes bit-identically") {
  test::TempDir dir("fit");
  const Dataset data = generate_dataset(engine_data_config());
  const std::string sha = "cfg-hash-for-test";

  // Uninterrupted run.
  DifferModel full_model(engine_model_config(), 4);
  TrainConfig cfg = engine_train_config();
  OracleTextProvider texts(full_model.config().subspace_dim);
  Trainer full(full_model, cfg, data, texts);
  const FitResult full_result = full.fit(dir.path() / "full", sha);

  const std::string metrics = read_file(full_result.metrics_path);
  Index rows = 0;
  for (char c : metrics) rows += c == '\n';
  CHECK(rows == full_result.steps + 1);  // header plus one row per step
  CHECK(metrics.rfind("step,epoch,lr,loss_total,loss_id,loss_cb,loss_cn_0,loss_cn_1", 0) == 0);

  // Stop after two epochs, then resume to completion.
  DifferModel half_model(engine_model_config(), 4);
  OracleTextProvider texts2(half_model.config().subspace_dim);
  Trainer half(half_model, cfg, data, texts2);
  half.fit(dir.path() / "half", sha, {}, /*stop_after_epoch=*/2);

  DifferModel resumed_model(engine_model_config(), 4);
  OracleTextProvider texts3(resumed_model.config().subspace_dim);
  Trainer resumed(resumed_model, cfg, data, texts3);
  resumed.fit(dir.path() / "resumed", sha, dir.path() / "half" / "final.ckpt");

  auto pa = full_model.params();
  auto pb = resumed_model.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);

  // Mismatched config hash refuses to resume.
  DifferModel other_model(engine_model_config(), 4);
  OracleTextProvider texts4(other_model.config().subspace_dim);
  Trainer other(other_model, cfg, data, texts4);
  CHECK_THROWS_AS(other.fit(dir.path() / "bad", "another-hash", dir.path() / "half" / "final.ckpt"),
                  ValidationError);
}

TEST_CASE("zero epochs still writes the initial checkpoint") {
  test::TempDir dir("fit0");
  const Dataset data = generate_dataset(engine_data_config());
  DifferModel model(engine_model_config(), 6);
  TrainConfig cfg = engine_train_config();
  cfg.epochs = 0;
  OracleTextProvider texts(model.config().subspace_dim);
  Trainer trainer(model, cfg, data, texts);
  const FitResult result = trainer.fit(dir.path(), "sha0");
  CHECK(result.steps == 0);
  CHECK(std::filesystem::exists(result.final_checkpoint));
  const DifferModel loaded = DifferModel::load(result.final_checkpoint);
  CHECK(loaded.config().feature_dim == model.config().feature_dim);
}

TEST_CASE("non-finite losses abort with a component dump") {
  const Dataset data = generate_dataset(engine_data_config());
  DifferModel model(engine_model_config(), 7);
  TrainConfig cfg = engine_train_config();
  cfg.base_lr = 1e14;  // guaranteed blow-up
  cfg.warmup_initial_lr = 1e14;
  cfg.epochs = 50;
  OracleTextProvider texts(model.config().subspace_dim);
  Trainer trainer(model, cfg, data, texts);
  const auto batch = trainer.sampler().epoch(0).front();
  bool aborted = false;
  try {
    for (int i = 0; i < 50; ++i) trainer.train_step(batch);
  } catch (const IoError& e) {
    aborted = true;
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
  CHECK(aborted);
}

TEST_CASE("non-biometric heads keep learning on a frozen encoder") {
  const Dataset data = generate_dataset(engine_data_config());
  DifferModel model(engine_model_config(), 8);
  OracleTextProvider texts(model.config().subspace_dim);

  std::vector<Index> batch;
  for (Index i = 0; i < 16; ++i) batch.push_back(i);
  const Matrix inputs = data.inputs_for(batch);
  const auto cams = data.camids_for(batch);
  Matrix targets(16, model.config().subspace_dim);
  for (Index i = 0; i < 16; ++i) {
    targets.row(i) = texts.feature(data, batch[static_cast<std::size_t>(i)],
                                   Aspect::kClothing).transpose();
  }

  auto head_params = [&] {
    std::vector<Param*> out;
    for (Param* p : model.params()) {
      if (p->name.rfind("head_n0", 0) == 0) out.push_back(p);
    }
    return out;
  }();
  REQUIRE(!head_params.empty());

  double first = -1.0, last = -1.0;
  for (int iter = 0; iter < 60; ++iter) {
    const FeatureBatch f = model.forward_batch(inputs, cams, true);
    const double loss = contrastive_loss(f.f_i_n[0], targets);
    if (iter == 0) first = loss;
    last = loss;
    model.zero_grads();
    std::vector<Matrix> grad_n = {contrastive_loss_grad(f.f_i_n[0], targets),
                                  Matrix::Zero(16, model.config().subspace_dim)};
    model.backward_batch(Matrix::Zero(16, model.config().num_classes),
                         Matrix::Zero(16, model.config().feature_dim),
                         Matrix::Zero(16, model.config().subspace_dim), grad_n);
    for (Param* p : head_params) {
      p->value = (p->values() - 0.5 * p->grad).cast<float>();
    }
  }
  CHECK(last < first);
}

TEST_CASE("trainer validation") {
  const Dataset data = generate_dataset(engine_data_config());
  OracleTextProvider texts(8);

  // Factor list must match the number of heads.
  DifferModel model(engine_model_config(), 9);
  TrainConfig cfg = engine_train_config();
  cfg.factors = {Aspect::kClothing};
  CHECK_THROWS_AS(Trainer(model, cfg, data, texts), ValidationError);

  // Classifier width must match the identity count.
  ModelConfig wrong = engine_model_config();
  wrong.num_classes = 9;
  DifferModel wrong_model(wrong, 9);
  CHECK_THROWS_AS(Trainer(wrong_model, engine_train_config(), data, texts), ValidationError);

  TrainConfig bad = engine_train_config();
  bad.optimizer = "adam";
  CHECK_THROWS_AS(Trainer(model, bad, data, texts), ValidationError);

  bad = engine_train_config();
  bad.factors = {Aspect::kBiometric, Aspect::kHair};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
