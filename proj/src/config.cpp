#include "differ/config.hpp"

#include <fstream>
#include <set>

#include "differ/error.hpp"
#include "differ/sha256.hpp"

namespace differ {
namespace {

void check_keys(const nlohmann::json& j, const std::string& section,
                const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ValidationError("config: section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ValidationError("config: unknown key '" + section + "." + key + "'");
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_path(const nlohmann::json& j, const char* key, std::filesystem::path& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}

}  // namespace

ToolConfig ToolConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: malformed JSON in '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

ToolConfig ToolConfig::from_json(const nlohmann::json& j) {
  ToolConfig cfg;
  check_keys(j, "", {"model", "train", "data", "semantics", "paths"});

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"feature_dim", "subspace_dim", "num_nonbiometric", "num_classes", "num_cameras",
                "encoder_kind", "input_dim", "hidden_dim", "image_side", "patch_size",
                "embed_dim", "num_heads"});
    cfg.model = ModelConfig::from_json(m);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"epochs", "base_lr", "warmup_initial_lr", "warmup_epochs", "weight_decay",
                "optimizer", "momentum", "seed", "lambda_id", "lambda_b", "lambda_n", "lambda_c",
                "lambda_t", "grl_coefficient", "triplet_margin", "triplet_reduction",
                "contrastive_temperature", "factors", "eval_cadence", "batch_p", "batch_k",
                "text_backend", "eval_metric"});
    read(t, "epochs", cfg.train.epochs);
    read(t, "base_lr", cfg.train.base_lr);
    read(t, "warmup_initial_lr", cfg.train.warmup_initial_lr);
    read(t, "warmup_epochs", cfg.train.warmup_epochs);
    read(t, "weight_decay", cfg.train.weight_decay);
    read(t, "optimizer", cfg.train.optimizer);
    read(t, "momentum", cfg.train.momentum);
    read(t, "seed", cfg.train.seed);
    read(t, "lambda_id", cfg.train.weights.lambda_id);
    read(t, "lambda_b", cfg.train.weights.lambda_b);
    read(t, "lambda_n", cfg.train.weights.lambda_n);
    read(t, "lambda_c", cfg.train.weights.lambda_c);
    read(t, "lambda_t", cfg.train.weights.lambda_t);
    read(t, "grl_coefficient", cfg.train.grl_coefficient);
    read(t, "triplet_margin", cfg.train.triplet.margin);
    if (t.contains("triplet_reduction")) {
      const std::string r = t.at("triplet_reduction").get<std::string>();
      if (r == "sum") {
        cfg.train.triplet.reduction = TripletConfig::Reduction::kSum;
      } else if (r == "mean") {
        cfg.train.triplet.reduction = TripletConfig::Reduction::kMean;
      } else {
        throw ValidationError("config: train.triplet_reduction must be 'sum' or 'mean'");
      }
    }
    read(t, "contrastive_temperature", cfg.train.contrastive_temperature);
    if (t.contains("factors")) {
      cfg.train.factors.clear();
      for (const auto& name : t.at("factors")) {
        cfg.train.factors.push_back(aspect_from_name(name.get<std::string>()));
      }
    }
    read(t, "eval_cadence", cfg.train.eval_cadence);
    read(t, "batch_p", cfg.train.batch_p);
    read(t, "batch_k", cfg.train.batch_k);
    read(t, "text_backend", cfg.train.text_backend);
    if (t.contains("eval_metric")) {
      cfg.train.eval_metric = metric_from_name(t.at("eval_metric").get<std::string>());
    }
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, "data",
               {"num_ids", "outfits_per_id", "images_per_outfit", "eval_outfits_per_id",
                "num_cameras", "d_b", "d_c", "d_h", "d_p", "input_dim", "noise_sigma",
                "camera_sigma", "seed"});
    read(d, "num_ids", cfg.data.num_ids);
    read(d, "outfits_per_id", cfg.data.outfits_per_id);
    read(d, "images_per_outfit", cfg.data.images_per_outfit);
    read(d, "eval_outfits_per_id", cfg.data.eval_outfits_per_id);
    read(d, "num_cameras", cfg.data.num_cameras);
    read(d, "d_b", cfg.data.d_b);
    read(d, "d_c", cfg.data.d_c);
    read(d, "d_h", cfg.data.d_h);
    read(d, "d_p", cfg.data.d_p);
    read(d, "input_dim", cfg.data.input_dim);
    read(d, "noise_sigma", cfg.data.noise_sigma);
    read(d, "camera_sigma", cfg.data.camera_sigma);
    read(d, "seed", cfg.data.seed);
  }

  if (j.contains("semantics")) {
    const auto& s = j.at("semantics");
    check_keys(s, "semantics", {"aspects", "use_clothing_summary", "embed_seed", "client"});
    if (s.contains("aspects")) {
      cfg.semantics.aspects.clear();
      for (const auto& name : s.at("aspects")) {
        cfg.semantics.aspects.push_back(aspect_from_name(name.get<std::string>()));
      }
    }
    read(s, "use_clothing_summary", cfg.semantics.use_clothing_summary);
    read(s, "embed_seed", cfg.semantics.embed_seed);
    if (s.contains("client")) {
      const auto& c = s.at("client");
      check_keys(c, "semantics.client",
                 {"kind", "endpoint", "model", "auth_env", "max_retries", "timeout_seconds"});
      read(c, "kind", cfg.semantics.client.kind);
      read(c, "endpoint", cfg.semantics.client.endpoint);
      read(c, "model", cfg.semantics.client.model);
      read(c, "auth_env", cfg.semantics.client.auth_env);
      read(c, "max_retries", cfg.semantics.client.max_retries);
      read(c, "timeout_seconds", cfg.semantics.client.timeout_seconds);
    }
  }

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    check_keys(p, "paths", {"data", "cache"});
    read_path(p, "data", cfg.paths.data);
    read_path(p, "cache", cfg.paths.cache);
  }
  return cfg;
}

nlohmann::json ToolConfig::to_json() const {
  nlohmann::json j;
  j["model"] = model.to_json();

  nlohmann::json t;
  t["epochs"] = train.epochs;
  t["base_lr"] = train.base_lr;
  t["warmup_initial_lr"] = train.warmup_initial_lr;
  t["warmup_epochs"] = train.warmup_epochs;
  t["weight_decay"] = train.weight_decay;
  t["optimizer"] = train.optimizer;
  t["momentum"] = train.momentum;
  t["seed"] = train.seed;
  t["lambda_id"] = train.weights.lambda_id;
  t["lambda_b"] = train.weights.lambda_b;
  t["lambda_n"] = train.weights.lambda_n;
  t["lambda_c"] = train.weights.lambda_c;
  t["lambda_t"] = train.weights.lambda_t;
  t["grl_coefficient"] = train.grl_coefficient;
  t["triplet_margin"] = train.triplet.margin;
  t["triplet_reduction"] =
      train.triplet.reduction == TripletConfig::Reduction::kSum ? "sum" : "mean";
  t["contrastive_temperature"] = train.contrastive_temperature;
  t["factors"] = nlohmann::json::array();
  for (Aspect a : train.factors) t["factors"].push_back(aspect_name(a));
  t["eval_cadence"] = train.eval_cadence;
  t["batch_p"] = train.batch_p;
  t["batch_k"] = train.batch_k;
  t["text_backend"] = train.text_backend;
  t["eval_metric"] = metric_name(train.eval_metric);
  j["train"] = t;

  nlohmann::json d;
  d["num_ids"] = data.num_ids;
  d["outfits_per_id"] = data.outfits_per_id;
  d["images_per_outfit"] = data.images_per_outfit;
  d["eval_outfits_per_id"] = data.eval_outfits_per_id;
  d["num_cameras"] = data.num_cameras;
  d["d_b"] = data.d_b;
  d["d_c"] = data.d_c;
  d["d_h"] = data.d_h;
  d["d_p"] = data.d_p;
  d["input_dim"] = data.input_dim;
  d["noise_sigma"] = data.noise_sigma;
  d["camera_sigma"] = data.camera_sigma;
  d["seed"] = data.seed;
  j["data"] = d;

  nlohmann::json s;
  s["aspects"] = nlohmann::json::array();
  for (Aspect a : semantics.aspects) s["aspects"].push_back(aspect_name(a));
  s["use_clothing_summary"] = semantics.use_clothing_summary;
  s["embed_seed"] = semantics.embed_seed;
  nlohmann::json c;
  c["kind"] = semantics.client.kind;
  c["endpoint"] = semantics.client.endpoint;
  c["model"] = semantics.client.model;
  c["auth_env"] = semantics.client.auth_env;
  c["max_retries"] = semantics.client.max_retries;
  c["timeout_seconds"] = semantics.client.timeout_seconds;
  s["client"] = c;
  j["semantics"] = s;

  nlohmann::json p;
  p["data"] = paths.data.string();
  p["cache"] = paths.cache.string();
  j["paths"] = p;
  return j;
}

std::string ToolConfig::config_sha256() const { return sha256_hex(to_json().dump()); }

}  // namespace differ
