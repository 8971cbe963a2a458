#include "differ/commands.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <set>

#include "differ/error.hpp"
#include "differ/sha256.hpp"

namespace differ {
namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("run manifest: cannot hash '" + path.string() + "'");
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(contents);
}

// Traceability record: every artifact a command reads or writes, hashed.
class RunManifest {
 public:
  RunManifest(std::string command, const ToolConfig& cfg)
      : command_(std::move(command)), config_sha_(cfg.config_sha256()),
        seed_(cfg.train.seed), started_(utc_now()) {}

  void input(const std::filesystem::path& path) { inputs_.push_back(path); }
  void output(const std::filesystem::path& path) { outputs_.push_back(path); }

  void write(const std::filesystem::path& out_dir) const {
    nlohmann::json j;
    j["command"] = command_;
    j["config_sha256"] = config_sha_;
    j["seed"] = seed_;
    j["started_at"] = started_;
    j["finished_at"] = utc_now();
    j["inputs"] = nlohmann::json::object();
    for (const auto& p : inputs_) j["inputs"][p.string()] = file_sha256(p);
    j["outputs"] = nlohmann::json::object();
    for (const auto& p : outputs_) j["outputs"][p.string()] = file_sha256(p);
    std::ofstream out(out_dir / "run_manifest.json", std::ios::trunc);
    if (!out) throw IoError("run manifest: cannot write into '" + out_dir.string() + "'");
    out << j.dump(2) << "\n";
  }

 private:
  std::string command_;
  std::string config_sha_;
  std::uint64_t seed_;
  std::string started_;
  std::vector<std::filesystem::path> inputs_;
  std::vector<std::filesystem::path> outputs_;
};

std::filesystem::path require_out(const std::filesystem::path& out, const char* command) {
  if (out.empty()) throw ValidationError(std::string(command) + ": --out is required");
  std::filesystem::create_directories(out);
  return out;
}

Matrix oracle_features(const Dataset& dataset, const std::string& aspect_name_str, Index dim) {
  const Aspect aspect = aspect_from_name(aspect_name_str);
  Matrix features(dataset.size(), dim);
  for (Index i = 0; i < dataset.size(); ++i) {
    features.row(i) = dataset.oracle_text_feature(i, aspect, dim).transpose();
  }
  return features;
}

std::vector<int> labels_by_factor(const Dataset& dataset, const std::string& factor) {
  std::vector<int> labels;
  labels.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) {
    if (factor == "pid") {
      labels.push_back(s.pid);
    } else if (factor == "clothid") {
      if (s.clothid < 0) {
        throw ValidationError("probe: sample '" + s.image_id + "' has no clothid");
      }
      labels.push_back(s.clothid);
    } else if (factor == "camid") {
      labels.push_back(s.camid);
    } else {
      throw ValidationError("probe: unknown factor '" + factor + "' (pid|clothid|camid)");
    }
  }
  return labels;
}

}  // namespace

void cmd_synth(const ToolConfig& cfg, const SynthOptions& opt) {
  const auto out = require_out(opt.out, "synth");
  RunManifest manifest("synth", cfg);
  const Dataset dataset = generate_dataset(cfg.data);
  save_dataset(dataset, out);
  for (const char* name : {"arrays.bin", "all.csv", "train.csv", "query.csv", "gallery.csv"}) {
    manifest.output(out / name);
  }
  manifest.write(out);
}

void cmd_describe(const ToolConfig& cfg, const DescribeOptions& opt) {
  const auto out = require_out(opt.out, "describe");
  const auto manifest_path =
      opt.manifest.empty() ? cfg.paths.data / "all.csv" : opt.manifest;
  const auto cache_path = opt.cache.empty() ? out / "descriptions.jsonl" : opt.cache;

  RunManifest run("describe", cfg);
  run.input(manifest_path);

  const auto records = read_manifest(manifest_path);
  DescriptionCache cache(cache_path);
  std::unique_ptr<ChatClient> owned;
  ChatClient* client = opt.client;
  if (!client) {
    owned = make_client(cfg.semantics.client);
    client = owned.get();
  }
  Describer describer(PromptCatalog::defaults(), *client, cache);

  bool has_biometric = false;
  for (Aspect aspect : cfg.semantics.aspects) {
    if (aspect == Aspect::kBiometric) has_biometric = true;
    for (const auto& r : records) describer.describe_image(r.image_id, aspect);
  }

  if (has_biometric) {
    // One summary per identity over its per-image biometric texts.
    std::map<int, std::vector<std::string>> texts_by_pid;
    for (const auto& r : records) {
      texts_by_pid[r.pid].push_back(describer.describe_image(r.image_id, Aspect::kBiometric));
    }
    for (const auto& [pid, texts] : texts_by_pid) {
      describer.summarize_identity(texts, Aspect::kBiometricSummary,
                                   "pid:" + std::to_string(pid));
    }
  }

  if (cfg.semantics.use_clothing_summary) {
    std::map<int, std::vector<std::string>> texts_by_cloth;
    for (const auto& r : records) {
      if (r.clothid < 0) {
        throw ValidationError("describe: clothing summaries need clothids in the manifest");
      }
      texts_by_cloth[r.clothid].push_back(
          describer.describe_image(r.image_id, Aspect::kClothing));
    }
    for (const auto& [clothid, texts] : texts_by_cloth) {
      describer.summarize_identity(texts, Aspect::kClothingSummary,
                                   "cloth:" + std::to_string(clothid));
    }
  }

  run.output(cache_path);
  run.write(out);
}

FitResult cmd_train(const ToolConfig& cfg, const TrainOptions& opt) {
  const auto out = require_out(opt.out, "train");
  const auto data_dir = opt.data_dir.empty() ? cfg.paths.data : opt.data_dir;
  if (data_dir.empty()) throw ValidationError("train: no dataset directory configured");

  RunManifest run("train", cfg);
  const auto train_manifest = data_dir / "train.csv";
  run.input(train_manifest);
  const Dataset train_data = load_manifest(train_manifest);

  ToolConfig effective = cfg;
  if (opt.baseline) {
    effective.train.weights.lambda_b = 0.0;
    effective.train.weights.lambda_n = 0.0;
  }
  // The config hash keys checkpoints; the baseline flag changes it through
  // the loss weights above.
  const std::string config_sha = effective.config_sha256();

  DifferModel model(effective.model, effective.train.seed);

  std::unique_ptr<TextFeatureProvider> provider;
  std::unique_ptr<DescriptionCache> cache;
  if (effective.train.text_backend == "oracle") {
    provider = std::make_unique<OracleTextProvider>(effective.model.subspace_dim);
  } else {
    const auto cache_path = opt.cache.empty() ? effective.paths.cache : opt.cache;
    if (cache_path.empty()) {
      throw ValidationError("train: text_backend=cached needs --cache");
    }
    run.input(cache_path);
    cache = std::make_unique<DescriptionCache>(cache_path);
    provider = std::make_unique<CachedTextProvider>(
        effective.model.subspace_dim, *cache, PromptCatalog::defaults(),
        make_client(effective.semantics.client)->model_name(), effective.semantics.embed_seed,
        effective.semantics.use_clothing_summary);
  }

  Trainer trainer(model, effective.train, train_data, *provider);

  Dataset query_data, gallery_data;
  const auto query_path = data_dir / "query.csv";
  const auto gallery_path = data_dir / "gallery.csv";
  if (std::filesystem::exists(query_path) && std::filesystem::exists(gallery_path)) {
    query_data = load_manifest(query_path);
    gallery_data = load_manifest(gallery_path);
    if (query_data.size() > 0 && gallery_data.size() > 0) {
      trainer.attach_eval(query_data, gallery_data);
    }
  }

  const FitResult result = trainer.fit(out, config_sha, opt.resume, opt.stop_after);
  run.output(result.final_checkpoint);
  run.output(result.best_checkpoint);
  run.output(result.metrics_path);
  run.write(out);
  return result;
}

EvalResult cmd_eval(const ToolConfig& cfg, const EvalOptions& opt) {
  const auto out = require_out(opt.out, "eval");
  const auto data_dir = opt.data_dir.empty() ? cfg.paths.data : opt.data_dir;
  const auto query_path = opt.query.empty() ? data_dir / "query.csv" : opt.query;
  const auto gallery_path = opt.gallery.empty() ? data_dir / "gallery.csv" : opt.gallery;
  const Protocol protocol = protocol_from_name(opt.protocol);

  RunManifest run("eval", cfg);
  run.input(query_path);
  run.input(gallery_path);
  const Dataset query = load_manifest(query_path);
  const Dataset gallery = load_manifest(gallery_path);
  if (query.size() == 0) throw ValidationError("eval: empty query manifest");
  if (gallery.size() == 0) throw ValidationError("eval: empty gallery manifest");

  Matrix query_features, gallery_features;
  if (!opt.oracle_aspect.empty()) {
    query_features = oracle_features(query, opt.oracle_aspect, cfg.model.subspace_dim);
    gallery_features = oracle_features(gallery, opt.oracle_aspect, cfg.model.subspace_dim);
  } else {
    if (opt.checkpoint.empty()) {
      throw ValidationError("eval: need --checkpoint or --oracle-features");
    }
    run.input(opt.checkpoint);
    const DifferModel model = DifferModel::load(opt.checkpoint);
    query_features = extract_features(model, query);
    gallery_features = extract_features(model, gallery);
  }

  const Matrix dist = pairwise_distances(query_features, gallery_features, cfg.train.eval_metric);
  const ProtocolMask mask = build_protocol_mask(id_meta(query), id_meta(gallery), protocol);
  const EvalResult result = cmc_map(dist, mask);

  std::vector<std::string> query_ids, gallery_ids;
  for (const auto& s : query.samples) query_ids.push_back(s.image_id);
  for (const auto& s : gallery.samples) gallery_ids.push_back(s.image_id);
  const auto records = retrieval_report(query_ids, gallery_ids, dist, mask, opt.topk);

  const auto eval_path = out / "eval.json";
  {
    std::ofstream f(eval_path, std::ios::trunc);
    if (!f) throw IoError("eval: cannot write '" + eval_path.string() + "'");
    nlohmann::json j = result.to_json();
    j["metric"] = metric_name(cfg.train.eval_metric);
    f << j.dump(2) << "\n";
  }
  write_retrieval_report(records, out / "retrieval.jsonl", out / "retrieval.html");

  run.output(eval_path);
  run.output(out / "retrieval.jsonl");
  run.output(out / "retrieval.html");
  run.write(out);
  return result;
}

double cmd_probe(const ToolConfig& cfg, const ProbeOptions& opt) {
  const auto out = require_out(opt.out, "probe");
  const auto manifest_path = opt.manifest.empty() ? cfg.paths.data / "all.csv" : opt.manifest;
  if (opt.checkpoint.empty()) throw ValidationError("probe: --checkpoint is required");

  RunManifest run("probe", cfg);
  run.input(manifest_path);
  run.input(opt.checkpoint);

  const Dataset dataset = load_manifest(manifest_path);
  const DifferModel model = DifferModel::load(opt.checkpoint);
  const Matrix features = extract_features(model, dataset);
  const std::vector<int> labels = labels_by_factor(dataset, opt.factor);
  const std::uint64_t seed = opt.seed.value_or(cfg.train.seed);
  const double accuracy = linear_probe(features, labels, seed);

  std::set<int> classes(labels.begin(), labels.end());
  const auto probe_path = out / "probe.json";
  {
    std::ofstream f(probe_path, std::ios::trunc);
    if (!f) throw IoError("probe: cannot write '" + probe_path.string() + "'");
    nlohmann::json j;
    j["factor"] = opt.factor;
    j["accuracy"] = accuracy;
    j["num_samples"] = dataset.size();
    j["num_classes"] = classes.size();
    j["seed"] = seed;
    f << j.dump(2) << "\n";
  }
  run.output(probe_path);
  run.write(out);
  return accuracy;
}

void cmd_report(const ToolConfig& cfg, const ReportOptions& opt) {
  const auto out = require_out(opt.out, "report");
  const auto manifest_path = opt.manifest.empty() ? cfg.paths.data / "all.csv" : opt.manifest;

  RunManifest run("report", cfg);
  run.input(manifest_path);
  const Dataset dataset = load_manifest(manifest_path);

  Matrix features;
  if (!opt.oracle_aspect.empty()) {
    features = oracle_features(dataset, opt.oracle_aspect, cfg.model.subspace_dim);
  } else {
    if (opt.checkpoint.empty()) {
      throw ValidationError("report: need --checkpoint or --oracle-features");
    }
    run.input(opt.checkpoint);
    const DifferModel model = DifferModel::load(opt.checkpoint);
    features = extract_features(model, dataset);
  }

  const std::vector<int> labels = labels_by_factor(dataset, opt.label);
  const ClusterReport report = cluster_report(features, labels);

  const auto report_path = out / "cluster.json";
  {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("report: cannot write '" + report_path.string() + "'");
    nlohmann::json j = report.to_json();
    j["label"] = opt.label;
    f << j.dump(2) << "\n";
  }
  run.output(report_path);
  run.write(out);
}

}  // namespace differ
