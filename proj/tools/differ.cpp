#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"

#include "differ/commands.hpp"
#include "differ/error.hpp"

namespace {

struct GlobalOptions {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

differ::ToolConfig load_config(const GlobalOptions& global) {
  differ::ToolConfig cfg;
  if (!global.config_path.empty()) {
    cfg = differ::ToolConfig::from_file(global.config_path);
  }
  if (global.seed_set) {
    cfg.train.seed = global.seed;
    cfg.data.seed = global.seed;
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toolkit for text-supervised disentanglement of biometric features in "
               "clothes-changing person re-identification"};
  app.require_subcommand(1);

  GlobalOptions global;
  app.add_option("--config", global.config_path, "JSON configuration file");
  auto* seed_opt =
      app.add_option("--seed", global.seed, "Override train and data seeds from the config");
  app.add_option("--out", global.out, "Output directory");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic factor dataset with manifests");
  synth->fallthrough();

  auto* describe =
      app.add_subcommand("describe", "Generate per-image descriptions and identity summaries");
  describe->fallthrough();
  std::string describe_manifest, describe_cache;
  describe->add_option("--manifest", describe_manifest,
                       "Image manifest (default: <paths.data>/all.csv)");
  describe->add_option("--cache", describe_cache,
                       "Description cache file (default: <out>/descriptions.jsonl)");

  auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
  train->fallthrough();
  std::string train_data, train_resume, train_cache;
  bool train_baseline = false;
  long long train_stop_after = -1;
  train->add_option("--data", train_data, "Dataset directory (default: paths.data)");
  train->add_flag("--baseline", train_baseline,
                  "Train with identity losses only (lambda_b = lambda_n = 0)");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_option("--stop-after", train_stop_after,
                    "Checkpoint and stop after this many epochs (schedule is unchanged)");
  train->add_option("--cache", train_cache, "Description cache for text_backend=cached");

  auto* eval = app.add_subcommand("eval", "Rank a query set against a gallery and score it");
  eval->fallthrough();
  std::string eval_checkpoint, eval_oracle, eval_query, eval_gallery, eval_data;
  std::string eval_protocol = "general";
  long long eval_topk = 10;
  eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint");
  eval->add_option("--oracle-features", eval_oracle,
                   "Evaluate ground-truth factor features of this aspect instead of a checkpoint");
  eval->add_option("--query", eval_query, "Query manifest (default: <data>/query.csv)");
  eval->add_option("--gallery", eval_gallery, "Gallery manifest (default: <data>/gallery.csv)");
  eval->add_option("--data", eval_data, "Dataset directory");
  eval->add_option("--protocol", eval_protocol, "general | cc | sc");
  eval->add_option("--topk", eval_topk, "Entries per query in the retrieval report");

  auto* probe = app.add_subcommand("probe", "Linear-probe frozen features for a factor");
  probe->fallthrough();
  std::string probe_checkpoint, probe_manifest;
  std::string probe_factor = "clothid";
  probe->add_option("--checkpoint", probe_checkpoint, "Model checkpoint")->required();
  probe->add_option("--manifest", probe_manifest, "Manifest (default: <paths.data>/all.csv)");
  probe->add_option("--factor", probe_factor, "pid | clothid | camid");

  auto* report = app.add_subcommand("report", "2-D projection report of features by label");
  report->fallthrough();
  std::string report_checkpoint, report_oracle, report_manifest;
  std::string report_label = "pid";
  report->add_option("--checkpoint", report_checkpoint, "Model checkpoint");
  report->add_option("--oracle-features", report_oracle,
                     "Project ground-truth factor features of this aspect");
  report->add_option("--manifest", report_manifest, "Manifest (default: <paths.data>/all.csv)");
  report->add_option("--label", report_label, "pid | clothid | camid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags and bad values are validation errors
  }
  global.seed_set = seed_opt->count() > 0;

  try {
    const differ::ToolConfig cfg = load_config(global);
    if (synth->parsed()) {
      differ::cmd_synth(cfg, {global.out});
    } else if (describe->parsed()) {
      differ::DescribeOptions opt;
      opt.manifest = describe_manifest;
      opt.cache = describe_cache;
      opt.out = global.out;
      differ::cmd_describe(cfg, opt);
    } else if (train->parsed()) {
      differ::TrainOptions opt;
      opt.data_dir = train_data;
      opt.out = global.out;
      opt.baseline = train_baseline;
      opt.resume = train_resume;
      opt.stop_after = train_stop_after;
      opt.cache = train_cache;
      differ::cmd_train(cfg, opt);
    } else if (eval->parsed()) {
      differ::EvalOptions opt;
      opt.checkpoint = eval_checkpoint;
      opt.oracle_aspect = eval_oracle;
      opt.query = eval_query;
      opt.gallery = eval_gallery;
      opt.data_dir = eval_data;
      opt.protocol = eval_protocol;
      opt.topk = eval_topk;
      opt.out = global.out;
      const auto result = differ::cmd_eval(cfg, opt);
      std::printf("protocol=%s rank1=%.4f map=%.4f valid_queries=%lld\n",
                  differ::protocol_name(result.protocol).c_str(),
                  result.cmc.empty() ? 0.0 : result.cmc[0], result.map,
                  static_cast<long long>(result.num_valid_queries));
    } else if (probe->parsed()) {
      differ::ProbeOptions opt;
      opt.checkpoint = probe_checkpoint;
      opt.manifest = probe_manifest;
      opt.factor = probe_factor;
      opt.out = global.out;
      if (global.seed_set) opt.seed = global.seed;
      const double accuracy = differ::cmd_probe(cfg, opt);
      std::printf("factor=%s accuracy=%.4f\n", probe_factor.c_str(), accuracy);
    } else if (report->parsed()) {
      differ::ReportOptions opt;
      opt.checkpoint = report_checkpoint;
      opt.oracle_aspect = report_oracle;
      opt.manifest = report_manifest;
      opt.label = report_label;
      opt.out = global.out;
      differ::cmd_report(cfg, opt);
    }
  } catch (const differ::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
