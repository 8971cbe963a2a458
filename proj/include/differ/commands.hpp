#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "differ/config.hpp"

namespace differ {

// Command implementations behind the CLI, callable in-process. Each writes a
// run_manifest.json tracing inputs and outputs into its output directory.

struct SynthOptions {
  std::filesystem::path out;
};
void cmd_synth(const ToolConfig& cfg, const SynthOptions& opt);

struct DescribeOptions {
  std::filesystem::path manifest;  // defaults to <paths.data>/all.csv
  std::filesystem::path cache;     // defaults to <out>/descriptions.jsonl
  std::filesystem::path out;
  ChatClient* client = nullptr;  // injected for tests; otherwise built from config
};
void cmd_describe(const ToolConfig& cfg, const DescribeOptions& opt);

struct TrainOptions {
  std::filesystem::path data_dir;  // defaults to paths.data
  std::filesystem::path out;
  bool baseline = false;  // ablates the NBDetach supervision: lambda_b = lambda_n = 0
  std::filesystem::path resume;
  Index stop_after = -1;           // checkpoint and stop after this many epochs
  std::filesystem::path cache;     // required for text_backend=cached
};
FitResult cmd_train(const ToolConfig& cfg, const TrainOptions& opt);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::string oracle_aspect;  // evaluate oracle text features instead of a checkpoint
  std::filesystem::path query;    // defaults to <data_dir>/query.csv
  std::filesystem::path gallery;  // defaults to <data_dir>/gallery.csv
  std::filesystem::path data_dir;
  std::string protocol = "general";
  Index topk = 10;
  std::filesystem::path out;
};
EvalResult cmd_eval(const ToolConfig& cfg, const EvalOptions& opt);

struct ProbeOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;  // defaults to <paths.data>/all.csv
  std::string factor = "clothid";  // pid | clothid | camid
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};
double cmd_probe(const ToolConfig& cfg, const ProbeOptions& opt);

struct ReportOptions {
  std::filesystem::path checkpoint;
  std::string oracle_aspect;
  std::filesystem::path manifest;
  std::string label = "pid";  // pid | clothid | camid
  std::filesystem::path out;
};
void cmd_report(const ToolConfig& cfg, const ReportOptions& opt);

}  // namespace differ
