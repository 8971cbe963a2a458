#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "differ/types.hpp"

namespace differ {

enum class Protocol { kGeneral, kCC, kSC };
enum class Metric { kEuclidean, kCosine };

std::string protocol_name(Protocol protocol);
Protocol protocol_from_name(const std::string& name);
std::string metric_name(Metric metric);
Metric metric_from_name(const std::string& name);

Matrix pairwise_distances(const Matrix& queries, const Matrix& gallery, Metric metric);

struct IdMeta {
  std::vector<int> pid, camid, clothid;
};

// valid(q, g): the pair participates in ranking for query q.
// match(q, g): the pair is a positive under the protocol (defined on valid
// entries).
struct ProtocolMask {
  BoolMatrix valid;
  BoolMatrix match;
  Protocol protocol = Protocol::kGeneral;
};

ProtocolMask build_protocol_mask(const IdMeta& query, const IdMeta& gallery, Protocol protocol);

struct EvalResult {
  std::vector<double> cmc;  // rank-k accuracy, k = 1..G
  double map = 0.0;
  Index num_valid_queries = 0;
  Index num_excluded_queries = 0;
  Protocol protocol = Protocol::kGeneral;

  nlohmann::json to_json() const;
};

// Single-gallery-shot CMC and mean average precision over valid queries;
// ties break by gallery index.
EvalResult cmc_map(const Matrix& distmat, const ProtocolMask& mask);

// Held-out accuracy of a closed-form ridge classifier on frozen features.
// The train/test split is a seeded 70/30 shuffle.
double linear_probe(const Matrix& features, const std::vector<int>& labels, std::uint64_t seed);

struct RetrievalEntry {
  std::string gallery_id;
  double distance = 0.0;
  bool correct = false;
};

struct RetrievalRecord {
  std::string query_id;
  bool excluded = false;
  std::vector<RetrievalEntry> entries;
};

std::vector<RetrievalRecord> retrieval_report(const std::vector<std::string>& query_ids,
                                              const std::vector<std::string>& gallery_ids,
                                              const Matrix& distmat, const ProtocolMask& mask,
                                              Index k);
void write_retrieval_report(const std::vector<RetrievalRecord>& records,
                            const std::filesystem::path& jsonl_path,
                            const std::filesystem::path& html_path);

// Top-2 principal component projection with silhouette-style separation
// statistics; a deterministic replacement for stochastic embedding plots.
struct ClusterReport {
  Matrix coords;  // N x 2
  double separation = 0.0;
  std::map<int, double> per_label_separation;

  nlohmann::json to_json() const;
};

ClusterReport cluster_report(const Matrix& features, const std::vector<int>& labels);

}  // namespace differ
