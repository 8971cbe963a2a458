#include "differ/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "differ/error.hpp"
#include "differ/rng.hpp"

namespace differ {

std::string protocol_name(Protocol protocol) {
  switch (protocol) {
    case Protocol::kGeneral:
      return "general";
    case Protocol::kCC:
      return "cc";
    case Protocol::kSC:
      return "sc";
  }
  throw ValidationError("unknown protocol");
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "general") return Protocol::kGeneral;
  if (name == "cc") return Protocol::kCC;
  if (name == "sc") return Protocol::kSC;
  throw ValidationError("unknown protocol '" + name + "'");
}

std::string metric_name(Metric metric) {
  return metric == Metric::kEuclidean ? "euclidean" : "cosine";
}

Metric metric_from_name(const std::string& name) {
  if (name == "euclidean") return Metric::kEuclidean;
  if (name == "cosine") return Metric::kCosine;
  throw ValidationError("unknown metric '" + name + "'");
}

Matrix pairwise_distances(const Matrix& queries, const Matrix& gallery, Metric metric) {
  if (queries.cols() != gallery.cols()) {
    throw ValidationError("pairwise_distances: feature dims differ (" +
                          std::to_string(queries.cols()) + " vs " +
                          std::to_string(gallery.cols()) + ")");
  }
  Matrix dist(queries.rows(), gallery.rows());
  if (metric == Metric::kEuclidean) {
    for (Index q = 0; q < queries.rows(); ++q) {
      for (Index g = 0; g < gallery.rows(); ++g) {
        dist(q, g) = std::sqrt((queries.row(q) - gallery.row(g)).squaredNorm());
      }
    }
  } else {
    for (Index q = 0; q < queries.rows(); ++q) {
      const double qn = queries.row(q).norm();
      if (!(qn > 0.0)) throw ValidationError("pairwise_distances: zero-norm query row");
      for (Index g = 0; g < gallery.rows(); ++g) {
        const double gn = gallery.row(g).norm();
        if (!(gn > 0.0)) throw ValidationError("pairwise_distances: zero-norm gallery row");
        dist(q, g) = 1.0 - queries.row(q).dot(gallery.row(g)) / (qn * gn);
      }
    }
  }
  return dist;
}

ProtocolMask build_protocol_mask(const IdMeta& query, const IdMeta& gallery, Protocol protocol) {
  const Index q = static_cast<Index>(query.pid.size());
  const Index g = static_cast<Index>(gallery.pid.size());
  if (query.camid.size() != query.pid.size() || gallery.camid.size() != gallery.pid.size()) {
    throw ValidationError("protocol mask: incomplete camera metadata");
  }
  const bool needs_cloth = protocol != Protocol::kGeneral;
  if (needs_cloth) {
    if (query.clothid.size() != query.pid.size() ||
        gallery.clothid.size() != gallery.pid.size()) {
      throw ValidationError("protocol mask: clothing ids required under cc/sc");
    }
    for (int c : query.clothid) {
      if (c < 0) throw ValidationError("protocol mask: missing query clothid under cc/sc");
    }
    for (int c : gallery.clothid) {
      if (c < 0) throw ValidationError("protocol mask: missing gallery clothid under cc/sc");
    }
  }

  ProtocolMask mask;
  mask.protocol = protocol;
  mask.valid.resize(q, g);
  mask.match.resize(q, g);
  for (Index i = 0; i < q; ++i) {
    for (Index j = 0; j < g; ++j) {
      const bool same_pid = query.pid[i] == gallery.pid[j];
      const bool same_cam = query.camid[i] == gallery.camid[j];
      bool valid = !(same_pid && same_cam);
      if (valid && protocol == Protocol::kCC && same_pid &&
          query.clothid[i] == gallery.clothid[j]) {
        valid = false;  // drop same-outfit pairs: only clothes-changed positives remain
      }
      if (valid && protocol == Protocol::kSC && same_pid &&
          query.clothid[i] != gallery.clothid[j]) {
        valid = false;  // drop cross-outfit pairs: only same-clothes positives remain
      }
      mask.valid(i, j) = valid;
      mask.match(i, j) = valid && same_pid;
    }
  }
  return mask;
}

nlohmann::json EvalResult::to_json() const {
  nlohmann::json j;
  j["protocol"] = protocol_name(protocol);
  j["cmc"] = cmc;
  j["map"] = map;
  j["num_valid_queries"] = num_valid_queries;
  j["num_excluded_queries"] = num_excluded_queries;
  return j;
}

EvalResult cmc_map(const Matrix& distmat, const ProtocolMask& mask) {
  const Index q = distmat.rows();
  const Index g = distmat.cols();
  if (mask.valid.rows() != q || mask.valid.cols() != g) {
    throw ValidationError("cmc_map: mask shape does not match distance matrix");
  }

  EvalResult result;
  result.protocol = mask.protocol;
  std::vector<double> first_hit_count(static_cast<std::size_t>(g), 0.0);
  double ap_sum = 0.0;

  std::vector<Index> order;
  for (Index i = 0; i < q; ++i) {
    order.clear();
    Index num_pos = 0;
    for (Index j = 0; j < g; ++j) {
      if (!mask.valid(i, j)) continue;
      order.push_back(j);
      if (mask.match(i, j)) ++num_pos;
    }
    if (num_pos == 0) {
      ++result.num_excluded_queries;
      continue;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return distmat(i, a) < distmat(i, b); });
    Index hits = 0;
    double ap = 0.0;
    Index first_hit = -1;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (mask.match(i, order[r])) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(r + 1);
        if (first_hit < 0) first_hit = static_cast<Index>(r);
      }
    }
    ap_sum += ap / static_cast<double>(num_pos);
    first_hit_count[static_cast<std::size_t>(first_hit)] += 1.0;
    ++result.num_valid_queries;
  }

  if (result.num_valid_queries == 0) {
    throw ValidationError("cmc_map: no query has a valid positive under this protocol");
  }
  result.map = ap_sum / static_cast<double>(result.num_valid_queries);
  result.cmc.resize(static_cast<std::size_t>(g));
  double cumulative = 0.0;
  for (Index k = 0; k < g; ++k) {
    cumulative += first_hit_count[static_cast<std::size_t>(k)];
    result.cmc[static_cast<std::size_t>(k)] =
        cumulative / static_cast<double>(result.num_valid_queries);
  }
  return result;
}

double linear_probe(const Matrix& features, const std::vector<int>& labels, std::uint64_t seed) {
  const Index n = features.rows();
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw ValidationError("linear_probe: label count does not match feature rows");
  }
  std::set<int> distinct(labels.begin(), labels.end());
  if (distinct.size() < 2) throw ValidationError("linear_probe: need at least 2 classes");
  if (n < 4) throw ValidationError("linear_probe: need at least 4 samples");

  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(seed);
  rng.shuffle(perm);
  const Index n_test = std::max<Index>(1, (n * 3) / 10);
  const Index n_train = n - n_test;

  std::vector<int> classes(distinct.begin(), distinct.end());
  std::map<int, Index> class_index;
  for (std::size_t c = 0; c < classes.size(); ++c) class_index[classes[c]] = static_cast<Index>(c);
  const Index num_classes = static_cast<Index>(classes.size());
  const Index dim = features.cols();

  Matrix x(n_train, dim + 1);
  Matrix y = Matrix::Zero(n_train, num_classes);
  for (Index i = 0; i < n_train; ++i) {
    const Index row = perm[static_cast<std::size_t>(i)];
    x.row(i).head(dim) = features.row(row);
    x(i, dim) = 1.0;
    y(i, class_index.at(labels[static_cast<std::size_t>(row)])) = 1.0;
  }

  const double ridge = 1e-2;
  Matrix gram = x.transpose() * x;
  gram.diagonal().array() += ridge;
  const Matrix weights = gram.ldlt().solve(x.transpose() * y);

  Index correct = 0;
  for (Index i = 0; i < n_test; ++i) {
    const Index row = perm[static_cast<std::size_t>(n_train + i)];
    Eigen::RowVectorXd xt(dim + 1);
    xt.head(dim) = features.row(row);
    xt(dim) = 1.0;
    const Eigen::RowVectorXd scores = xt * weights;
    Index best = 0;
    scores.maxCoeff(&best);
    if (classes[static_cast<std::size_t>(best)] == labels[static_cast<std::size_t>(row)]) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n_test);
}

std::vector<RetrievalRecord> retrieval_report(const std::vector<std::string>& query_ids,
                                              const std::vector<std::string>& gallery_ids,
                                              const Matrix& distmat, const ProtocolMask& mask,
                                              Index k) {
  if (k < 1) throw ValidationError("retrieval_report: k must be >= 1");
  const Index q = distmat.rows();
  const Index g = distmat.cols();
  if (static_cast<Index>(query_ids.size()) != q || static_cast<Index>(gallery_ids.size()) != g) {
    throw ValidationError("retrieval_report: id lists do not match distance matrix");
  }

  std::vector<RetrievalRecord> records;
  records.reserve(static_cast<std::size_t>(q));
  std::vector<Index> order;
  for (Index i = 0; i < q; ++i) {
    RetrievalRecord record;
    record.query_id = query_ids[static_cast<std::size_t>(i)];
    order.clear();
    bool has_positive = false;
    for (Index j = 0; j < g; ++j) {
      if (!mask.valid(i, j)) continue;
      order.push_back(j);
      has_positive = has_positive || mask.match(i, j);
    }
    record.excluded = !has_positive;
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return distmat(i, a) < distmat(i, b); });
    const Index take = std::min<Index>(k, static_cast<Index>(order.size()));
    for (Index r = 0; r < take; ++r) {
      const Index j = order[static_cast<std::size_t>(r)];
      record.entries.push_back(
          {gallery_ids[static_cast<std::size_t>(j)], distmat(i, j), mask.match(i, j)});
    }
    records.push_back(std::move(record));
  }
  return records;
}

void write_retrieval_report(const std::vector<RetrievalRecord>& records,
                            const std::filesystem::path& jsonl_path,
                            const std::filesystem::path& html_path) {
  {
    std::ofstream out(jsonl_path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError("retrieval report: cannot open '" + jsonl_path.string() + "'");
    for (const auto& record : records) {
      nlohmann::json j;
      j["query_id"] = record.query_id;
      j["excluded"] = record.excluded;
      j["entries"] = nlohmann::json::array();
      for (const auto& e : record.entries) {
        j["entries"].push_back(
            {{"gallery_id", e.gallery_id}, {"distance", e.distance}, {"correct", e.correct}});
      }
      out << j.dump() << "\n";
    }
  }
  std::ofstream html(html_path, std::ios::trunc | std::ios::binary);
  if (!html) throw IoError("retrieval report: cannot open '" + html_path.string() + "'");
  html << "<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>Retrieval report</title>\n"
       << "<style>table{border-collapse:collapse;font-family:monospace}"
       << "td,th{border:1px solid #999;padding:4px 8px}"
       << ".ok{background:#cfc}.bad{background:#fcc}.skip{color:#999}</style></head><body>\n"
       << "<h1>Top-k retrieval</h1>\n<table>\n<tr><th>query</th><th>ranked gallery</th></tr>\n";
  for (const auto& record : records) {
    html << "<tr><td" << (record.excluded ? " class=\"skip\"" : "") << ">" << record.query_id
         << (record.excluded ? " (excluded)" : "") << "</td><td>";
    for (const auto& e : record.entries) {
      html << "<span class=\"" << (e.correct ? "ok" : "bad") << "\">" << e.gallery_id
           << "</span> ";
    }
    html << "</td></tr>\n";
  }
  html << "</table></body></html>\n";
}

nlohmann::json ClusterReport::to_json() const {
  nlohmann::json j;
  j["separation"] = separation;
  j["per_label_separation"] = nlohmann::json::object();
  for (const auto& [label, value] : per_label_separation) {
    j["per_label_separation"][std::to_string(label)] = value;
  }
  j["coords"] = nlohmann::json::array();
  for (Index i = 0; i < coords.rows(); ++i) {
    j["coords"].push_back({coords(i, 0), coords(i, 1)});
  }
  return j;
}

ClusterReport cluster_report(const Matrix& features, const std::vector<int>& labels) {
  const Index n = features.rows();
  if (n < 2) throw ValidationError("cluster_report: need at least 2 samples");
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw ValidationError("cluster_report: label count does not match feature rows");
  }
  Matrix centered = features.rowwise() - features.colwise().mean();
  if (!(centered.squaredNorm() > 0.0)) {
    throw ValidationError("cluster_report: constant features");
  }

  const Matrix cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) throw IoError("cluster_report: eigensolver failed");

  const Index dim = features.cols();
  ClusterReport report;
  report.coords = Matrix::Zero(n, 2);
  const Index comps = std::min<Index>(2, dim);
  for (Index c = 0; c < comps; ++c) {
    Vector axis = solver.eigenvectors().col(dim - 1 - c);  // eigenvalues ascend
    Index peak = 0;
    axis.cwiseAbs().maxCoeff(&peak);
    if (axis[peak] < 0.0) axis = -axis;  // sign convention for reproducibility
    report.coords.col(c) = centered * axis;
  }

  // Silhouette over the projected coordinates.
  Matrix dist(n, n);
  for (Index i = 0; i < n; ++i) {
    dist(i, i) = 0.0;
    for (Index j = i + 1; j < n; ++j) {
      const double d = (report.coords.row(i) - report.coords.row(j)).norm();
      dist(i, j) = d;
      dist(j, i) = d;
    }
  }
  std::map<int, std::vector<Index>> by_label;
  for (Index i = 0; i < n; ++i) by_label[labels[static_cast<std::size_t>(i)]].push_back(i);

  std::map<int, double> label_sum;
  std::map<int, Index> label_count;
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    double s = 0.0;
    const auto& mates = by_label.at(own);
    if (mates.size() > 1 && by_label.size() > 1) {
      double a = 0.0;
      for (Index j : mates) {
        if (j != i) a += dist(i, j);
      }
      a /= static_cast<double>(mates.size() - 1);
      double b = std::numeric_limits<double>::infinity();
      for (const auto& [label, members] : by_label) {
        if (label == own) continue;
        double mean = 0.0;
        for (Index j : members) mean += dist(i, j);
        mean /= static_cast<double>(members.size());
        b = std::min(b, mean);
      }
      const double denom = std::max(a, b);
      s = denom > 0.0 ? (b - a) / denom : 0.0;
    }
    total += s;
    label_sum[own] += s;
    label_count[own] += 1;
  }
  report.separation = total / static_cast<double>(n);
  for (const auto& [label, sum] : label_sum) {
    report.per_label_separation[label] = sum / static_cast<double>(label_count.at(label));
  }
  return report;
}

}  // namespace differ
