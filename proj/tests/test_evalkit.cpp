#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"

#include "differ/error.hpp"
#include "differ/evalkit.hpp"
#include "test_support.hpp"

using namespace differ;
using differ::test::random_matrix;

namespace {

// Exhaustive reference: sort valid entries per query, walk the ranking.
EvalResult cmc_map_reference(const Matrix& dist, const ProtocolMask& mask) {
  const Index q = dist.rows(), g = dist.cols();
  EvalResult out;
  out.protocol = mask.protocol;
  out.cmc.assign(static_cast<std::size_t>(g), 0.0);
  double map_sum = 0.0;
  for (Index i = 0; i < q; ++i) {
    std::vector<std::pair<double, Index>> ranked;
    Index positives = 0;
    for (Index j = 0; j < g; ++j) {
      if (!mask.valid(i, j)) continue;
      ranked.emplace_back(dist(i, j), j);
      if (mask.match(i, j)) ++positives;
    }
    if (positives == 0) {
      ++out.num_excluded_queries;
      continue;
    }
    std::sort(ranked.begin(), ranked.end());
    Index hits = 0;
    double ap = 0.0;
    Index first = -1;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      if (mask.match(i, ranked[r].second)) {
        ++hits;
        ap += double(hits) / double(r + 1);
        if (first < 0) first = static_cast<Index>(r);
      }
    }
    map_sum += ap / double(positives);
    for (Index k = first; k < g; ++k) out.cmc[static_cast<std::size_t>(k)] += 1.0;
    ++out.num_valid_queries;
  }
  for (auto& v : out.cmc) v /= double(out.num_valid_queries);
  out.map = map_sum / double(out.num_valid_queries);
  return out;
}

IdMeta meta(std::vector<int> pid, std::vector<int> cam, std::vector<int> cloth) {
  return IdMeta{std::move(pid), std::move(cam), std::move(cloth)};
}

}  // namespace

TEST_CASE("pairwise distances") {
  Matrix a(1, 3), b(1, 3);
  a << 1, 2, 3;
  b << 1, 2, 3;
  CHECK(pairwise_distances(a, b, Metric::kEuclidean)(0, 0) == 0.0);

  Matrix e1(1, 2), e2(1, 2);
  e1 << 1, 0;
  e2 << 0, 1;
  CHECK(pairwise_distances(e1, e2, Metric::kEuclidean)(0, 0) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(pairwise_distances(e1, e2, Metric::kCosine)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(8);
  const Matrix q = random_matrix(rng, 5, 3);
  const Matrix g = random_matrix(rng, 4, 3);
  const Matrix dist = pairwise_distances(q, g, Metric::kEuclidean);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 4; ++j) {
      double s = 0;
      for (Index c = 0; c < 3; ++c) s += (q(i, c) - g(j, c)) * (q(i, c) - g(j, c));
      CHECK(dist(i, j) == doctest::Approx(std::sqrt(s)).epsilon(1e-6));
    }
  }

  CHECK_THROWS_AS(pairwise_distances(Matrix::Ones(1, 3), Matrix::Ones(1, 4), Metric::kEuclidean),
                  ValidationError);
  CHECK_THROWS_AS(pairwise_distances(Matrix::Zero(1, 3), Matrix::Ones(1, 3), Metric::kCosine),
                  ValidationError);
}

TEST_CASE("protocol masks on a four-entry fixture") {
  // Query: pid 1, cam 0, cloth 10.
  const IdMeta query = meta({1}, {0}, {10});
  // Gallery: same pid+cam, same pid different cloth, same pid same cloth
  // different cam, different pid.
  const IdMeta gallery = meta({1, 1, 1, 2}, {0, 1, 1, 0}, {10, 11, 10, 20});

  const ProtocolMask general = build_protocol_mask(query, gallery, Protocol::kGeneral);
  CHECK_FALSE(general.valid(0, 0));  // same pid and camera never ranks
  CHECK(general.valid(0, 1));
  CHECK(general.valid(0, 2));
  CHECK(general.valid(0, 3));
  CHECK(general.match(0, 1));
  CHECK(general.match(0, 2));
  CHECK_FALSE(general.match(0, 3));

  const ProtocolMask cc = build_protocol_mask(query, gallery, Protocol::kCC);
  CHECK_FALSE(cc.valid(0, 0));
  CHECK(cc.valid(0, 1));       // clothes changed: kept
  CHECK_FALSE(cc.valid(0, 2)); // same outfit: dropped
  CHECK(cc.valid(0, 3));
  CHECK(cc.match(0, 1));

  const ProtocolMask sc = build_protocol_mask(query, gallery, Protocol::kSC);
  CHECK_FALSE(sc.valid(0, 0));
  CHECK_FALSE(sc.valid(0, 1));  // clothes changed: dropped
  CHECK(sc.valid(0, 2));        // same outfit, other camera: kept
  CHECK(sc.valid(0, 3));
  CHECK(sc.match(0, 2));

  // Missing clothids only matter under cc/sc.
  const IdMeta no_cloth = meta({1}, {0}, {-1});
  CHECK_NOTHROW(build_protocol_mask(no_cloth, gallery, Protocol::kGeneral));
  CHECK_THROWS_AS(build_protocol_mask(no_cloth, gallery, Protocol::kCC), ValidationError);
  CHECK_THROWS_AS(build_protocol_mask(no_cloth, gallery, Protocol::kSC), ValidationError);
}

TEST_CASE("protocol mask partition properties") {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const Index q = 4, g = 12;
    IdMeta qm, gm;
    for (Index i = 0; i < q; ++i) {
      qm.pid.push_back(static_cast<int>(rng.below(3)));
      qm.camid.push_back(static_cast<int>(rng.below(3)));
      qm.clothid.push_back(static_cast<int>(rng.below(2)));
    }
    for (Index j = 0; j < g; ++j) {
      gm.pid.push_back(static_cast<int>(rng.below(3)));
      gm.camid.push_back(static_cast<int>(rng.below(3)));
      gm.clothid.push_back(static_cast<int>(rng.below(2)));
    }
    const auto general = build_protocol_mask(qm, gm, Protocol::kGeneral);
    const auto cc = build_protocol_mask(qm, gm, Protocol::kCC);
    const auto sc = build_protocol_mask(qm, gm, Protocol::kSC);
    for (Index i = 0; i < q; ++i) {
      for (Index j = 0; j < g; ++j) {
        if (cc.valid(i, j)) CHECK(general.valid(i, j));  // cc-valid is a subset
        const bool cc_pos = cc.valid(i, j) && cc.match(i, j);
        const bool sc_pos = sc.valid(i, j) && sc.match(i, j);
        CHECK_FALSE((cc_pos && sc_pos));  // clothes-changed and same-clothes partition
        const bool gen_pos = general.valid(i, j) && general.match(i, j);
        if (cc_pos || sc_pos) CHECK(gen_pos);
      }
    }
  }
}

TEST_CASE("cmc_map on worked examples") {
  // Perfect retrieval.
  Matrix dist(1, 3);
  dist << 0.1, 0.5, 0.9;
  ProtocolMask mask;
  mask.valid = BoolMatrix::Constant(1, 3, true);
  mask.match.resize(1, 3);
  mask.match(0, 0) = true;
  mask.match(0, 1) = false;
  mask.match(0, 2) = false;
  EvalResult r = cmc_map(dist, mask);
  CHECK(r.cmc[0] == 1.0);
  CHECK(r.map == 1.0);
  CHECK(r.num_valid_queries == 1);

  // Ranked gallery pids [2, 1, 1] for query pid 1.
  Matrix d2(1, 3);
  d2 << 0.1, 0.2, 0.3;
  ProtocolMask m2;
  m2.valid = BoolMatrix::Constant(1, 3, true);
  m2.match.resize(1, 3);
  m2.match(0, 0) = false;
  m2.match(0, 1) = true;
  m2.match(0, 2) = true;
  EvalResult r2 = cmc_map(d2, m2);
  CHECK(r2.map == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-9));
  CHECK(r2.map == doctest::Approx(0.58333).epsilon(1e-4));
  CHECK(r2.cmc[0] == 0.0);
  CHECK(r2.cmc[1] == 1.0);

  // No valid positives anywhere: explicit error.
  ProtocolMask m3;
  m3.valid = BoolMatrix::Constant(1, 3, true);
  m3.match = BoolMatrix::Constant(1, 3, false);
  CHECK_THROWS_AS(cmc_map(d2, m3), ValidationError);
}

TEST_CASE("cmc_map matches the exhaustive reference on random instances") {
  Rng rng(19);
  for (int trial = 0; trial < 300; ++trial) {
    const Index q = 1 + static_cast<Index>(rng.below(10));
    const Index g = 2 + static_cast<Index>(rng.below(29));
    const Matrix dist = random_matrix(rng, q, g).cwiseAbs();
    IdMeta qm, gm;
    for (Index i = 0; i < q; ++i) {
      qm.pid.push_back(static_cast<int>(rng.below(4)));
      qm.camid.push_back(static_cast<int>(rng.below(3)));
      qm.clothid.push_back(static_cast<int>(rng.below(2)));
    }
    for (Index j = 0; j < g; ++j) {
      gm.pid.push_back(static_cast<int>(rng.below(4)));
      gm.camid.push_back(static_cast<int>(rng.below(3)));
      gm.clothid.push_back(static_cast<int>(rng.below(2)));
    }
    const ProtocolMask mask = build_protocol_mask(qm, gm, Protocol::kGeneral);
    bool any_positive = false;
    for (Index i = 0; i < q && !any_positive; ++i) {
      for (Index j = 0; j < g && !any_positive; ++j) {
        any_positive = mask.valid(i, j) && mask.match(i, j);
      }
    }
    if (!any_positive) continue;

    const EvalResult ours = cmc_map(dist, mask);
    const EvalResult ref = cmc_map_reference(dist, mask);
    CHECK(std::abs(ours.map - ref.map) < 1e-9);
    CHECK(ours.num_valid_queries == ref.num_valid_queries);
    for (Index k = 0; k < g; ++k) {
      CHECK(std::abs(ours.cmc[static_cast<std::size_t>(k)] -
                     ref.cmc[static_cast<std::size_t>(k)]) < 1e-9);
    }
    // Monotone CMC, and mAP bounded by the full-curve endpoint.
    for (std::size_t k = 1; k < ours.cmc.size(); ++k) CHECK(ours.cmc[k] >= ours.cmc[k - 1]);
    CHECK(ours.map <= ours.cmc.back() + 1e-12);
  }
}

TEST_CASE("linear probe behaviors") {
  Rng rng(23);
  const Index n = 120, dim = 6;
  Matrix features = random_matrix(rng, n, dim);
  std::vector<int> labels;
  for (Index i = 0; i < n; ++i) {
    // Label is a deterministic function of one coordinate, with a margin.
    const bool positive = features(i, 2) > 0;
    features(i, 2) += positive ? 0.5 : -0.5;
    labels.push_back(positive ? 1 : 0);
  }
  CHECK(linear_probe(features, labels, 1) > 0.95);
  CHECK(linear_probe(features, labels, 1) == linear_probe(features, labels, 1));

  // Permuted labels collapse to chance level.
  std::vector<int> shuffled = labels;
  Rng shuffle_rng(5);
  shuffle_rng.shuffle(shuffled);
  const double chance = linear_probe(features, shuffled, 2);
  CHECK(chance == doctest::Approx(0.5).epsilon(0.25));

  CHECK_THROWS_AS(linear_probe(features, std::vector<int>(n, 7), 1), ValidationError);
}

TEST_CASE("retrieval report") {
  Matrix dist(1, 3);
  dist << 0.1, 0.2, 0.3;
  ProtocolMask mask;
  mask.valid = BoolMatrix::Constant(1, 3, true);
  mask.valid(0, 2) = false;
  mask.match.resize(1, 3);
  mask.match(0, 0) = true;
  mask.match(0, 1) = false;
  mask.match(0, 2) = false;

  const auto records = retrieval_report({"q0"}, {"g0", "g1", "g2"}, dist, mask, 10);
  REQUIRE(records.size() == 1);
  CHECK_FALSE(records[0].excluded);
  REQUIRE(records[0].entries.size() == 2);  // truncated to the valid gallery, no padding
  CHECK(records[0].entries[0].gallery_id == "g0");
  CHECK(records[0].entries[0].correct);
  CHECK_FALSE(records[0].entries[1].correct);

  const auto top1 = retrieval_report({"q0"}, {"g0", "g1", "g2"}, dist, mask, 1);
  CHECK(top1[0].entries.size() == 1);
  CHECK(top1[0].entries[0].correct);

  test::TempDir dir("retrieval");
  CHECK_NOTHROW(write_retrieval_report(records, dir.path() / "r.jsonl", dir.path() / "r.html"));
  CHECK(std::filesystem::file_size(dir.path() / "r.html") > 0);
}

TEST_CASE("cluster report") {
  Rng rng(29);
  // Two well-separated blobs.
  const Index per = 20;
  Matrix features(2 * per, 5);
  std::vector<int> labels;
  for (Index i = 0; i < per; ++i) {
    features.row(i) = random_matrix(rng, 1, 5) * 0.2;
    features(i, 0) += 5.0;
    labels.push_back(0);
  }
  for (Index i = per; i < 2 * per; ++i) {
    features.row(i) = random_matrix(rng, 1, 5) * 0.2;
    features(i, 0) -= 5.0;
    labels.push_back(1);
  }
  const ClusterReport report = cluster_report(features, labels);
  CHECK(report.separation > 0.5);
  CHECK(report.coords.rows() == 2 * per);

  // Full-rank 2-D input: the projection preserves pairwise distances.
  const Matrix flat = random_matrix(rng, 12, 2);
  std::vector<int> flat_labels(12, 0);
  for (int i = 0; i < 6; ++i) flat_labels[static_cast<std::size_t>(i)] = 1;
  const ClusterReport rotated = cluster_report(flat, flat_labels);
  for (Index i = 0; i < 12; ++i) {
    for (Index j = 0; j < 12; ++j) {
      const double original = (flat.row(i) - flat.row(j)).norm();
      const double projected = (rotated.coords.row(i) - rotated.coords.row(j)).norm();
      CHECK(std::abs(original - projected) < 1e-6);
    }
  }

  // Determinism.
  const ClusterReport again = cluster_report(features, labels);
  CHECK(again.coords == report.coords);
  CHECK(again.separation == report.separation);

  CHECK_THROWS_AS(cluster_report(Matrix::Ones(5, 3), std::vector<int>(5, 0)), ValidationError);
}
