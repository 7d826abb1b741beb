// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "knnkd/knn.h"
#include "knnkd/random.h"

using namespace knnkd;

namespace {

store::Datastore random_store(std::size_t n, std::size_t dim, std::uint64_t seed, int grid = 0) {
  Rng rng(seed);
  std::vector<float> keys(n * dim);
  for (auto& k : keys) {
    // integer grids produce exact distance ties
    k = grid > 0 ? static_cast<float>(rng.index(static_cast<std::uint64_t>(grid))) : static_cast<float>(rng.uniform(-1, 1));
  }
  std::vector<corpus::TokenId> values(n);
  std::vector<store::Provenance> prov(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = static_cast<corpus::TokenId>(4 + rng.index(20));
    prov[i] = {static_cast<std::uint32_t>(i), 0};
  }
  return store::Datastore(dim, 24, 0, std::move(keys), std::move(values), std::move(prov));
}

// Sort every row by (distance, row) in long double.
std::vector<std::pair<long double, std::uint64_t>> brute(const store::Datastore& ds, const std::vector<float>& q) {
  std::vector<std::pair<long double, std::uint64_t>> all;
  for (std::size_t j = 0; j < ds.count(); ++j) {
    long double d = 0;
    for (std::size_t c = 0; c < ds.dim(); ++c) {
      long double x = static_cast<long double>(ds.key(j)[c]) - q[c];
      d += x * x;
    }
    all.push_back({d, j});
  }
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<float> random_query(Rng& rng, std::size_t dim, int grid = 0) {
  std::vector<float> q(dim);
  for (auto& x : q) x = grid > 0 ? static_cast<float>(rng.index(static_cast<std::uint64_t>(grid))) : static_cast<float>(rng.uniform(-1, 1));
  return q;
}

}  // namespace

TEST_CASE("exact search matches a brute-force sort, ties by row") {
  for (int grid : {0, 3}) {
    auto ds = random_store(500, 4, 7 + grid, grid);
    knn::ExactIndex index(ds);
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      auto q = random_query(rng, 4, grid);
      auto want = brute(ds, q);
      for (std::size_t k : {1, 5, 64}) {
        auto got = index.search(q, k, knn::Metric::squared_l2);
        REQUIRE(got.size() == k);
        for (std::size_t i = 0; i < k; ++i) {
          CHECK(got[i].index == want[i].second);
          CHECK(got[i].distance == static_cast<float>(want[i].first));
          CHECK(got[i].token == ds.values()[got[i].index]);
          if (i > 0) CHECK(got[i].distance >= got[i - 1].distance);
          CHECK(got[i].distance >= 0.0f);
        }
      }
    }
  }
}

TEST_CASE("L2 and squared L2 give the same order; distances are roots") {
  auto ds = random_store(300, 6, 3);
  knn::ExactIndex index(ds);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_query(rng, 6);
    auto sq = index.search(q, 16, knn::Metric::squared_l2);
    auto l2 = index.search(q, 16, knn::Metric::l2);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(sq[i].index == l2[i].index);
      CHECK(l2[i].distance == doctest::Approx(std::sqrt(static_cast<double>(sq[i].distance))).epsilon(1e-6));
    }
  }
}

TEST_CASE("k above the datastore size returns every row") {
  auto ds = random_store(10, 3, 5);
  knn::ExactIndex index(ds);
  std::vector<float> q = {0, 0, 0};
  CHECK(index.search(q, 50, knn::Metric::squared_l2).size() == 10);
}

TEST_CASE("search preconditions") {
  auto ds = random_store(10, 3, 5);
  knn::ExactIndex index(ds);
  std::vector<float> wrong = {0, 0};
  CHECK_THROWS_AS(index.search(wrong, 3, knn::Metric::squared_l2), std::invalid_argument);
  std::vector<float> q = {0, 0, 0};
  CHECK_THROWS_AS(index.search(q, 0, knn::Metric::squared_l2), std::invalid_argument);
  knn::SearchConfig cfg;
  cfg.k = 0;
  CHECK_THROWS(cfg.validate());
  store::Datastore empty(3, 24, 0, {}, {}, {});
  CHECK_THROWS_AS(knn::ExactIndex{empty}, std::invalid_argument);
}

TEST_CASE("inverted-file index: full probing is exact, partial probing keeps recall") {
  auto ds = random_store(4000, 8, 11);
  knn::IvfParams all;
  all.num_clusters = 16;
  all.num_probes = 16;
  knn::IvfIndex full(ds, all);
  knn::IvfParams some = all;
  some.num_probes = 6;
  knn::IvfIndex partial(ds, some);
  knn::ExactIndex exact(ds);
  CHECK(full.num_clusters() == 16);

  Rng rng(2);
  std::vector<knn::NeighborSet> e, p;
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_query(rng, 8);
    auto ex = exact.search(q, 10, knn::Metric::squared_l2);
    CHECK(full.search(q, 10, knn::Metric::squared_l2) == ex);
    auto ap = partial.search(q, 10, knn::Metric::squared_l2);
    CHECK(ap.size() == 10);
    e.push_back(std::move(ex));
    p.push_back(std::move(ap));
  }
  CHECK(knn::recall_at_k(e, e) == 1.0);
  CHECK(knn::recall_at_k(p, e) >= 0.9);

  // deterministic for a seed
  knn::IvfIndex again(ds, some);
  Rng r2(9);
  auto q = random_query(r2, 8);
  CHECK(again.search(q, 10, knn::Metric::squared_l2) == partial.search(q, 10, knn::Metric::squared_l2));
}

TEST_CASE("recall_at_k hand example") {
  std::vector<knn::NeighborSet> exact = {{{1, 0, 4}, {2, 0, 4}}, {{3, 0, 4}, {4, 0, 4}}};
  std::vector<knn::NeighborSet> approx = {{{2, 0, 4}, {9, 0, 4}}, {{4, 0, 4}, {3, 0, 4}}};
  CHECK(knn::recall_at_k(approx, exact) == doctest::Approx(0.75));
}
