// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when any
// criterion fails. `--only 1,2,9` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "knnkd/pipeline.h"
#include "knnkd/random.h"

using namespace knnkd;
namespace pl = knnkd::pipeline;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  std::string failed;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failed += " [failed: " + what + "]";
    }
  }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1: teacher distribution

void teacher_correctness(Verdict& v) {
  Rng rng(101);
  double worst_sum = 0.0;
  std::size_t subset_violations = 0, size_violations = 0, nonpositive = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t k = 1 + rng.index(64);
    knn::NeighborSet ns;
    float d = static_cast<float>(rng.uniform(0, 5));
    for (std::size_t j = 0; j < k; ++j) {
      ns.push_back({j, d, static_cast<corpus::TokenId>(4 + rng.index(1 + rng.index(100)))});
      d += static_cast<float>(rng.uniform(0, 20));
    }
    const double tau = std::exp(rng.uniform(std::log(0.01), std::log(1000.0)));
    auto t = distill::teacher_from_neighbors(ns, tau);
    std::set<corpus::TokenId> retrieved;
    for (const auto& n : ns) retrieved.insert(n.token);
    double sum = 0.0;
    for (auto [tok, p] : t.support) {
      sum += p;
      if (!retrieved.count(tok)) ++subset_violations;
      if (!(p > 0.0)) ++nonpositive;
    }
    if (t.support.size() > k) ++size_violations;
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
  }
  v.require(worst_sum <= 1e-9, "sum within 1e-9");
  v.require(subset_violations == 0, "support within retrieved tokens");
  v.require(size_violations == 0 && nonpositive == 0, "support size and positivity");

  // (0, a), (tau ln 2, b): tau is derived from the f32 distance so the pair is exact
  double worst_case = 0.0;
  for (float dist : {0.5f, 0.6931472f, 69.31472f, 1000.0f}) {
    const double tau = static_cast<double>(dist) / std::log(2.0);
    knn::NeighborSet ns = {{0, 0.0f, 7}, {1, dist, 9}};
    auto t = distill::teacher_from_neighbors(ns, tau);
    worst_case = std::max({worst_case, std::abs(t.prob(7) - 2.0 / 3.0), std::abs(t.prob(9) - 1.0 / 3.0)});
  }
  v.require(worst_case <= 1e-9, "(0,a)/(tau ln2,b) gives (2/3,1/3)");
  v.detail << "max |sum-1| " << worst_sum << ", 2/3 case error " << worst_case;
}

// ---------------------------------------------------------------------------
// 2: gradient oracle

long double loss_oracle(const std::vector<long double>& z, corpus::TokenId target,
                        const distill::TeacherDistribution& t, long double alpha) {
  long double m = z[0], s = 0;
  for (auto x : z) m = std::max(m, x);
  for (auto x : z) s += std::exp(x - m);
  const long double log_s = std::log(s);
  auto logp = [&](corpus::TokenId y) { return z[y] - m - log_s; };
  long double kd = 0;
  for (auto [tok, p] : t.support) kd -= static_cast<long double>(p) * logp(tok);
  return (1 - alpha) * -logp(target) + alpha * kd;
}

std::vector<double> softmax_ld(const std::vector<long double>& z) {
  long double m = z[0], s = 0;
  for (auto x : z) m = std::max(m, x);
  for (auto x : z) s += std::exp(x - m);
  std::vector<double> p;
  for (auto x : z) p.push_back(static_cast<double>(std::exp(x - m) / s));
  return p;
}

void gradient_oracle(Verdict& v) {
  Rng rng(202);
  const long double eps = 1e-6L;
  double worst_fd = 0.0, worst_loss = 0.0, worst_case_formula = 0.0;
  std::size_t closed_form_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t V = 2 + rng.index(63);
    std::vector<long double> z(V);
    for (auto& x : z) x = rng.uniform(-4, 4);
    knn::NeighborSet ns;
    for (std::size_t j = 0, k = 1 + rng.index(32); j < k; ++j) {
      ns.push_back({j, static_cast<float>(rng.uniform(0, 50)), static_cast<corpus::TokenId>(rng.index(V))});
    }
    std::sort(ns.begin(), ns.end(), [](auto& a, auto& b) { return a.distance < b.distance; });
    auto t = distill::teacher_from_neighbors(ns, rng.uniform(0.5, 100));
    const auto target = static_cast<corpus::TokenId>(rng.index(V));
    const double alpha = trial % 10 == 0 ? (trial % 20 == 0 ? 0.0 : 1.0) : rng.unit();
    const auto p = softmax_ld(z);
    const auto g = distill::combined_grad_logits(p, target, t, alpha);

    const double lib = distill::combined_loss(p, target, t, alpha).value;
    const double ref = static_cast<double>(loss_oracle(z, target, t, alpha));
    worst_loss = std::max(worst_loss, std::abs(lib - ref) / std::max(1.0, std::abs(ref)));

    for (std::size_t y = 0; y < V; ++y) {
      auto zp = z, zm = z;
      zp[y] += eps;
      zm[y] -= eps;
      const double fd = static_cast<double>(
          (loss_oracle(zp, target, t, alpha) - loss_oracle(zm, target, t, alpha)) / (2 * eps));
      worst_fd = std::max(worst_fd, std::abs(fd - g[y]) / std::max(1e-6, std::max(std::abs(fd), std::abs(g[y]))));

      const auto tok = static_cast<corpus::TokenId>(y);
      const double pt = t.prob(tok);
      const double closed = p[y] - (y == target ? 1.0 - alpha : 0.0) - alpha * pt;
      if (closed != g[y]) ++closed_form_mismatch;
      const bool in_support = pt > 0.0;
      double expected;
      if (y == target) {
        expected = p[y] - (1.0 - alpha + alpha * pt);
      } else if (in_support) {
        expected = p[y] - alpha * pt;
      } else {
        expected = p[y];
        if (g[y] != p[y]) worst_case_formula = std::max(worst_case_formula, 1.0);
      }
      worst_case_formula = std::max(worst_case_formula, std::abs(g[y] - expected));
    }
  }
  v.require(worst_fd <= 1e-6, "finite differences within 1e-6 relative");
  v.require(worst_loss <= 1e-12, "loss matches the extended-precision composition");
  v.require(closed_form_mismatch == 0, "closed form bit-exact");
  v.require(worst_case_formula <= 1e-15, "per-token case formulas");
  v.detail << "max FD rel err " << worst_fd << ", closed-form mismatches " << closed_form_mismatch
           << ", case-formula err " << worst_case_formula;
}

// ---------------------------------------------------------------------------
// 3: exact search

void knn_exactness(Verdict& v) {
  Rng rng(303);
  const std::size_t n = 1000, dim = 16, k = 32;
  std::vector<float> keys(n * dim);
  for (auto& x : keys) x = static_cast<float>(rng.uniform(-1, 1));
  // a block of duplicated keys exercises the row tie-break
  for (std::size_t j = 900; j < 1000; ++j) std::copy_n(keys.begin() + (j - 900) * dim, dim, keys.begin() + j * dim);
  std::vector<corpus::TokenId> values(n);
  std::vector<store::Provenance> prov(n);
  for (std::size_t j = 0; j < n; ++j) values[j] = static_cast<corpus::TokenId>(4 + rng.index(50));
  store::Datastore ds(dim, 64, 0, keys, values, prov);
  knn::ExactIndex index(ds);

  std::size_t set_mismatch = 0, order_mismatch = 0;
  for (int q = 0; q < 100; ++q) {
    std::vector<float> query(dim);
    if (q % 4 == 0) {
      std::copy_n(keys.begin() + static_cast<std::size_t>(rng.index(100)) * dim, dim, query.begin());
    } else {
      for (auto& x : query) x = static_cast<float>(rng.uniform(-1, 1));
    }
    std::vector<std::pair<double, std::uint64_t>> all;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double diff = static_cast<double>(keys[j * dim + c]) - query[c];
        d += diff * diff;
      }
      all.push_back({d, j});
    }
    std::sort(all.begin(), all.end());
    auto got = index.search(query, k, knn::Metric::squared_l2);
    auto got_l2 = index.search(query, k, knn::Metric::l2);
    for (std::size_t i = 0; i < k; ++i) {
      if (got[i].index != all[i].second) ++set_mismatch;
      if (got_l2[i].index != got[i].index) ++order_mismatch;
    }
  }
  v.require(set_mismatch == 0, "exact equals naive full scan");
  v.require(order_mismatch == 0, "L2 and squared L2 orderings agree");
  v.detail << "100 queries x 1000 keys x dim 16 x k 32, mismatches " << set_mismatch << "/" << order_mismatch;
}

// ---------------------------------------------------------------------------
// shared synthetic pipeline for 4-8

struct Pipeline {
  pl::Config cfg;
  pl::Data data;
  std::optional<nmt::Model> ce, kd;
  std::optional<store::Datastore> ds;
  std::optional<knn::NeighborFile> nf;
  nmt::TrainLog ce_log, kd_log;
  double ce_seconds = 0, store_seconds = 0, kd_seconds = 0;

  Pipeline() : cfg(pl::resolve_config(std::nullopt, {}, 1, 1)), data(pl::encode_synth(corpus::gen_synth(cfg.synth))) {}

  const nmt::Model& ce_model() {
    if (!ce) {
      auto t0 = Clock::now();
      ce.emplace(pl::train_model(cfg, data, pl::TrainMode::ce, nullptr, nullptr, &ce_log));
      ce_seconds = since(t0);
    }
    return *ce;
  }
  const knn::NeighborFile& neighbors() {
    if (!nf) {
      const auto& m = ce_model();
      auto t0 = Clock::now();
      ds.emplace(store::build_datastore(m, data.train, cfg.threads));
      nf.emplace(knn::batch_search_training_set(*ds, m, data.train, cfg.search, cfg.threads));
      store_seconds = since(t0);
    }
    return *nf;
  }
  const nmt::Model& kd_model() {
    if (!kd) {
      const auto& n = neighbors();
      auto t0 = Clock::now();
      kd.emplace(pl::train_model(cfg, data, pl::TrainMode::knn_kd, &n, nullptr, &kd_log));
      kd_seconds = since(t0);
    }
    return *kd;
  }
};

// 4: self-retrieval
void self_retrieval(Verdict& v, Pipeline& p) {
  const auto& nf = p.neighbors();
  std::size_t ok = 0;
  for (std::size_t row = 0; row < nf.count(); ++row) {
    const auto y = p.ds->values()[row];
    bool found = false;
    for (const auto& n : nf.record(row)) found = found || (n.distance == 0.0f && n.token == y);
    ok += found;
  }
  v.require(ok == nf.count(), "every training position retrieves a zero-distance entry with its own token");
  v.require(p.store_seconds < 60.0, "datastore build and search under 1 min");
  v.detail << ok << "/" << nf.count() << " positions, k " << nf.k() << ", build+search " << fmt(p.store_seconds, 1)
           << " s";
}

// 5: reduction identities
void reductions(Verdict& v, Pipeline& p) {
  const auto& ce = p.ce_model();
  pl::Config zero = p.cfg;
  zero.distill.alpha = 0.0;
  auto kd0 = pl::train_model(zero, p.data, pl::TrainMode::knn_kd, &p.neighbors(), nullptr);
  const bool same_ckpt = kd0.serialize() == ce.serialize();
  v.require(same_ckpt, "alpha=0 knn-kd checkpoint equals CE checkpoint");

  pl::Config no_knn = p.cfg;
  no_knn.knnmt.lambda = 0.0;
  knn::SearchConfig sc = p.cfg.search;
  sc.k = p.cfg.knnmt.k;
  auto index = knn::make_index(*p.ds, sc);
  auto base = pl::decode_corpus(no_knn, ce, p.data.test);
  auto mt = pl::decode_corpus(no_knn, ce, p.data.test, index.get());
  v.require(base == mt, "lambda=0 knn-mt decode equals base decode");
  v.detail << "checkpoint bytes " << (same_ckpt ? "identical" : "differ") << ", " << p.data.test.pairs.size()
           << " test decodes " << (base == mt ? "token-identical" : "differ");
}

// 6: overcorrection
void overcorrection(Verdict& v, Pipeline& p) {
  auto t0 = Clock::now();
  const auto& ce = p.ce_model();
  const auto& kd = p.kd_model();
  const double train_seconds = p.ce_seconds + p.store_seconds + p.kd_seconds;
  auto ce_probe = eval::overcorrection_probe(ce, p.data.test, p.data.test_oracle);
  auto kd_probe = eval::overcorrection_probe(kd, p.data.test, p.data.test_oracle);
  const auto refs = pl::references(p.data.test);
  const double ce_bleu = eval::bleu(pl::decode_corpus(p.cfg, ce, p.data.test), refs).bleu;
  const double kd_bleu = eval::bleu(pl::decode_corpus(p.cfg, kd, p.data.test), refs).bleu;
  const double seconds = train_seconds + since(t0);
  const double ratio = ce_probe.mean_mass > 0 ? kd_probe.mean_mass / ce_probe.mean_mass : INFINITY;
  v.require(kd_probe.mean_mass >= 1.2 * ce_probe.mean_mass && kd_probe.mean_mass > ce_probe.mean_mass,
            "knn-kd mass >= 1.2x CE mass");
  v.require(kd_bleu >= ce_bleu, "knn-kd test BLEU >= CE test BLEU");
  v.require(seconds < 900.0, "under 15 min");
  v.detail << "mass CE " << fmt(ce_probe.mean_mass) << " kNN-KD " << fmt(kd_probe.mean_mass) << " (ratio "
           << fmt(ratio, 3) << "), ambiguous-context mass CE " << fmt(ce_probe.mean_mass_ambiguous) << " kNN-KD "
           << fmt(kd_probe.mean_mass_ambiguous) << ", test BLEU CE " << fmt(ce_bleu, 2) << " kNN-KD "
           << fmt(kd_bleu, 2) << ", " << fmt(seconds, 0) << " s";
}

// 7: throughput
void throughput(Verdict& v, Pipeline& p) {
  auto t0 = Clock::now();
  // fresh copies, allocated back to back, so both decoders see the same memory conditions
  const auto ce = nmt::Model::deserialize(p.ce_model().serialize());
  const auto kd = nmt::Model::deserialize(p.kd_model().serialize());
  const auto& nf = p.neighbors();

  // a larger draw from the same task, encoded with the model's vocabularies, fills the datastore
  corpus::SynthTaskSpec big = p.cfg.synth;
  big.num_sources = 6000;
  big.seed = p.cfg.synth.seed + 1000;
  auto text = corpus::gen_synth(big);
  auto big_train = corpus::encode_corpus(text.train.source, text.train.target, p.data.src_vocab, p.data.tgt_vocab);
  auto big_ds = store::build_datastore(ce, big_train, p.cfg.threads);
  knn::SearchConfig sc = p.cfg.search;
  sc.k = p.cfg.knnmt.k;
  sc.metric = p.cfg.knnmt.metric;
  auto index = knn::make_index(big_ds, sc);

  std::vector<corpus::Sequence> sources;
  for (const auto& pr : p.data.test.pairs)
    if (sources.empty() || sources.back() != pr.source) sources.push_back(pr.source);
  const auto& cfg = p.cfg;
  const auto session = eval::current_session(cfg.threads);
  auto base_fn = [&](const nmt::Model& m) {
    return [&cfg, &m](const corpus::Sequence& s) {
      return nmt::decode(m, s, cfg.beam, cfg.max_len(s.size())).generated_length();
    };
  };
  // the cheap base decoders get many short repetitions of their own; kNN-MT
  // passes are long, so a few suffice
  auto dec = eval::bench_decode_interleaved({{"ce", base_fn(ce)}, {"knn-kd", base_fn(kd)}}, sources, 41, session);
  auto mt = eval::bench_decode_interleaved(
      {{"ce", base_fn(ce)},
       {"knn-mt", [&](const corpus::Sequence& s) {
          return knnmt::knnmt_decode(ce, *index, s, cfg.beam, cfg.knnmt, cfg.max_len(s.size()))
              .hypothesis.generated_length();
        }}},
      sources, 3, session);
  dec.push_back(mt[1]);
  const std::size_t reps = 15;
  auto kd_loss = distill::knn_kd_position_loss(nf, p.data.train, cfg.distill);
  auto ce_loss = nmt::ce_position_loss();
  nmt::Model ce_m = nmt::Model::random_init(pl::model_config(cfg, p.data)), kd_m = ce_m;
  nmt::OptimizerState ce_opt, kd_opt;
  std::vector<std::size_t> order(p.data.train.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(cfg.seed);
  rng.shuffle(order);
  std::size_t ce_cur = 0, kd_cur = 0;
  auto batch = [&](std::size_t& cur) {
    if (cur + cfg.train.batch_size > order.size()) cur = 0;
    std::span<const std::size_t> b(order.data() + cur, cfg.train.batch_size);
    cur += cfg.train.batch_size;
    return b;
  };
  auto upd = eval::bench_updates_interleaved(
      {{"ce-train", [&] { nmt::train_step(ce_m, p.data.train, batch(ce_cur), ce_loss, ce_opt, cfg.train.adam, cfg.train.schedule); }},
       {"knn-kd-train", [&] { nmt::train_step(kd_m, p.data.train, batch(kd_cur), kd_loss, kd_opt, cfg.train.adam, cfg.train.schedule); }}},
      50, reps, session);

  eval::BenchRegistry reg;
  reg.add_baseline(dec[0]);
  reg.add_baseline(upd[0]);
  reg.relate(dec[1], "ce");
  eval::BenchRegistry mt_reg;
  mt_reg.add_baseline(mt[0]);
  mt_reg.relate(dec[2], "ce");
  reg.relate(upd[1], "ce-train");
  const double kd_dec = *dec[1].ratio, mt_dec = *dec[2].ratio, kd_upd = *upd[1].ratio;
  const double seconds = since(t0);
  v.require(big_ds.count() >= 100000, "|D| >= 1e5");
  v.require(mt_dec <= 0.67, "knn-mt decode <= 0.67x base");
  v.require(std::abs(kd_dec - 1.0) <= 0.05, "knn-kd decode within 5% of CE");
  v.require(std::abs(kd_upd - 1.0) <= 0.10, "knn-kd training within 10% of CE");
  v.require(seconds < 600.0, "under 10 min");
  v.detail << "|D| " << big_ds.count() << ", token/s CE " << fmt(dec[0].tokens_per_second, 0) << " kNN-KD "
           << fmt(dec[1].tokens_per_second, 0) << " (" << fmt(kd_dec, 3) << "x) kNN-MT "
           << fmt(dec[2].tokens_per_second, 0) << " (" << fmt(mt_dec, 3) << "x), upd/s CE "
           << fmt(upd[0].updates_per_second, 1) << " kNN-KD " << fmt(upd[1].updates_per_second, 1) << " ("
           << fmt(kd_upd, 3) << "x), " << fmt(seconds, 0) << " s";
}

// 8: sweep shape
void sweep(Verdict& v, Pipeline& p) {
  auto rows = pl::run_sweep(p.cfg, p.data, p.neighbors(), nullptr);
  auto shape = pl::sweep_shape(rows, p.cfg.sweep);
  std::set<std::pair<std::size_t, double>> unique;
  for (const auto& r : rows) unique.insert({r.k, r.tau});
  v.require(unique.size() == rows.size(), "one row per grid point");
  v.require(shape.pass, "best k interior, or smallest tau strictly worst");
  v.detail << "valid BLEU";
  for (const auto& r : rows) v.detail << " (k " << r.k << ", tau " << r.tau << ": " << fmt(r.bleu, 2) << ")";
  v.detail << "; best k " << shape.best_k << (shape.interior ? " interior" : " at boundary") << ", tau 0.01 "
           << (shape.tiny_tau_strictly_worst ? "strictly worst" : "not strictly worst");
}

// 9: BLEU oracle
void bleu_oracle(Verdict& v, Pipeline& p) {
  std::vector<corpus::Sequence> h = {{4, 5, 6, 7}}, r = {{4, 5, 6, 7, 8}};
  const double b = eval::bleu(h, r).bleu;
  const auto refs = pl::references(p.data.test);
  const double self = eval::bleu(refs, refs).bleu;
  std::vector<corpus::Sequence> small = {{4, 5, 6, 7, 8}, {9, 10}};
  const double self_small = eval::bleu(small, small).bleu;
  v.require(std::abs(b - 77.88) <= 0.01, "77.88 example within 0.01");
  v.require(self == 100.0 && self_small == 100.0, "identical corpora score exactly 100");
  v.detail << "example " << fmt(b, 4) << ", identical corpora " << fmt(self, 1) << " / " << fmt(self_small, 1);
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "usage: %s [--only N,M,...]\n", argv[0]);
      return 2;
    }
  }

  std::optional<Pipeline> pipe;
  auto shared = [&]() -> Pipeline& {
    if (!pipe) pipe.emplace();
    return *pipe;
  };
  const std::vector<std::pair<const char*, std::function<void(Verdict&)>>> criteria = {
      {"teacher correctness", teacher_correctness},
      {"gradient oracle", gradient_oracle},
      {"kNN exactness", knn_exactness},
      {"self-retrieval", [&](Verdict& v) { self_retrieval(v, shared()); }},
      {"reduction identities", [&](Verdict& v) { reductions(v, shared()); }},
      {"overcorrection", [&](Verdict& v) { overcorrection(v, shared()); }},
      {"throughput direction", [&](Verdict& v) { throughput(v, shared()); }},
      {"sweep shape", [&](Verdict& v) { sweep(v, shared()); }},
      {"BLEU oracle", [&](Verdict& v) { bleu_oracle(v, shared()); }},
  };
  const double limits[] = {5, 30, 10, 0, 0, 0, 0, 0, 0};  // runtime gates checked here; others inside

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    auto t0 = Clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.failed += std::string(" [error: ") + e.what() + "]";
    }
    const double s = since(t0);
    if (limits[i] > 0 && s >= limits[i]) v.require(false, "runtime under " + fmt(limits[i], 0) + " s");
    std::printf("criterion %d %s: %s  %s (%.1f s)%s\n", id, criteria[i].first, v.pass ? "PASS" : "FAIL",
                v.detail.str().c_str(), s, v.failed.c_str());
    std::fflush(stdout);
    failures += !v.pass;
  }
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
