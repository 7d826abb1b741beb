// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/evalbench.h"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "knnkd/model.h"

#ifndef KNNKD_BUILD_TYPE
#define KNNKD_BUILD_TYPE "unknown"
#endif

namespace knnkd::eval {

namespace {

using Ngram = std::vector<corpus::TokenId>;

std::map<Ngram, std::size_t> count_ngrams(const Sequence& s, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  if (s.size() < n) return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Ngram(s.begin() + i, s.begin() + i + n)];
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

BleuReport bleu(std::span<const Sequence> hypotheses, std::span<const Sequence> references,
                std::size_t max_n) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("hypothesis and reference counts differ");
  }
  if (max_n < 1 || max_n > 4) throw std::invalid_argument("max_n must be in [1,4]");
  BleuReport r;
  r.max_n = max_n;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    r.hyp_length += hypotheses[s].size();
    r.ref_length += references[s].size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      auto hyp = count_ngrams(hypotheses[s], n);
      auto ref = count_ngrams(references[s], n);
      for (const auto& [g, c] : hyp) {
        r.totals[n - 1] += c;
        auto it = ref.find(g);
        if (it != ref.end()) r.matches[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (r.hyp_length == 0) return r;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (r.totals[n] == 0) continue;
    r.precisions[n] = static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    if (r.matches[n] == 0) return r;  // bleu stays 0
    log_sum += std::log(r.precisions[n]);
    ++orders;
  }
  const double c = static_cast<double>(r.hyp_length), ref = static_cast<double>(r.ref_length);
  r.brevity_penalty = c > ref ? 1.0 : std::exp(1.0 - ref / c);
  r.bleu = 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  // exact 100 when every precision is 1 and there is no brevity penalty
  if (r.brevity_penalty == 1.0 && log_sum == 0.0) r.bleu = 100.0;
  return r;
}

BleuReport bleu_text(std::span<const std::string> hypotheses, std::span<const std::string> references,
                     std::size_t max_n) {
  std::map<std::string, corpus::TokenId, std::less<>> ids;
  auto intern = [&](const std::string& line) {
    Sequence out;
    for (auto tok : corpus::split_whitespace(line)) {
      auto it = ids.find(tok);
      if (it == ids.end()) it = ids.emplace(std::string(tok), static_cast<corpus::TokenId>(ids.size())).first;
      out.push_back(it->second);
    }
    return out;
  };
  std::vector<Sequence> hyp, ref;
  for (const auto& l : hypotheses) hyp.push_back(intern(l));
  for (const auto& l : references) ref.push_back(intern(l));
  return bleu(hyp, ref, max_n);
}

OvercorrectionReport overcorrection_probe(const ProbRows& rows, const corpus::ParallelCorpus& test,
                                          std::span<const corpus::OracleRecord> oracle) {
  OvercorrectionReport r;
  std::vector<double> pos_sum;
  std::vector<std::size_t> pos_count;
  double total = 0.0, ambiguous = 0.0;
  std::size_t cached_pair = SIZE_MAX;
  std::vector<std::vector<double>> cached;
  if (test.pairs.empty()) throw std::invalid_argument("empty test set");
  if (oracle.size() != test.total_target_tokens()) {
    throw std::invalid_argument("oracle sidecar has " + std::to_string(oracle.size()) + " records for " +
                                std::to_string(test.total_target_tokens()) + " test contexts");
  }
  std::size_t expect_sentence = 0, expect_position = 0;
  for (const auto& rec : oracle) {
    if (rec.sentence != expect_sentence || rec.position != expect_position) {
      throw std::invalid_argument("oracle sidecar does not match test set");
    }
    const auto& target = test.pairs[rec.sentence].target;
    if (++expect_position == target.size()) {
      ++expect_sentence;
      expect_position = 0;
    }
    const auto reference = target[rec.position];
    if (!std::binary_search(rec.tokens.begin(), rec.tokens.end(), reference)) {
      throw std::invalid_argument("oracle set misses the reference token");
    }
    if (rec.sentence != cached_pair) {
      cached = rows(rec.sentence);
      cached_pair = rec.sentence;
      if (cached.size() != target.size()) throw std::invalid_argument("probability rows do not match target length");
    }
    const auto& p = cached[rec.position];
    double mass = 0.0;
    for (auto t : rec.tokens) {
      if (t == reference) continue;
      if (t >= p.size()) throw std::invalid_argument("oracle token outside model vocabulary");
      mass += p[t];
    }
    total += mass;
    ++r.contexts;
    if (rec.tokens.size() > 1) {
      ambiguous += mass;
      ++r.ambiguous_contexts;
    }
    if (pos_sum.size() <= rec.position) {
      pos_sum.resize(rec.position + 1, 0.0);
      pos_count.resize(rec.position + 1, 0);
    }
    pos_sum[rec.position] += mass;
    ++pos_count[rec.position];
  }
  if (r.contexts > 0) r.mean_mass = total / static_cast<double>(r.contexts);
  if (r.ambiguous_contexts > 0) r.mean_mass_ambiguous = ambiguous / static_cast<double>(r.ambiguous_contexts);
  for (std::size_t i = 0; i < pos_sum.size(); ++i) {
    r.mass_by_position.push_back(pos_count[i] ? pos_sum[i] / static_cast<double>(pos_count[i]) : 0.0);
  }
  return r;
}

OvercorrectionReport overcorrection_probe(const nmt::Model& model, const corpus::ParallelCorpus& test,
                                          std::span<const corpus::OracleRecord> oracle) {
  return overcorrection_probe(
      [&](std::size_t i) {
        const auto& pair = test.pairs[i];
        auto pass = nmt::teacher_forced(model, pair.source, pair.target);
        std::vector<std::vector<double>> out;
        for (const auto& step : pass.steps) out.push_back(nmt::softmax(step.logits));
        return out;
      },
      test, oracle);
}

std::string SessionFingerprint::str() const {
  return host + "|" + build + "|threads=" + std::to_string(threads);
}

SessionFingerprint current_session(std::size_t threads) {
  char host[256] = {};
  if (::gethostname(host, sizeof(host) - 1) != 0) host[0] = '\0';
  std::string build = std::string(KNNKD_BUILD_TYPE) + " " + __DATE__ + " " + __TIME__;
  return {host, build, threads};
}

std::vector<ThroughputReport> bench_decode_interleaved(
    const std::vector<std::pair<std::string, DecodeFn>>& decoders, std::span<const Sequence> sources,
    std::size_t repetitions, const SessionFingerprint& session) {
  if (sources.empty()) throw std::invalid_argument("empty test set");
  if (repetitions == 0) throw std::invalid_argument("repetitions must be positive");
  using clock = std::chrono::steady_clock;
  for (const auto& [name, fn] : decoders) {
    for (const auto& s : sources) fn(s);  // warmup
  }
  std::vector<std::vector<double>> secs(decoders.size()), rates(decoders.size());
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (std::size_t i = 0; i < decoders.size(); ++i) {
      // odd repetitions run in reverse so no decoder always follows the same one
      const std::size_t d = rep % 2 == 0 ? i : decoders.size() - 1 - i;
      std::size_t tokens = 0;
      const auto t0 = clock::now();
      for (const auto& s : sources) tokens += decoders[d].second(s);
      const double dt = std::chrono::duration<double>(clock::now() - t0).count();
      secs[d].push_back(dt);
      rates[d].push_back(static_cast<double>(tokens) / dt);
    }
  }
  std::vector<ThroughputReport> out;
  for (std::size_t d = 0; d < decoders.size(); ++d) {
    ThroughputReport r;
    r.name = decoders[d].first;
    r.tokens_per_second = median(rates[d]);
    r.seconds = median(secs[d]);
    r.repetitions = repetitions;
    r.session = session;
    out.push_back(std::move(r));
  }
  return out;
}

ThroughputReport bench_decode(const std::string& name, const DecodeFn& decoder,
                              std::span<const Sequence> sources, std::size_t repetitions,
                              const SessionFingerprint& session) {
  return bench_decode_interleaved({{name, decoder}}, sources, repetitions, session).front();
}

std::vector<ThroughputReport> bench_updates_interleaved(
    const std::vector<std::pair<std::string, std::function<void()>>>& trainers,
    std::size_t updates_per_rep, std::size_t repetitions, const SessionFingerprint& session) {
  if (updates_per_rep == 0 || repetitions == 0) throw std::invalid_argument("nothing to time");
  using clock = std::chrono::steady_clock;
  for (const auto& [name, fn] : trainers) fn();  // warmup
  std::vector<std::vector<double>> secs(trainers.size()), rates(trainers.size());
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    for (std::size_t i = 0; i < trainers.size(); ++i) {
      const std::size_t t = rep % 2 == 0 ? i : trainers.size() - 1 - i;
      const auto t0 = clock::now();
      for (std::size_t u = 0; u < updates_per_rep; ++u) trainers[t].second();
      const double dt = std::chrono::duration<double>(clock::now() - t0).count();
      secs[t].push_back(dt);
      rates[t].push_back(static_cast<double>(updates_per_rep) / dt);
    }
  }
  std::vector<ThroughputReport> out;
  for (std::size_t t = 0; t < trainers.size(); ++t) {
    ThroughputReport r;
    r.name = trainers[t].first;
    r.updates_per_second = median(rates[t]);
    r.seconds = median(secs[t]);
    r.repetitions = repetitions;
    r.session = session;
    out.push_back(std::move(r));
  }
  return out;
}

void BenchRegistry::add_baseline(const ThroughputReport& report) { baselines_[report.name] = report; }

void BenchRegistry::relate(ThroughputReport& report, const std::string& baseline) const {
  auto it = baselines_.find(baseline);
  if (it == baselines_.end()) throw std::invalid_argument("unknown baseline run: " + baseline);
  const auto& base = it->second;
  if (!(base.session == report.session)) {
    throw std::invalid_argument("baseline '" + baseline + "' was measured in a different session");
  }
  double ratio;
  if (report.tokens_per_second > 0.0 && base.tokens_per_second > 0.0) {
    ratio = report.tokens_per_second / base.tokens_per_second;
  } else if (report.updates_per_second > 0.0 && base.updates_per_second > 0.0) {
    ratio = report.updates_per_second / base.updates_per_second;
  } else {
    throw std::invalid_argument("reports share no throughput measure");
  }
  report.ratio = ratio;
  report.baseline = baseline;
}

namespace {

std::string kv(const nlohmann::json& j) {
  std::ostringstream out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    out << it.key() << '=';
    if (it->is_string()) {
      out << it->get<std::string>();
    } else if (it->is_array()) {
      for (std::size_t i = 0; i < it->size(); ++i) out << (i ? "," : "") << (*it)[i].dump();
    } else {
      out << it->dump();
    }
    out << '\n';
  }
  return out.str();
}

nlohmann::json as_json(const BleuReport& r) {
  nlohmann::json j;
  j["schema"] = "knnkd.bleu/1";
  j["bleu"] = r.bleu;
  j["precisions"] = std::vector<double>(r.precisions.begin(), r.precisions.begin() + static_cast<std::ptrdiff_t>(r.max_n));
  j["brevity_penalty"] = r.brevity_penalty;
  j["hyp_length"] = r.hyp_length;
  j["ref_length"] = r.ref_length;
  return j;
}

nlohmann::json as_json(const OvercorrectionReport& r) {
  nlohmann::json j;
  j["schema"] = "knnkd.overcorrection/1";
  j["mean_mass"] = r.mean_mass;
  j["mean_mass_ambiguous"] = r.mean_mass_ambiguous;
  j["contexts"] = r.contexts;
  j["ambiguous_contexts"] = r.ambiguous_contexts;
  j["mass_by_position"] = r.mass_by_position;
  return j;
}

nlohmann::json as_json(const ThroughputReport& r) {
  nlohmann::json j;
  j["schema"] = "knnkd.throughput/1";
  j["name"] = r.name;
  j["tokens_per_second"] = r.tokens_per_second;
  j["updates_per_second"] = r.updates_per_second;
  j["seconds"] = r.seconds;
  j["repetitions"] = r.repetitions;
  j["baseline"] = r.baseline;
  j["ratio"] = r.ratio ? nlohmann::json(*r.ratio) : nlohmann::json();
  j["session"] = r.session.str();
  return j;
}

}  // namespace

std::string to_text(const BleuReport& r) { return kv(as_json(r)); }
std::string to_text(const OvercorrectionReport& r) { return kv(as_json(r)); }
std::string to_text(const ThroughputReport& r) { return kv(as_json(r)); }
std::string to_json(const BleuReport& r) { return as_json(r).dump(2); }
std::string to_json(const OvercorrectionReport& r) { return as_json(r).dump(2); }
std::string to_json(const ThroughputReport& r) { return as_json(r).dump(2); }

}  // namespace knnkd::eval
