// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnkd/corpus.h"
#include "knnkd/model.h"
#include "knnkd/synth.h"

namespace knnkd::eval {

using corpus::Sequence;

struct BleuReport {
  double bleu = 0.0;  // percentage
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t max_n = 4;
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

/// Corpus BLEU, single reference, no smoothing: a zero clipped precision
/// gives 0. Orders for which the hypotheses contain no n-grams at all are
/// left out of the geometric mean.
BleuReport bleu(std::span<const Sequence> hypotheses, std::span<const Sequence> references,
                std::size_t max_n = 4);

/// BLEU over whitespace-tokenized text lines (byte-exact token match).
BleuReport bleu_text(std::span<const std::string> hypotheses, std::span<const std::string> references,
                     std::size_t max_n = 4);

struct OvercorrectionReport {
  double mean_mass = 0.0;            // over all probed contexts
  double mean_mass_ambiguous = 0.0;  // over contexts whose oracle set has > 1 token
  std::size_t contexts = 0;
  std::size_t ambiguous_contexts = 0;
  std::vector<double> mass_by_position;  // mean over contexts at each target position
};

/// Probability rows (one per target position) the model assigns to pair i.
using ProbRows = std::function<std::vector<std::vector<double>>(std::size_t pair)>;

/// Mass on valid-but-not-reference next tokens under teacher forcing.
OvercorrectionReport overcorrection_probe(const ProbRows& rows, const corpus::ParallelCorpus& test,
                                          std::span<const corpus::OracleRecord> oracle);
OvercorrectionReport overcorrection_probe(const nmt::Model& model, const corpus::ParallelCorpus& test,
                                          std::span<const corpus::OracleRecord> oracle);

/// Host, build and thread count; throughput ratios are only taken between
/// reports carrying equal fingerprints.
struct SessionFingerprint {
  std::string host;
  std::string build;
  std::size_t threads = 1;

  bool operator==(const SessionFingerprint&) const = default;
  std::string str() const;
};

SessionFingerprint current_session(std::size_t threads);

struct ThroughputReport {
  std::string name;
  double tokens_per_second = 0.0;
  double updates_per_second = 0.0;
  double seconds = 0.0;  // median wall-clock of one repetition
  std::size_t repetitions = 0;
  std::string baseline;
  std::optional<double> ratio;
  SessionFingerprint session;
};

/// Decodes one source and returns the number of generated tokens.
using DecodeFn = std::function<std::size_t(const Sequence& source)>;

/// One untimed warmup pass, then `repetitions` timed passes over the whole
/// set; reports the median. Inference batch is one sentence.
ThroughputReport bench_decode(const std::string& name, const DecodeFn& decoder,
                              std::span<const Sequence> sources, std::size_t repetitions,
                              const SessionFingerprint& session);

/// Same as bench_decode for several decoders, alternating between them
/// every repetition so slow drifts hit all of them alike.
std::vector<ThroughputReport> bench_decode_interleaved(
    const std::vector<std::pair<std::string, DecodeFn>>& decoders, std::span<const Sequence> sources,
    std::size_t repetitions, const SessionFingerprint& session);

/// Times `updates_per_rep` calls of `update` per repetition, interleaved
/// across the given trainers; reports updates/s medians.
std::vector<ThroughputReport> bench_updates_interleaved(
    const std::vector<std::pair<std::string, std::function<void()>>>& trainers,
    std::size_t updates_per_rep, std::size_t repetitions, const SessionFingerprint& session);

/// Keeps named baseline runs and fills in `ratio` for later runs.
class BenchRegistry {
 public:
  void add_baseline(const ThroughputReport& report);
  /// Sets report.ratio/baseline against the named baseline (tokens/s when
  /// both report it, else updates/s). Throws on unknown baseline or when
  /// the session fingerprints differ.
  void relate(ThroughputReport& report, const std::string& baseline) const;

 private:
  std::map<std::string, ThroughputReport> baselines_;
};

/// key=value lines.
std::string to_text(const BleuReport& r);
std::string to_text(const OvercorrectionReport& r);
std::string to_text(const ThroughputReport& r);
/// JSON documents tagged {"schema": "knnkd.<kind>/1"}.
std::string to_json(const BleuReport& r);
std::string to_json(const OvercorrectionReport& r);
std::string to_json(const ThroughputReport& r);

}  // namespace knnkd::eval
