// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "knnkd/corpus.h"

namespace knnkd::corpus {

/// Parameters of the synthetic many-valid-targets translation task.
///
/// Each source sentence is a sequence of `target_len` content words ("s<j>")
/// with `source_len - target_len` untranslated particles ("p<f>") mixed in.
/// Its translation renders every content word with its canonical target word
/// ("t<j>"), except at one randomly chosen slot per source where the word is
/// rendered loosely: each of the source's `valid_targets_per_source`
/// references uses a different variant there. Which slot is loose cannot be
/// read off the source text, so a model only learns it per training sentence.
struct SynthTaskSpec {
  std::size_t num_sources = 600;
  std::size_t valid_targets_per_source = 3;
  std::size_t source_len = 8;
  std::size_t target_len = 6;
  std::uint64_t seed = 1;
  double train_fraction = 0.8;
  double valid_fraction = 0.1;
  double test_fraction = 0.1;
  std::size_t num_concepts = 20;
  std::size_t num_particles = 4;
  /// Whether the canonical word is one of the loose slot's variants.
  bool loose_slot_keeps_canonical = true;

  void validate() const;
};

struct TextSplit {
  std::vector<std::string> source;
  std::vector<std::string> target;
};

/// Valid next tokens for one held-out context (pair index, target position).
struct OracleRecord {
  std::size_t sentence = 0;
  std::size_t position = 0;
  std::vector<TokenId> tokens;  // ascending

  bool operator==(const OracleRecord&) const = default;
};

struct SynthCorpus {
  TextSplit train, valid, test;
  Vocabulary src_vocab, tgt_vocab;
  std::vector<OracleRecord> valid_oracle, test_oracle;
};

/// Pure function of the spec. Vocabularies cover all three splits.
SynthCorpus gen_synth(const SynthTaskSpec& spec);

/// For every (pair, position) of `corpus`: the distinct tokens found at that
/// position across all pairs that share the source and the target prefix.
std::vector<OracleRecord> oracle_sets(const ParallelCorpus& corpus);

/// Sidecar lines: sentence_idx<TAB>position<TAB>id,id,...
void save_oracle(const std::filesystem::path& path, const std::vector<OracleRecord>& records);
std::vector<OracleRecord> load_oracle(const std::filesystem::path& path);

}  // namespace knnkd::corpus
