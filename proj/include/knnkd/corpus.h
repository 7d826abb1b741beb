// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace knnkd::corpus {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kNumSpecials = 4;

/// Bidirectional token/id map. Ids 0-3 are the reserved specials; corpus
/// tokens follow densely from 4.
class Vocabulary {
 public:
  Vocabulary();

  /// Builds a vocabulary whose non-special tokens are `tokens` in id order.
  /// Throws on duplicates or on tokens that spell a special.
  static Vocabulary from_tokens(std::span<const std::string> tokens);

  std::optional<TokenId> find(std::string_view token) const;
  /// OOV maps to UNK.
  TokenId id(std::string_view token) const { return find(token).value_or(kUnk); }
  const std::string& token(TokenId id) const;

  std::size_t size() const { return tokens_.size(); }
  /// Non-special tokens, in id order starting at id 4.
  std::span<const std::string> corpus_tokens() const {
    return std::span(tokens_).subspan(kNumSpecials);
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

std::vector<std::string_view> split_whitespace(std::string_view line);

/// Frequency-descending, then lexicographic. Tokens seen fewer than
/// `min_count` times are left out (and so encode as UNK).
Vocabulary build_vocab(std::span<const std::string> lines, std::size_t min_count = 1);

/// Whitespace tokenization; never fails. No BOS/EOS added.
Sequence encode(std::string_view line, const Vocabulary& vocab);

/// Joins tokens with single spaces. Specials are dropped unless `keep_specials`.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, bool keep_specials = false);

/// One token per line; line number = id - 4.
void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary load_vocab(const std::filesystem::path& path);

struct SentencePair {
  Sequence source;
  Sequence target;  // ends with EOS
};

struct ParallelCorpus {
  std::vector<SentencePair> pairs;
  std::size_t src_vocab_size = 0;
  std::size_t tgt_vocab_size = 0;

  std::size_t total_target_tokens() const;
  /// First datastore row of each pair (prefix sums of target lengths), plus
  /// a final entry holding the total.
  std::vector<std::size_t> target_offsets() const;
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;
};

/// Encodes aligned source/target lines. Targets get a trailing EOS.
ParallelCorpus encode_corpus(std::span<const std::string> src_lines,
                             std::span<const std::string> tgt_lines,
                             const Vocabulary& src_vocab, const Vocabulary& tgt_vocab);

ParallelCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path,
                           const Vocabulary& src_vocab, const Vocabulary& tgt_vocab);

}  // namespace knnkd::corpus
