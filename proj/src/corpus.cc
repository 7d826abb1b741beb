// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/corpus.h"

#include <algorithm>
#include <cctype>
#include <map>
#include <stdexcept>

#include "knnkd/io.h"

namespace knnkd::corpus {

namespace {
constexpr std::string_view kSpecialNames[kNumSpecials] = {"<pad>", "<s>", "</s>", "<unk>"};
}  // namespace

Vocabulary::Vocabulary() {
  for (TokenId i = 0; i < kNumSpecials; ++i) {
    tokens_.emplace_back(kSpecialNames[i]);
    index_.emplace(tokens_.back(), i);
  }
}

Vocabulary Vocabulary::from_tokens(std::span<const std::string> tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (t.empty() || t.find_first_of(" \t\n\r") != std::string::npos) {
      throw std::invalid_argument("vocabulary token must be a non-empty word: '" + t + "'");
    }
    auto id = static_cast<TokenId>(v.tokens_.size());
    if (!v.index_.emplace(t, id).second) {
      throw std::invalid_argument("duplicate or reserved vocabulary token: " + t);
    }
    v.tokens_.push_back(t);
  }
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("token id out of range");
  return tokens_[id];
}

std::vector<std::string_view> split_whitespace(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> lines, std::size_t min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  if (lines.empty()) throw std::invalid_argument("empty corpus");
  std::map<std::string, std::size_t, std::less<>> counts;
  for (const auto& line : lines) {
    for (auto tok : split_whitespace(line)) {
      auto it = counts.find(tok);
      if (it == counts.end()) {
        counts.emplace(std::string(tok), 1);
      } else {
        ++it->second;
      }
    }
  }
  if (counts.empty()) throw std::invalid_argument("empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    bool reserved = std::find(std::begin(kSpecialNames), std::end(kSpecialNames), tok) !=
                    std::end(kSpecialNames);
    if (n >= min_count && !reserved) ranked.emplace_back(tok, n);
  }
  // map iteration is already lexicographic, so a stable sort on count keeps
  // the tie order
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, n] : ranked) tokens.push_back(tok);
  return Vocabulary::from_tokens(tokens);
}

Sequence encode(std::string_view line, const Vocabulary& vocab) {
  Sequence out;
  for (auto tok : split_whitespace(line)) out.push_back(vocab.id(tok));
  return out;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, bool keep_specials) {
  std::string out;
  for (TokenId id : ids) {
    if (!keep_specials && id < kNumSpecials && id != kUnk) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

void save_vocab(const std::filesystem::path& path, const Vocabulary& vocab) {
  auto toks = vocab.corpus_tokens();
  std::vector<std::string> lines(toks.begin(), toks.end());
  io::write_lines(path, lines);
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  auto lines = io::read_lines(path);
  return Vocabulary::from_tokens(lines);
}

std::size_t ParallelCorpus::total_target_tokens() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.target.size();
  return n;
}

std::vector<std::size_t> ParallelCorpus::target_offsets() const {
  std::vector<std::size_t> offsets;
  offsets.reserve(pairs.size() + 1);
  std::size_t n = 0;
  for (const auto& p : pairs) {
    offsets.push_back(n);
    n += p.target.size();
  }
  offsets.push_back(n);
  return offsets;
}

void ParallelCorpus::validate() const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const std::string where = "pair " + std::to_string(i) + ": ";
    if (p.source.empty()) throw std::invalid_argument(where + "empty source");
    if (p.target.empty() || p.target.back() != kEos) {
      throw std::invalid_argument(where + "target must end with EOS");
    }
    if (p.target.size() < 2) throw std::invalid_argument(where + "empty target");
    for (TokenId t : p.source) {
      if (t >= src_vocab_size) throw std::invalid_argument(where + "source id out of range");
    }
    for (TokenId t : p.target) {
      if (t >= tgt_vocab_size) throw std::invalid_argument(where + "target id out of range");
    }
  }
}

ParallelCorpus encode_corpus(std::span<const std::string> src_lines,
                             std::span<const std::string> tgt_lines,
                             const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  if (src_lines.size() != tgt_lines.size()) {
    throw std::invalid_argument("source and target line counts differ");
  }
  ParallelCorpus corpus;
  corpus.src_vocab_size = src_vocab.size();
  corpus.tgt_vocab_size = tgt_vocab.size();
  corpus.pairs.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    SentencePair p{encode(src_lines[i], src_vocab), encode(tgt_lines[i], tgt_vocab)};
    p.target.push_back(kEos);
    corpus.pairs.push_back(std::move(p));
  }
  corpus.validate();
  return corpus;
}

ParallelCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path,
                           const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  auto src = io::read_lines(src_path);
  auto tgt = io::read_lines(tgt_path);
  return encode_corpus(src, tgt, src_vocab, tgt_vocab);
}

}  // namespace knnkd::corpus
