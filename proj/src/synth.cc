// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/synth.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "knnkd/io.h"
#include "knnkd/random.h"

namespace knnkd::corpus {

void SynthTaskSpec::validate() const {
  if (num_sources == 0) throw std::invalid_argument("num_sources must be positive");
  if (valid_targets_per_source < 2) {
    throw std::invalid_argument("valid_targets_per_source must be >= 2");
  }
  if (target_len == 0 || source_len == 0) throw std::invalid_argument("lengths must be positive");
  if (source_len < target_len) throw std::invalid_argument("source_len must be >= target_len");
  if (num_concepts == 0) throw std::invalid_argument("num_concepts must be positive");
  if (source_len > target_len && num_particles == 0) {
    throw std::invalid_argument("num_particles must be positive when source_len > target_len");
  }
  for (double f : {train_fraction, valid_fraction, test_fraction}) {
    if (!(f >= 0.0) || f > 1.0) throw std::invalid_argument("split fractions must lie in [0,1]");
  }
  if (std::abs(train_fraction + valid_fraction + test_fraction - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
}

namespace {

struct SourceDraft {
  std::vector<std::size_t> concepts;
  std::string text;
  std::size_t loose_slot = 0;
};

std::string render_target(const SourceDraft& s, std::size_t variant, bool keeps_canonical) {
  std::string out;
  for (std::size_t i = 0; i < s.concepts.size(); ++i) {
    if (!out.empty()) out += ' ';
    out += 't' + std::to_string(s.concepts[i]);
    if (i == s.loose_slot) {
      std::size_t v = keeps_canonical ? variant : variant + 1;
      if (v > 0) out += 'v' + std::to_string(v);
    }
  }
  return out;
}

std::vector<OracleRecord> oracle_for_split(const TextSplit& split, const Vocabulary& src_vocab,
                                           const Vocabulary& tgt_vocab) {
  auto corpus = encode_corpus(split.source, split.target, src_vocab, tgt_vocab);
  return oracle_sets(corpus);
}

}  // namespace

SynthCorpus gen_synth(const SynthTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t num_particles_in_source = spec.source_len - spec.target_len;

  // Count of possible distinct sources, to fail fast instead of looping.
  double space = std::pow(static_cast<double>(spec.num_concepts), static_cast<double>(spec.target_len));
  if (space < static_cast<double>(spec.num_sources)) {
    throw std::invalid_argument("too few concepts for the requested number of distinct sources");
  }

  std::vector<SourceDraft> sources;
  std::unordered_set<std::string> seen;
  std::size_t attempts = 0;
  while (sources.size() < spec.num_sources) {
    if (++attempts > 100 * spec.num_sources + 1000) {
      throw std::runtime_error("could not draw enough distinct sources");
    }
    SourceDraft s;
    for (std::size_t i = 0; i < spec.target_len; ++i) s.concepts.push_back(rng.index(spec.num_concepts));
    // place particles: choose which of the source_len positions hold them
    std::vector<bool> is_particle(spec.source_len, false);
    for (std::size_t placed = 0; placed < num_particles_in_source;) {
      auto pos = rng.index(spec.source_len);
      if (!is_particle[pos]) {
        is_particle[pos] = true;
        ++placed;
      }
    }
    std::size_t next_concept = 0;
    for (std::size_t pos = 0; pos < spec.source_len; ++pos) {
      if (!s.text.empty()) s.text += ' ';
      if (is_particle[pos]) {
        s.text += 'p' + std::to_string(rng.index(spec.num_particles));
      } else {
        s.text += 's' + std::to_string(s.concepts[next_concept++]);
      }
    }
    s.loose_slot = rng.index(spec.target_len);
    if (seen.insert(s.text).second) sources.push_back(std::move(s));
  }

  std::vector<std::size_t> order(sources.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n = static_cast<double>(sources.size());
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * n));
  const auto n_valid = std::min(sources.size() - n_train,
                                static_cast<std::size_t>(std::llround(spec.valid_fraction * n)));

  SynthCorpus out;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& s = sources[order[rank]];
    TextSplit& split = rank < n_train ? out.train : (rank < n_train + n_valid ? out.valid : out.test);
    for (std::size_t r = 0; r < spec.valid_targets_per_source; ++r) {
      split.source.push_back(s.text);
      split.target.push_back(render_target(s, r, spec.loose_slot_keeps_canonical));
    }
  }

  std::vector<std::string> all_src, all_tgt;
  for (const TextSplit* split : {&out.train, &out.valid, &out.test}) {
    all_src.insert(all_src.end(), split->source.begin(), split->source.end());
    all_tgt.insert(all_tgt.end(), split->target.begin(), split->target.end());
  }
  out.src_vocab = build_vocab(all_src, 1);
  out.tgt_vocab = build_vocab(all_tgt, 1);
  if (!out.valid.source.empty()) out.valid_oracle = oracle_for_split(out.valid, out.src_vocab, out.tgt_vocab);
  if (!out.test.source.empty()) out.test_oracle = oracle_for_split(out.test, out.src_vocab, out.tgt_vocab);
  return out;
}

std::vector<OracleRecord> oracle_sets(const ParallelCorpus& corpus) {
  std::map<Sequence, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) by_source[corpus.pairs[i].source].push_back(i);

  std::vector<OracleRecord> records;
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    const auto& target = corpus.pairs[i].target;
    const auto& group = by_source.at(corpus.pairs[i].source);
    for (std::size_t pos = 0; pos < target.size(); ++pos) {
      std::set<TokenId> valid;
      for (std::size_t j : group) {
        const auto& other = corpus.pairs[j].target;
        if (other.size() > pos && std::equal(target.begin(), target.begin() + pos, other.begin())) {
          valid.insert(other[pos]);
        }
      }
      records.push_back({i, pos, std::vector<TokenId>(valid.begin(), valid.end())});
    }
  }
  return records;
}

void save_oracle(const std::filesystem::path& path, const std::vector<OracleRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) {
    std::string line = std::to_string(r.sentence) + '\t' + std::to_string(r.position) + '\t';
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      if (i > 0) line += ',';
      line += std::to_string(r.tokens[i]);
    }
    lines.push_back(std::move(line));
  }
  io::write_lines(path, lines);
}

namespace {
template <typename T>
T parse_number(std::string_view s, const std::string& context) {
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::runtime_error("malformed oracle record: " + context);
  }
  return value;
}
}  // namespace

std::vector<OracleRecord> load_oracle(const std::filesystem::path& path) {
  std::vector<OracleRecord> out;
  for (const auto& line : io::read_lines(path)) {
    if (line.empty()) continue;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw std::runtime_error("malformed oracle record: " + line);
    std::string_view sv(line);
    OracleRecord r;
    r.sentence = parse_number<std::size_t>(sv.substr(0, t1), line);
    r.position = parse_number<std::size_t>(sv.substr(t1 + 1, t2 - t1 - 1), line);
    auto ids = sv.substr(t2 + 1);
    while (!ids.empty()) {
      auto comma = ids.find(',');
      r.tokens.push_back(parse_number<TokenId>(ids.substr(0, comma), line));
      if (comma == std::string_view::npos) break;
      ids.remove_prefix(comma + 1);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace knnkd::corpus
