// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "knnkd/corpus.h"
#include "knnkd/datastore.h"
#include "knnkd/decode.h"
#include "knnkd/distill.h"
#include "knnkd/evalbench.h"
#include "knnkd/knn.h"
#include "knnkd/knnmt.h"
#include "knnkd/model.h"
#include "knnkd/neighbor_file.h"
#include "knnkd/synth.h"
#include "knnkd/train.h"

namespace knnkd::pipeline {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitArtifact = 3, kExitNumerical = 4 };

/// Bad flags, bad config values, invalid flag combinations.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An upstream artifact a stage needs is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps an exception escaping a stage to the process exit code.
int exit_code_for(const std::exception& e);

struct SweepGrid {
  std::vector<std::size_t> ks = {1, 2, 4, 8, 16, 32, 64};
  double fixed_tau = 100.0;
  std::vector<double> taus = {0.01, 1.0, 100.0};
  std::size_t fixed_k = 64;
  std::string split = "valid";
};

struct Config {
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  corpus::SynthTaskSpec synth;
  std::uint32_t embed_dim = 64;
  std::uint32_t hidden_dim = 64;
  nmt::TrainConfig train;
  distill::DistillConfig distill;
  bool finetune = false;  // knn-kd starts from the CE checkpoint instead of fresh init
  knn::SearchConfig search;
  std::size_t beam = 5;
  double max_len_a = 1.0;  // max_len = ceil(a * |source|) + b
  std::size_t max_len_b = 5;
  knnmt::InterpConfig knnmt;
  std::size_t bench_repetitions = 5;
  std::size_t bench_train_updates = 50;
  SweepGrid sweep;

  Config();
  nlohmann::json to_json() const;
  /// Starts from defaults; unknown keys are a UsageError.
  static Config from_json(const nlohmann::json& j);
  void validate() const;
  std::size_t max_len(std::size_t source_length) const;
};

/// Config file (optional) plus `key.path=value` overrides, then the common
/// --seed/--threads flags. Override values parse as JSON, else as a string.
Config resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed, std::optional<std::size_t> threads);

/// Output root: the flag if given, else $KNNKD_OUT, else ./run.
fs::path default_out_dir(const std::optional<fs::path>& flag);

/// Fixed artifact locations under an output root.
struct Layout {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path split_src(const std::string& split) const { return data_dir() / (split + ".src"); }
  fs::path split_tgt(const std::string& split) const { return data_dir() / (split + ".tgt"); }
  fs::path oracle(const std::string& split) const { return data_dir() / (split + ".oracle"); }
  fs::path src_vocab() const { return data_dir() / "vocab.src"; }
  fs::path tgt_vocab() const { return data_dir() / "vocab.tgt"; }
  fs::path checkpoint(const std::string& name) const { return root / "models" / (name + ".ckpt"); }
  fs::path train_log(const std::string& name) const { return root / "models" / (name + ".log.json"); }
  fs::path datastore() const { return root / "store" / "datastore.bin"; }
  fs::path neighbors() const { return root / "store" / "neighbors.bin"; }
  fs::path hypotheses(const std::string& name, const std::string& split) const {
    return root / "decode" / (name + "." + split + ".txt");
  }
  fs::path report(const std::string& name, const std::string& ext) const {
    return root / "eval" / (name + "." + ext);
  }
  fs::path bench_report(const std::string& ext) const { return root / "bench" / ("bench." + ext); }
  fs::path sweep_table() const { return root / "sweep" / "sweep.tsv"; }
  fs::path manifest(const std::string& stage, const std::string& name) const;
};

struct RunManifest {
  std::string stage;
  std::string name;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;   // path relative to root -> git blob hash
  std::map<std::string, std::string> outputs;  // same
  std::string started;
  std::string finished;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Encoded splits and oracles, in memory.
struct Data {
  corpus::Vocabulary src_vocab, tgt_vocab;
  corpus::ParallelCorpus train, valid, test;
  std::vector<corpus::OracleRecord> valid_oracle, test_oracle;

  const corpus::ParallelCorpus& split(const std::string& name) const;
  const std::vector<corpus::OracleRecord>& oracle(const std::string& name) const;
};

Data encode_synth(const corpus::SynthCorpus& synth);
Data load_data(const Layout& layout);

nmt::ModelConfig model_config(const Config& config, const Data& data);
nmt::TrainConfig train_config(const Config& config);

enum class TrainMode { ce, knn_kd };
TrainMode parse_train_mode(const std::string& mode);

/// Fresh init (or `init` when given) trained on data.train. knn-kd needs a
/// neighbor file aligned with data.train.
nmt::Model train_model(const Config& config, const Data& data, TrainMode mode,
                       const knn::NeighborFile* neighbors, const nmt::Model* init,
                       nmt::TrainLog* log = nullptr);

/// Beam-decodes every pair's source (identical consecutive sources are
/// decoded once). With an index, decoding interpolates kNN-MT.
std::vector<corpus::Sequence> decode_corpus(const Config& config, const nmt::Model& model,
                                            const corpus::ParallelCorpus& corpus,
                                            const knn::Index* knnmt_index = nullptr);

/// References with the trailing EOS removed.
std::vector<corpus::Sequence> references(const corpus::ParallelCorpus& corpus);

struct SweepRow {
  std::size_t k = 0;
  double tau = 0.0;
  double bleu = 0.0;
};

/// The (k, tau) points: every k at fixed_tau, then every tau at fixed_k,
/// duplicates dropped, in that order.
std::vector<std::pair<std::size_t, double>> sweep_points(const SweepGrid& grid);

/// Trains one knn-kd model per grid point and scores it on grid.split.
std::vector<SweepRow> run_sweep(const Config& config, const Data& data,
                                const knn::NeighborFile& neighbors, const nmt::Model* init);

struct SweepShape {
  std::size_t best_k = 0;  // smallest k reaching the best BLEU at fixed_tau
  bool interior = false;
  bool tiny_tau_strictly_worst = false;
  bool pass = false;
};

SweepShape sweep_shape(const std::vector<SweepRow>& rows, const SweepGrid& grid);

std::string format_sweep_table(const std::vector<SweepRow>& rows);

/// Options a stage may read; each stage documents which it needs.
struct StageArgs {
  Config config;
  Layout layout;
  std::string mode;
  std::string name;
  std::string split = "test";
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> datastore;
  std::optional<fs::path> neighbors;
  std::optional<fs::path> hypotheses;
};

RunManifest cmd_gen_synth(const StageArgs& args);
RunManifest cmd_train(const StageArgs& args);
RunManifest cmd_build_datastore(const StageArgs& args);
RunManifest cmd_knn_search(const StageArgs& args);
RunManifest cmd_decode(const StageArgs& args);
RunManifest cmd_evaluate(const StageArgs& args);
RunManifest cmd_bench(const StageArgs& args);
RunManifest cmd_sweep(const StageArgs& args);

}  // namespace knnkd::pipeline
