// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0
//
// knnkd: stage-by-stage driver for the synthetic kNN-KD pipeline.

#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "knnkd/pipeline.h"

namespace pl = knnkd::pipeline;

namespace {

struct Flags {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  std::string mode, name, split = "test";
  std::optional<std::string> checkpoint, datastore, neighbors, hyp;
};

template <typename T>
std::optional<std::filesystem::path> as_path(const std::optional<T>& s) {
  if (!s) return std::nullopt;
  return std::filesystem::path(*s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kNN-KD toolkit: synthetic data, training, datastores, decoding, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON config file");
  app.add_option("--seed", f.seed, "Seed for data, init, shuffling and k-means");
  app.add_option("--threads", f.threads, "Worker threads for datastore build, search and bench tagging");
  app.add_option("--out", f.out, "Output root (default $KNNKD_OUT or ./run)");
  app.add_option("--set", f.overrides, "Config override key.path=value (repeatable)");

  using Stage = std::function<pl::RunManifest(const pl::StageArgs&)>;
  std::map<CLI::App*, Stage> stages;
  auto stage = [&](const char* name, const char* help, Stage fn) {
    auto* sub = app.add_subcommand(name, help);
    stages[sub] = std::move(fn);
    return sub;
  };

  stage("gen-synth", "Generate the synthetic many-valid-targets corpus and oracle sidecars", pl::cmd_gen_synth);
  auto* train = stage("train", "Train a model with --mode ce or knn-kd", pl::cmd_train);
  train->add_option("--mode", f.mode, "ce | knn-kd")->check(CLI::IsMember({"ce", "knn-kd"}));
  train->add_option("--name", f.name, "Checkpoint name under models/ (default: the mode)");
  train->add_option("--neighbors", f.neighbors, "Neighbor file for knn-kd (default store/neighbors.bin)");
  train->add_option("--checkpoint", f.checkpoint, "Initialize from this checkpoint instead of fresh init");

  auto* build = stage("build-datastore", "Build the datastore from a trained checkpoint", pl::cmd_build_datastore);
  build->add_option("--checkpoint", f.checkpoint, "Checkpoint (default models/ce.ckpt)");
  build->add_option("--datastore", f.datastore, "Output path (default store/datastore.bin)");

  auto* search = stage("knn-search", "Precompute neighbors of every training position", pl::cmd_knn_search);
  search->add_option("--checkpoint", f.checkpoint, "Checkpoint that built the datastore (default models/ce.ckpt)");
  search->add_option("--datastore", f.datastore, "Datastore (default store/datastore.bin)");
  search->add_option("--neighbors", f.neighbors, "Output path (default store/neighbors.bin)");

  auto* decode = stage("decode", "Beam-decode a split with --mode base or knn-mt", pl::cmd_decode);
  decode->add_option("--mode", f.mode, "base | knn-mt")->check(CLI::IsMember({"base", "knn-mt"}));
  decode->add_option("--checkpoint", f.checkpoint, "Checkpoint (default models/ce.ckpt)");
  decode->add_option("--datastore", f.datastore, "Datastore, required by knn-mt");
  decode->add_option("--split", f.split, "train | valid | test");
  decode->add_option("--name", f.name, "Output name under decode/");
  decode->add_option("--hyp", f.hyp, "Output path override");

  auto* evaluate = stage("evaluate", "BLEU of a hypothesis file and/or the overcorrection probe of a checkpoint",
                         pl::cmd_evaluate);
  evaluate->add_option("--hyp", f.hyp, "Hypothesis file, one line per split pair");
  evaluate->add_option("--checkpoint", f.checkpoint, "Checkpoint to probe on the split's oracle sidecar");
  evaluate->add_option("--split", f.split, "valid | test");
  evaluate->add_option("--name", f.name, "Report name under eval/");

  auto* bench = stage("bench", "Decode and training throughput: ce, knn-kd, knn-mt", pl::cmd_bench);
  bench->add_option("--datastore", f.datastore, "Datastore (default store/datastore.bin)");
  bench->add_option("--neighbors", f.neighbors, "Neighbor file (default store/neighbors.bin)");

  auto* sweep = stage("sweep", "Train one knn-kd model per (k, tau) grid point and report BLEU", pl::cmd_sweep);
  sweep->add_option("--neighbors", f.neighbors, "Neighbor file (default store/neighbors.bin)");
  sweep->add_option("--checkpoint", f.checkpoint, "CE checkpoint when distill.init=finetune");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? pl::kExitOk : pl::kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  try {
    pl::StageArgs args;
    args.config = pl::resolve_config(as_path(f.config), f.overrides, f.seed, f.threads);
    args.layout.root = pl::default_out_dir(as_path(f.out));
    args.mode = f.mode;
    args.name = f.name;
    args.split = f.split;
    args.checkpoint = as_path(f.checkpoint);
    args.datastore = as_path(f.datastore);
    args.neighbors = as_path(f.neighbors);
    args.hypotheses = as_path(f.hyp);
    auto manifest = stages.at(chosen)(args);
    std::cout << "stage=" << manifest.stage << '\n';
    for (const auto& [path, hash] : manifest.outputs) std::cout << "output=" << path << ' ' << hash << '\n';
    if (manifest.extra.contains("report")) std::cout << manifest.extra["report"].dump(2) << '\n';
    if (manifest.extra.contains("rows")) std::cout << manifest.extra["rows"].dump() << '\n';
    return pl::kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "knnkd " << chosen->get_name() << ": " << e.what() << '\n';
    return pl::exit_code_for(e);
  }
}
