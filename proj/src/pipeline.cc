// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/pipeline.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <set>
#include <sstream>

#include "knnkd/io.h"
#include "knnkd/random.h"

namespace knnkd::pipeline {

using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const std::invalid_argument*>(&e)) {
    return kExitUsage;
  }
  if (dynamic_cast<const MissingArtifact*>(&e) || dynamic_cast<const io::IncompatibleArtifact*>(&e) ||
      dynamic_cast<const io::FormatError*>(&e)) {
    return kExitArtifact;
  }
  if (dynamic_cast<const nmt::NumericalError*>(&e)) return kExitNumerical;
  return 1;
}

// ---------------------------------------------------------------------------
// config

Config::Config() {
  // toy-scale recipe
  synth.source_len = 7;
  synth.target_len = 6;
  train.epochs = 30;
  train.batch_size = 8;
  train.schedule.peak_lr = 5e-3;
  train.adam.clip_norm = 1.0;
  search.k = 64;
}

namespace {

const char* metric_name(knn::Metric m) { return m == knn::Metric::l2 ? "l2" : "squared_l2"; }

knn::Metric parse_metric(const std::string& s) {
  if (s == "squared_l2") return knn::Metric::squared_l2;
  if (s == "l2") return knn::Metric::l2;
  throw UsageError("unknown metric '" + s + "' (expected squared_l2 or l2)");
}

// Reads known keys from one object and complains about the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError("config '" + path_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw UsageError("unknown config key '" + path_ + it.key() + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw UsageError("config key '" + path_ + key + "' has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json Config::to_json() const {
  json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["synth"] = {{"num_sources", synth.num_sources},
                {"valid_targets_per_source", synth.valid_targets_per_source},
                {"source_len", synth.source_len},
                {"target_len", synth.target_len},
                {"num_concepts", synth.num_concepts},
                {"num_particles", synth.num_particles},
                {"train_fraction", synth.train_fraction},
                {"valid_fraction", synth.valid_fraction},
                {"test_fraction", synth.test_fraction},
                {"loose_slot_keeps_canonical", synth.loose_slot_keeps_canonical}};
  j["model"] = {{"embed_dim", embed_dim}, {"hidden_dim", hidden_dim}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"lr", train.schedule.peak_lr},
                {"warmup_steps", train.schedule.warmup_steps},
                {"warmup_init_lr", train.schedule.warmup_init_lr},
                {"min_lr", train.schedule.min_lr},
                {"adam_beta1", train.adam.beta1},
                {"adam_beta2", train.adam.beta2},
                {"adam_eps", train.adam.eps},
                {"clip_norm", train.adam.clip_norm}};
  j["distill"] = {{"k", distill.k}, {"tau", distill.tau}, {"alpha", distill.alpha},
                  {"init", finetune ? "finetune" : "scratch"}};
  json s = {{"k", search.k}, {"metric", metric_name(search.metric)}, {"index", search.ivf ? "ivf" : "exact"}};
  const knn::IvfParams ivf = search.ivf.value_or(knn::IvfParams{});
  s["ivf_clusters"] = ivf.num_clusters;
  s["ivf_probes"] = ivf.num_probes;
  s["ivf_iterations"] = ivf.train_iterations;
  j["search"] = s;
  j["decode"] = {{"beam", beam},          {"max_len_a", max_len_a}, {"max_len_b", max_len_b},
                 {"lambda", knnmt.lambda}, {"k", knnmt.k},          {"tau", knnmt.tau},
                 {"metric", metric_name(knnmt.metric)}};
  j["bench"] = {{"repetitions", bench_repetitions}, {"train_updates", bench_train_updates}};
  j["sweep"] = {{"k", sweep.ks},
                {"fixed_tau", sweep.fixed_tau},
                {"tau", sweep.taus},
                {"fixed_k", sweep.fixed_k},
                {"split", sweep.split}};
  return j;
}

Config Config::from_json(const json& j) {
  Config c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  if (auto* s = top.sub("synth")) {
    Section sec(*s, "synth.");
    sec.get("num_sources", c.synth.num_sources);
    sec.get("valid_targets_per_source", c.synth.valid_targets_per_source);
    sec.get("source_len", c.synth.source_len);
    sec.get("target_len", c.synth.target_len);
    sec.get("num_concepts", c.synth.num_concepts);
    sec.get("num_particles", c.synth.num_particles);
    sec.get("train_fraction", c.synth.train_fraction);
    sec.get("valid_fraction", c.synth.valid_fraction);
    sec.get("test_fraction", c.synth.test_fraction);
    sec.get("loose_slot_keeps_canonical", c.synth.loose_slot_keeps_canonical);
  }
  if (auto* s = top.sub("model")) {
    Section sec(*s, "model.");
    sec.get("embed_dim", c.embed_dim);
    sec.get("hidden_dim", c.hidden_dim);
  }
  if (auto* s = top.sub("train")) {
    Section sec(*s, "train.");
    sec.get("epochs", c.train.epochs);
    sec.get("batch_size", c.train.batch_size);
    sec.get("lr", c.train.schedule.peak_lr);
    sec.get("warmup_steps", c.train.schedule.warmup_steps);
    sec.get("warmup_init_lr", c.train.schedule.warmup_init_lr);
    sec.get("min_lr", c.train.schedule.min_lr);
    sec.get("adam_beta1", c.train.adam.beta1);
    sec.get("adam_beta2", c.train.adam.beta2);
    sec.get("adam_eps", c.train.adam.eps);
    sec.get("clip_norm", c.train.adam.clip_norm);
  }
  if (auto* s = top.sub("distill")) {
    Section sec(*s, "distill.");
    sec.get("k", c.distill.k);
    sec.get("tau", c.distill.tau);
    sec.get("alpha", c.distill.alpha);
    std::string init = c.finetune ? "finetune" : "scratch";
    sec.get("init", init);
    if (init != "scratch" && init != "finetune") throw UsageError("distill.init must be scratch or finetune");
    c.finetune = init == "finetune";
  }
  if (auto* s = top.sub("search")) {
    Section sec(*s, "search.");
    sec.get("k", c.search.k);
    std::string metric = metric_name(c.search.metric), index = "exact";
    sec.get("metric", metric);
    c.search.metric = parse_metric(metric);
    sec.get("index", index);
    knn::IvfParams ivf;
    sec.get("ivf_clusters", ivf.num_clusters);
    sec.get("ivf_probes", ivf.num_probes);
    sec.get("ivf_iterations", ivf.train_iterations);
    if (index == "ivf") {
      c.search.ivf = ivf;
    } else if (index != "exact") {
      throw UsageError("search.index must be exact or ivf");
    }
  }
  if (auto* s = top.sub("decode")) {
    Section sec(*s, "decode.");
    sec.get("beam", c.beam);
    sec.get("max_len_a", c.max_len_a);
    sec.get("max_len_b", c.max_len_b);
    sec.get("lambda", c.knnmt.lambda);
    sec.get("k", c.knnmt.k);
    sec.get("tau", c.knnmt.tau);
    std::string metric = metric_name(c.knnmt.metric);
    sec.get("metric", metric);
    c.knnmt.metric = parse_metric(metric);
  }
  if (auto* s = top.sub("bench")) {
    Section sec(*s, "bench.");
    sec.get("repetitions", c.bench_repetitions);
    sec.get("train_updates", c.bench_train_updates);
  }
  if (auto* s = top.sub("sweep")) {
    Section sec(*s, "sweep.");
    sec.get("k", c.sweep.ks);
    sec.get("fixed_tau", c.sweep.fixed_tau);
    sec.get("tau", c.sweep.taus);
    sec.get("fixed_k", c.sweep.fixed_k);
    sec.get("split", c.sweep.split);
  }
  return c;
}

void Config::validate() const {
  try {
    synth.validate();
    distill.validate();
    search.validate();
    knnmt.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (threads < 1) throw UsageError("threads must be >= 1");
  if (embed_dim < 1 || hidden_dim < 1) throw UsageError("model dimensions must be positive");
  if (train.batch_size < 1) throw UsageError("train.batch_size must be >= 1");
  if (!(train.schedule.peak_lr >= 0.0)) throw UsageError("train.lr must be >= 0");
  if (!(train.adam.clip_norm >= 0.0)) throw UsageError("train.clip_norm must be >= 0");
  if (beam < 1) throw UsageError("decode.beam must be >= 1");
  if (!(max_len_a >= 0.0) || (max_len_a == 0.0 && max_len_b == 0)) throw UsageError("max length must be positive");
  if (bench_repetitions < 1 || bench_train_updates < 1) throw UsageError("bench counts must be >= 1");
  if (sweep.ks.empty()) throw UsageError("sweep.k must not be empty");
  for (auto k : sweep.ks) {
    if (k < 1) throw UsageError("sweep.k entries must be >= 1");
  }
  for (auto t : sweep.taus) {
    if (!(t > 0.0)) throw UsageError("sweep.tau entries must be > 0");
  }
  if (!(sweep.fixed_tau > 0.0) || sweep.fixed_k < 1) throw UsageError("sweep fixed point must be positive");
  if (sweep.split != "train" && sweep.split != "valid" && sweep.split != "test") {
    throw UsageError("sweep.split must be train, valid or test");
  }
}

std::size_t Config::max_len(std::size_t source_length) const {
  return static_cast<std::size_t>(std::ceil(max_len_a * static_cast<double>(source_length))) + max_len_b;
}

namespace {

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

}  // namespace

Config resolve_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                      std::optional<std::uint64_t> seed, std::optional<std::size_t> threads) {
  json tree = Config().to_json();
  if (file) {
    if (!fs::exists(*file)) throw MissingArtifact("config file not found: " + file->string());
    json loaded;
    try {
      loaded = json::parse(io::read_text(*file));
    } catch (const json::parse_error& e) {
      throw UsageError("config file " + file->string() + " is not valid JSON: " + e.what());
    }
    Config::from_json(loaded);  // reject unknown keys early with the file's own paths
    tree.merge_patch(loaded);
  }
  for (const auto& item : overrides) {
    auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("override must look like key.path=value: " + item);
    std::string key = item.substr(0, eq);
    std::string pointer = "/" + key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    json::json_pointer ptr(pointer);
    if (!tree.contains(ptr)) throw UsageError("unknown config key '" + key + "'");
    tree[ptr] = parse_override_value(item.substr(eq + 1));
  }
  if (seed) tree["seed"] = *seed;
  if (threads) tree["threads"] = *threads;
  Config c = Config::from_json(tree);
  c.synth.seed = c.seed;
  c.train.shuffle_seed = c.seed;
  if (c.search.ivf) c.search.ivf->seed = c.seed;
  c.validate();
  return c;
}

fs::path default_out_dir(const std::optional<fs::path>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("KNNKD_OUT"); env && *env) return env;
  return "run";
}

fs::path Layout::manifest(const std::string& stage, const std::string& name) const {
  return root / "manifests" / (name.empty() ? stage + ".json" : stage + "." + name + ".json");
}

// ---------------------------------------------------------------------------
// manifest

namespace {

std::string now_utc() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

class ManifestBuilder {
 public:
  ManifestBuilder(const StageArgs& args, std::string stage, std::string name) : layout_(args.layout) {
    m_.stage = std::move(stage);
    m_.name = std::move(name);
    m_.config = args.config.to_json();
    m_.started = now_utc();
  }

  void input(const fs::path& p) { m_.inputs[key(p)] = io::git_blob_hash_file(p); }
  void output(const fs::path& p) { m_.outputs[key(p)] = io::git_blob_hash_file(p); }
  json& extra() { return m_.extra; }

  RunManifest finish() {
    m_.finished = now_utc();
    io::write_text(layout_.manifest(m_.stage, m_.name), m_.to_json().dump(2) + "\n");
    return m_;
  }

 private:
  std::string key(const fs::path& p) const {
    auto rel = fs::relative(fs::absolute(p), fs::absolute(layout_.root));
    const auto s = rel.generic_string();
    return s.rfind("..", 0) == 0 ? fs::absolute(p).generic_string() : s;
  }

  const Layout& layout_;
  RunManifest m_;
};

}  // namespace

json RunManifest::to_json() const {
  return {{"schema", "knnkd.manifest/1"}, {"stage", stage},   {"name", name},
          {"config", config},             {"inputs", inputs}, {"outputs", outputs},
          {"started", started},           {"finished", finished}, {"extra", extra}};
}

RunManifest RunManifest::from_json(const json& j) {
  if (j.value("schema", "") != "knnkd.manifest/1") throw io::IncompatibleArtifact("not a knnkd manifest");
  RunManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.name = j.at("name").get<std::string>();
  m.config = j.at("config");
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  m.extra = j.value("extra", json::object());
  return m;
}

// ---------------------------------------------------------------------------
// data

const corpus::ParallelCorpus& Data::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw UsageError("unknown split '" + name + "'");
}

const std::vector<corpus::OracleRecord>& Data::oracle(const std::string& name) const {
  if (name == "valid") return valid_oracle;
  if (name == "test") return test_oracle;
  throw UsageError("no oracle sidecar for split '" + name + "'");
}

Data encode_synth(const corpus::SynthCorpus& s) {
  Data d;
  d.src_vocab = s.src_vocab;
  d.tgt_vocab = s.tgt_vocab;
  d.train = corpus::encode_corpus(s.train.source, s.train.target, s.src_vocab, s.tgt_vocab);
  d.valid = corpus::encode_corpus(s.valid.source, s.valid.target, s.src_vocab, s.tgt_vocab);
  d.test = corpus::encode_corpus(s.test.source, s.test.target, s.src_vocab, s.tgt_vocab);
  d.valid_oracle = s.valid_oracle;
  d.test_oracle = s.test_oracle;
  return d;
}

namespace {

void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifact(what + " not found: " + p.string());
}

}  // namespace

Data load_data(const Layout& layout) {
  require(layout.src_vocab(), "source vocabulary (run gen-synth first)");
  require(layout.tgt_vocab(), "target vocabulary (run gen-synth first)");
  Data d;
  d.src_vocab = corpus::load_vocab(layout.src_vocab());
  d.tgt_vocab = corpus::load_vocab(layout.tgt_vocab());
  for (const char* split : {"train", "valid", "test"}) {
    require(layout.split_src(split), std::string(split) + " source");
    require(layout.split_tgt(split), std::string(split) + " target");
  }
  d.train = corpus::load_corpus(layout.split_src("train"), layout.split_tgt("train"), d.src_vocab, d.tgt_vocab);
  d.valid = corpus::load_corpus(layout.split_src("valid"), layout.split_tgt("valid"), d.src_vocab, d.tgt_vocab);
  d.test = corpus::load_corpus(layout.split_src("test"), layout.split_tgt("test"), d.src_vocab, d.tgt_vocab);
  require(layout.oracle("valid"), "valid oracle sidecar");
  require(layout.oracle("test"), "test oracle sidecar");
  d.valid_oracle = corpus::load_oracle(layout.oracle("valid"));
  d.test_oracle = corpus::load_oracle(layout.oracle("test"));
  return d;
}

nmt::ModelConfig model_config(const Config& config, const Data& data) {
  nmt::ModelConfig mc;
  mc.embed_dim = config.embed_dim;
  mc.hidden_dim = config.hidden_dim;
  mc.src_vocab_size = static_cast<std::uint32_t>(data.src_vocab.size());
  mc.tgt_vocab_size = static_cast<std::uint32_t>(data.tgt_vocab.size());
  mc.seed = config.seed;
  return mc;
}

nmt::TrainConfig train_config(const Config& config) {
  nmt::TrainConfig tc = config.train;
  tc.shuffle_seed = config.seed;
  return tc;
}

TrainMode parse_train_mode(const std::string& mode) {
  if (mode == "ce") return TrainMode::ce;
  if (mode == "knn-kd") return TrainMode::knn_kd;
  throw UsageError("--mode must be ce or knn-kd");
}

nmt::Model train_model(const Config& config, const Data& data, TrainMode mode,
                       const knn::NeighborFile* neighbors, const nmt::Model* init, nmt::TrainLog* log) {
  const auto mc = model_config(config, data);
  nmt::Model model = init ? *init : nmt::Model::random_init(mc);
  if (init && !(init->config().src_vocab_size == mc.src_vocab_size &&
                init->config().tgt_vocab_size == mc.tgt_vocab_size)) {
    throw io::IncompatibleArtifact("initial checkpoint vocabulary does not match the data");
  }
  nmt::PositionLoss loss;
  if (mode == TrainMode::ce) {
    loss = nmt::ce_position_loss();
  } else {
    if (!neighbors) throw UsageError("knn-kd training requires a neighbor file");
    loss = distill::knn_kd_position_loss(*neighbors, data.train, config.distill);
  }
  auto result = nmt::train(model, data.train, loss, train_config(config));
  if (log) *log = std::move(result);
  return model;
}

std::vector<corpus::Sequence> decode_corpus(const Config& config, const nmt::Model& model,
                                            const corpus::ParallelCorpus& corpus, const knn::Index* index) {
  std::vector<corpus::Sequence> out;
  out.reserve(corpus.pairs.size());
  const corpus::Sequence* last = nullptr;
  for (const auto& pair : corpus.pairs) {
    if (last && *last == pair.source) {
      out.push_back(out.back());
      continue;
    }
    const auto max_len = config.max_len(pair.source.size());
    if (index) {
      out.push_back(knnmt::knnmt_decode(model, *index, pair.source, config.beam, config.knnmt, max_len)
                        .hypothesis.tokens);
    } else {
      out.push_back(nmt::decode(model, pair.source, config.beam, max_len).tokens);
    }
    last = &pair.source;
  }
  return out;
}

std::vector<corpus::Sequence> references(const corpus::ParallelCorpus& corpus) {
  std::vector<corpus::Sequence> out;
  out.reserve(corpus.pairs.size());
  for (const auto& p : corpus.pairs) out.emplace_back(p.target.begin(), p.target.end() - 1);
  return out;
}

// ---------------------------------------------------------------------------
// sweep

std::vector<std::pair<std::size_t, double>> sweep_points(const SweepGrid& grid) {
  std::vector<std::pair<std::size_t, double>> out;
  auto add = [&](std::size_t k, double tau) {
    if (std::find(out.begin(), out.end(), std::make_pair(k, tau)) == out.end()) out.emplace_back(k, tau);
  };
  for (auto k : grid.ks) add(k, grid.fixed_tau);
  for (auto tau : grid.taus) add(grid.fixed_k, tau);
  return out;
}

std::vector<SweepRow> run_sweep(const Config& config, const Data& data, const knn::NeighborFile& neighbors,
                                const nmt::Model* init) {
  const auto points = sweep_points(config.sweep);
  std::size_t max_k = 0;
  for (auto [k, tau] : points) max_k = std::max(max_k, k);
  if (neighbors.k() < max_k) {
    throw io::IncompatibleArtifact("neighbor file stores " + std::to_string(neighbors.k()) +
                                   " neighbors but the sweep needs " + std::to_string(max_k));
  }
  const auto& split = data.split(config.sweep.split);
  const auto refs = references(split);
  std::vector<SweepRow> rows;
  for (auto [k, tau] : points) {
    Config c = config;
    c.distill.k = k;
    c.distill.tau = tau;
    auto model = train_model(c, data, TrainMode::knn_kd, &neighbors, init);
    auto hyps = decode_corpus(c, model, split);
    rows.push_back({k, tau, eval::bleu(hyps, refs).bleu});
  }
  return rows;
}

SweepShape sweep_shape(const std::vector<SweepRow>& rows, const SweepGrid& grid) {
  SweepShape s;
  std::vector<const SweepRow*> curve;
  for (auto k : grid.ks) {
    for (const auto& r : rows) {
      if (r.k == k && r.tau == grid.fixed_tau) {
        curve.push_back(&r);
        break;
      }
    }
  }
  if (curve.size() != grid.ks.size()) throw std::invalid_argument("sweep rows do not cover the k grid");
  double best = -1.0;
  for (const auto* r : curve) {
    if (r->bleu > best) {
      best = r->bleu;
      s.best_k = r->k;
    }
  }
  const auto [kmin, kmax] = std::minmax_element(grid.ks.begin(), grid.ks.end());
  s.interior = s.best_k != *kmin && s.best_k != *kmax;

  std::vector<const SweepRow*> taus;
  for (auto tau : grid.taus) {
    for (const auto& r : rows) {
      if (r.k == grid.fixed_k && r.tau == tau) {
        taus.push_back(&r);
        break;
      }
    }
  }
  if (taus.size() != grid.taus.size()) throw std::invalid_argument("sweep rows do not cover the tau grid");
  if (taus.size() >= 2) {
    auto tiny = std::min_element(taus.begin(), taus.end(), [](auto* a, auto* b) { return a->tau < b->tau; });
    s.tiny_tau_strictly_worst = std::all_of(taus.begin(), taus.end(), [&](auto* r) {
      return r == *tiny || (*tiny)->bleu < r->bleu;
    });
  }
  s.pass = s.interior || s.tiny_tau_strictly_worst;
  return s;
}

std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "k\ttau\tbleu\n";
  for (const auto& r : rows) {
    out << r.k << '\t' << r.tau << '\t' << std::fixed << std::setprecision(2) << r.bleu << '\n';
    out.unsetf(std::ios::fixed);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// stages

namespace {

std::vector<std::string> decode_lines(const std::vector<corpus::Sequence>& seqs, const corpus::Vocabulary& v) {
  std::vector<std::string> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(corpus::decode(s, v));
  return out;
}

nmt::Model load_model(const fs::path& path) {
  require(path, "checkpoint");
  return nmt::Model::load(path);
}

void check_model_matches_data(const nmt::Model& model, const Data& data) {
  if (model.config().src_vocab_size != data.src_vocab.size() ||
      model.config().tgt_vocab_size != data.tgt_vocab.size()) {
    throw io::IncompatibleArtifact("checkpoint vocabulary sizes do not match the data vocabularies");
  }
}

std::string model_name(const StageArgs& args, const std::string& fallback) {
  return args.name.empty() ? fallback : args.name;
}

}  // namespace

RunManifest cmd_gen_synth(const StageArgs& args) {
  ManifestBuilder mb(args, "gen-synth", "");
  const auto& L = args.layout;
  auto synth = corpus::gen_synth(args.config.synth);
  auto write_split = [&](const char* name, const corpus::TextSplit& s) {
    io::write_lines(L.split_src(name), s.source);
    io::write_lines(L.split_tgt(name), s.target);
    mb.output(L.split_src(name));
    mb.output(L.split_tgt(name));
  };
  write_split("train", synth.train);
  write_split("valid", synth.valid);
  write_split("test", synth.test);
  corpus::save_vocab(L.src_vocab(), synth.src_vocab);
  corpus::save_vocab(L.tgt_vocab(), synth.tgt_vocab);
  corpus::save_oracle(L.oracle("valid"), synth.valid_oracle);
  corpus::save_oracle(L.oracle("test"), synth.test_oracle);
  for (auto p : {L.src_vocab(), L.tgt_vocab(), L.oracle("valid"), L.oracle("test")}) mb.output(p);
  mb.extra()["train_pairs"] = synth.train.source.size();
  mb.extra()["valid_pairs"] = synth.valid.source.size();
  mb.extra()["test_pairs"] = synth.test.source.size();
  return mb.finish();
}

namespace {

void add_data_inputs(ManifestBuilder& mb, const Layout& L, bool with_eval_splits) {
  mb.input(L.src_vocab());
  mb.input(L.tgt_vocab());
  mb.input(L.split_src("train"));
  mb.input(L.split_tgt("train"));
  if (with_eval_splits) {
    for (const char* s : {"valid", "test"}) {
      mb.input(L.split_src(s));
      mb.input(L.split_tgt(s));
      mb.input(L.oracle(s));
    }
  }
}

}  // namespace

RunManifest cmd_train(const StageArgs& args) {
  const auto mode = parse_train_mode(args.mode.empty() ? "ce" : args.mode);
  const std::string name = model_name(args, mode == TrainMode::ce ? "ce" : "knn-kd");
  ManifestBuilder mb(args, "train", name);
  const auto& L = args.layout;
  if (mode == TrainMode::ce && args.neighbors) throw UsageError("--neighbors only applies to --mode knn-kd");
  const Data data = load_data(L);
  add_data_inputs(mb, L, false);

  std::optional<knn::NeighborFile> neighbors;
  if (mode == TrainMode::knn_kd) {
    const fs::path nf_path = args.neighbors.value_or(L.neighbors());
    require(nf_path, "neighbor file (run knn-search first)");
    neighbors.emplace(knn::NeighborFile::load(nf_path));
    mb.input(nf_path);
  }
  std::optional<nmt::Model> init;
  if (args.checkpoint || (mode == TrainMode::knn_kd && args.config.finetune)) {
    const fs::path init_path = args.checkpoint.value_or(L.checkpoint("ce"));
    init.emplace(load_model(init_path));
    check_model_matches_data(*init, data);
    mb.input(init_path);
  }

  nmt::TrainLog log;
  auto model = train_model(args.config, data, mode, neighbors ? &*neighbors : nullptr, init ? &*init : nullptr, &log);
  model.save(L.checkpoint(name));
  json jl = {{"epoch_losses", log.epoch_losses},
             {"updates", log.updates},
             {"clamped", log.clamped},
             {"seconds", log.seconds},
             {"updates_per_second", log.updates_per_second()}};
  io::write_text(L.train_log(name), jl.dump(2) + "\n");
  mb.output(L.checkpoint(name));
  mb.extra()["mode"] = mode == TrainMode::ce ? "ce" : "knn-kd";
  mb.extra()["updates"] = log.updates;
  mb.extra()["final_epoch_loss"] = log.epoch_losses.empty() ? 0.0 : log.epoch_losses.back();
  mb.extra()["clamped"] = log.clamped;
  mb.extra()["fingerprint"] = model.fingerprint();
  return mb.finish();
}

RunManifest cmd_build_datastore(const StageArgs& args) {
  ManifestBuilder mb(args, "build-datastore", "");
  const auto& L = args.layout;
  const Data data = load_data(L);
  add_data_inputs(mb, L, false);
  const fs::path ckpt = args.checkpoint.value_or(L.checkpoint("ce"));
  auto model = load_model(ckpt);
  check_model_matches_data(model, data);
  mb.input(ckpt);
  auto ds = store::build_datastore(model, data.train, args.config.threads);
  const fs::path out = args.datastore.value_or(L.datastore());
  ds.save(out);
  mb.output(out);
  mb.extra()["entries"] = ds.count();
  mb.extra()["dim"] = ds.dim();
  mb.extra()["model_fingerprint"] = ds.fingerprint();
  return mb.finish();
}

RunManifest cmd_knn_search(const StageArgs& args) {
  ManifestBuilder mb(args, "knn-search", "");
  const auto& L = args.layout;
  const Data data = load_data(L);
  add_data_inputs(mb, L, false);
  const fs::path ds_path = args.datastore.value_or(L.datastore());
  require(ds_path, "datastore (run build-datastore first)");
  auto ds = store::Datastore::load(ds_path);
  mb.input(ds_path);
  const fs::path ckpt = args.checkpoint.value_or(L.checkpoint("ce"));
  auto model = load_model(ckpt);
  mb.input(ckpt);
  auto nf = knn::batch_search_training_set(ds, model, data.train, args.config.search, args.config.threads);
  const fs::path out = args.neighbors.value_or(L.neighbors());
  nf.save(out);
  mb.output(out);
  mb.extra()["records"] = nf.count();
  mb.extra()["k"] = nf.k();
  return mb.finish();
}

RunManifest cmd_decode(const StageArgs& args) {
  const std::string mode = args.mode.empty() ? "base" : args.mode;
  if (mode != "base" && mode != "knn-mt") throw UsageError("--mode must be base or knn-mt");
  if (mode == "base" && args.datastore) throw UsageError("--datastore only applies to --mode knn-mt");
  if (mode == "knn-mt" && !args.datastore) throw UsageError("--mode knn-mt requires --datastore");
  const auto& L = args.layout;
  const fs::path ckpt = args.checkpoint.value_or(L.checkpoint("ce"));
  const std::string name = model_name(args, ckpt.stem().string() + (mode == "knn-mt" ? "+knn-mt" : ""));
  ManifestBuilder mb(args, "decode", name + "." + args.split);
  const Data data = load_data(L);
  const auto& split = data.split(args.split);
  mb.input(L.split_src(args.split));
  auto model = load_model(ckpt);
  check_model_matches_data(model, data);
  mb.input(ckpt);

  std::optional<store::Datastore> ds;
  std::unique_ptr<knn::Index> index;
  if (mode == "knn-mt") {
    require(*args.datastore, "datastore");
    ds.emplace(store::Datastore::load(*args.datastore));
    mb.input(*args.datastore);
    if (ds->fingerprint() != model.fingerprint()) {
      throw io::IncompatibleArtifact("datastore was built by a different checkpoint than the decoding model");
    }
    knn::SearchConfig sc = args.config.search;
    sc.k = args.config.knnmt.k;
    sc.metric = args.config.knnmt.metric;
    index = knn::make_index(*ds, sc);
  }
  auto hyps = decode_corpus(args.config, model, split, index.get());
  const fs::path out = args.hypotheses.value_or(L.hypotheses(name, args.split));
  io::write_lines(out, decode_lines(hyps, data.tgt_vocab));
  mb.output(out);
  mb.extra()["mode"] = mode;
  mb.extra()["sentences"] = hyps.size();
  return mb.finish();
}

RunManifest cmd_evaluate(const StageArgs& args) {
  const auto& L = args.layout;
  if (!args.hypotheses && !args.checkpoint) throw UsageError("evaluate needs --hyp and/or --checkpoint");
  const std::string name = args.name.empty()
                               ? (args.hypotheses ? args.hypotheses->stem().string() : args.checkpoint->stem().string())
                               : args.name;
  ManifestBuilder mb(args, "evaluate", name);
  const Data data = load_data(L);
  const auto& split = data.split(args.split);
  mb.input(L.split_tgt(args.split));
  json report = {{"schema", "knnkd.evaluation/1"}, {"split", args.split}};
  std::ostringstream text;
  text << "split=" << args.split << '\n';
  if (args.hypotheses) {
    require(*args.hypotheses, "hypothesis file");
    mb.input(*args.hypotheses);
    auto hyp_lines = io::read_lines(*args.hypotheses);
    std::vector<std::string> ref_lines = io::read_lines(L.split_tgt(args.split));
    if (hyp_lines.size() != ref_lines.size()) {
      throw io::IncompatibleArtifact("hypothesis file has " + std::to_string(hyp_lines.size()) + " lines, split has " +
                                     std::to_string(ref_lines.size()));
    }
    auto b = eval::bleu_text(hyp_lines, ref_lines);
    report["bleu"] = json::parse(eval::to_json(b));
    text << eval::to_text(b);
  }
  if (args.checkpoint) {
    auto model = load_model(*args.checkpoint);
    check_model_matches_data(model, data);
    mb.input(*args.checkpoint);
    mb.input(L.oracle(args.split));
    auto oc = eval::overcorrection_probe(model, split, data.oracle(args.split));
    report["overcorrection"] = json::parse(eval::to_json(oc));
    text << eval::to_text(oc);
  }
  io::write_text(L.report(name, "json"), report.dump(2) + "\n");
  io::write_text(L.report(name, "txt"), text.str());
  mb.output(L.report(name, "json"));
  mb.output(L.report(name, "txt"));
  mb.extra()["report"] = report;
  return mb.finish();
}

RunManifest cmd_bench(const StageArgs& args) {
  ManifestBuilder mb(args, "bench", "");
  const auto& L = args.layout;
  const Config& cfg = args.config;
  const Data data = load_data(L);
  add_data_inputs(mb, L, true);
  const fs::path ce_path = L.checkpoint("ce"), kd_path = L.checkpoint("knn-kd");
  const fs::path ds_path = args.datastore.value_or(L.datastore());
  const fs::path nf_path = args.neighbors.value_or(L.neighbors());
  auto ce = load_model(ce_path);
  auto kd = load_model(kd_path);
  require(ds_path, "datastore");
  require(nf_path, "neighbor file");
  auto ds = store::Datastore::load(ds_path);
  auto nf = knn::NeighborFile::load(nf_path);
  for (const auto& p : {ce_path, kd_path, ds_path, nf_path}) mb.input(p);
  if (ds.fingerprint() != ce.fingerprint()) {
    throw io::IncompatibleArtifact("datastore was not built by models/ce.ckpt");
  }
  knn::SearchConfig sc = cfg.search;
  sc.k = cfg.knnmt.k;
  sc.metric = cfg.knnmt.metric;
  auto index = knn::make_index(ds, sc);

  std::vector<corpus::Sequence> sources;
  for (const auto& p : data.test.pairs) {
    if (sources.empty() || sources.back() != p.source) sources.push_back(p.source);
  }
  const auto session = eval::current_session(cfg.threads);
  auto base_fn = [&](const nmt::Model& m) {
    return [&cfg, &m](const corpus::Sequence& s) {
      return nmt::decode(m, s, cfg.beam, cfg.max_len(s.size())).generated_length();
    };
  };
  auto decoders = eval::bench_decode_interleaved(
      {{"ce", base_fn(ce)},
       {"knn-kd", base_fn(kd)},
       {"knn-mt", [&](const corpus::Sequence& s) {
          return knnmt::knnmt_decode(ce, *index, s, cfg.beam, cfg.knnmt, cfg.max_len(s.size()))
              .hypothesis.generated_length();
        }}},
      sources, cfg.bench_repetitions, session);

  // training speed on the same batch sequence for both objectives
  auto kd_loss = distill::knn_kd_position_loss(nf, data.train, cfg.distill);
  auto ce_loss = nmt::ce_position_loss();
  const auto mc = model_config(cfg, data);
  nmt::Model ce_m = nmt::Model::random_init(mc), kd_m = ce_m;
  nmt::OptimizerState ce_opt, kd_opt;
  std::vector<std::size_t> order(data.train.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  knnkd::Rng rng(cfg.seed);
  rng.shuffle(order);
  std::size_t ce_cursor = 0, kd_cursor = 0;
  auto next_batch = [&](std::size_t& cursor) {
    const std::size_t bs = std::min(cfg.train.batch_size, order.size());
    if (cursor + bs > order.size()) cursor = 0;
    std::span<const std::size_t> b(order.data() + cursor, bs);
    cursor += bs;
    return b;
  };
  auto trainers = eval::bench_updates_interleaved(
      {{"ce-train",
        [&] { nmt::train_step(ce_m, data.train, next_batch(ce_cursor), ce_loss, ce_opt, cfg.train.adam, cfg.train.schedule); }},
       {"knn-kd-train",
        [&] { nmt::train_step(kd_m, data.train, next_batch(kd_cursor), kd_loss, kd_opt, cfg.train.adam, cfg.train.schedule); }}},
      cfg.bench_train_updates, cfg.bench_repetitions, session);

  eval::BenchRegistry registry;
  registry.add_baseline(decoders[0]);
  registry.add_baseline(trainers[0]);
  registry.relate(decoders[1], "ce");
  registry.relate(decoders[2], "ce");
  registry.relate(trainers[1], "ce-train");
  decoders[0].ratio = 1.0;
  decoders[0].baseline = "ce";
  trainers[0].ratio = 1.0;
  trainers[0].baseline = "ce-train";

  json all = json::array();
  std::string text;
  for (const auto* group : {&decoders, &trainers}) {
    for (const auto& r : *group) {
      all.push_back(json::parse(eval::to_json(r)));
      text += eval::to_text(r) + "\n";
    }
  }
  json report = {{"schema", "knnkd.bench/1"}, {"datastore_entries", ds.count()}, {"runs", all}};
  io::write_text(L.bench_report("json"), report.dump(2) + "\n");
  io::write_text(L.bench_report("txt"), text);
  mb.output(L.bench_report("json"));
  mb.output(L.bench_report("txt"));
  mb.extra()["report"] = report;
  return mb.finish();
}

RunManifest cmd_sweep(const StageArgs& args) {
  ManifestBuilder mb(args, "sweep", "");
  const auto& L = args.layout;
  const Data data = load_data(L);
  add_data_inputs(mb, L, true);
  const fs::path nf_path = args.neighbors.value_or(L.neighbors());
  require(nf_path, "neighbor file (run knn-search first)");
  auto nf = knn::NeighborFile::load(nf_path);
  mb.input(nf_path);
  std::optional<nmt::Model> init;
  if (args.config.finetune) {
    const fs::path init_path = args.checkpoint.value_or(L.checkpoint("ce"));
    init.emplace(load_model(init_path));
    mb.input(init_path);
  }
  auto rows = run_sweep(args.config, data, nf, init ? &*init : nullptr);
  io::write_text(L.sweep_table(), format_sweep_table(rows));
  mb.output(L.sweep_table());
  auto shape = sweep_shape(rows, args.config.sweep);
  json jrows = json::array();
  for (const auto& r : rows) jrows.push_back({{"k", r.k}, {"tau", r.tau}, {"bleu", r.bleu}});
  mb.extra()["rows"] = jrows;
  mb.extra()["best_k"] = shape.best_k;
  mb.extra()["best_k_interior"] = shape.interior;
  mb.extra()["tiny_tau_strictly_worst"] = shape.tiny_tau_strictly_worst;
  return mb.finish();
}

}  // namespace knnkd::pipeline
