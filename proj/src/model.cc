// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include "knnkd/model.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "knnkd/io.h"
#include "knnkd/random.h"

namespace knnkd::nmt {

void ModelConfig::validate() const {
  if (embed_dim == 0 || hidden_dim == 0) throw std::invalid_argument("model dimensions must be positive");
  if (src_vocab_size == 0 || tgt_vocab_size == 0) {
    throw std::invalid_argument("vocabulary sizes must be positive");
  }
}

ParamLayout::ParamLayout(const ModelConfig& c) {
  const std::size_t e = c.embed_dim, h = c.hidden_dim;
  const std::array<std::pair<std::size_t, std::size_t>, kNumGroups> shapes = {{
      {c.src_vocab_size, e},
      {c.tgt_vocab_size, e},
      {h, e},
      {h, h},
      {h, 1},
      {h, e},
      {h, h},
      {h, 1},
      {h, 2 * h},
      {h, 1},
      {c.tgt_vocab_size, h},
  }};
  std::size_t at = 0;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    offset_[g] = at;
    rows_[g] = shapes[g].first;
    cols_[g] = shapes[g].second;
    at += rows_[g] * cols_[g];
  }
  offset_[kNumGroups] = at;
}

const char* ParamLayout::name(Group g) {
  static constexpr const char* kNames[kNumGroups] = {
      "src_embed", "tgt_embed", "enc_input", "enc_recurrent", "enc_bias",    "dec_input",
      "dec_recurrent", "dec_bias", "combine",  "combine_bias", "output"};
  return kNames[g];
}

Model::Model(const ModelConfig& config) : config_(config), layout_(config) {
  config_.validate();
  params_.assign(layout_.total(), 0.0);
}

Model Model::random_init(const ModelConfig& config) {
  Model m(config);
  Rng rng(config.seed);
  for (double& p : m.params_) p = rng.uniform(-0.08, 0.08);
  return m;
}

namespace {
constexpr char kMagic[4] = {'K', 'N', 'K', 'D'};
constexpr std::size_t kHeaderBytes = 40;
}  // namespace

std::vector<std::byte> Model::serialize() const {
  io::BinaryWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(config_.embed_dim);
  w.put<std::uint32_t>(config_.hidden_dim);
  w.put<std::uint32_t>(config_.src_vocab_size);
  w.put<std::uint32_t>(config_.tgt_vocab_size);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config_.seed & 0xffffffffu));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(config_.seed >> 32));
  w.put<std::uint64_t>(params_.size());
  w.put_array<double>(params_);
  return w.release();
}

Model Model::deserialize(std::span<const std::byte> bytes) {
  using io::FormatError;
  io::ByteReader r(bytes);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>());
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw FormatError(FormatError::Kind::bad_magic, "not a model checkpoint");
  }
  auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      "checkpoint version " + std::to_string(version) + " unsupported");
  }
  ModelConfig c;
  c.embed_dim = r.get<std::uint32_t>();
  c.hidden_dim = r.get<std::uint32_t>();
  c.src_vocab_size = r.get<std::uint32_t>();
  c.tgt_vocab_size = r.get<std::uint32_t>();
  std::uint64_t lo = r.get<std::uint32_t>();
  std::uint64_t hi = r.get<std::uint32_t>();
  c.seed = lo | (hi << 32);
  auto count = r.get<std::uint64_t>();
  Model m(c);
  if (count != m.num_params()) {
    throw FormatError(FormatError::Kind::inconsistent, "parameter count does not match config");
  }
  if (bytes.size() < kHeaderBytes + count * sizeof(double)) {
    throw FormatError(FormatError::Kind::truncated, "truncated file");
  }
  if (bytes.size() > kHeaderBytes + count * sizeof(double)) {
    throw FormatError(FormatError::Kind::inconsistent, "trailing bytes after parameters");
  }
  std::memcpy(m.params_.data(), bytes.data() + kHeaderBytes, count * sizeof(double));
  return m;
}

void Model::save(const std::filesystem::path& path) const { io::write_file(path, serialize()); }

Model Model::load(const std::filesystem::path& path) {
  io::MappedFile f(path);
  return deserialize(f.bytes());
}

std::uint64_t Model::fingerprint() const { return io::fnv1a64(serialize()); }

namespace {

// y += W x, W is rows x cols row-major.
void matvec_add(std::span<const double> w, std::size_t rows, std::size_t cols,
                std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] += acc;
  }
}

// x += W^T y
void matvec_t_add(std::span<const double> w, std::size_t rows, std::size_t cols,
                  std::span<const double> y, std::span<double> x) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w.data() + r * cols;
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (std::size_t c = 0; c < cols; ++c) x[c] += wr[c] * yr;
  }
}

// dW += y x^T
void outer_add(std::span<double> dw, std::size_t rows, std::size_t cols, std::span<const double> y,
               std::span<const double> x) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    double* dr = dw.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dr[c] += yr * x[c];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

std::span<const double> embedding_row(const Model& m, ParamLayout::Group g, TokenId id) {
  const auto& L = m.layout();
  if (id >= L.rows(g)) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return m.group(g).subspan(static_cast<std::size_t>(id) * L.cols(g), L.cols(g));
}

}  // namespace

EncoderStates encode_source(const Model& model, std::span<const TokenId> source) {
  using L = ParamLayout;
  if (source.empty()) throw std::invalid_argument("empty source sentence");
  const std::size_t h = model.config().hidden_dim, e = model.config().embed_dim;
  EncoderStates out;
  out.length = source.size();
  out.dim = h;
  out.states.assign(source.size() * h, 0.0);
  auto w_in = model.group(L::kEncInput);
  auto w_rec = model.group(L::kEncRecurrent);
  auto bias = model.group(L::kEncBias);
  std::vector<double> pre(h);
  for (std::size_t t = 0; t < source.size(); ++t) {
    std::copy(bias.begin(), bias.end(), pre.begin());
    matvec_add(w_in, h, e, embedding_row(model, L::kSrcEmbed, source[t]), pre);
    if (t > 0) matvec_add(w_rec, h, h, out.row(t - 1), pre);
    double* dst = out.states.data() + t * h;
    for (std::size_t i = 0; i < h; ++i) dst[i] = std::tanh(pre[i]);
  }
  return out;
}

DecoderStep decoder_step(const Model& model, const EncoderStates& encoder,
                         std::span<const double> prev_state, TokenId prev_token) {
  using L = ParamLayout;
  const std::size_t h = model.config().hidden_dim, e = model.config().embed_dim;
  const std::size_t v = model.config().tgt_vocab_size;
  DecoderStep step;

  step.state = std::vector<double>(model.group(L::kDecBias).begin(), model.group(L::kDecBias).end());
  matvec_add(model.group(L::kDecInput), h, e, embedding_row(model, L::kTgtEmbed, prev_token), step.state);
  matvec_add(model.group(L::kDecRecurrent), h, h, prev_state, step.state);
  for (double& x : step.state) x = std::tanh(x);

  step.attention.resize(encoder.length);
  double max_score = -INFINITY;
  for (std::size_t t = 0; t < encoder.length; ++t) {
    step.attention[t] = dot(step.state, encoder.row(t));
    max_score = std::max(max_score, step.attention[t]);
  }
  double z = 0.0;
  for (double& a : step.attention) {
    a = std::exp(a - max_score);
    z += a;
  }
  for (double& a : step.attention) a /= z;
  step.context.assign(h, 0.0);
  for (std::size_t t = 0; t < encoder.length; ++t) {
    auto row = encoder.row(t);
    for (std::size_t i = 0; i < h; ++i) step.context[i] += step.attention[t] * row[i];
  }

  auto w_comb = model.group(L::kCombine);
  step.output_hidden =
      std::vector<double>(model.group(L::kCombineBias).begin(), model.group(L::kCombineBias).end());
  for (std::size_t r = 0; r < h; ++r) {
    const double* wr = w_comb.data() + r * 2 * h;
    double acc = 0.0;
    for (std::size_t c = 0; c < h; ++c) acc += wr[c] * step.state[c];
    for (std::size_t c = 0; c < h; ++c) acc += wr[h + c] * step.context[c];
    step.output_hidden[r] = std::tanh(step.output_hidden[r] + acc);
  }

  step.logits.assign(v, 0.0);
  matvec_add(model.group(L::kOutput), v, h, step.output_hidden, step.logits);
  return step;
}

ForwardResult forward(const Model& model, std::span<const TokenId> source,
                      std::span<const TokenId> prefix) {
  if (prefix.empty() || prefix.front() != corpus::kBos) {
    throw std::invalid_argument("prefix must start with BOS");
  }
  auto enc = encode_source(model, source);
  std::vector<double> state(enc.last().begin(), enc.last().end());
  DecoderStep step;
  for (TokenId tok : prefix) {
    step = decoder_step(model, enc, state, tok);
    state = step.state;
  }
  return {std::move(step.output_hidden), std::move(step.logits)};
}

TeacherForcedPass teacher_forced(const Model& model, std::span<const TokenId> source,
                                 std::span<const TokenId> target) {
  TeacherForcedPass pass;
  pass.encoder = encode_source(model, source);
  pass.inputs.reserve(target.size());
  pass.steps.reserve(target.size());
  std::vector<double> state(pass.encoder.last().begin(), pass.encoder.last().end());
  TokenId prev = corpus::kBos;
  for (TokenId tok : target) {
    pass.inputs.push_back(prev);
    pass.steps.push_back(decoder_step(model, pass.encoder, state, prev));
    state = pass.steps.back().state;
    prev = tok;
  }
  return pass;
}

void backward(const Model& model, std::span<const TokenId> source, const TeacherForcedPass& pass,
              std::span<const double> dlogits, std::span<double> grad) {
  using L = ParamLayout;
  const auto& layout = model.layout();
  const std::size_t h = model.config().hidden_dim, e = model.config().embed_dim;
  const std::size_t v = model.config().tgt_vocab_size;
  const std::size_t n = pass.steps.size(), m = pass.encoder.length;
  if (dlogits.size() != n * v) throw std::invalid_argument("dlogits shape mismatch");
  if (grad.size() != model.num_params()) throw std::invalid_argument("gradient size mismatch");

  auto g = [&](L::Group grp) { return grad.subspan(layout.offset(grp), layout.size(grp)); };
  auto w_out = model.group(L::kOutput);
  auto w_comb = model.group(L::kCombine);
  auto w_dec_in = model.group(L::kDecInput);
  auto w_dec_rec = model.group(L::kDecRecurrent);

  std::vector<double> d_enc(m * h, 0.0);  // dLoss/dh_t from attention and s_0
  std::vector<double> carry(h, 0.0);      // dLoss/ds_i flowing back from step i+1
  std::vector<double> dq(h), dpq(h), dsc(2 * h), dw(m), dpre(h);

  for (std::size_t i = n; i-- > 0;) {
    const DecoderStep& st = pass.steps[i];
    auto dz = dlogits.subspan(i * v, v);

    outer_add(g(L::kOutput), v, h, dz, st.output_hidden);
    std::fill(dq.begin(), dq.end(), 0.0);
    matvec_t_add(w_out, v, h, dz, dq);
    for (std::size_t r = 0; r < h; ++r) {
      const double q = st.output_hidden[r];
      dpq[r] = dq[r] * (1.0 - q * q);
    }

    auto d_comb = g(L::kCombine);
    auto d_comb_b = g(L::kCombineBias);
    std::fill(dsc.begin(), dsc.end(), 0.0);
    for (std::size_t r = 0; r < h; ++r) {
      const double d = dpq[r];
      d_comb_b[r] += d;
      if (d == 0.0) continue;
      double* dr = d_comb.data() + r * 2 * h;
      const double* wr = w_comb.data() + r * 2 * h;
      for (std::size_t c = 0; c < h; ++c) {
        dr[c] += d * st.state[c];
        dr[h + c] += d * st.context[c];
        dsc[c] += wr[c] * d;
        dsc[h + c] += wr[h + c] * d;
      }
    }
    std::span<const double> ds_direct(dsc.data(), h);
    std::span<const double> dc(dsc.data() + h, h);

    // context = sum_t w_t h_t, w = softmax(s . h_t)
    double weighted = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
      dw[t] = dot(dc, pass.encoder.row(t));
      weighted += st.attention[t] * dw[t];
    }
    for (std::size_t c = 0; c < h; ++c) dpre[c] = ds_direct[c] + carry[c];
    for (std::size_t t = 0; t < m; ++t) {
      const double wt = st.attention[t];
      const double da = wt * (dw[t] - weighted);
      auto ht = pass.encoder.row(t);
      double* dh = d_enc.data() + t * h;
      for (std::size_t c = 0; c < h; ++c) {
        dh[c] += wt * dc[c] + da * st.state[c];
        dpre[c] += da * ht[c];
      }
    }
    for (std::size_t c = 0; c < h; ++c) dpre[c] *= 1.0 - st.state[c] * st.state[c];

    std::span<const double> prev_state = i > 0 ? std::span<const double>(pass.steps[i - 1].state)
                                               : pass.encoder.last();
    const TokenId in = pass.inputs[i];
    outer_add(g(L::kDecInput), h, e, dpre, embedding_row(model, L::kTgtEmbed, in));
    outer_add(g(L::kDecRecurrent), h, h, dpre, prev_state);
    auto d_dec_b = g(L::kDecBias);
    for (std::size_t c = 0; c < h; ++c) d_dec_b[c] += dpre[c];
    matvec_t_add(w_dec_in, h, e, dpre, g(L::kTgtEmbed).subspan(static_cast<std::size_t>(in) * e, e));
    std::fill(carry.begin(), carry.end(), 0.0);
    matvec_t_add(w_dec_rec, h, h, dpre, carry);
  }
  // s_0 = h_m
  for (std::size_t c = 0; c < h; ++c) d_enc[(m - 1) * h + c] += carry[c];

  auto w_enc_in = model.group(L::kEncInput);
  auto w_enc_rec = model.group(L::kEncRecurrent);
  std::vector<double> ecarry(h, 0.0), epre(h);
  for (std::size_t t = m; t-- > 0;) {
    auto ht = pass.encoder.row(t);
    for (std::size_t c = 0; c < h; ++c) epre[c] = (d_enc[t * h + c] + ecarry[c]) * (1.0 - ht[c] * ht[c]);
    const TokenId x = source[t];
    outer_add(g(L::kEncInput), h, e, epre, embedding_row(model, L::kSrcEmbed, x));
    if (t > 0) outer_add(g(L::kEncRecurrent), h, h, epre, pass.encoder.row(t - 1));
    auto d_enc_b = g(L::kEncBias);
    for (std::size_t c = 0; c < h; ++c) d_enc_b[c] += epre[c];
    matvec_t_add(w_enc_in, h, e, epre, g(L::kSrcEmbed).subspan(static_cast<std::size_t>(x) * e, e));
    std::fill(ecarry.begin(), ecarry.end(), 0.0);
    if (t > 0) matvec_t_add(w_enc_rec, h, h, epre, ecarry);
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  double max_z = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw NumericalError("softmax: non-finite logit");
    max_z = std::max(max_z, z);
  }
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - max_z);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

LossValue ce_loss(std::span<const std::vector<double>> prob_rows, std::span<const TokenId> targets) {
  if (prob_rows.size() != targets.size()) throw std::invalid_argument("rows/targets length mismatch");
  LossValue out;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == corpus::kPad) continue;
    if (targets[i] >= prob_rows[i].size()) throw std::out_of_range("target id out of range");
    double p = prob_rows[i][targets[i]];
    if (p < kProbFloor) {
      p = kProbFloor;
      ++out.clamped;
    }
    out.value -= std::log(p);
    ++counted;
  }
  if (counted > 0) out.value /= static_cast<double>(counted);
  return out;
}

}  // namespace knnkd::nmt
