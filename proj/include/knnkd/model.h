// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "knnkd/corpus.h"

namespace knnkd::nmt {

using corpus::TokenId;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::uint32_t embed_dim = 64;
  std::uint32_t hidden_dim = 64;  // also the datastore key dimensionality
  std::uint32_t src_vocab_size = 0;
  std::uint32_t tgt_vocab_size = 0;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Where each parameter group lives in the flat parameter vector. Groups are
/// listed in checkpoint order; matrices are row-major.
class ParamLayout {
 public:
  enum Group : std::size_t {
    kSrcEmbed,      // src_vocab x embed
    kTgtEmbed,      // tgt_vocab x embed
    kEncInput,      // hidden x embed
    kEncRecurrent,  // hidden x hidden
    kEncBias,       // hidden
    kDecInput,      // hidden x embed
    kDecRecurrent,  // hidden x hidden
    kDecBias,       // hidden
    kCombine,       // hidden x 2*hidden, applied to [decoder state; attention context]
    kCombineBias,   // hidden
    kOutput,        // tgt_vocab x hidden
    kNumGroups
  };

  explicit ParamLayout(const ModelConfig& config);

  std::size_t offset(Group g) const { return offset_[g]; }
  std::size_t size(Group g) const { return rows_[g] * cols_[g]; }
  std::size_t rows(Group g) const { return rows_[g]; }
  std::size_t cols(Group g) const { return cols_[g]; }
  std::size_t total() const { return offset_[kNumGroups]; }
  static const char* name(Group g);

 private:
  std::array<std::size_t, kNumGroups + 1> offset_{};
  std::array<std::size_t, kNumGroups> rows_{};
  std::array<std::size_t, kNumGroups> cols_{};
};

/// Single-layer recurrent encoder-decoder with dot-product attention.
///
///   encoder:  h_t = tanh(We x_t + Ue h_{t-1} + be),  h_0 = 0
///   decoder:  s_i = tanh(Wd y_{i-1} + Ud s_{i-1} + bd),  s_0 = h_m
///   attention over h_1..h_m with scores s_i . h_t gives context c_i
///   output:   q_i = tanh(Wc [s_i; c_i] + bc),  logits = O q_i
///
/// q_i is the hidden vector fed to the output layer and is what the
/// datastore stores as the key for position i.
class Model {
 public:
  /// All parameters zero.
  explicit Model(const ModelConfig& config);
  /// Parameters uniform in [-0.08, 0.08], drawn from config.seed.
  static Model random_init(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::span<double> group(ParamLayout::Group g) {
    return std::span(params_).subspan(layout_.offset(g), layout_.size(g));
  }
  std::span<const double> group(ParamLayout::Group g) const {
    return std::span(params_).subspan(layout_.offset(g), layout_.size(g));
  }

  /// Checkpoint bytes: "KNKD", version, config as u32 fields (seed split
  /// into low/high words), parameter count (u64), then little-endian f64
  /// parameters in ParamLayout order.
  std::vector<std::byte> serialize() const;
  static Model deserialize(std::span<const std::byte> bytes);
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

  /// FNV-1a of the serialized checkpoint.
  std::uint64_t fingerprint() const;

  bool operator==(const Model& other) const {
    return config_ == other.config_ && params_ == other.params_;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EncoderStates {
  std::size_t length = 0;
  std::size_t dim = 0;
  std::vector<double> states;  // length x dim

  std::span<const double> row(std::size_t t) const {
    return std::span(states).subspan(t * dim, dim);
  }
  std::span<const double> last() const { return row(length - 1); }
};

EncoderStates encode_source(const Model& model, std::span<const TokenId> source);

struct DecoderStep {
  std::vector<double> state;          // s_i
  std::vector<double> attention;      // weights over source positions
  std::vector<double> context;        // c_i
  std::vector<double> output_hidden;  // q_i
  std::vector<double> logits;
};

DecoderStep decoder_step(const Model& model, const EncoderStates& encoder,
                         std::span<const double> prev_state, TokenId prev_token);

struct ForwardResult {
  std::vector<double> step_hidden;
  std::vector<double> logits;
};

/// Hidden vector and logits for the token following `prefix` (which must
/// start with BOS).
ForwardResult forward(const Model& model, std::span<const TokenId> source,
                      std::span<const TokenId> prefix);

/// Teacher-forced pass over a full target (EOS-terminated): one decoder step
/// per target token, fed BOS followed by target[0..n-2].
struct TeacherForcedPass {
  EncoderStates encoder;
  std::vector<TokenId> inputs;
  std::vector<DecoderStep> steps;
};

TeacherForcedPass teacher_forced(const Model& model, std::span<const TokenId> source,
                                 std::span<const TokenId> target);

/// Accumulates dLoss/dparams into `grad` given dLoss/dlogits for every step
/// (row-major, steps x tgt_vocab).
void backward(const Model& model, std::span<const TokenId> source, const TeacherForcedPass& pass,
              std::span<const double> dlogits, std::span<double> grad);

/// Max-shifted softmax. Throws NumericalError on non-finite input.
std::vector<double> softmax(std::span<const double> logits);

inline constexpr double kProbFloor = 1e-30;

struct LossValue {
  double value = 0.0;
  std::size_t clamped = 0;  // probabilities floored at kProbFloor
};

/// Mean over non-PAD positions of -log p(target).
LossValue ce_loss(std::span<const std::vector<double>> prob_rows, std::span<const TokenId> targets);

}  // namespace knnkd::nmt
