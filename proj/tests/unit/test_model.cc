// Copyright 2026 The knnkd Authors. SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "knnkd/io.h"
#include "knnkd/model.h"
#include "knnkd/random.h"
#include "test_util.h"

using namespace knnkd;
using namespace knnkd::nmt;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 5;
  c.hidden_dim = 4;
  c.src_vocab_size = 9;
  c.tgt_vocab_size = 8;
  c.seed = 3;
  return c;
}

// Sum of -log p over a teacher-forced target, straight from the forward pass.
double sequence_nll(const Model& m, const std::vector<TokenId>& src, const std::vector<TokenId>& tgt) {
  auto pass = teacher_forced(m, src, tgt);
  double total = 0.0;
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    const auto& z = pass.steps[i].logits;
    long double denom = 0.0L;
    for (double v : z) denom += std::exp(static_cast<long double>(v));
    total -= static_cast<double>(static_cast<long double>(z[tgt[i]]) - std::log(denom));
  }
  return total;
}

}  // namespace

TEST_CASE("softmax spec examples") {
  auto a = softmax(std::vector<double>{0.0, 0.0});
  CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));

  auto b = softmax(std::vector<double>{1000.0, 1000.0, 0.0});
  CHECK(std::isfinite(b[0]));
  CHECK(b[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(b[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto c = softmax(std::vector<double>{1.0, 2.0, 3.0});
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0), s = e1 + e2 + e3;
  CHECK(std::abs(c[0] - e1 / s) < 1e-15);
  CHECK(std::abs(c[0] - 0.09003) < 1e-5);
  CHECK(std::abs(c[1] - 0.24473) < 1e-5);
  CHECK(std::abs(c[2] - 0.66524) < 1e-5);
}

TEST_CASE("softmax rejects non-finite logits") {
  CHECK_THROWS_AS(softmax(std::vector<double>{0.0, NAN}), NumericalError);
  CHECK_THROWS_AS(softmax(std::vector<double>{INFINITY, 0.0}), NumericalError);
}

TEST_CASE("softmax rows sum to one and stay inside (0,1)") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> z(2 + rng.index(60));
    for (auto& v : z) v = rng.uniform(-30.0, 30.0);
    auto p = softmax(z);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("ce_loss spec examples") {
  std::vector<std::vector<double>> one_hot = {{0, 1, 0}, {1, 0, 0}};
  std::vector<TokenId> t = {1, 0};
  CHECK(ce_loss(one_hot, t).value == 0.0);

  std::vector<std::vector<double>> uniform(3, std::vector<double>(8, 1.0 / 8));
  std::vector<TokenId> t3 = {4, 5, 6};
  CHECK(ce_loss(uniform, t3).value == doctest::Approx(std::log(8.0)).epsilon(1e-14));
  CHECK(std::abs(ce_loss(uniform, t3).value - 2.0794) < 1e-4);

  // random rows against a per-position hand sum
  Rng rng(2);
  std::vector<std::vector<double>> rows;
  std::vector<TokenId> targets;
  double hand = 0.0;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> z(8);
    for (auto& v : z) v = rng.uniform(-2, 2);
    rows.push_back(softmax(z));
    targets.push_back(static_cast<TokenId>(4 + i));
    hand += -std::log(rows.back()[targets.back()]);
  }
  CHECK(ce_loss(rows, targets).value == doctest::Approx(hand / 3).epsilon(1e-14));
}

TEST_CASE("ce_loss skips PAD and clamps zero probabilities") {
  std::vector<std::vector<double>> rows = {{0.5, 0.25, 0.25}, {0.0, 0.0, 1.0}};
  std::vector<TokenId> t = {corpus::kPad, 2};
  CHECK(ce_loss(rows, t).value == 0.0);

  std::vector<std::vector<double>> zero = {{1.0, 0.0, 0.0, 0.0, 0.0}};
  std::vector<TokenId> t4 = {4};
  auto loss = ce_loss(zero, t4);
  CHECK(loss.clamped == 1);
  CHECK(loss.value == doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("parameter count is a pure function of the config") {
  auto c = tiny_config();
  const std::size_t E = c.embed_dim, H = c.hidden_dim, S = c.src_vocab_size, T = c.tgt_vocab_size;
  const std::size_t expected = S * E + T * E + (H * E + H * H + H) * 2 + H * 2 * H + H + T * H;
  CHECK(Model(c).num_params() == expected);
  CHECK(Model::random_init(c).num_params() == expected);
  ParamLayout L(c);
  std::size_t sum = 0;
  for (std::size_t g = 0; g < ParamLayout::kNumGroups; ++g) {
    CHECK(L.offset(static_cast<ParamLayout::Group>(g)) == sum);
    sum += L.size(static_cast<ParamLayout::Group>(g));
  }
  CHECK(sum == L.total());
}

TEST_CASE("initialization is uniform in [-0.08, 0.08] and seeded") {
  auto c = tiny_config();
  auto a = Model::random_init(c), b = Model::random_init(c);
  CHECK(a == b);
  double lo = 1, hi = -1;
  for (double p : a.params()) {
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  CHECK(lo >= -0.08);
  CHECK(hi <= 0.08);
  CHECK(hi - lo > 0.1);
  c.seed = 4;
  CHECK_FALSE(Model::random_init(c) == a);
}

TEST_CASE("zero parameters give a uniform next-token distribution") {
  Model m(tiny_config());
  std::vector<TokenId> src = {4, 5}, prefix = {corpus::kBos, 6};
  auto r = forward(m, src, prefix);
  auto p = softmax(r.logits);
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 8).epsilon(1e-15));
}

TEST_CASE("forward is bit-reproducible and agrees with the teacher-forced pass") {
  auto m = Model::random_init(tiny_config());
  std::vector<TokenId> src = {4, 5, 6}, tgt = {5, 7, corpus::kEos};
  std::vector<TokenId> prefix = {corpus::kBos, 5};
  auto a = forward(m, src, prefix), b = forward(m, src, prefix);
  CHECK(std::memcmp(a.step_hidden.data(), b.step_hidden.data(), a.step_hidden.size() * sizeof(double)) == 0);
  auto pass = teacher_forced(m, src, tgt);
  REQUIRE(pass.steps.size() == tgt.size());
  CHECK(pass.steps[1].output_hidden == a.step_hidden);
  CHECK(pass.steps[1].logits == a.logits);
  for (const auto& s : pass.steps) CHECK(s.logits.size() == 8);
}

TEST_CASE("forward preconditions") {
  auto m = Model::random_init(tiny_config());
  std::vector<TokenId> src = {4}, ok = {corpus::kBos}, no_bos = {5};
  CHECK_THROWS_AS(forward(m, src, no_bos), std::invalid_argument);
  std::vector<TokenId> bad_src = {9};
  CHECK_THROWS_AS(forward(m, bad_src, ok), std::out_of_range);
  std::vector<TokenId> bad_prefix = {corpus::kBos, 8};
  CHECK_THROWS_AS(forward(m, src, bad_prefix), std::out_of_range);
}

TEST_CASE("analytic gradient matches central differences for every parameter group") {
  auto m = Model::random_init(tiny_config());
  for (auto& p : m.params()) p *= 8.0;  // leave the near-linear regime
  const std::vector<TokenId> src = {4, 5, 6, 7, 8}, tgt = {4, 6, 5, corpus::kEos};
  const std::size_t V = m.config().tgt_vocab_size;

  auto pass = teacher_forced(m, src, tgt);
  std::vector<double> dlogits(tgt.size() * V);
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    auto p = softmax(pass.steps[i].logits);
    for (std::size_t v = 0; v < V; ++v) dlogits[i * V + v] = p[v];
    dlogits[i * V + tgt[i]] -= 1.0;
  }
  std::vector<double> grad(m.num_params(), 0.0);
  backward(m, src, pass, dlogits, grad);

  const double eps = 1e-5;
  for (std::size_t g = 0; g < ParamLayout::kNumGroups; ++g) {
    const auto group = static_cast<ParamLayout::Group>(g);
    double worst = 0.0;
    for (std::size_t j = 0; j < m.layout().size(group); ++j) {
      const std::size_t idx = m.layout().offset(group) + j;
      Model plus = m, minus = m;
      plus.params()[idx] += eps;
      minus.params()[idx] -= eps;
      const double numeric = (sequence_nll(plus, src, tgt) - sequence_nll(minus, src, tgt)) / (2 * eps);
      const double rel = std::abs(numeric - grad[idx]) / std::max(1e-7, std::abs(numeric) + std::abs(grad[idx]));
      worst = std::max(worst, rel);
    }
    INFO("group " << ParamLayout::name(group));
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("checkpoint round trip and header layout") {
  testing::TempDir dir;
  auto c = tiny_config();
  c.seed = 0x1234567890abcdefULL;
  auto m = Model::random_init(c);
  m.save(dir / "m.ckpt");
  auto loaded = Model::load(dir / "m.ckpt");
  CHECK(loaded == m);
  CHECK(loaded.fingerprint() == m.fingerprint());

  auto bytes = io::read_file(dir / "m.ckpt");
  REQUIRE(bytes.size() == 40 + 8 * m.num_params());
  CHECK(std::memcmp(bytes.data(), "KNKD", 4) == 0);
  io::ByteReader r(bytes);
  r.skip(4);
  CHECK(r.get<std::uint32_t>() == kCheckpointVersion);
  CHECK(r.get<std::uint32_t>() == c.embed_dim);
  CHECK(r.get<std::uint32_t>() == c.hidden_dim);
  CHECK(r.get<std::uint32_t>() == c.src_vocab_size);
  CHECK(r.get<std::uint32_t>() == c.tgt_vocab_size);
  CHECK(r.get<std::uint32_t>() == 0x90abcdefu);
  CHECK(r.get<std::uint32_t>() == 0x12345678u);
  CHECK(r.get<std::uint64_t>() == m.num_params());
  CHECK(r.get<double>() == m.params()[0]);
}

TEST_CASE("corrupt checkpoints are rejected by kind") {
  auto m = Model::random_init(tiny_config());
  auto bytes = m.serialize();
  auto kind_of = [](std::span<const std::byte> b) {
    try {
      Model::deserialize(b);
    } catch (const io::FormatError& e) {
      return e.kind();
    }
    FAIL("accepted a corrupt checkpoint");
    return io::FormatError::Kind::inconsistent;
  };
  CHECK(kind_of(std::span(bytes).first(bytes.size() - 1)) == io::FormatError::Kind::truncated);
  CHECK(kind_of(std::span(bytes).first(10)) == io::FormatError::Kind::truncated);
  auto bad_magic = bytes;
  bad_magic[0] = std::byte{'X'};
  CHECK(kind_of(bad_magic) == io::FormatError::Kind::bad_magic);
  auto bad_version = bytes;
  bad_version[4] = std::byte{9};
  CHECK(kind_of(bad_version) == io::FormatError::Kind::version_mismatch);
  auto bad_count = bytes;
  bad_count[32] = std::byte{1};
  CHECK(kind_of(bad_count) == io::FormatError::Kind::inconsistent);
  auto trailing = bytes;
  trailing.push_back(std::byte{0});
  CHECK(kind_of(trailing) == io::FormatError::Kind::inconsistent);
}
