#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ctxtend/model.hpp"

using namespace ctxtend;

namespace {

ModelConfig tiny_config(PEKind pe) {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.L_t = 8;
  cfg.pe_kind = pe;
  return cfg;
}

PositionedSample full_sample(size_t n, int vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  PositionedSample s;
  s.doc_id = "t";
  for (size_t j = 0; j < n; ++j) {
    s.tokens.push_back(tok(rng));
    s.positions.push_back(static_cast<int64_t>(j));
    s.loss_mask.push_back(true);
  }
  return s;
}

}  // namespace

TEST_CASE("uniform logits give loss ln(vocab)") {
  auto s = full_sample(6, 259, 1);
  Tensor<double> logits(6, 259);
  std::fill(logits.v.begin(), logits.v.end(), 0.37);
  CHECK(loss_from_logits(logits, s) ==
        Catch::Approx(std::log(259.0)).epsilon(1e-12));
}

TEST_CASE("confidently correct logits give near-zero loss") {
  auto s = full_sample(6, 259, 2);
  Tensor<double> logits(6, 259);
  for (size_t j = 0; j + 1 < 6; ++j) logits.at(j, s.tokens[j + 1]) = 30.0;
  CHECK(loss_from_logits(logits, s) < 1e-10);
}

TEST_CASE("hand-built log-prob case matches the definition") {
  // two targets with NLL 1.0 and 2.0 -> mean 1.5
  PositionedSample s;
  s.tokens = {0, 1, 0};
  s.positions = {0, 1, 2};
  s.loss_mask = {true, true, true};
  Tensor<double> logits(3, 2);
  // row j: want -log p(target) = 1.0 then 2.0; targets are tokens[1]=1,
  // tokens[2]=0. logit gap g gives p = 1/(1+e^-g).
  auto gap_for = [](double nll) { return -std::log(std::exp(nll) - 1.0); };
  logits.at(0, 1) = gap_for(1.0);
  logits.at(1, 0) = gap_for(2.0);
  CHECK(loss_from_logits(logits, s) == Catch::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("contributing slots exclude run boundaries and masked targets") {
  // 4 runs of 64 with positive gaps: 4*63 contributing slots
  PositionedSample s;
  int64_t pos = 0;
  for (int r = 0; r < 4; ++r) {
    pos += 3;  // gap
    for (int j = 0; j < 64; ++j) {
      s.tokens.push_back(1);
      s.positions.push_back(pos++);
      s.loss_mask.push_back(true);
    }
  }
  CHECK(contributing_slots(s).size() == 252);

  // suffix-only mask: only targets inside the masked region count
  PositionedSample p;
  for (int j = 0; j < 8; ++j) {
    p.tokens.push_back(1);
    p.positions.push_back(j);
    p.loss_mask.push_back(j >= 4);
  }
  CHECK(contributing_slots(p).size() == 4);  // targets at slots 4..7

  PositionedSample lone;
  lone.tokens = {1};
  lone.positions = {0};
  lone.loss_mask = {true};
  Tensor<double> logits(1, 11);
  REQUIRE_THROWS_AS(loss_from_logits(logits, lone), DataError);
}

TEST_CASE("causality: flipping a token never changes earlier logits") {
  for (PEKind pe : {PEKind::APE, PEKind::RoPE, PEKind::ALiBi}) {
    auto m = init_model<double>(tiny_config(pe), 3);
    auto s = full_sample(8, 11, 4);
    ForwardCache<double> c1, c2;
    auto base = forward(m, s, c1);
    for (size_t flip = 1; flip < 8; ++flip) {
      auto s2 = s;
      s2.tokens[flip] = (s2.tokens[flip] + 5) % 11;
      auto& out = forward(m, s2, c2);
      for (size_t j = 0; j < flip; ++j)
        for (size_t v = 0; v < 11; ++v)
          REQUIRE(std::abs(out.at(j, v) - base.at(j, v)) <= 1e-6);
    }
  }
}

TEST_CASE("attention capture rows are simplex rows") {
  auto m = init_model<float>(tiny_config(PEKind::RoPE), 5);
  auto s = full_sample(8, 11, 6);
  ForwardCache<float> cache;
  AttentionCapture<float> cap;
  forward(m, s, cache, &cap);
  REQUIRE(cap.probs.size() == 2);  // 1 layer x 2 heads
  for (int l = 0; l < cap.n_layers; ++l)
    for (int h = 0; h < cap.n_heads; ++h) {
      const auto& P = cap.at(l, h);
      for (size_t t = 0; t < P.rows; ++t) {
        float sum = 0;
        for (size_t sft = 0; sft < P.cols; ++sft) {
          REQUIRE(P.at(t, sft) >= 0.0f);
          if (sft > t) REQUIRE(P.at(t, sft) == 0.0f);
          sum += P.at(t, sft);
        }
        REQUIRE(std::abs(sum - 1.0f) <= 1e-5f);
      }
    }
}

TEST_CASE("all position strategies react to position ids") {
  for (PEKind pe : {PEKind::APE, PEKind::RoPE, PEKind::ALiBi}) {
    auto m = init_model<double>(tiny_config(pe), 7);
    auto s = full_sample(6, 11, 8);
    auto s2 = s;
    s2.positions = {0, 2, 3, 4, 6, 7};  // same tokens, shifted ids
    ForwardCache<double> c1, c2;
    auto a = forward(m, s, c1);
    auto b = forward(m, s2, c2);
    double maxdiff = 0;
    for (size_t i = 0; i < a.v.size(); ++i)
      maxdiff = std::max(maxdiff, std::abs(a.v[i] - b.v[i]));
    INFO(pe_kind_name(pe));
    CHECK(maxdiff > 1e-8);
  }
}

TEST_CASE("rope model logits are invariant to a global position shift") {
  auto m = init_model<double>(tiny_config(PEKind::RoPE), 9);
  auto s = full_sample(8, 11, 10);
  for (int64_t k : {1, 7, 100}) {
    auto s2 = s;
    for (auto& p : s2.positions) p += k;
    ForwardCache<double> c1, c2;
    auto a = forward(m, s, c1);
    auto b = forward(m, s2, c2);
    for (size_t i = 0; i < a.v.size(); ++i)
      REQUIRE(std::abs(a.v[i] - b.v[i]) <= 1e-5);
  }
}

TEST_CASE("ape positions past the table raise, never clamp") {
  auto m = init_model<float>(tiny_config(PEKind::APE), 11);
  auto s = full_sample(4, 11, 12);
  s.positions = {0, 1, 2, 8};  // table has L_t = 8 rows
  ForwardCache<float> cache;
  REQUIRE_THROWS_AS(forward(m, s, cache), PositionOutOfRange);
}

TEST_CASE("all-pad single token forward is finite") {
  ModelConfig cfg = tiny_config(PEKind::ALiBi);
  cfg.vocab_size = 259;
  auto m = init_model<float>(cfg, 13);
  PositionedSample s;
  s.tokens = {TokenizerSpec::kPad};
  s.positions = {0};
  s.loss_mask = {true};
  ForwardCache<float> cache;
  auto& out = forward(m, s, cache);
  for (float x : out.v) REQUIRE(std::isfinite(x));
}

TEST_CASE("batch independence: sample order does not change outputs") {
  auto m = init_model<double>(tiny_config(PEKind::RoPE), 14);
  auto a = full_sample(8, 11, 15);
  auto b = full_sample(8, 11, 16);
  ForwardCache<double> c;
  auto la1 = forward(m, a, c).v;
  auto lb1 = forward(m, b, c).v;
  auto lb2 = forward(m, b, c).v;
  auto la2 = forward(m, a, c).v;
  REQUIRE(la1 == la2);
  REQUIRE(lb1 == lb2);
}

namespace {

// Central finite differences against the analytic gradient. `n_checks`
// random scalar parameters, step 1e-4, relative tolerance 1e-3.
void gradient_check(PEKind pe, uint64_t seed, int n_checks) {
  auto m = init_model<double>(tiny_config(pe), seed);
  PositionedSample s;
  // positioned sample with discontinuities and a partial mask, to exercise
  // the contiguity rule inside the gradient path
  s.tokens = {3, 7, 1, 9, 4, 2, 8};
  s.positions = {0, 1, 2, 4, 5, 6, 7};  // stays inside the L_t=8 APE table
  s.loss_mask = {true, true, true, true, false, true, true};
  s.doc_id = "g";

  auto grads = m.params.zeros_like();
  backward(m, s, grads);

  std::mt19937_64 rng(derive_seed(seed, 0xfd));
  std::uniform_int_distribution<size_t> pick_t(0, m.params.count() - 1);
  const double h = 1e-4;
  int checked = 0;
  while (checked < n_checks) {
    const size_t ti = pick_t(rng);
    auto& tensor = m.params[ti];
    std::uniform_int_distribution<size_t> pick_i(0, tensor.v.size() - 1);
    const size_t ii = pick_i(rng);
    const double orig = tensor.v[ii];
    ForwardCache<double> cache;
    tensor.v[ii] = orig + h;
    const double lp = loss_from_logits(forward(m, s, cache), s);
    tensor.v[ii] = orig - h;
    const double lm = loss_from_logits(forward(m, s, cache), s);
    tensor.v[ii] = orig;
    const double numeric = (lp - lm) / (2 * h);
    const double analytic = grads[ti].v[ii];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
    INFO(m.params.names[ti] << "[" << ii << "] analytic=" << analytic
                            << " numeric=" << numeric);
    REQUIRE(std::abs(analytic - numeric) / denom < 1e-3);
    ++checked;
  }
}

}  // namespace

TEST_CASE("gradients match central finite differences") {
  gradient_check(PEKind::RoPE, 21, 100);
  gradient_check(PEKind::APE, 22, 100);
  gradient_check(PEKind::ALiBi, 23, 50);
}

TEST_CASE("unused ape rows receive exactly zero gradient") {
  auto m = init_model<double>(tiny_config(PEKind::APE), 24);
  PositionedSample s;
  s.tokens = {1, 2, 3};
  s.positions = {0, 1, 2};
  s.loss_mask = {true, true, true};
  auto grads = m.params.zeros_like();
  backward(m, s, grads);
  const auto& gp = grads[m.pos_emb];
  for (size_t r = 3; r < gp.rows; ++r)
    for (size_t c = 0; c < gp.cols; ++c) REQUIRE(gp.at(r, c) == 0.0);
}

TEST_CASE("loss-mask growth keeps existing contributions intact") {
  auto s = full_sample(8, 11, 30);
  s.loss_mask = {false, false, false, false, true, true, true, true};
  auto base_slots = contributing_slots(s);
  auto s2 = s;
  s2.loss_mask[2] = true;
  auto grown = contributing_slots(s2);
  for (size_t j : base_slots)
    REQUIRE(std::find(grown.begin(), grown.end(), j) != grown.end());
  REQUIRE(grown.size() == base_slots.size() + 1);
}
