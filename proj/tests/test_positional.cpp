#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ctxtend/positional.hpp"

using namespace ctxtend;

namespace {

// Independent per-index evaluation of the interpolation rule, written
// straight from the definition with no shared code paths.
template <class T>
Tensor<T> brute_force_interpolate(const Tensor<T>& e, int64_t beta) {
  const int64_t L = static_cast<int64_t>(e.rows);
  Tensor<T> out(static_cast<size_t>(beta * L), e.cols);
  for (int64_t i = 0; i < beta * L; ++i)
    for (size_t c = 0; c < e.cols; ++c) {
      double val;
      if (i > beta * (L - 1)) {
        val = e.at(L - 1, c);
      } else {
        const int64_t j = i / beta, r = i % beta;
        val = (double(beta - r) / beta) * e.at(j, c);
        if (r != 0) val += (double(r) / beta) * e.at(j + 1, c);
      }
      out.at(static_cast<size_t>(i), c) = static_cast<T>(val);
    }
  return out;
}

}  // namespace

TEST_CASE("ape table is deterministic with small entries") {
  auto a = build_ape_table<float>(4, 8, 7);
  auto b = build_ape_table<float>(4, 8, 7);
  REQUIRE(a.v == b.v);
  auto c = build_ape_table<float>(4, 8, 8);
  REQUIRE(a.v != c.v);

  auto tiny = build_ape_table<float>(1, 1, 0);
  REQUIRE(std::isfinite(tiny.v[0]));

  auto big = build_ape_table<double>(1024, 64, 3);
  double mean = 0;
  for (double x : big.v) mean += x;
  mean /= double(big.v.size());
  CHECK(std::abs(mean) < 0.005);
}

TEST_CASE("interpolation beta=1 is the identity") {
  auto e = build_ape_table<double>(5, 3, 1);
  auto out = interpolate_ape(e, 1);
  REQUIRE(out.rows == e.rows);
  REQUIRE(out.v == e.v);
}

TEST_CASE("interpolation beta=2 matches the hand expansion") {
  Tensor<double> e(4, 2);
  for (size_t i = 0; i < 4; ++i)
    for (size_t c = 0; c < 2; ++c) e.at(i, c) = double(i * 10 + c);
  auto out = interpolate_ape(e, 2);
  REQUIRE(out.rows == 8);
  // [e0, (e0+e1)/2, e1, (e1+e2)/2, e2, (e2+e3)/2, e3, e3]
  for (size_t c = 0; c < 2; ++c) {
    CHECK(out.at(0, c) == e.at(0, c));
    CHECK(out.at(1, c) == Catch::Approx(0.5 * (e.at(0, c) + e.at(1, c))));
    CHECK(out.at(2, c) == e.at(1, c));
    CHECK(out.at(3, c) == Catch::Approx(0.5 * (e.at(1, c) + e.at(2, c))));
    CHECK(out.at(4, c) == e.at(2, c));
    CHECK(out.at(5, c) == Catch::Approx(0.5 * (e.at(2, c) + e.at(3, c))));
    CHECK(out.at(6, c) == e.at(3, c));
    CHECK(out.at(7, c) == e.at(3, c));
  }
}

TEST_CASE("interpolation beta=3 on an arithmetic ramp") {
  Tensor<double> e(3, 1);
  e.at(0, 0) = 0;
  e.at(1, 0) = 3;
  e.at(2, 0) = 6;
  auto out = interpolate_ape(e, 3);
  const std::vector<double> want = {0, 1, 2, 3, 4, 5, 6, 6, 6};
  REQUIRE(out.v.size() == want.size());
  for (size_t i = 0; i < want.size(); ++i)
    CHECK(out.v[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("interpolation matches a brute-force oracle on random tables") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<size_t> lt(1, 16), dd(1, 7);
  std::uniform_real_distribution<double> val(-2.0, 2.0);
  for (int64_t beta = 1; beta <= 4; ++beta)
    for (int trial = 0; trial < 25; ++trial) {
      Tensor<double> e(lt(rng), dd(rng));
      for (auto& x : e.v) x = val(rng);
      auto got = interpolate_ape(e, beta);
      auto want = brute_force_interpolate(e, beta);
      REQUIRE(got.rows == want.rows);
      for (size_t i = 0; i < got.v.size(); ++i)
        REQUIRE(std::abs(got.v[i] - want.v[i]) <= 1e-12);
      // anchored rows are bit-equal, not merely close
      for (size_t j = 0; j < e.rows; ++j)
        for (size_t c = 0; c < e.cols; ++c)
          REQUIRE(got.at(j * static_cast<size_t>(beta), c) == e.at(j, c));
    }
}

TEST_CASE("interpolation is linear in the table") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  Tensor<double> e1(6, 4), e2(6, 4), mix(6, 4);
  for (auto& x : e1.v) x = val(rng);
  for (auto& x : e2.v) x = val(rng);
  const double a = 0.7, b = -1.3;
  for (size_t i = 0; i < mix.v.size(); ++i) mix.v[i] = a * e1.v[i] + b * e2.v[i];
  auto om = interpolate_ape(mix, 3);
  auto o1 = interpolate_ape(e1, 3);
  auto o2 = interpolate_ape(e2, 3);
  for (size_t i = 0; i < om.v.size(); ++i)
    REQUIRE(std::abs(om.v[i] - (a * o1.v[i] + b * o2.v[i])) <= 1e-12);
}

TEST_CASE("interpolation rejects beta below one") {
  Tensor<double> e(2, 2);
  REQUIRE_THROWS_AS(interpolate_ape(e, 0), ConfigError);
  REQUIRE_THROWS_AS(interpolate_ape(e, -3), ConfigError);
}

TEST_CASE("rope identity at position zero and hand rotation at d=2") {
  std::vector<double> q = {0.3, -0.7}, k = {1.1, 0.2};
  auto [q0, k0] = rope_apply<double>(q, k, 0, 0, kRopeDefaultBase);
  CHECK(q0 == q);
  CHECK(k0 == k);

  std::vector<double> unit = {1.0, 0.0};
  rope_rotate(unit.data(), 2, 1, kRopeDefaultBase);
  CHECK(unit[0] == Catch::Approx(std::cos(1.0)).epsilon(1e-12));
  CHECK(unit[1] == Catch::Approx(std::sin(1.0)).epsilon(1e-12));
}

TEST_CASE("rope attention logits depend only on relative distance") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> val(-1.0, 1.0);
  std::uniform_int_distribution<int64_t> pos(0, 500);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> q(8), k(8);
    for (auto& x : q) x = val(rng);
    for (auto& x : k) x = val(rng);
    const int64_t pq = pos(rng), pk = pos(rng), shift = 17;
    auto [q1, k1] = rope_apply<double>(q, k, pq, pk, kRopeDefaultBase);
    auto [q2, k2] =
        rope_apply<double>(q, k, pq + shift, pk + shift, kRopeDefaultBase);
    double d1 = 0, d2 = 0;
    for (size_t i = 0; i < q.size(); ++i) {
      d1 += q1[i] * k1[i];
      d2 += q2[i] * k2[i];
    }
    REQUIRE(std::abs(d1 - d2) <= 1e-6);
  }
}

TEST_CASE("rope rejects odd dimensions") {
  std::vector<double> v(3);
  REQUIRE_THROWS_AS(rope_rotate(v.data(), 3, 1, kRopeDefaultBase), ConfigError);
}

TEST_CASE("alibi slope rule and monotonicity") {
  for (int h = 0; h < 8; ++h) CHECK(alibi_bias(h, 8, 0) == 0.0);
  CHECK(alibi_bias(0, 8, 3) == Catch::Approx(-1.5).margin(1e-12));
  CHECK(alibi_bias(7, 8, 256) == Catch::Approx(-1.0).margin(1e-12));
  for (int h = 0; h < 8; ++h)
    for (int64_t d = 1; d < 100; ++d)
      REQUIRE(alibi_bias(h, 8, d) < alibi_bias(h, 8, d - 1));
}
