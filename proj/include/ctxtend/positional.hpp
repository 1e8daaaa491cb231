#pragma once

#include <cmath>
#include <random>

#include "ctxtend/common.hpp"

namespace ctxtend {

enum class PEKind { APE, RoPE, ALiBi };

inline const char* pe_kind_name(PEKind k) {
  switch (k) {
    case PEKind::APE: return "ape";
    case PEKind::RoPE: return "rope";
    case PEKind::ALiBi: return "alibi";
  }
  return "?";
}

inline PEKind pe_kind_from(const std::string& s) {
  if (s == "ape") return PEKind::APE;
  if (s == "rope") return PEKind::RoPE;
  if (s == "alibi") return PEKind::ALiBi;
  throw ConfigError("unknown positional embedding kind: " + s);
}

constexpr double kApeInitScale = 0.02;
constexpr double kRopeDefaultBase = 10000.0;

// Learned absolute table: rows = positions, cols = model dim.
// Entries ~ N(0, kApeInitScale^2), deterministic for a given seed.
template <class T>
Tensor<T> build_ape_table(size_t L_max, size_t d, uint64_t init_seed) {
  if (L_max < 1 || d < 1)
    throw ConfigError("build_ape_table: L_max and d must be >= 1");
  Tensor<T> table(L_max, d);
  std::mt19937_64 rng(derive_seed(init_seed, 0xa9e7ab1eu));
  std::normal_distribution<double> dist(0.0, kApeInitScale);
  for (auto& x : table.v) x = static_cast<T>(dist(rng));
  return table;
}

// Linear interpolation of an absolute-position table by an integer factor
// beta, producing beta * L_t rows. Row beta*j equals original row j exactly;
// the final beta-1 rows copy the last original row.
template <class T>
Tensor<T> interpolate_ape(const Tensor<T>& table, int64_t beta) {
  if (beta < 1) throw ConfigError("interpolate_ape: beta must be >= 1");
  const size_t L_t = table.rows;
  const size_t d = table.cols;
  Tensor<T> out(static_cast<size_t>(beta) * L_t, d);
  const size_t last_defined = static_cast<size_t>(beta) * (L_t - 1);
  for (size_t i = 0; i < out.rows; ++i) {
    T* dst = out.row(i);
    if (i > last_defined) {
      const T* src = table.row(L_t - 1);
      std::copy(src, src + d, dst);
      continue;
    }
    const size_t j = i / static_cast<size_t>(beta);
    const size_t r = i % static_cast<size_t>(beta);
    if (r == 0) {
      const T* src = table.row(j);
      std::copy(src, src + d, dst);
    } else {
      const T w1 = static_cast<T>(static_cast<double>(beta - r) / beta);
      const T w2 = static_cast<T>(static_cast<double>(r) / beta);
      const T* a = table.row(j);
      const T* b = table.row(j + 1);
      for (size_t c = 0; c < d; ++c) dst[c] = w1 * a[c] + w2 * b[c];
    }
  }
  return out;
}

// Rotate consecutive dimension pairs (2j, 2j+1) of a head-sized vector by
// pos * theta_base^(-2j/d). In-place; the rotation is orthogonal, so the
// backward pass is the same rotation with a negated position.
template <class T>
void rope_rotate(T* vec, size_t d, int64_t pos, double theta_base) {
  if (d % 2 != 0) throw ConfigError("rope_rotate: dimension must be even");
  for (size_t j = 0; 2 * j < d; ++j) {
    const double freq = std::pow(theta_base, -2.0 * j / d);
    const double angle = pos * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    const T x = vec[2 * j], y = vec[2 * j + 1];
    vec[2 * j] = static_cast<T>(c * x - s * y);
    vec[2 * j + 1] = static_cast<T>(s * x + c * y);
  }
}

template <class T>
std::pair<std::vector<T>, std::vector<T>> rope_apply(
    std::span<const T> q, std::span<const T> k, int64_t pos_q, int64_t pos_k,
    double theta_base) {
  if (q.size() != k.size()) throw ConfigError("rope_apply: q/k size mismatch");
  if (pos_q < 0 || pos_k < 0)
    throw ConfigError("rope_apply: positions must be non-negative");
  std::vector<T> qo(q.begin(), q.end()), ko(k.begin(), k.end());
  rope_rotate(qo.data(), qo.size(), pos_q, theta_base);
  rope_rotate(ko.data(), ko.size(), pos_k, theta_base);
  return {std::move(qo), std::move(ko)};
}

// Geometric ALiBi slope rule m_h = 2^(-8(h+1)/H).
inline double alibi_slope(int head, int n_heads) {
  return std::exp2(-8.0 * (head + 1) / n_heads);
}

inline double alibi_bias(int head, int n_heads, int64_t dist) {
  return -alibi_slope(head, n_heads) * static_cast<double>(dist);
}

}  // namespace ctxtend
