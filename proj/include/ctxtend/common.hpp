#pragma once

#include <cblas.h>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxtend {

using TokenId = int32_t;

// Exit-code mapping: ConfigError/DataError -> 2, TrainingFault -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable seed derivation for independent rng streams, e.g. (seed, epoch, index).
inline uint64_t derive_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
}

// FNV-1a 64-bit, used for content digests (manifests, configs).
struct Fnv1a64 {
  uint64_t state = 0xcbf29ce484222325ULL;
  void update(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 0; i < 16; ++i) out[15 - i] = digits[(state >> (4 * i)) & 0xf];
    return out;
  }
};

inline std::string digest_hex(const void* data, size_t len) {
  Fnv1a64 h;
  h.update(data, len);
  return h.hex();
}

// Dense row-major matrix. Vectors are 1 x n or n x 1 as convenient.
template <class T>
struct Tensor {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(size_t r, size_t c) : rows(r), cols(c), v(r * c, T(0)) {}

  T* row(size_t r) { return v.data() + r * cols; }
  const T* row(size_t r) const { return v.data() + r * cols; }
  T& at(size_t r, size_t c) { return v[r * cols + c]; }
  const T& at(size_t r, size_t c) const { return v[r * cols + c]; }
  size_t size() const { return v.size(); }
  void zero() { std::fill(v.begin(), v.end(), T(0)); }
};

// C = alpha * op(A) op(B) + beta * C, row-major.
template <class T>
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
                 const T* a, int lda, const T* b, int ldb, T beta, T* c,
                 int ldc) {
  auto ta = trans_a ? CblasTrans : CblasNoTrans;
  auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c,
                ldc);
  }
}

}  // namespace ctxtend
