#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctxtend/common.hpp"
#include "ctxtend/corpus.hpp"

namespace ctxtend {

// Tokens plus explicit per-token position ids and a per-token loss mask;
// the unit every sampler emits and the model consumes.
struct PositionedSample {
  std::vector<TokenId> tokens;
  std::vector<int64_t> positions;
  std::vector<bool> loss_mask;
  std::string doc_id;

  size_t size() const { return tokens.size(); }
};

enum class SamplerMethod { Full, Chunk, Prefix, RandomPos };

inline const char* sampler_method_name(SamplerMethod m) {
  switch (m) {
    case SamplerMethod::Full: return "full";
    case SamplerMethod::Chunk: return "chunk";
    case SamplerMethod::Prefix: return "prefix";
    case SamplerMethod::RandomPos: return "randompos";
  }
  return "?";
}

inline SamplerMethod sampler_method_from(const std::string& s) {
  if (s == "full") return SamplerMethod::Full;
  if (s == "chunk") return SamplerMethod::Chunk;
  if (s == "prefix") return SamplerMethod::Prefix;
  if (s == "randompos") return SamplerMethod::RandomPos;
  throw ConfigError("unknown sampler method: " + s);
}

namespace detail {
inline int64_t integral_or_throw(double x, const std::string& what) {
  const int64_t r = std::llround(x);
  if (std::abs(x - static_cast<double>(r)) > 1e-9 || r < 1)
    throw ConfigError("sampler config: " + what +
                      " must be a positive integer, got " + std::to_string(x));
  return r;
}
}  // namespace detail

struct SamplerConfig {
  SamplerMethod method = SamplerMethod::Full;
  double alpha = 1.0;  // unused for full/randompos
  size_t L_t = 0;
  size_t L_e = 0;
  uint64_t seed = 0;

  void validate() const {
    if (L_t < 1) throw ConfigError("sampler config: L_t must be >= 1");
    if (L_e < L_t) throw ConfigError("sampler config: L_e must be >= L_t");
    if (L_e % L_t != 0)
      throw ConfigError("sampler config: L_e must be a multiple of L_t");
    if (method == SamplerMethod::Chunk) {
      if (!(alpha > 0.0 && alpha <= 1.0))
        throw ConfigError("sampler config: alpha must be in (0,1] for chunk");
      detail::integral_or_throw(1.0 / alpha, "1/alpha");
      detail::integral_or_throw(alpha * L_t, "alpha*L_t");
    } else if (method == SamplerMethod::Prefix) {
      if (!(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("sampler config: alpha must be in (0,1) for prefix");
      const int64_t sl = detail::integral_or_throw(alpha * L_t, "alpha*L_t");
      const int64_t pl =
          detail::integral_or_throw((1.0 - alpha) * L_t, "(1-alpha)*L_t");
      if (static_cast<int64_t>(L_e) - sl <= pl + 1)
        throw ConfigError(
            "sampler config: L_e too small for prefix (empty index interval)");
    }
  }

  int64_t chunk_runs() const { return std::llround(1.0 / alpha); }
  int64_t chunk_run_len() const { return std::llround(alpha * L_t); }
  int64_t prefix_suffix_len() const { return std::llround(alpha * L_t); }
  int64_t prefix_prefix_len() const {
    return std::llround((1.0 - alpha) * L_t);
  }
};

namespace detail {

// Uniform weak composition of `total` into `parts` non-negative summands
// (stars and bars): choose parts-1 bar slots among total+parts-1.
inline std::vector<int64_t> random_composition(int64_t total, int64_t parts,
                                               std::mt19937_64& rng) {
  if (parts == 1) return {total};
  std::vector<int64_t> slots(total + parts - 1);
  std::iota(slots.begin(), slots.end(), 0);
  std::vector<int64_t> bars;
  std::sample(slots.begin(), slots.end(), std::back_inserter(bars), parts - 1,
              rng);
  std::vector<int64_t> gaps(parts);
  int64_t prev = -1;
  for (int64_t i = 0; i < parts - 1; ++i) {
    gaps[i] = bars[i] - prev - 1;
    prev = bars[i];
  }
  gaps[parts - 1] = total + parts - 2 - prev;
  return gaps;
}

// Sorted uniform k-subset of [0, n).
inline std::vector<int64_t> random_sorted_subset(int64_t n, int64_t k,
                                                 std::mt19937_64& rng) {
  std::vector<int64_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<int64_t> out;
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

inline void gather_tokens(PositionedSample& s,
                          std::span<const TokenId> source) {
  s.tokens.resize(s.positions.size());
  for (size_t j = 0; j < s.positions.size(); ++j)
    s.tokens[j] = source[static_cast<size_t>(s.positions[j])];
}

}  // namespace detail

// chunk-alpha: 1/alpha contiguous non-overlapping runs of length alpha*L_t,
// placed uniformly over all valid ordered placements via the gap
// construction; original positions kept, loss over every token.
inline PositionedSample sample_chunk(const TokenSequence& seq,
                                     const SamplerConfig& cfg,
                                     std::mt19937_64& rng) {
  if (cfg.method != SamplerMethod::Chunk)
    throw ConfigError("sample_chunk: config method is not chunk");
  cfg.validate();
  if (seq.tokens.size() != cfg.L_e)
    throw ConfigError("sample_chunk: sequence length != L_e");
  const int64_t runs = cfg.chunk_runs();
  const int64_t run_len = cfg.chunk_run_len();
  const int64_t slack = static_cast<int64_t>(cfg.L_e - cfg.L_t);
  auto gaps = detail::random_composition(slack, runs + 1, rng);

  PositionedSample s;
  s.doc_id = seq.doc_id;
  s.positions.reserve(cfg.L_t);
  int64_t cursor = 0;
  for (int64_t r = 0; r < runs; ++r) {
    cursor += gaps[r];
    for (int64_t j = 0; j < run_len; ++j) s.positions.push_back(cursor++);
  }
  detail::gather_tokens(s, seq.tokens);
  s.loss_mask.assign(cfg.L_t, true);
  return s;
}

// prefix-alpha: contiguous suffix of alpha*L_t tokens starting at a uniform
// index i with (1-alpha)L_t < i < L_e - alpha*L_t, plus a uniform random
// (1-alpha)L_t-subset of the positions before i as the prefix. Loss only on
// the suffix.
inline PositionedSample sample_prefix(const TokenSequence& seq,
                                      const SamplerConfig& cfg,
                                      std::mt19937_64& rng) {
  if (cfg.method != SamplerMethod::Prefix)
    throw ConfigError("sample_prefix: config method is not prefix");
  cfg.validate();
  if (seq.tokens.size() != cfg.L_e)
    throw ConfigError("sample_prefix: sequence length != L_e");
  const int64_t sl = cfg.prefix_suffix_len();
  const int64_t pl = cfg.prefix_prefix_len();
  const int64_t lo = pl + 1;
  const int64_t hi = static_cast<int64_t>(cfg.L_e) - sl - 1;
  std::uniform_int_distribution<int64_t> pick(lo, hi);
  const int64_t i = pick(rng);

  PositionedSample s;
  s.doc_id = seq.doc_id;
  s.positions = detail::random_sorted_subset(i, pl, rng);
  for (int64_t j = 0; j < sl; ++j) s.positions.push_back(i + j);
  detail::gather_tokens(s, seq.tokens);
  s.loss_mask.assign(cfg.L_t, false);
  for (size_t j = static_cast<size_t>(pl); j < cfg.L_t; ++j)
    s.loss_mask[j] = true;
  return s;
}

// RandomPos baseline: contiguous L_t window of content at a uniform offset,
// position ids a sorted uniform L_t-subset of [0, L_e).
inline PositionedSample sample_randompos(const TokenSequence& seq,
                                         const SamplerConfig& cfg,
                                         std::mt19937_64& rng) {
  if (cfg.method != SamplerMethod::RandomPos)
    throw ConfigError("sample_randompos: config method is not randompos");
  cfg.validate();
  if (seq.tokens.size() != cfg.L_e)
    throw ConfigError("sample_randompos: sequence length != L_e");
  std::uniform_int_distribution<int64_t> pick(
      0, static_cast<int64_t>(cfg.L_e - cfg.L_t));
  const int64_t offset = pick(rng);

  PositionedSample s;
  s.doc_id = seq.doc_id;
  s.positions = detail::random_sorted_subset(static_cast<int64_t>(cfg.L_e),
                                             static_cast<int64_t>(cfg.L_t),
                                             rng);
  s.tokens.assign(seq.tokens.begin() + offset,
                  seq.tokens.begin() + offset + static_cast<int64_t>(cfg.L_t));
  s.loss_mask.assign(cfg.L_t, true);
  return s;
}

// full: identity positions, loss over every token.
inline PositionedSample sample_full(const TokenSequence& seq) {
  PositionedSample s;
  s.doc_id = seq.doc_id;
  s.tokens = seq.tokens;
  s.positions.resize(seq.tokens.size());
  std::iota(s.positions.begin(), s.positions.end(), 0);
  s.loss_mask.assign(seq.tokens.size(), true);
  return s;
}

// Every sample owns an rng stream derived from (seed, epoch, sequence index),
// so epochs see different segmentations of the same long sequence.
inline PositionedSample make_sample(const TokenSequence& seq,
                                    const SamplerConfig& cfg, uint64_t epoch,
                                    uint64_t seq_index) {
  std::mt19937_64 rng(derive_seed(cfg.seed, epoch, seq_index));
  switch (cfg.method) {
    case SamplerMethod::Full: return sample_full(seq);
    case SamplerMethod::Chunk: return sample_chunk(seq, cfg, rng);
    case SamplerMethod::Prefix: return sample_prefix(seq, cfg, rng);
    case SamplerMethod::RandomPos: return sample_randompos(seq, cfg, rng);
  }
  throw ConfigError("make_sample: unknown method");
}

}  // namespace ctxtend
