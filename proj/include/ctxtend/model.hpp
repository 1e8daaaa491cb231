#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ctxtend/common.hpp"
#include "ctxtend/positional.hpp"
#include "ctxtend/sampler.hpp"

namespace ctxtend {

struct PositionOutOfRange : DataError {
  using DataError::DataError;
};

struct ModelConfig {
  int vocab_size = 259;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int L_t = 128;
  PEKind pe_kind = PEKind::RoPE;
  double dropout = 0.0;  // kept at 0; recorded for the config digest
  double rope_theta_base = kRopeDefaultBase;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model % n_heads != 0)
      throw ConfigError("model config: d_model must be divisible by n_heads");
    if (pe_kind == PEKind::RoPE && head_dim() % 2 != 0)
      throw ConfigError("model config: head dim must be even for RoPE");
    if (vocab_size < 2 || n_layers < 1 || d_ff < 1 || L_t < 1)
      throw ConfigError("model config: degenerate dimension");
  }
};

// Flat named-tensor store shared by parameters, gradients and optimizer
// moments; names are stable and appear verbatim in checkpoints.
template <class T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  size_t add(std::string name, size_t rows, size_t cols) {
    names.push_back(std::move(name));
    tensors.emplace_back(rows, cols);
    return tensors.size() - 1;
  }
  size_t index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw DataError("ParamStore: no tensor named " + name);
  }
  Tensor<T>& operator[](size_t i) { return tensors[i]; }
  const Tensor<T>& operator[](size_t i) const { return tensors[i]; }
  size_t count() const { return tensors.size(); }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
  void zero_all() {
    for (auto& t : tensors) t.zero();
  }
  ParamStore<T> zeros_like() const {
    ParamStore<T> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.emplace_back(t.rows, t.cols);
    return out;
  }
};

struct LayerIdx {
  size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class T>
struct ModelState {
  ModelConfig config;
  ParamStore<T> params;
  uint64_t step = 0;

  size_t tok_emb = 0;
  size_t pos_emb = 0;  // valid only when pe_kind == APE
  std::vector<LayerIdx> layers;
  size_t lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;

  // Largest attention score buffer (elements) any forward has needed.
  mutable uint64_t attn_buffer_watermark = 0;

  const Tensor<T>& ape_table() const { return params[pos_emb]; }
  Tensor<T>& ape_table() { return params[pos_emb]; }
};

// Rebuilds the index members from tensor names; used after checkpoint load.
template <class T>
void bind_indices(ModelState<T>& m) {
  m.tok_emb = m.params.index_of("tok_emb");
  if (m.config.pe_kind == PEKind::APE)
    m.pos_emb = m.params.index_of("pos_emb");
  m.layers.clear();
  for (int l = 0; l < m.config.n_layers; ++l) {
    std::string p = "layers." + std::to_string(l) + ".";
    LayerIdx li;
    li.ln1_g = m.params.index_of(p + "ln1.g");
    li.ln1_b = m.params.index_of(p + "ln1.b");
    li.wq = m.params.index_of(p + "wq");
    li.bq = m.params.index_of(p + "bq");
    li.wk = m.params.index_of(p + "wk");
    li.bk = m.params.index_of(p + "bk");
    li.wv = m.params.index_of(p + "wv");
    li.bv = m.params.index_of(p + "bv");
    li.wo = m.params.index_of(p + "wo");
    li.bo = m.params.index_of(p + "bo");
    li.ln2_g = m.params.index_of(p + "ln2.g");
    li.ln2_b = m.params.index_of(p + "ln2.b");
    li.w1 = m.params.index_of(p + "w1");
    li.b1 = m.params.index_of(p + "b1");
    li.w2 = m.params.index_of(p + "w2");
    li.b2 = m.params.index_of(p + "b2");
    m.layers.push_back(li);
  }
  m.lnf_g = m.params.index_of("lnf.g");
  m.lnf_b = m.params.index_of("lnf.b");
  m.w_out = m.params.index_of("w_out");
  m.b_out = m.params.index_of("b_out");
}

template <class T>
ModelState<T> init_model(const ModelConfig& cfg, uint64_t init_seed) {
  cfg.validate();
  ModelState<T> m;
  m.config = cfg;
  const size_t d = cfg.d_model, ff = cfg.d_ff, V = cfg.vocab_size;
  auto& P = m.params;
  P.add("tok_emb", V, d);
  if (cfg.pe_kind == PEKind::APE) P.add("pos_emb", cfg.L_t, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "layers." + std::to_string(l) + ".";
    P.add(p + "ln1.g", 1, d);
    P.add(p + "ln1.b", 1, d);
    P.add(p + "wq", d, d);
    P.add(p + "bq", 1, d);
    P.add(p + "wk", d, d);
    P.add(p + "bk", 1, d);
    P.add(p + "wv", d, d);
    P.add(p + "bv", 1, d);
    P.add(p + "wo", d, d);
    P.add(p + "bo", 1, d);
    P.add(p + "ln2.g", 1, d);
    P.add(p + "ln2.b", 1, d);
    P.add(p + "w1", d, ff);
    P.add(p + "b1", 1, ff);
    P.add(p + "w2", ff, d);
    P.add(p + "b2", 1, d);
  }
  P.add("lnf.g", 1, d);
  P.add("lnf.b", 1, d);
  P.add("w_out", d, V);
  P.add("b_out", 1, V);
  bind_indices(m);

  std::mt19937_64 rng(derive_seed(init_seed, 0x10de1u));
  std::normal_distribution<double> dist(0.0, 0.02);
  // Residual-path projections get the usual 1/sqrt(2*n_layers) shrink.
  const double res_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (size_t i = 0; i < P.count(); ++i) {
    const auto& name = P.names[i];
    auto& t = P[i];
    if (name.ends_with("ln1.g") || name.ends_with("ln2.g") ||
        name == "lnf.g") {
      std::fill(t.v.begin(), t.v.end(), T(1));
    } else if (name.ends_with(".b") || name[0] == 'b' ||
               name.find(".b") != std::string::npos) {
      // biases and ln shifts stay zero
    } else {
      double scale = 1.0;
      if (name.ends_with("wo") || name.ends_with("w2")) scale = res_scale;
      for (auto& x : t.v) x = static_cast<T>(dist(rng) * scale);
    }
  }
  if (cfg.pe_kind == PEKind::APE)
    m.ape_table() = build_ape_table<T>(cfg.L_t, d, derive_seed(init_seed, 0xa9eu));
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct AttentionCapture {
  int n_layers = 0, n_heads = 0;
  size_t n = 0;
  std::vector<Tensor<T>> probs;  // index l * n_heads + h, each n x n

  const Tensor<T>& at(int layer, int head) const {
    return probs[static_cast<size_t>(layer) * n_heads + head];
  }
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <class T>
T gelu(T u) {
  const T t = std::tanh(static_cast<T>(kGeluC) * (u + static_cast<T>(kGeluA) * u * u * u));
  return T(0.5) * u * (T(1) + t);
}

template <class T>
T gelu_grad(T u) {
  const T inner = static_cast<T>(kGeluC) * (u + static_cast<T>(kGeluA) * u * u * u);
  const T t = std::tanh(inner);
  const T dinner = static_cast<T>(kGeluC) * (T(1) + T(3) * static_cast<T>(kGeluA) * u * u);
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * dinner;
}

template <class T>
void ln_forward(const Tensor<T>& x, const T* g, const T* b, Tensor<T>& out,
                Tensor<T>& xhat, std::vector<T>& rstd) {
  const size_t n = x.rows, d = x.cols;
  out = Tensor<T>(n, d);
  xhat = Tensor<T>(n, d);
  rstd.assign(n, T(0));
  for (size_t t = 0; t < n; ++t) {
    const T* xr = x.row(t);
    T mu = 0;
    for (size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<T>(d);
    T var = 0;
    for (size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[t] = rs;
    T* xh = xhat.row(t);
    T* o = out.row(t);
    for (size_t c = 0; c < d; ++c) {
      xh[c] = (xr[c] - mu) * rs;
      o[c] = g[c] * xh[c] + b[c];
    }
  }
}

// dx += LN backward; dg/db accumulate.
template <class T>
void ln_backward(const Tensor<T>& dy, const Tensor<T>& xhat,
                 const std::vector<T>& rstd, const T* g, Tensor<T>& dx,
                 T* dg, T* db) {
  const size_t n = dy.rows, d = dy.cols;
  std::vector<T> dyg(d);
  for (size_t t = 0; t < n; ++t) {
    const T* dyr = dy.row(t);
    const T* xh = xhat.row(t);
    T m1 = 0, m2 = 0;
    for (size_t c = 0; c < d; ++c) {
      dyg[c] = dyr[c] * g[c];
      m1 += dyg[c];
      m2 += dyg[c] * xh[c];
      dg[c] += dyr[c] * xh[c];
      db[c] += dyr[c];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    T* dxr = dx.row(t);
    const T rs = rstd[t];
    for (size_t c = 0; c < d; ++c)
      dxr[c] += rs * (dyg[c] - m1 - xh[c] * m2);
  }
}

template <class T>
void add_bias(Tensor<T>& x, const T* b) {
  for (size_t t = 0; t < x.rows; ++t) {
    T* r = x.row(t);
    for (size_t c = 0; c < x.cols; ++c) r[c] += b[c];
  }
}

template <class T>
void colsum_into(const Tensor<T>& x, T* out) {
  for (size_t t = 0; t < x.rows; ++t) {
    const T* r = x.row(t);
    for (size_t c = 0; c < x.cols; ++c) out[c] += r[c];
  }
}

}  // namespace detail

template <class T>
struct LayerCache {
  Tensor<T> xin, ln1_out, xhat1;
  std::vector<T> rstd1;
  Tensor<T> q, k, v;              // q, k post-rotation when RoPE
  std::vector<Tensor<T>> probs;   // per head, n x n, zero above the diagonal
  Tensor<T> attn_concat;          // heads merged, before the output proj
  Tensor<T> x1, ln2_out, xhat2;
  std::vector<T> rstd2;
  Tensor<T> mlp_pre, mlp_act;
  Tensor<T> mlp_out_holder;  // x2, the block output
};

template <class T>
struct ForwardCache {
  Tensor<T> x0;
  std::vector<LayerCache<T>> layers;
  Tensor<T> xhatf;
  std::vector<T> rstdf;
  Tensor<T> lnf_out;
  Tensor<T> logits;
};

template <class T>
void check_sample(const ModelState<T>& m, const PositionedSample& sample) {
  const size_t n = sample.tokens.size();
  if (n == 0 || sample.positions.size() != n || sample.loss_mask.size() != n)
    throw DataError("forward: mismatched sample lengths");
  for (size_t j = 0; j < n; ++j) {
    if (sample.tokens[j] < 0 || sample.tokens[j] >= m.config.vocab_size)
      throw DataError("forward: token id out of range");
    if (sample.positions[j] < 0)
      throw DataError("forward: negative position id");
    if (m.config.pe_kind == PEKind::APE &&
        sample.positions[j] >= static_cast<int64_t>(m.ape_table().rows))
      throw PositionOutOfRange(
          "forward: position " + std::to_string(sample.positions[j]) +
          " >= APE table rows " + std::to_string(m.ape_table().rows));
  }
}

// Causal masking follows slot order; positional information comes from the
// sample's explicit position ids (APE adds table rows, RoPE rotates q/k,
// ALiBi biases logits by -m_h * (pos_q - pos_k)).
template <class T>
const Tensor<T>& forward(const ModelState<T>& m, const PositionedSample& sample,
                         ForwardCache<T>& cache,
                         AttentionCapture<T>* capture = nullptr) {
  check_sample(m, sample);
  const auto& cfg = m.config;
  const size_t n = sample.tokens.size();
  const size_t d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const size_t ff = cfg.d_ff, V = cfg.vocab_size;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  m.attn_buffer_watermark =
      std::max<uint64_t>(m.attn_buffer_watermark, n * n);

  cache.x0 = Tensor<T>(n, d);
  for (size_t t = 0; t < n; ++t) {
    const T* emb = m.params[m.tok_emb].row(sample.tokens[t]);
    T* x = cache.x0.row(t);
    std::copy(emb, emb + d, x);
    if (cfg.pe_kind == PEKind::APE) {
      const T* pe = m.ape_table().row(sample.positions[t]);
      for (size_t c = 0; c < d; ++c) x[c] += pe[c];
    }
  }

  if (capture) {
    capture->n_layers = cfg.n_layers;
    capture->n_heads = cfg.n_heads;
    capture->n = n;
    capture->probs.clear();
  }

  cache.layers.assign(cfg.n_layers, {});
  Tensor<T> scores(n, n);
  const Tensor<T>* x = &cache.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& lc = cache.layers[l];
    const auto& li = m.layers[l];
    lc.xin = *x;

    detail::ln_forward(lc.xin, m.params[li.ln1_g].v.data(),
                       m.params[li.ln1_b].v.data(), lc.ln1_out, lc.xhat1,
                       lc.rstd1);
    lc.q = Tensor<T>(n, d);
    lc.k = Tensor<T>(n, d);
    lc.v = Tensor<T>(n, d);
    gemm<T>(false, false, n, d, d, 1, lc.ln1_out.v.data(), d,
            m.params[li.wq].v.data(), d, 0, lc.q.v.data(), d);
    gemm<T>(false, false, n, d, d, 1, lc.ln1_out.v.data(), d,
            m.params[li.wk].v.data(), d, 0, lc.k.v.data(), d);
    gemm<T>(false, false, n, d, d, 1, lc.ln1_out.v.data(), d,
            m.params[li.wv].v.data(), d, 0, lc.v.v.data(), d);
    detail::add_bias(lc.q, m.params[li.bq].v.data());
    detail::add_bias(lc.k, m.params[li.bk].v.data());
    detail::add_bias(lc.v, m.params[li.bv].v.data());
    if (cfg.pe_kind == PEKind::RoPE) {
      for (size_t t = 0; t < n; ++t)
        for (size_t h = 0; h < H; ++h) {
          rope_rotate(lc.q.row(t) + h * hd, hd, sample.positions[t],
                      cfg.rope_theta_base);
          rope_rotate(lc.k.row(t) + h * hd, hd, sample.positions[t],
                      cfg.rope_theta_base);
        }
    }

    lc.probs.assign(H, Tensor<T>());
    lc.attn_concat = Tensor<T>(n, d);
    for (size_t h = 0; h < H; ++h) {
      gemm<T>(false, true, n, n, hd, scale, lc.q.v.data() + h * hd, d,
              lc.k.v.data() + h * hd, d, 0, scores.v.data(), n);
      if (cfg.pe_kind == PEKind::ALiBi) {
        const T slope = static_cast<T>(alibi_slope(h, H));
        for (size_t t = 0; t < n; ++t) {
          T* sr = scores.row(t);
          for (size_t s = 0; s <= t; ++s)
            sr[s] -= slope * static_cast<T>(sample.positions[t] -
                                            sample.positions[s]);
        }
      }
      auto& P = lc.probs[h];
      P = Tensor<T>(n, n);
      for (size_t t = 0; t < n; ++t) {
        const T* sr = scores.row(t);
        T* pr = P.row(t);
        T mx = sr[0];
        for (size_t s = 1; s <= t; ++s) mx = std::max(mx, sr[s]);
        T sum = 0;
        for (size_t s = 0; s <= t; ++s) {
          pr[s] = std::exp(sr[s] - mx);
          sum += pr[s];
        }
        for (size_t s = 0; s <= t; ++s) pr[s] /= sum;
      }
      gemm<T>(false, false, n, hd, n, 1, P.v.data(), n,
              lc.v.v.data() + h * hd, d, 0,
              lc.attn_concat.v.data() + h * hd, d);
      if (capture) capture->probs.push_back(P);
    }

    lc.x1 = lc.xin;
    gemm<T>(false, false, n, d, d, 1, lc.attn_concat.v.data(), d,
            m.params[li.wo].v.data(), d, 1, lc.x1.v.data(), d);
    detail::add_bias(lc.x1, m.params[li.bo].v.data());

    detail::ln_forward(lc.x1, m.params[li.ln2_g].v.data(),
                       m.params[li.ln2_b].v.data(), lc.ln2_out, lc.xhat2,
                       lc.rstd2);
    lc.mlp_pre = Tensor<T>(n, ff);
    gemm<T>(false, false, n, ff, d, 1, lc.ln2_out.v.data(), d,
            m.params[li.w1].v.data(), ff, 0, lc.mlp_pre.v.data(), ff);
    detail::add_bias(lc.mlp_pre, m.params[li.b1].v.data());
    lc.mlp_act = Tensor<T>(n, ff);
    for (size_t i = 0; i < lc.mlp_pre.size(); ++i)
      lc.mlp_act.v[i] = detail::gelu(lc.mlp_pre.v[i]);

    // x2 lives in the next layer's xin (or cache reuse below); store in x1's
    // successor via a fresh tensor.
    Tensor<T> x2 = lc.x1;
    gemm<T>(false, false, n, d, ff, 1, lc.mlp_act.v.data(), ff,
            m.params[li.w2].v.data(), d, 1, x2.v.data(), d);
    detail::add_bias(x2, m.params[li.b2].v.data());
    lc.mlp_out_holder = std::move(x2);
    x = &lc.mlp_out_holder;
  }

  detail::ln_forward(*x, m.params[m.lnf_g].v.data(),
                     m.params[m.lnf_b].v.data(), cache.lnf_out, cache.xhatf,
                     cache.rstdf);
  cache.logits = Tensor<T>(n, V);
  gemm<T>(false, false, n, V, d, 1, cache.lnf_out.v.data(), d,
          m.params[m.w_out].v.data(), V, 0, cache.logits.v.data(), V);
  detail::add_bias(cache.logits, m.params[m.b_out].v.data());
  return cache.logits;
}

// Slots j whose next-token target is valid: slot j+1 must be
// position-contiguous with slot j and loss-masked in.
inline std::vector<size_t> contributing_slots(const PositionedSample& s) {
  std::vector<size_t> out;
  for (size_t j = 0; j + 1 < s.size(); ++j)
    if (s.positions[j + 1] == s.positions[j] + 1 && s.loss_mask[j + 1])
      out.push_back(j);
  return out;
}

// Mean NLL over contributing slots.
template <class T>
double loss_from_logits(const Tensor<T>& logits,
                        const PositionedSample& sample) {
  if (logits.rows != sample.size())
    throw DataError("loss: logits/sample length mismatch");
  const auto slots = contributing_slots(sample);
  if (slots.empty())
    throw DataError("loss: degenerate sample with zero contributing slots");
  const size_t V = logits.cols;
  double total = 0;
  for (size_t j : slots) {
    const T* row = logits.row(j);
    double mx = row[0];
    for (size_t c = 1; c < V; ++c) mx = std::max<double>(mx, row[c]);
    double sum = 0;
    for (size_t c = 0; c < V; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(row[sample.tokens[j + 1]]);
  }
  return total / static_cast<double>(slots.size());
}

// Full reverse pass; accumulates parameter gradients into `grads` (which must
// share the model's layout) scaled by `grad_scale`, and returns the loss.
template <class T>
double backward(const ModelState<T>& m, const PositionedSample& sample,
                ParamStore<T>& grads, T grad_scale = T(1),
                ForwardCache<T>* cache_in = nullptr) {
  ForwardCache<T> own_cache;
  ForwardCache<T>& cache = cache_in ? *cache_in : own_cache;
  forward(m, sample, cache);
  const double loss = loss_from_logits(cache.logits, sample);

  const auto& cfg = m.config;
  const size_t n = sample.size();
  const size_t d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  const size_t ff = cfg.d_ff, V = cfg.vocab_size;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const auto slots = contributing_slots(sample);

  // d logits: (softmax - onehot) / |slots| on contributing rows.
  Tensor<T> dlogits(n, V);
  const T inv = grad_scale / static_cast<T>(slots.size());
  for (size_t j : slots) {
    const T* row = cache.logits.row(j);
    T* dr = dlogits.row(j);
    T mx = row[0];
    for (size_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (size_t c = 0; c < V; ++c) {
      dr[c] = std::exp(row[c] - mx);
      sum += dr[c];
    }
    for (size_t c = 0; c < V; ++c) dr[c] *= inv / sum;
    dr[sample.tokens[j + 1]] -= inv;
  }

  gemm<T>(true, false, d, V, n, 1, cache.lnf_out.v.data(), d,
          dlogits.v.data(), V, 1, grads[m.w_out].v.data(), V);
  detail::colsum_into(dlogits, grads[m.b_out].v.data());
  Tensor<T> dlnf(n, d);
  gemm<T>(false, true, n, d, V, 1, dlogits.v.data(), V,
          m.params[m.w_out].v.data(), V, 0, dlnf.v.data(), d);

  Tensor<T> dx(n, d);
  detail::ln_backward(dlnf, cache.xhatf, cache.rstdf,
                      m.params[m.lnf_g].v.data(), dx,
                      grads[m.lnf_g].v.data(), grads[m.lnf_b].v.data());

  Tensor<T> dP(n, n), dS(n, n);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    auto& lc = cache.layers[l];
    const auto& li = m.layers[l];

    // MLP block: dx is the gradient at x2 = x1 + mlp(ln2(x1)).
    Tensor<T> dact(n, ff);
    gemm<T>(true, false, ff, d, n, 1, lc.mlp_act.v.data(), ff, dx.v.data(), d,
            1, grads[li.w2].v.data(), d);
    detail::colsum_into(dx, grads[li.b2].v.data());
    gemm<T>(false, true, n, ff, d, 1, dx.v.data(), d,
            m.params[li.w2].v.data(), d, 0, dact.v.data(), ff);
    for (size_t i = 0; i < dact.size(); ++i)
      dact.v[i] *= detail::gelu_grad(lc.mlp_pre.v[i]);
    gemm<T>(true, false, d, ff, n, 1, lc.ln2_out.v.data(), d, dact.v.data(),
            ff, 1, grads[li.w1].v.data(), ff);
    detail::colsum_into(dact, grads[li.b1].v.data());
    Tensor<T> dln2(n, d);
    gemm<T>(false, true, n, d, ff, 1, dact.v.data(), ff,
            m.params[li.w1].v.data(), ff, 0, dln2.v.data(), d);
    detail::ln_backward(dln2, lc.xhat2, lc.rstd2, m.params[li.ln2_g].v.data(),
                        dx, grads[li.ln2_g].v.data(),
                        grads[li.ln2_b].v.data());

    // Attention block: dx is now the gradient at x1 = xin + attn(ln1(xin)).
    gemm<T>(true, false, d, d, n, 1, lc.attn_concat.v.data(), d, dx.v.data(),
            d, 1, grads[li.wo].v.data(), d);
    detail::colsum_into(dx, grads[li.bo].v.data());
    Tensor<T> dO(n, d);
    gemm<T>(false, true, n, d, d, 1, dx.v.data(), d, m.params[li.wo].v.data(),
            d, 0, dO.v.data(), d);

    Tensor<T> dq(n, d), dk(n, d), dv(n, d);
    for (size_t h = 0; h < H; ++h) {
      const auto& P = lc.probs[h];
      gemm<T>(false, true, n, n, hd, 1, dO.v.data() + h * hd, d,
              lc.v.v.data() + h * hd, d, 0, dP.v.data(), n);
      gemm<T>(true, false, n, hd, n, 1, P.v.data(), n, dO.v.data() + h * hd,
              d, 0, dv.v.data() + h * hd, d);
      for (size_t t = 0; t < n; ++t) {
        const T* pr = P.row(t);
        const T* dpr = dP.row(t);
        T* dsr = dS.row(t);
        T dot = 0;
        for (size_t s = 0; s <= t; ++s) dot += pr[s] * dpr[s];
        for (size_t s = 0; s <= t; ++s) dsr[s] = pr[s] * (dpr[s] - dot);
        for (size_t s = t + 1; s < n; ++s) dsr[s] = 0;
      }
      gemm<T>(false, false, n, hd, n, scale, dS.v.data(), n,
              lc.k.v.data() + h * hd, d, 0, dq.v.data() + h * hd, d);
      gemm<T>(true, false, n, hd, n, scale, dS.v.data(), n,
              lc.q.v.data() + h * hd, d, 0, dk.v.data() + h * hd, d);
    }
    if (cfg.pe_kind == PEKind::RoPE) {
      for (size_t t = 0; t < n; ++t)
        for (size_t h = 0; h < H; ++h) {
          rope_rotate(dq.row(t) + h * hd, hd, -sample.positions[t],
                      cfg.rope_theta_base);
          rope_rotate(dk.row(t) + h * hd, hd, -sample.positions[t],
                      cfg.rope_theta_base);
        }
    }

    gemm<T>(true, false, d, d, n, 1, lc.ln1_out.v.data(), d, dq.v.data(), d,
            1, grads[li.wq].v.data(), d);
    gemm<T>(true, false, d, d, n, 1, lc.ln1_out.v.data(), d, dk.v.data(), d,
            1, grads[li.wk].v.data(), d);
    gemm<T>(true, false, d, d, n, 1, lc.ln1_out.v.data(), d, dv.v.data(), d,
            1, grads[li.wv].v.data(), d);
    detail::colsum_into(dq, grads[li.bq].v.data());
    detail::colsum_into(dk, grads[li.bk].v.data());
    detail::colsum_into(dv, grads[li.bv].v.data());
    Tensor<T> dln1(n, d);
    gemm<T>(false, true, n, d, d, 1, dq.v.data(), d, m.params[li.wq].v.data(),
            d, 0, dln1.v.data(), d);
    gemm<T>(false, true, n, d, d, 1, dk.v.data(), d, m.params[li.wk].v.data(),
            d, 1, dln1.v.data(), d);
    gemm<T>(false, true, n, d, d, 1, dv.v.data(), d, m.params[li.wv].v.data(),
            d, 1, dln1.v.data(), d);
    detail::ln_backward(dln1, lc.xhat1, lc.rstd1, m.params[li.ln1_g].v.data(),
                        dx, grads[li.ln1_g].v.data(),
                        grads[li.ln1_b].v.data());
  }

  // Embedding scatter.
  for (size_t t = 0; t < n; ++t) {
    const T* dr = dx.row(t);
    T* ge = grads[m.tok_emb].row(sample.tokens[t]);
    for (size_t c = 0; c < d; ++c) ge[c] += dr[c];
    if (cfg.pe_kind == PEKind::APE) {
      T* gp = grads[m.pos_emb].row(sample.positions[t]);
      for (size_t c = 0; c < d; ++c) gp[c] += dr[c];
    }
  }
  return loss;
}

}  // namespace ctxtend
