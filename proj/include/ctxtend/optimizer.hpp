#pragma once

#include <cmath>

#include "ctxtend/common.hpp"
#include "ctxtend/model.hpp"

namespace ctxtend {

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int warmup_steps = 100;  // linear warmup, then constant

  double lr_at(uint64_t step) const {
    if (warmup_steps <= 0 || step >= static_cast<uint64_t>(warmup_steps))
      return learning_rate;
    return learning_rate * static_cast<double>(step + 1) / warmup_steps;
  }
};

template <class T>
struct AdamWState {
  ParamStore<T> m;
  ParamStore<T> v;

  static AdamWState init_for(const ParamStore<T>& params) {
    return {params.zeros_like(), params.zeros_like()};
  }
};

template <class T>
double global_grad_norm(const ParamStore<T>& grads) {
  double sq = 0;
  for (const auto& t : grads.tensors)
    for (T x : t.v) sq += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(sq);
}

template <class T>
void assert_finite(const ParamStore<T>& store, const char* what) {
  for (size_t i = 0; i < store.count(); ++i)
    for (T x : store[i].v)
      if (!std::isfinite(static_cast<double>(x)))
        throw TrainingFault(std::string(what) + " non-finite in tensor " +
                            store.names[i]);
}

// One AdamW step: global-norm clip first, then bias-corrected moment update
// with decoupled weight decay. Increments the model's step counter.
// Returns the pre-clip gradient norm.
template <class T>
double apply_optimizer(ModelState<T>& model, ParamStore<T>& grads,
                       const OptimizerConfig& cfg, AdamWState<T>& opt,
                       double lr_override = -1.0) {
  assert_finite(grads, "gradient");
  const double norm = global_grad_norm(grads);
  if (cfg.clip_norm > 0 && norm > cfg.clip_norm) {
    const T s = static_cast<T>(cfg.clip_norm / norm);
    for (auto& t : grads.tensors)
      for (T& x : t.v) x *= s;
  }
  const uint64_t step = model.step;  // 0-based; bias correction uses step+1
  const double lr = lr_override >= 0 ? lr_override : cfg.lr_at(step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
  for (size_t i = 0; i < grads.count(); ++i) {
    auto& p = model.params[i].v;
    auto& g = grads[i].v;
    auto& mo = opt.m[i].v;
    auto& vo = opt.v[i].v;
    // biases and layernorm vectors (1 x d tensors) are not decayed
    const double wd = model.params[i].rows > 1 ? cfg.weight_decay : 0.0;
    for (size_t j = 0; j < p.size(); ++j) {
      mo[j] = static_cast<T>(cfg.beta1 * mo[j] + (1 - cfg.beta1) * g[j]);
      vo[j] = static_cast<T>(cfg.beta2 * vo[j] +
                             (1 - cfg.beta2) * static_cast<double>(g[j]) * g[j]);
      const double mhat = mo[j] / bc1;
      const double vhat = vo[j] / bc2;
      double upd = lr * mhat / (std::sqrt(vhat) + cfg.eps);
      upd += lr * wd * p[j];
      p[j] = static_cast<T>(p[j] - upd);
      if (!std::isfinite(static_cast<double>(p[j])))
        throw TrainingFault("optimizer produced non-finite value in " +
                            model.params.names[i]);
    }
  }
  model.step += 1;
  return norm;
}

}  // namespace ctxtend
