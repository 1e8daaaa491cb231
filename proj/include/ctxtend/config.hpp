#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "ctxtend/common.hpp"
#include "ctxtend/training.hpp"

namespace ctxtend {

// Full run configuration. Every field has a default except paths.corpus_dir;
// unknown keys anywhere in the JSON are rejected to guard against typos.
struct CliConfig {
  std::string corpus_dir;        // required
  std::string workspace = "workspace";

  ModelConfig model;
  RunConfig run;
  int extension_factor = 4;      // beta = L_e / L_t for extend runs

  std::vector<int> eval_lengths = {1, 2, 4};  // multiples of L_t
  int histogram_bins = 20;
  size_t eval_max_sequences = 64;

  double split_fraction = 0.7;
  uint64_t ingest_seed = 1;
  uint64_t max_train_tokens = 0;  // 0 = no cap; caps manifest size per split
  uint64_t max_test_tokens = 0;

  std::string digest;  // of the fully-defaulted config JSON

  size_t L_e() const {
    return static_cast<size_t>(model.L_t) * extension_factor;
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j,
                           const std::set<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw ConfigError("config: unknown key \"" + key + "\" in " + where);
  }
}

}  // namespace detail

inline nlohmann::json cli_config_to_json(const CliConfig& c) {
  nlohmann::json run = run_config_to_json(c.run);
  run["method"] = {{"method", sampler_method_name(c.run.sampler.method)},
                   {"alpha", c.run.sampler.alpha}};
  run.erase("sampler");
  run["extension_factor"] = c.extension_factor;
  return {{"paths", {{"corpus_dir", c.corpus_dir}, {"workspace", c.workspace}}},
          {"model", model_config_to_json(c.model)},
          {"run", run},
          {"eval",
           {{"lengths", c.eval_lengths},
            {"histogram_bins", c.histogram_bins},
            {"max_sequences", c.eval_max_sequences}}},
          {"corpus",
           {{"split_fraction", c.split_fraction},
            {"ingest_seed", c.ingest_seed},
            {"max_train_tokens", c.max_train_tokens},
            {"max_test_tokens", c.max_test_tokens}}}};
}

inline CliConfig cli_config_from_json(const nlohmann::json& j) {
  CliConfig c;
  detail::reject_unknown(j, {"paths", "model", "run", "eval", "corpus"},
                         "top level");
  const auto& paths = j.at("paths");
  detail::reject_unknown(paths, {"corpus_dir", "workspace"}, "paths");
  c.corpus_dir = paths.at("corpus_dir").get<std::string>();
  if (paths.contains("workspace"))
    c.workspace = paths.at("workspace").get<std::string>();

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m,
                           {"vocab_size", "d_model", "n_layers", "n_heads",
                            "d_ff", "L_t", "pe_kind", "dropout",
                            "rope_theta_base"},
                           "model");
    if (m.contains("vocab_size")) c.model.vocab_size = m.at("vocab_size");
    if (m.contains("d_model")) c.model.d_model = m.at("d_model");
    if (m.contains("n_layers")) c.model.n_layers = m.at("n_layers");
    if (m.contains("n_heads")) c.model.n_heads = m.at("n_heads");
    if (m.contains("d_ff")) c.model.d_ff = m.at("d_ff");
    if (m.contains("L_t")) c.model.L_t = m.at("L_t");
    if (m.contains("pe_kind"))
      c.model.pe_kind = pe_kind_from(m.at("pe_kind").get<std::string>());
    if (m.contains("dropout")) c.model.dropout = m.at("dropout");
    if (m.contains("rope_theta_base"))
      c.model.rope_theta_base = m.at("rope_theta_base");
  }

  if (j.contains("run")) {
    const auto& r = j.at("run");
    detail::reject_unknown(r,
                           {"method", "optimizer", "batch_size",
                            "token_budget", "seeds", "checkpoint_every",
                            "extension_factor"},
                           "run");
    if (r.contains("method")) {
      detail::reject_unknown(r.at("method"), {"method", "alpha"},
                             "run.method");
      if (r.at("method").contains("method"))
        c.run.sampler.method =
            sampler_method_from(r.at("method").at("method"));
      if (r.at("method").contains("alpha"))
        c.run.sampler.alpha = r.at("method").at("alpha");
    }
    if (r.contains("optimizer")) {
      const auto& o = r.at("optimizer");
      detail::reject_unknown(o,
                             {"learning_rate", "beta1", "beta2", "eps",
                              "weight_decay", "clip_norm", "warmup_steps"},
                             "run.optimizer");
      if (o.contains("learning_rate"))
        c.run.optimizer.learning_rate = o.at("learning_rate");
      if (o.contains("beta1")) c.run.optimizer.beta1 = o.at("beta1");
      if (o.contains("beta2")) c.run.optimizer.beta2 = o.at("beta2");
      if (o.contains("eps")) c.run.optimizer.eps = o.at("eps");
      if (o.contains("weight_decay"))
        c.run.optimizer.weight_decay = o.at("weight_decay");
      if (o.contains("clip_norm")) c.run.optimizer.clip_norm = o.at("clip_norm");
      if (o.contains("warmup_steps"))
        c.run.optimizer.warmup_steps = o.at("warmup_steps");
    }
    if (r.contains("batch_size")) c.run.batch_size = r.at("batch_size");
    if (r.contains("token_budget")) c.run.token_budget = r.at("token_budget");
    if (r.contains("seeds")) {
      detail::reject_unknown(r.at("seeds"), {"data", "init", "sampler"},
                             "run.seeds");
      if (r.at("seeds").contains("data")) c.run.data_seed = r.at("seeds").at("data");
      if (r.at("seeds").contains("init")) c.run.init_seed = r.at("seeds").at("init");
      if (r.at("seeds").contains("sampler"))
        c.run.sampler.seed = r.at("seeds").at("sampler");
    }
    if (r.contains("checkpoint_every"))
      c.run.checkpoint_every = r.at("checkpoint_every");
    if (r.contains("extension_factor"))
      c.extension_factor = r.at("extension_factor");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, {"lengths", "histogram_bins", "max_sequences"},
                           "eval");
    if (e.contains("lengths"))
      c.eval_lengths = e.at("lengths").get<std::vector<int>>();
    if (e.contains("histogram_bins")) c.histogram_bins = e.at("histogram_bins");
    if (e.contains("max_sequences"))
      c.eval_max_sequences = e.at("max_sequences");
  }

  if (j.contains("corpus")) {
    const auto& g = j.at("corpus");
    detail::reject_unknown(g,
                           {"split_fraction", "ingest_seed",
                            "max_train_tokens", "max_test_tokens"},
                           "corpus");
    if (g.contains("split_fraction")) c.split_fraction = g.at("split_fraction");
    if (g.contains("ingest_seed")) c.ingest_seed = g.at("ingest_seed");
    if (g.contains("max_train_tokens"))
      c.max_train_tokens = g.at("max_train_tokens");
    if (g.contains("max_test_tokens"))
      c.max_test_tokens = g.at("max_test_tokens");
  }

  c.model.validate();
  c.run.sampler.L_t = c.model.L_t;
  c.run.sampler.L_e = c.L_e();
  const std::string canonical = cli_config_to_json(c).dump();
  c.digest = digest_hex(canonical.data(), canonical.size());
  return c;
}

inline CliConfig load_cli_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return cli_config_from_json(j);
}

}  // namespace ctxtend
