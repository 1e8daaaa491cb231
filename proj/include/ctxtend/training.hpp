#pragma once

#include <chrono>
#include <fstream>
#include <limits>
#include <ostream>

#include <json.hpp>

#include "ctxtend/common.hpp"
#include "ctxtend/corpus.hpp"
#include "ctxtend/model.hpp"
#include "ctxtend/optimizer.hpp"
#include "ctxtend/sampler.hpp"

namespace ctxtend {

struct RunConfig {
  SamplerConfig sampler;
  OptimizerConfig optimizer;
  size_t batch_size = 16;
  uint64_t token_budget = std::numeric_limits<uint64_t>::max();
  uint64_t data_seed = 1;
  uint64_t init_seed = 1;
  uint64_t checkpoint_every = 0;  // steps; 0 = final checkpoint only

  void validate() const {
    if (batch_size < 1) throw ConfigError("run config: batch_size must be >= 1");
    if (token_budget == 0) throw ConfigError("run config: token_budget must be > 0");
  }
};

// Compute-equivalent epoch count: one epoch per L_t of extension, so every
// experiment at the same L_e feeds the same number of tokens forward.
inline uint64_t epochs_for(uint64_t L_e, uint64_t L_t) {
  if (L_t == 0 || L_e % L_t != 0)
    throw ConfigError("epochs_for: L_e must be a positive multiple of L_t");
  return L_e / L_t;
}

struct TrainCounters {
  uint64_t epoch = 0;        // current epoch index
  uint64_t entry_pos = 0;    // entries consumed within the current epoch
  uint64_t step = 0;         // optimizer steps taken
  uint64_t tokens_seen = 0;  // tokens fed forward
  uint64_t contributing_tokens = 0;
};

struct Checkpoint {
  ModelState<float> model;
  RunConfig run;
  AdamWState<float> opt;
  TrainCounters counters;
  std::string label;  // "ootb", "chunk-0.25", ...
  nlohmann::json meta = nlohmann::json::object();
};

// ---------------------------------------------------------------------------
// Config <-> JSON used both by checkpoints and the CLI config.

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"L_t", c.L_t},
          {"pe_kind", pe_kind_name(c.pe_kind)},
          {"dropout", c.dropout},
          {"rope_theta_base", c.rope_theta_base}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.L_t = j.at("L_t").get<int>();
  c.pe_kind = pe_kind_from(j.at("pe_kind").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.rope_theta_base = j.at("rope_theta_base").get<double>();
  return c;
}

inline nlohmann::json sampler_config_to_json(const SamplerConfig& c) {
  return {{"method", sampler_method_name(c.method)}, {"alpha", c.alpha},
          {"L_t", c.L_t}, {"L_e", c.L_e}, {"seed", c.seed}};
}

inline SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.method = sampler_method_from(j.at("method").get<std::string>());
  c.alpha = j.at("alpha").get<double>();
  c.L_t = j.at("L_t").get<size_t>();
  c.L_e = j.at("L_e").get<size_t>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  return {{"sampler", sampler_config_to_json(c.sampler)},
          {"optimizer",
           {{"learning_rate", c.optimizer.learning_rate},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay},
            {"clip_norm", c.optimizer.clip_norm},
            {"warmup_steps", c.optimizer.warmup_steps}}},
          {"batch_size", c.batch_size},
          {"token_budget", c.token_budget},
          {"seeds", {{"data", c.data_seed}, {"init", c.init_seed},
                     {"sampler", c.sampler.seed}}},
          {"checkpoint_every", c.checkpoint_every}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.sampler = sampler_config_from_json(j.at("sampler"));
  const auto& o = j.at("optimizer");
  c.optimizer.learning_rate = o.at("learning_rate").get<double>();
  c.optimizer.beta1 = o.at("beta1").get<double>();
  c.optimizer.beta2 = o.at("beta2").get<double>();
  c.optimizer.eps = o.at("eps").get<double>();
  c.optimizer.weight_decay = o.at("weight_decay").get<double>();
  c.optimizer.clip_norm = o.at("clip_norm").get<double>();
  c.optimizer.warmup_steps = o.at("warmup_steps").get<int>();
  c.batch_size = j.at("batch_size").get<size_t>();
  c.token_budget = j.at("token_budget").get<uint64_t>();
  c.data_seed = j.at("seeds").at("data").get<uint64_t>();
  c.init_seed = j.at("seeds").at("init").get<uint64_t>();
  c.sampler.seed = j.at("seeds").at("sampler").get<uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "CTXC", version, JSON blob, named f32 tensors.

constexpr char kCheckpointMagic[4] = {'C', 'T', 'X', 'C'};
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_tensor(std::ostream& out, const std::string& name,
                         const Tensor<float>& t) {
  uint32_t nl = static_cast<uint32_t>(name.size());
  uint64_t r = t.rows, c = t.cols;
  out.write(reinterpret_cast<const char*>(&nl), 4);
  out.write(name.data(), nl);
  out.write(reinterpret_cast<const char*>(&r), 8);
  out.write(reinterpret_cast<const char*>(&c), 8);
  out.write(reinterpret_cast<const char*>(t.v.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
}

inline std::pair<std::string, Tensor<float>> read_tensor(std::istream& in) {
  uint32_t nl = 0;
  in.read(reinterpret_cast<char*>(&nl), 4);
  std::string name(nl, '\0');
  in.read(name.data(), nl);
  uint64_t r = 0, c = 0;
  in.read(reinterpret_cast<char*>(&r), 8);
  in.read(reinterpret_cast<char*>(&c), 8);
  Tensor<float> t(r, c);
  in.read(reinterpret_cast<char*>(t.v.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!in) throw DataError("checkpoint: truncated tensor " + name);
  return {std::move(name), std::move(t)};
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  nlohmann::json j = {
      {"model_config", model_config_to_json(ck.model.config)},
      {"run_config", run_config_to_json(ck.run)},
      {"counters",
       {{"epoch", ck.counters.epoch}, {"entry_pos", ck.counters.entry_pos},
        {"step", ck.counters.step}, {"tokens_seen", ck.counters.tokens_seen},
        {"contributing_tokens", ck.counters.contributing_tokens}}},
      {"label", ck.label},
      {"ape_rows", ck.model.config.pe_kind == PEKind::APE
                       ? ck.model.ape_table().rows
                       : 0},
      {"meta", ck.meta}};
  const std::string blob = j.dump();
  uint32_t version = kCheckpointVersion;
  uint64_t blob_len = blob.size();
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&blob_len), 8);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  uint64_t n_tensors = ck.model.params.count() * 3;
  out.write(reinterpret_cast<const char*>(&n_tensors), 8);
  for (size_t i = 0; i < ck.model.params.count(); ++i) {
    const auto& name = ck.model.params.names[i];
    detail::write_tensor(out, name, ck.model.params[i]);
    detail::write_tensor(out, "opt.m:" + name, ck.opt.m[i]);
    detail::write_tensor(out, "opt.v:" + name, ck.opt.v[i]);
  }
  if (!out) throw DataError("save_checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  char magic[4];
  uint32_t version = 0;
  uint64_t blob_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&blob_len), 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("load_checkpoint: bad magic in " + path);
  if (version != kCheckpointVersion)
    throw DataError("load_checkpoint: unsupported version");
  std::string blob(blob_len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_len));
  nlohmann::json j = nlohmann::json::parse(blob);

  Checkpoint ck;
  ck.model.config = model_config_from_json(j.at("model_config"));
  ck.run = run_config_from_json(j.at("run_config"));
  ck.counters.epoch = j.at("counters").at("epoch").get<uint64_t>();
  ck.counters.entry_pos = j.at("counters").at("entry_pos").get<uint64_t>();
  ck.counters.step = j.at("counters").at("step").get<uint64_t>();
  ck.counters.tokens_seen = j.at("counters").at("tokens_seen").get<uint64_t>();
  ck.counters.contributing_tokens =
      j.at("counters").at("contributing_tokens").get<uint64_t>();
  ck.label = j.at("label").get<std::string>();
  ck.meta = j.at("meta");

  uint64_t n_tensors = 0;
  in.read(reinterpret_cast<char*>(&n_tensors), 8);
  for (uint64_t i = 0; i < n_tensors; ++i) {
    auto [name, t] = detail::read_tensor(in);
    if (name.starts_with("opt.m:")) {
      ck.opt.m.names.push_back(name.substr(6));
      ck.opt.m.tensors.push_back(std::move(t));
    } else if (name.starts_with("opt.v:")) {
      ck.opt.v.names.push_back(name.substr(6));
      ck.opt.v.tensors.push_back(std::move(t));
    } else {
      ck.model.params.names.push_back(std::move(name));
      ck.model.params.tensors.push_back(std::move(t));
    }
  }
  ck.model.step = ck.counters.step;
  bind_indices(ck.model);
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::ostream* log = nullptr;           // JSONL, one object per step
  std::string checkpoint_path;           // cadence checkpoints, if any
  uint64_t total_epochs = 1;
};

// Runs (or resumes, via ck.counters) epoch-wise training of ck.model with
// ck.run over the manifest. Each entry is reduced to a training sample by the
// configured sampler; gradients are averaged over the batch.
inline void run_training(Checkpoint& ck, const CorpusManifest& manifest,
                         const TokenStore& store, const TrainOptions& opt) {
  ck.run.validate();
  ck.run.sampler.validate();
  if (manifest.sequence_length != ck.run.sampler.L_e)
    throw ConfigError("run_training: manifest sequence_length " +
                      std::to_string(manifest.sequence_length) +
                      " != sampler L_e " +
                      std::to_string(ck.run.sampler.L_e));
  auto& model = ck.model;
  auto grads = model.params.zeros_like();
  ForwardCache<float> cache;
  const auto t_start = std::chrono::steady_clock::now();

  for (uint64_t epoch = ck.counters.epoch; epoch < opt.total_epochs; ++epoch) {
    ck.counters.epoch = epoch;
    auto order = epoch_order(manifest, ck.run.data_seed, epoch);
    uint64_t pos = (epoch == ck.counters.epoch) ? ck.counters.entry_pos : 0;
    while (pos < order.size()) {
      const size_t bsz = std::min<size_t>(ck.run.batch_size,
                                          order.size() - pos);
      grads.zero_all();
      double batch_loss = 0;
      size_t with_loss = 0;
      for (size_t b = 0; b < bsz; ++b) {
        const size_t idx = order[pos + b];
        auto span = manifest.sequence(store, idx);
        TokenSequence seq{manifest.docs[manifest.entries[idx].doc_index].doc_id,
                          manifest.entries[idx].offset,
                          {span.begin(), span.end()}};
        auto sample = make_sample(seq, ck.run.sampler, epoch, idx);
        const size_t contributing = contributing_slots(sample).size();
        if (contributing == 0) {
          // a randompos draw can land with no adjacent position pair; it
          // still costs a forward pass but defines no loss
          forward(model, sample, cache);
        } else {
          batch_loss += backward(model, sample, grads,
                                 1.0f / static_cast<float>(bsz), &cache);
          ++with_loss;
        }
        ck.counters.tokens_seen += sample.size();
        ck.counters.contributing_tokens += contributing;
      }
      batch_loss /= static_cast<double>(std::max<size_t>(with_loss, 1));
      const double gnorm = apply_optimizer(model, grads, ck.run.optimizer,
                                           ck.opt);
      pos += bsz;
      ck.counters.entry_pos = pos;
      ck.counters.step += 1;
      if (opt.log) {
        const double wall_ms =
            std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - t_start)
                .count();
        *opt.log << nlohmann::json({{"step", ck.counters.step},
                                    {"epoch", epoch},
                                    {"tokens_seen", ck.counters.tokens_seen},
                                    {"loss", batch_loss},
                                    {"grad_norm", gnorm},
                                    {"wall_ms", wall_ms}})
                        .dump()
                 << "\n";
      }
      if (ck.run.checkpoint_every > 0 && !opt.checkpoint_path.empty() &&
          ck.counters.step % ck.run.checkpoint_every == 0)
        save_checkpoint(ck, opt.checkpoint_path);
      if (ck.counters.tokens_seen >= ck.run.token_budget) return;
    }
    ck.counters.entry_pos = 0;
    ck.counters.epoch = epoch + 1;
  }
}

// One full epoch of continual pre-training at L_t on whole sequences; the
// result is the "out-of-the-box" checkpoint every extension run starts from.
inline Checkpoint domain_adapt(ModelState<float> model,
                               const CorpusManifest& manifest,
                               const TokenStore& store, RunConfig run,
                               std::ostream* log = nullptr) {
  if (manifest.sequence_length != static_cast<size_t>(model.config.L_t))
    throw ConfigError("domain_adapt: manifest sequence_length must equal L_t");
  run.sampler.method = SamplerMethod::Full;
  run.sampler.alpha = 1.0;
  run.sampler.L_t = model.config.L_t;
  run.sampler.L_e = model.config.L_t;
  Checkpoint ck;
  ck.model = std::move(model);
  ck.run = run;
  ck.opt = AdamWState<float>::init_for(ck.model.params);
  ck.label = "ootb";
  TrainOptions opt;
  opt.log = log;
  opt.total_epochs = 1;
  run_training(ck, manifest, store, opt);
  return ck;
}

// Segmented (or full) extension training from an OOTB checkpoint. Segmented
// methods run L_e/L_t epochs of L_t-long samples; `full` trains directly on
// the L_e sequences for one epoch, so token totals match across methods.
inline Checkpoint extend_train(const Checkpoint& ootb,
                               const CorpusManifest& manifest,
                               const TokenStore& store,
                               const SamplerConfig& method, RunConfig run,
                               std::ostream* log = nullptr) {
  SamplerConfig sampler = method;
  sampler.L_t = ootb.model.config.L_t;
  sampler.L_e = manifest.sequence_length;
  if (sampler.method == SamplerMethod::Full) {
    // full trains on the entire L_e sequence; samplers below reduce to L_t
    sampler.alpha = 1.0;
  }
  sampler.validate();
  run.sampler = sampler;

  Checkpoint ck;
  ck.model = ootb.model;
  ck.opt = ootb.opt;
  ck.run = run;
  ck.counters.tokens_seen = 0;
  ck.counters.contributing_tokens = 0;
  ck.counters.step = ootb.counters.step;
  ck.model.step = ootb.model.step;
  ck.label = sampler_method_name(sampler.method);
  if (sampler.method == SamplerMethod::Chunk ||
      sampler.method == SamplerMethod::Prefix) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-%g", sampler.alpha);
    ck.label += buf;
  }
  TrainOptions opt;
  opt.log = log;
  opt.total_epochs =
      sampler.method == SamplerMethod::Full
          ? 1
          : epochs_for(sampler.L_e, sampler.L_t);
  ck.model.attn_buffer_watermark = 0;  // fresh accounting for this run
  run_training(ck, manifest, store, opt);
  return ck;
}

}  // namespace ctxtend
