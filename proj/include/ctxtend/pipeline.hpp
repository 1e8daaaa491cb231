#pragma once

#include <filesystem>
#include <fstream>
#include <set>

#include "ctxtend/config.hpp"
#include "ctxtend/corpus.hpp"
#include "ctxtend/evaluation.hpp"
#include "ctxtend/training.hpp"

namespace ctxtend {

namespace fs = std::filesystem;

struct Workspace {
  fs::path root;

  static Workspace open(const std::string& dir) {
    Workspace ws{fs::path(dir)};
    fs::create_directories(ws.root / "manifests");
    fs::create_directories(ws.root / "checkpoints");
    fs::create_directories(ws.root / "reports");
    return ws;
  }

  std::string token_path(const std::string& split) const {
    return (root / "manifests" / ("tokens." + split + ".bin")).string();
  }
  std::string manifest_path(const std::string& split, size_t L) const {
    return (root / "manifests" /
            (split + ".L" + std::to_string(L) + ".json"))
        .string();
  }
  std::string checkpoint_path(const std::string& label) const {
    return (root / "checkpoints" / (label + ".ckpt")).string();
  }
  std::string report_path(const std::string& name) const {
    return (root / "reports" / name).string();
  }
};

// Advisory lock: concurrent runs must target distinct workspaces.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const Workspace& ws)
      : path_(ws.root / ".lock") {
    if (fs::exists(path_))
      throw DataError("workspace is locked by another run (" +
                      path_.string() + "); remove the lock if stale");
    std::ofstream(path_) << "locked\n";
  }
  ~WorkspaceLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  WorkspaceLock(const WorkspaceLock&) = delete;

 private:
  fs::path path_;
};

namespace detail {

inline std::vector<Document> cap_docs(std::vector<Document> docs,
                                      uint64_t max_tokens) {
  if (max_tokens == 0) return docs;
  std::vector<Document> out;
  uint64_t total = 0;
  for (auto& d : docs) {
    if (total >= max_tokens) break;
    total += d.tokens.size();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace detail

// Tokenize the corpus directory, split train/test, write the flat token
// files, and build manifests at every length the configured runs need.
inline void pipeline_ingest(const CliConfig& cfg, const Workspace& ws) {
  std::vector<std::string> files;
  if (!fs::is_directory(cfg.corpus_dir))
    throw DataError("corpus_dir is not a directory: " + cfg.corpus_dir);
  for (const auto& e : fs::directory_iterator(cfg.corpus_dir))
    if (e.is_regular_file()) files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no files in corpus_dir " + cfg.corpus_dir);

  TokenizerSpec spec;
  auto result = ingest(files, spec, cfg.split_fraction, cfg.ingest_seed);
  result.train = detail::cap_docs(std::move(result.train), cfg.max_train_tokens);
  result.test = detail::cap_docs(std::move(result.test), cfg.max_test_tokens);

  const size_t L_t = cfg.model.L_t;
  std::set<size_t> train_lengths = {L_t, cfg.L_e()};
  std::set<size_t> test_lengths = {cfg.L_e()};
  for (int k : cfg.eval_lengths) test_lengths.insert(k * L_t);

  write_token_file(ws.token_path("train"), result.train, spec);
  write_token_file(ws.token_path("test"), result.test, spec);
  for (size_t L : train_lengths) {
    auto m = build_manifest(result.train, L, "train", "tokens.train.bin",
                            spec, cfg.ingest_seed, cfg.split_fraction);
    save_manifest(m, ws.manifest_path("train", L));
  }
  for (size_t L : test_lengths) {
    auto m = build_manifest(result.test, L, "test", "tokens.test.bin", spec,
                            cfg.ingest_seed, cfg.split_fraction);
    save_manifest(m, ws.manifest_path("test", L));
  }
}

struct SplitView {
  CorpusManifest manifest;
  TokenStore store;
};

inline SplitView load_split(const Workspace& ws, const std::string& split,
                            size_t L) {
  SplitView v;
  v.manifest = load_manifest(ws.manifest_path(split, L));
  v.store = TokenStore::load(
      (ws.root / "manifests" / v.manifest.token_file).string());
  return v;
}

inline std::string pe_label(const CliConfig& cfg) {
  return pe_kind_name(cfg.model.pe_kind);
}

// Domain adaptation from random init; produces the OOTB checkpoint.
inline std::string pipeline_adapt(const CliConfig& cfg, const Workspace& ws) {
  auto split = load_split(ws, "train", cfg.model.L_t);
  auto model = init_model<float>(cfg.model, cfg.run.init_seed);
  std::ofstream log(ws.report_path("train-ootb-" + pe_label(cfg) + ".jsonl"));
  auto ck = domain_adapt(std::move(model), split.manifest, split.store,
                         cfg.run, &log);
  ck.meta["config_digest"] = cfg.digest;
  ck.meta["train_digest"] = split.manifest.digest;
  ck.meta["attn_buffer_watermark"] = ck.model.attn_buffer_watermark;
  const std::string path = ws.checkpoint_path("ootb-" + pe_label(cfg));
  save_checkpoint(ck, path);
  return path;
}

// Extension training from an OOTB checkpoint; interpolates the APE table
// first when the model is absolute-positional.
inline std::string pipeline_extend(const CliConfig& cfg, const Workspace& ws,
                                   const std::string& from_path) {
  auto ootb = load_checkpoint(from_path);
  if (ootb.model.config.pe_kind == PEKind::APE &&
      ootb.model.ape_table().rows < cfg.L_e()) {
    const size_t rows = ootb.model.ape_table().rows;
    if (cfg.L_e() % rows != 0)
      throw ConfigError("extend: L_e is not an integral multiple of the APE "
                        "table rows");
    ootb.model.ape_table() = interpolate_ape(
        ootb.model.ape_table(), static_cast<int64_t>(cfg.L_e() / rows));
    // the extended rows start with fresh optimizer moments
    const size_t pe = ootb.model.pos_emb;
    ootb.opt.m[pe] = Tensor<float>(ootb.model.ape_table().rows,
                                   ootb.model.ape_table().cols);
    ootb.opt.v[pe] = Tensor<float>(ootb.model.ape_table().rows,
                                   ootb.model.ape_table().cols);
  }
  auto split = load_split(ws, "train", cfg.L_e());
  SamplerConfig method = cfg.run.sampler;
  RunConfig run = cfg.run;
  std::string label = sampler_method_name(method.method);
  if (method.method == SamplerMethod::Chunk ||
      method.method == SamplerMethod::Prefix) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-%g", method.alpha);
    label += buf;
  }
  std::ofstream log(
      ws.report_path("train-" + label + "-" + pe_label(cfg) + ".jsonl"));
  auto ck = extend_train(ootb, split.manifest, split.store, method, run, &log);
  ck.meta["config_digest"] = cfg.digest;
  ck.meta["train_digest"] = split.manifest.digest;
  ck.meta["attn_buffer_watermark"] = ck.model.attn_buffer_watermark;
  const std::string path =
      ws.checkpoint_path(label + "-" + pe_label(cfg));
  save_checkpoint(ck, path);
  return path;
}

// Extrapolation sweep for a checkpoint over the configured eval lengths.
inline EvalReport pipeline_eval(const CliConfig& cfg, const Workspace& ws,
                                const std::string& ckpt_path,
                                const std::string& report_name = "") {
  auto ck = load_checkpoint(ckpt_path);
  std::vector<SplitView> views;
  std::vector<std::pair<int, const CorpusManifest*>> manifests;
  views.reserve(cfg.eval_lengths.size());
  for (int k : cfg.eval_lengths)
    views.push_back(load_split(ws, "test", k * cfg.model.L_t));
  for (size_t i = 0; i < views.size(); ++i)
    manifests.push_back({cfg.eval_lengths[i], &views[i].manifest});
  // all test manifests come from the same token file
  auto report = extrapolation_sweep(ck.model, manifests, views.front().store,
                                    cfg.eval_max_sequences);
  report.model_id = fs::path(ckpt_path).stem().string();
  report.method = ck.label + "/" + pe_kind_name(ck.model.config.pe_kind);
  report.config_digest = cfg.digest;
  report.seeds = {{"data", ck.run.data_seed},
                  {"init", ck.run.init_seed},
                  {"sampler", ck.run.sampler.seed}};
  if (!report_name.empty()) {
    std::ofstream out(ws.report_path(report_name));
    out << eval_report_to_json(report).dump(1) << "\n";
  }
  return report;
}

inline AttentionHistogram pipeline_analyze(const CliConfig& cfg,
                                           const Workspace& ws,
                                           const std::string& ckpt_path,
                                           const std::string& tag,
                                           const std::string& report_name = "") {
  auto ck = load_checkpoint(ckpt_path);
  auto split = load_split(ws, "test", cfg.L_e());
  auto hist = median_attention_histogram(
      ck.model, split.manifest, split.store, ck.model.config.L_t,
      cfg.histogram_bins, cfg.eval_max_sequences);
  hist.tag = tag;
  if (!report_name.empty()) {
    auto j = attention_histogram_to_json(hist);
    j["config_digest"] = cfg.digest;
    j["model_id"] = fs::path(ckpt_path).stem().string();
    std::ofstream out(ws.report_path(report_name));
    out << j.dump(1) << "\n";
  }
  return hist;
}

}  // namespace ctxtend
