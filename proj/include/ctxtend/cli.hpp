#pragma once

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "ctxtend/pipeline.hpp"
#include "ctxtend/repro.hpp"

extern "C" void openblas_set_num_threads(int);

namespace ctxtend {
namespace cli {

struct CommonOpts {
  std::string config_path;
  std::string workspace_override;
  int64_t seed_override = -1;
  int threads = 1;
};

inline CliConfig load_config(const CommonOpts& opts) {
  if (opts.config_path.empty())
    throw ConfigError("missing --config <path>");
  CliConfig cfg = load_cli_config(opts.config_path);
  if (!opts.workspace_override.empty()) cfg.workspace = opts.workspace_override;
  if (opts.seed_override >= 0) {
    const uint64_t s = static_cast<uint64_t>(opts.seed_override);
    cfg.run.data_seed = derive_seed(s, 0x222);
    cfg.run.init_seed = derive_seed(s, 0x111);
    cfg.run.sampler.seed = derive_seed(s, 0x333);
    cfg.ingest_seed = derive_seed(s, 0x444);
  }
  return cfg;
}

inline void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run-config JSON file");
  cmd->add_option("--workspace", opts.workspace_override,
                  "workspace directory (overrides config)");
  cmd->add_option("--seed-override", opts.seed_override,
                  "replace every configured seed, derived from this value");
  cmd->add_option("--threads", opts.threads, "BLAS thread count (default 1)");
}

// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 training fault.
inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"ctxtend: input-context extension lab for tiny language models"};
  app.require_subcommand(1);
  CommonOpts opts;

  auto* c_ingest = app.add_subcommand(
      "ingest", "tokenize the corpus and build train/test manifests");
  auto* c_adapt = app.add_subcommand(
      "adapt", "domain-adapt a fresh model at L_t (produces the OOTB checkpoint)");
  auto* c_extend = app.add_subcommand(
      "extend", "extension-train an OOTB checkpoint with the configured method");
  auto* c_eval = app.add_subcommand(
      "eval", "perplexity sweep over the configured length multiples");
  auto* c_analyze = app.add_subcommand(
      "analyze", "median-attention histogram past L_t");
  auto* c_compare = app.add_subcommand(
      "compare", "method x length comparison table from eval reports");
  auto* c_repro = app.add_subcommand(
      "repro", "run the full desk-scale experiment matrix");

  std::string from_path, tag = "before", out_name;
  std::vector<std::string> report_paths;
  std::vector<uint64_t> repro_seeds = {1, 2, 3};
  for (auto* c : {c_ingest, c_adapt, c_extend, c_eval, c_analyze, c_repro})
    add_common(c, opts);
  c_extend->add_option("--from", from_path, "OOTB checkpoint path");
  c_eval->add_option("--from", from_path, "checkpoint path")->required();
  c_eval->add_option("--out", out_name, "report filename (in reports/)");
  c_analyze->add_option("--from", from_path, "checkpoint path")->required();
  c_analyze->add_option("--tag", tag, "histogram tag (before/after)");
  c_analyze->add_option("--out", out_name, "report filename (in reports/)");
  c_compare->add_option("reports", report_paths, "eval report JSON files")
      ->required();
  c_compare->add_option("--out", out_name,
                        "output basename (writes .json/.txt/.csv)");
  c_repro->add_option("--seeds", repro_seeds,
                      "seeds for the trend medians (default 1 2 3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help lands here with exit code 0
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    openblas_set_num_threads(opts.threads);

    if (c_compare->parsed()) {
      std::vector<EvalReport> reports;
      for (const auto& p : report_paths) {
        std::ifstream in(p);
        if (!in) throw DataError("compare: cannot open report " + p);
        nlohmann::json j;
        in >> j;
        reports.push_back(eval_report_from_json(j));
      }
      auto table = compare_methods(reports);
      std::cout << comparison_to_text(table);
      if (!out_name.empty()) {
        std::ofstream(out_name + ".json")
            << comparison_to_json(table).dump(1) << "\n";
        std::ofstream(out_name + ".txt") << comparison_to_text(table);
        std::ofstream(out_name + ".csv") << comparison_to_csv(table);
      }
      return 0;
    }

    CliConfig cfg = load_config(opts);
    auto ws = Workspace::open(cfg.workspace);
    WorkspaceLock lock(ws);

    if (c_ingest->parsed()) {
      pipeline_ingest(cfg, ws);
      std::cout << "ingested corpus into " << ws.root.string() << "\n";
    } else if (c_adapt->parsed()) {
      auto path = pipeline_adapt(cfg, ws);
      std::cout << "OOTB checkpoint: " << path << "\n";
    } else if (c_extend->parsed()) {
      if (from_path.empty())
        from_path = ws.checkpoint_path("ootb-" + pe_label(cfg));
      auto path = pipeline_extend(cfg, ws, from_path);
      std::cout << "extended checkpoint: " << path << "\n";
    } else if (c_eval->parsed()) {
      if (out_name.empty())
        out_name = "eval-" + fs::path(from_path).stem().string() + ".json";
      auto report = pipeline_eval(cfg, ws, from_path, out_name);
      std::cout << eval_report_to_json(report).dump(1) << "\n";
    } else if (c_analyze->parsed()) {
      if (out_name.empty())
        out_name = "attn-" + fs::path(from_path).stem().string() + ".json";
      auto hist = pipeline_analyze(cfg, ws, from_path, tag, out_name);
      std::cout << attention_histogram_to_json(hist).dump(1) << "\n";
    } else if (c_repro->parsed()) {
      auto summary = run_repro(cfg, ws, repro_seeds, &std::cout);
      auto j = repro_summary_to_json(summary);
      j["config_digest"] = cfg.digest;
      std::ofstream(ws.report_path("repro-summary.json")) << j.dump(1) << "\n";
      std::cout << j.dump(1) << "\n";
    }
    return 0;
  } catch (const TrainingFault& e) {
    std::cerr << "training fault: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace cli
}  // namespace ctxtend
