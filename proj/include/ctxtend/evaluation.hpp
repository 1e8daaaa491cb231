#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "ctxtend/common.hpp"
#include "ctxtend/corpus.hpp"
#include "ctxtend/model.hpp"

namespace ctxtend {

// ---------------------------------------------------------------------------
// Perplexity (no sliding window): one forward pass per test sequence with
// identity positions; per-sequence ppl = exp(mean NLL over its next-token
// targets); the report is the mean of per-sequence perplexities.

struct PerplexityResult {
  double mean_ppl = 0;
  size_t count = 0;       // sequences evaluated
  size_t overflowed = 0;  // sequences whose exp() overflowed
  bool applicable = true; // false when APE table is too short
};

template <class T>
PerplexityResult perplexity(const ModelState<T>& model,
                            const CorpusManifest& manifest,
                            const TokenStore& store,
                            size_t max_sequences = 0) {
  PerplexityResult res;
  const size_t n = manifest.sequence_length;
  if (model.config.pe_kind == PEKind::APE && n > model.ape_table().rows) {
    res.applicable = false;
    return res;
  }
  ForwardCache<T> cache;
  double sum = 0;
  size_t limit = manifest.entries.size();
  if (max_sequences > 0) limit = std::min(limit, max_sequences);
  for (size_t i = 0; i < limit; ++i) {
    auto span = manifest.sequence(store, i);
    TokenSequence seq{"", 0, {span.begin(), span.end()}};
    auto sample = sample_full(seq);
    forward(model, sample, cache);
    const double nll = loss_from_logits(cache.logits, sample);
    const double ppl = std::exp(nll);
    res.count += 1;
    if (!std::isfinite(ppl)) {
      res.overflowed += 1;
      sum = std::numeric_limits<double>::infinity();
    } else {
      sum += ppl;
    }
  }
  if (res.count == 0) throw DataError("perplexity: empty test manifest");
  res.mean_ppl = sum / static_cast<double>(res.count);
  return res;
}

// ---------------------------------------------------------------------------
// Extrapolation sweep across length multiples of L_t.

struct EvalRow {
  int multiple = 1;
  double mean_ppl = 0;
  size_t count = 0;
  size_t overflowed = 0;
  bool applicable = true;
  bool extrapolates = false;  // ppl(k*L_t) < ppl(L_t)
  std::string note;
};

struct EvalReport {
  std::string model_id;
  std::string method;
  std::vector<EvalRow> rows;
  std::string test_digest;
  nlohmann::json seeds = nlohmann::json::object();
  std::string config_digest;
  std::string timestamp;

  const EvalRow* row_for(int multiple) const {
    for (const auto& r : rows)
      if (r.multiple == multiple) return &r;
    return nullptr;
  }
};

inline std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

// APE models are interpolated (integral factor) up to each target length
// before evaluation; other strategies evaluate as-is.
template <class T>
EvalReport extrapolation_sweep(
    const ModelState<T>& model,
    const std::vector<std::pair<int, const CorpusManifest*>>& manifests,
    const TokenStore& store, size_t max_sequences = 0) {
  EvalReport report;
  report.method = pe_kind_name(model.config.pe_kind);
  report.timestamp = now_iso8601();
  const size_t L_t = model.config.L_t;

  for (const auto& [multiple, manifest] : manifests) {
    if (!manifest) continue;
    if (report.test_digest.empty()) report.test_digest = manifest->digest;
    EvalRow row;
    row.multiple = multiple;
    const size_t target = static_cast<size_t>(multiple) * L_t;
    if (manifest->sequence_length != target)
      throw ConfigError("extrapolation_sweep: manifest length mismatch at " +
                        std::to_string(multiple) + "x");
    if (model.config.pe_kind == PEKind::APE &&
        target > model.ape_table().rows) {
      const size_t rows = model.ape_table().rows;
      if (target % rows != 0) {
        row.applicable = false;
        row.note = "non-integral interpolation factor";
        report.rows.push_back(row);
        continue;
      }
      ModelState<T> extended = model;
      extended.ape_table() =
          interpolate_ape(model.ape_table(),
                          static_cast<int64_t>(target / rows));
      auto res = perplexity(extended, *manifest, store, max_sequences);
      row.mean_ppl = res.mean_ppl;
      row.count = res.count;
      row.overflowed = res.overflowed;
      row.applicable = res.applicable;
      row.note = "interpolated";
    } else {
      auto res = perplexity(model, *manifest, store, max_sequences);
      row.mean_ppl = res.mean_ppl;
      row.count = res.count;
      row.overflowed = res.overflowed;
      row.applicable = res.applicable;
    }
    report.rows.push_back(row);
  }
  if (const EvalRow* base = report.row_for(1); base && base->applicable) {
    for (auto& r : report.rows)
      r.extrapolates = r.multiple > 1 && r.applicable &&
                       std::isfinite(r.mean_ppl) &&
                       r.mean_ppl < base->mean_ppl;
  }
  return report;
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json jr = {{"multiple", row.multiple},
                         {"count", row.count},
                         {"overflowed", row.overflowed},
                         {"applicable", row.applicable},
                         {"extrapolates", row.extrapolates},
                         {"note", row.note}};
    if (row.applicable && std::isfinite(row.mean_ppl))
      jr["mean_ppl"] = row.mean_ppl;
    else
      jr["mean_ppl"] = row.applicable ? "ovf" : "n/a";
    rows.push_back(jr);
  }
  return {{"model_id", r.model_id},   {"method", r.method},
          {"rows", rows},             {"test_digest", r.test_digest},
          {"seeds", r.seeds},         {"config_digest", r.config_digest},
          {"timestamp", r.timestamp}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.model_id = j.at("model_id").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.test_digest = j.at("test_digest").get<std::string>();
  r.seeds = j.at("seeds");
  r.config_digest = j.at("config_digest").get<std::string>();
  r.timestamp = j.at("timestamp").get<std::string>();
  for (const auto& jr : j.at("rows")) {
    EvalRow row;
    row.multiple = jr.at("multiple").get<int>();
    row.count = jr.at("count").get<size_t>();
    row.overflowed = jr.at("overflowed").get<size_t>();
    row.applicable = jr.at("applicable").get<bool>();
    row.extrapolates = jr.at("extrapolates").get<bool>();
    row.note = jr.at("note").get<std::string>();
    if (jr.at("mean_ppl").is_number())
      row.mean_ppl = jr.at("mean_ppl").get<double>();
    else
      row.mean_ppl = std::numeric_limits<double>::infinity();
    r.rows.push_back(row);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Median-attention analysis: per (layer, head, query past the threshold),
// the median of the query's post-softmax attention row over visible keys.

struct AttentionHistogram {
  std::vector<double> bin_edges;  // bins+1 edges over [0, 1]
  std::vector<uint64_t> counts;
  uint64_t total = 0;
  double mean_of_medians = 0;
  double var_of_medians = 0;
  std::string tag;  // "before" or "after"
};

template <class T>
AttentionHistogram median_attention_histogram(const ModelState<T>& model,
                                              const CorpusManifest& manifest,
                                              const TokenStore& store,
                                              int64_t threshold, int bins,
                                              size_t max_sequences = 0) {
  if (bins < 1) throw ConfigError("median_attention_histogram: bins >= 1");
  AttentionHistogram h;
  h.bin_edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b)
    h.bin_edges[b] = static_cast<double>(b) / bins;
  h.counts.assign(bins, 0);

  ForwardCache<T> cache;
  AttentionCapture<T> capture;
  std::vector<T> row;
  double sum = 0, sumsq = 0;
  size_t limit = manifest.entries.size();
  if (max_sequences > 0) limit = std::min(limit, max_sequences);
  for (size_t i = 0; i < limit; ++i) {
    auto span = manifest.sequence(store, i);
    TokenSequence seq{"", 0, {span.begin(), span.end()}};
    auto sample = sample_full(seq);
    forward(model, sample, cache, &capture);
    const size_t n = sample.size();
    for (int l = 0; l < capture.n_layers; ++l)
      for (int hd = 0; hd < capture.n_heads; ++hd) {
        const auto& P = capture.at(l, hd);
        for (size_t q = 0; q < n; ++q) {
          if (sample.positions[q] <= threshold) continue;
          row.assign(P.row(q), P.row(q) + q + 1);
          const size_t mid = row.size() / 2;
          std::nth_element(row.begin(), row.begin() + mid, row.end());
          double med = row[mid];
          if (row.size() % 2 == 0) {
            const auto lower =
                *std::max_element(row.begin(), row.begin() + mid);
            med = 0.5 * (med + static_cast<double>(lower));
          }
          int b = std::min<int>(bins - 1,
                                static_cast<int>(med * bins));
          h.counts[b] += 1;
          h.total += 1;
          sum += med;
          sumsq += med * med;
        }
      }
  }
  if (h.total == 0)
    throw DataError(
        "median_attention_histogram: no qualifying queries past threshold");
  h.mean_of_medians = sum / static_cast<double>(h.total);
  h.var_of_medians =
      sumsq / static_cast<double>(h.total) -
      h.mean_of_medians * h.mean_of_medians;
  return h;
}

inline nlohmann::json attention_histogram_to_json(const AttentionHistogram& h) {
  return {{"bin_edges", h.bin_edges}, {"counts", h.counts},
          {"total", h.total},         {"mean_of_medians", h.mean_of_medians},
          {"var_of_medians", h.var_of_medians}, {"tag", h.tag}};
}

// ---------------------------------------------------------------------------
// Method comparison: method x length-multiple matrix with per-column minima.

struct ComparisonTable {
  std::vector<std::string> methods;
  std::vector<int> multiples;
  // values[m][k]; NaN = not applicable, +inf = overflow
  std::vector<std::vector<double>> values;
  std::vector<std::vector<bool>> is_min;
  std::string test_digest;
};

inline ComparisonTable compare_methods(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ConfigError("compare_methods: no reports");
  ComparisonTable t;
  t.test_digest = reports.front().test_digest;
  for (const auto& r : reports) {
    if (r.test_digest != t.test_digest)
      throw DataError(
          "compare_methods: reports evaluated on different test sets "
          "(digest mismatch)");
    t.methods.push_back(r.method);
    for (const auto& row : r.rows)
      if (std::find(t.multiples.begin(), t.multiples.end(), row.multiple) ==
          t.multiples.end())
        t.multiples.push_back(row.multiple);
  }
  std::sort(t.multiples.begin(), t.multiples.end());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& r : reports) {
    std::vector<double> vals;
    for (int k : t.multiples) {
      const EvalRow* row = r.row_for(k);
      if (!row || !row->applicable)
        vals.push_back(nan);
      else if (!std::isfinite(row->mean_ppl))
        vals.push_back(std::numeric_limits<double>::infinity());
      else
        vals.push_back(row->mean_ppl);
    }
    t.values.push_back(std::move(vals));
  }
  t.is_min.assign(t.methods.size(),
                  std::vector<bool>(t.multiples.size(), false));
  for (size_t k = 0; k < t.multiples.size(); ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& vals : t.values)
      if (std::isfinite(vals[k])) best = std::min(best, vals[k]);
    if (!std::isfinite(best)) continue;
    for (size_t m = 0; m < t.values.size(); ++m)
      if (t.values[m][k] == best) t.is_min[m][k] = true;
  }
  return t;
}

inline std::string format_cell(double v) {
  if (std::isnan(v)) return "n/a";
  if (std::isinf(v)) return "ovf";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

inline nlohmann::json comparison_to_json(const ComparisonTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (size_t m = 0; m < t.methods.size(); ++m) {
    nlohmann::json cells = nlohmann::json::array();
    for (size_t k = 0; k < t.multiples.size(); ++k) {
      nlohmann::json c;
      if (std::isnan(t.values[m][k]) || std::isinf(t.values[m][k]))
        c["ppl"] = format_cell(t.values[m][k]);
      else
        c["ppl"] = t.values[m][k];
      c["best"] = static_cast<bool>(t.is_min[m][k]);
      cells.push_back(c);
    }
    rows.push_back({{"method", t.methods[m]}, {"cells", cells}});
  }
  return {{"multiples", t.multiples}, {"rows", rows},
          {"test_digest", t.test_digest}};
}

inline std::string comparison_to_text(const ComparisonTable& t) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "method";
  for (int k : t.multiples) os << std::right << std::setw(12)
                               << (std::to_string(k) + "x");
  os << "\n";
  for (size_t m = 0; m < t.methods.size(); ++m) {
    os << std::left << std::setw(16) << t.methods[m];
    for (size_t k = 0; k < t.multiples.size(); ++k) {
      std::string cell = format_cell(t.values[m][k]);
      if (t.is_min[m][k]) cell += "*";
      os << std::right << std::setw(12) << cell;
    }
    os << "\n";
  }
  os << "(* = lowest in column)\n";
  return os.str();
}

inline std::string comparison_to_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << "method";
  for (int k : t.multiples) os << "," << k << "x";
  os << "\n";
  for (size_t m = 0; m < t.methods.size(); ++m) {
    os << t.methods[m];
    for (size_t k = 0; k < t.multiples.size(); ++k)
      os << "," << format_cell(t.values[m][k]);
    os << "\n";
  }
  return os.str();
}

}  // namespace ctxtend
