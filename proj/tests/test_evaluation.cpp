#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "ctxtend/evaluation.hpp"
#include "ctxtend/training.hpp"

using namespace ctxtend;

namespace {

ModelConfig small_config(PEKind pe, int L_t) {
  ModelConfig cfg;
  cfg.vocab_size = 259;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.L_t = L_t;
  cfg.pe_kind = pe;
  return cfg;
}

struct MiniCorpus {
  std::vector<Document> docs;
  TokenStore store;
  CorpusManifest manifest;

  MiniCorpus(size_t n_docs, size_t doc_len, size_t L, uint64_t seed,
             double corrupt = 0.0) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> phrase(0, 4);
    const std::vector<std::string> phrases = {
        "the cat sat on the mat. ", "a long context window. ",
        "positions matter a lot. ", "bytes in, bytes out. ",
        "attention is quadratic. "};
    for (size_t i = 0; i < n_docs; ++i) {
      std::string text;
      while (text.size() < doc_len) text += phrases[phrase(rng)];
      text.resize(doc_len);
      docs.push_back({"doc" + std::to_string(i), encode(text)});
    }
    if (corrupt > 0.0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::uniform_int_distribution<int> byte(0, 255);
      for (auto& d : docs)
        for (auto& t : d.tokens)
          if (u(rng) < corrupt) t = byte(rng);
    }
    TokenizerSpec spec;
    store.vocab_size = spec.vocab_size;
    for (const auto& d : docs)
      store.tokens.insert(store.tokens.end(), d.tokens.begin(),
                          d.tokens.end());
    manifest = build_manifest(docs, L, "test", "mem", spec, seed, 1.0);
  }
};

// Zeroing the output head makes every logits row uniform.
template <class T>
void make_uniform(ModelState<T>& m) {
  m.params[m.w_out].zero();
  m.params[m.b_out].zero();
}

}  // namespace

TEST_CASE("perplexity equals exp(loss) on contiguous unmasked sequences") {
  MiniCorpus corpus(2, 64, 32, 1);
  auto m = init_model<float>(small_config(PEKind::RoPE, 32), 1);

  double mean_of_ppls = 0;
  ForwardCache<float> cache;
  for (size_t i = 0; i < corpus.manifest.entries.size(); ++i) {
    auto span = corpus.manifest.sequence(corpus.store, i);
    TokenSequence seq{"", 0, {span.begin(), span.end()}};
    auto s = sample_full(seq);
    mean_of_ppls += std::exp(loss_from_logits(forward(m, s, cache), s));
  }
  mean_of_ppls /= double(corpus.manifest.entries.size());

  auto res = perplexity(m, corpus.manifest, corpus.store);
  CHECK(res.count == corpus.manifest.entries.size());
  CHECK(res.overflowed == 0);
  CHECK(res.mean_ppl == Catch::Approx(mean_of_ppls).epsilon(1e-6));
}

TEST_CASE("uniform-logit model scores ppl equal to vocab size") {
  MiniCorpus corpus(2, 64, 32, 2);
  auto m = init_model<float>(small_config(PEKind::ALiBi, 32), 2);
  make_uniform(m);
  auto res = perplexity(m, corpus.manifest, corpus.store);
  CHECK(res.mean_ppl == Catch::Approx(259.0).margin(1e-6));
}

TEST_CASE("single-sequence manifest mean is that sequence's ppl") {
  MiniCorpus corpus(1, 32, 32, 3);
  REQUIRE(corpus.manifest.entries.size() == 1);
  auto m = init_model<float>(small_config(PEKind::RoPE, 32), 3);
  ForwardCache<float> cache;
  auto span = corpus.manifest.sequence(corpus.store, 0);
  TokenSequence seq{"", 0, {span.begin(), span.end()}};
  auto s = sample_full(seq);
  const double want = std::exp(loss_from_logits(forward(m, s, cache), s));
  auto res = perplexity(m, corpus.manifest, corpus.store);
  CHECK(res.mean_ppl == Catch::Approx(want).epsilon(1e-9));
}

TEST_CASE("corrupting the test set increases perplexity") {
  MiniCorpus train(8, 1024, 16, 4);
  auto model = init_model<float>(small_config(PEKind::RoPE, 16), 4);
  RunConfig run;
  run.batch_size = 8;
  run.optimizer.learning_rate = 3e-3;
  run.optimizer.warmup_steps = 5;
  run.sampler.seed = 4;
  auto ck = domain_adapt(model, train.manifest, train.store, run);

  MiniCorpus clean(4, 256, 16, 99);
  MiniCorpus dirty(4, 256, 16, 99, 0.2);
  auto p_clean = perplexity(ck.model, clean.manifest, clean.store);
  auto p_dirty = perplexity(ck.model, dirty.manifest, dirty.store);
  CHECK(p_dirty.mean_ppl > p_clean.mean_ppl);
}

TEST_CASE("ape manifests longer than the table are inapplicable, not fatal") {
  MiniCorpus corpus(2, 128, 64, 5);
  auto m = init_model<float>(small_config(PEKind::APE, 32), 5);
  auto res = perplexity(m, corpus.manifest, corpus.store);
  CHECK_FALSE(res.applicable);
}

TEST_CASE("extrapolation sweep interpolates ape per target length") {
  MiniCorpus m1(4, 256, 32, 6);
  MiniCorpus m2(4, 256, 64, 6);
  MiniCorpus m4(4, 256, 128, 6);
  auto model = init_model<float>(small_config(PEKind::APE, 32), 6);
  std::vector<std::pair<int, const CorpusManifest*>> manifests = {
      {1, &m1.manifest}, {2, &m2.manifest}, {4, &m4.manifest}};
  // the sweep slices each manifest's own store identically, so hand it the
  // widest one; entries address per-doc offsets shared across lengths
  auto report = extrapolation_sweep(model, manifests, m1.store);
  REQUIRE(report.rows.size() == 3);
  for (const auto& row : report.rows) {
    CHECK(row.applicable);
    CHECK(std::isfinite(row.mean_ppl));
    if (row.multiple > 1) CHECK(row.note == "interpolated");
  }
  CHECK(report.test_digest == m1.manifest.digest);
}

TEST_CASE("attention histogram: uniform rows land on exact medians") {
  MiniCorpus corpus(2, 128, 64, 7);
  auto m = init_model<float>(small_config(PEKind::RoPE, 32), 7);
  // zero q/k projections -> all scores zero -> uniform rows over visible keys
  for (int l = 0; l < m.config.n_layers; ++l) {
    m.params[m.layers[l].wq].zero();
    m.params[m.layers[l].bq].zero();
    m.params[m.layers[l].wk].zero();
    m.params[m.layers[l].bk].zero();
  }
  const int64_t threshold = 32;
  auto h = median_attention_histogram(m, corpus.manifest, corpus.store,
                                      threshold, 20);
  // conservation: layers x heads x qualifying queries per sequence
  const uint64_t qualifying = 64 - 33;  // identity positions 33..63
  CHECK(h.total == corpus.manifest.entries.size() * 2 * 2 * qualifying);
  uint64_t counted = 0;
  for (auto c : h.counts) counted += c;
  CHECK(counted == h.total);

  // uniform row of width w has median exactly 1/w
  double want = 0;
  for (size_t q = 33; q < 64; ++q) want += 1.0 / double(q + 1);
  want /= double(qualifying);
  CHECK(h.mean_of_medians == Catch::Approx(want).epsilon(1e-5));
}

TEST_CASE("sharply peaked attention rows give near-zero medians") {
  MiniCorpus corpus(1, 64, 64, 8);
  auto m = init_model<float>(small_config(PEKind::RoPE, 64), 8);
  for (int l = 0; l < m.config.n_layers; ++l) {
    for (auto idx : {m.layers[l].wq, m.layers[l].wk})
      for (auto& x : m.params[idx].v) x *= 300.0f;
  }
  auto h = median_attention_histogram(m, corpus.manifest, corpus.store, 8, 20);
  CHECK(h.mean_of_medians < 0.05);
  CHECK(h.counts[0] > h.total / 2);
}

TEST_CASE("histogram with no qualifying queries is an error") {
  MiniCorpus corpus(1, 32, 32, 9);
  auto m = init_model<float>(small_config(PEKind::RoPE, 32), 9);
  REQUIRE_THROWS_AS(
      median_attention_histogram(m, corpus.manifest, corpus.store, 1000, 20),
      DataError);
}

namespace {

EvalReport fake_report(const std::string& method, const std::string& digest,
                       std::vector<std::pair<int, double>> cells) {
  EvalReport r;
  r.method = method;
  r.test_digest = digest;
  r.timestamp = "2026-01-01T00:00:00Z";
  for (auto [k, v] : cells) {
    EvalRow row;
    row.multiple = k;
    row.mean_ppl = v;
    row.count = 10;
    r.rows.push_back(row);
  }
  return r;
}

}  // namespace

TEST_CASE("method comparison flags per-column minima") {
  auto a = fake_report("chunk-0.25", "d1", {{1, 5.0}, {4, 7.0}});
  auto b = fake_report("randompos", "d1", {{1, 4.5}, {4, 11.0}});
  auto t = compare_methods({a, b});
  REQUIRE(t.methods == std::vector<std::string>{"chunk-0.25", "randompos"});
  REQUIRE(t.multiples == std::vector<int>{1, 4});
  CHECK_FALSE(t.is_min[0][0]);
  CHECK(t.is_min[1][0]);
  CHECK(t.is_min[0][1]);
  CHECK_FALSE(t.is_min[1][1]);

  auto text = comparison_to_text(t);
  CHECK(text.find("7.000*") != std::string::npos);
  auto csv = comparison_to_csv(t);
  CHECK(csv.find("randompos,4.500,11.000") != std::string::npos);
}

TEST_CASE("method comparison refuses mismatched test sets") {
  auto a = fake_report("a", "d1", {{1, 5.0}});
  auto b = fake_report("b", "d2", {{1, 4.0}});
  REQUIRE_THROWS_WITH(compare_methods({a, b}),
                      Catch::Matchers::ContainsSubstring("digest"));
}

TEST_CASE("overflow sentinels render as ovf, ties all flagged") {
  auto a = fake_report("a", "d", {{1, 3.0}});
  auto b = fake_report("b", "d", {{1, 3.0}});
  auto c = fake_report("ootb", "d",
                       {{1, std::numeric_limits<double>::infinity()}});
  auto t = compare_methods({a, b, c});
  CHECK(t.is_min[0][0]);
  CHECK(t.is_min[1][0]);
  CHECK_FALSE(t.is_min[2][0]);
  auto text = comparison_to_text(t);
  CHECK(text.find("ovf") != std::string::npos);
  CHECK(text.find("inf") == std::string::npos);
}

TEST_CASE("eval report json round-trips including sentinels") {
  auto r = fake_report("rope/ootb", "dig", {{1, 6.5}, {4, 52.0}});
  r.rows.push_back(EvalRow{8, std::numeric_limits<double>::infinity(), 3, 3,
                           true, false, ""});
  r.rows.push_back(EvalRow{16, 0, 0, 0, false, false, "table too short"});
  auto j = eval_report_to_json(r);
  CHECK(j.at("rows")[2].at("mean_ppl") == "ovf");
  CHECK(j.at("rows")[3].at("mean_ppl") == "n/a");
  auto d = eval_report_from_json(j);
  CHECK(d.method == "rope/ootb");
  CHECK(d.rows[1].mean_ppl == 52.0);
  CHECK(std::isinf(d.rows[2].mean_ppl));
  CHECK_FALSE(d.rows[3].applicable);
}
