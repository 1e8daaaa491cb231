#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxtend/common.hpp"
#include "ctxtend/tokenizer.hpp"

namespace ctxtend {

struct Document {
  std::string doc_id;
  std::vector<TokenId> tokens;
};

// A fixed-length window of one document. offset is a multiple of the window
// length; windows from the same document never overlap.
struct TokenSequence {
  std::string doc_id;
  size_t offset = 0;
  std::vector<TokenId> tokens;
};

struct IngestResult {
  std::vector<Document> train;
  std::vector<Document> test;
  uint64_t seed = 0;
  double split_fraction = 0.0;
};

// One Document per readable file; empty files are skipped with a warning.
// The train/test assignment is a seeded permutation, so it is stable across
// runs with the same inputs and seed.
inline IngestResult ingest(const std::vector<std::string>& raw_files,
                           const TokenizerSpec& spec, double split_fraction,
                           uint64_t seed) {
  (void)spec;
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw ConfigError("ingest: split_fraction must be in (0,1), got " +
                      std::to_string(split_fraction));
  std::vector<Document> docs;
  for (const auto& path : raw_files) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("ingest: cannot read file " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    if (bytes.empty()) {
      std::fprintf(stderr, "warning: skipping empty file %s\n", path.c_str());
      continue;
    }
    docs.push_back({std::filesystem::path(path).filename().string(),
                    encode(bytes)});
  }
  std::vector<size_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x1276e57u));
  std::shuffle(order.begin(), order.end(), rng);
  size_t n_train =
      static_cast<size_t>(std::llround(split_fraction * docs.size()));

  IngestResult out;
  out.seed = seed;
  out.split_fraction = split_fraction;
  for (size_t i = 0; i < order.size(); ++i) {
    auto& dst = (i < n_train) ? out.train : out.test;
    dst.push_back(std::move(docs[order[i]]));
  }
  // Stable on-disk order regardless of the shuffle.
  auto by_id = [](const Document& a, const Document& b) {
    return a.doc_id < b.doc_id;
  };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

// Non-overlapping L-windows at offsets 0, L, 2L, ...; the remainder is
// discarded, and documents shorter than L yield nothing.
inline std::vector<TokenSequence> split_documents(const Document& doc,
                                                  size_t L) {
  if (L < 1) throw ConfigError("split_documents: L must be >= 1");
  std::vector<TokenSequence> out;
  for (size_t off = 0; off + L <= doc.tokens.size(); off += L) {
    out.push_back({doc.doc_id, off,
                   {doc.tokens.begin() + off, doc.tokens.begin() + off + L}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flat token file: all documents of a split concatenated, 32-bit LE ids.
// Header: magic "CTXT", u32 version, u32 vocab_size, u64 token_count.

constexpr char kTokenFileMagic[4] = {'C', 'T', 'X', 'T'};
constexpr uint32_t kTokenFileVersion = 1;

struct DocSpan {
  std::string doc_id;
  uint64_t start = 0;   // token offset in the flat file
  uint64_t length = 0;  // tokens
};

inline void write_token_file(const std::string& path,
                             const std::vector<Document>& docs,
                             const TokenizerSpec& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_token_file: cannot open " + path);
  uint64_t total = 0;
  for (const auto& d : docs) total += d.tokens.size();
  uint32_t version = kTokenFileVersion;
  uint32_t vocab = static_cast<uint32_t>(spec.vocab_size);
  out.write(kTokenFileMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&vocab), 4);
  out.write(reinterpret_cast<const char*>(&total), 8);
  for (const auto& d : docs)
    out.write(reinterpret_cast<const char*>(d.tokens.data()),
              static_cast<std::streamsize>(d.tokens.size() * sizeof(TokenId)));
  if (!out) throw DataError("write_token_file: short write to " + path);
}

// In-memory view of a split's flat token file.
struct TokenStore {
  uint32_t vocab_size = 0;
  std::vector<TokenId> tokens;

  static TokenStore load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("TokenStore: cannot open " + path);
    char magic[4];
    uint32_t version = 0, vocab = 0;
    uint64_t total = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&vocab), 4);
    in.read(reinterpret_cast<char*>(&total), 8);
    if (!in || std::memcmp(magic, kTokenFileMagic, 4) != 0)
      throw DataError("TokenStore: bad magic in " + path);
    if (version != kTokenFileVersion)
      throw DataError("TokenStore: unsupported version in " + path);
    TokenStore s;
    s.vocab_size = vocab;
    s.tokens.resize(total);
    in.read(reinterpret_cast<char*>(s.tokens.data()),
            static_cast<std::streamsize>(total * sizeof(TokenId)));
    if (!in) throw DataError("TokenStore: truncated token file " + path);
    return s;
  }

  std::span<const TokenId> slice(uint64_t start, uint64_t len) const {
    if (start + len > tokens.size())
      throw DataError("TokenStore: slice out of range");
    return {tokens.data() + start, len};
  }
};

// ---------------------------------------------------------------------------
// Manifest: locators into the flat token file, one entry per L-window.

struct ManifestEntry {
  uint32_t doc_index = 0;
  uint64_t offset = 0;  // within the document, multiple of L
};

struct CorpusManifest {
  TokenizerSpec tokenizer;
  size_t sequence_length = 0;
  std::string split;       // "train" or "test"
  std::string token_file;  // relative to the manifest's directory
  std::vector<DocSpan> docs;
  std::vector<ManifestEntry> entries;
  uint64_t token_count = 0;
  std::string digest;
  uint64_t ingest_seed = 0;
  double split_fraction = 0.0;

  std::span<const TokenId> sequence(const TokenStore& store,
                                    size_t entry_index) const {
    const auto& e = entries.at(entry_index);
    const auto& d = docs.at(e.doc_index);
    return store.slice(d.start + e.offset, sequence_length);
  }
};

inline CorpusManifest build_manifest(const std::vector<Document>& docs,
                                     size_t L, const std::string& split,
                                     const std::string& token_file,
                                     const TokenizerSpec& spec,
                                     uint64_t ingest_seed,
                                     double split_fraction) {
  CorpusManifest m;
  m.tokenizer = spec;
  m.sequence_length = L;
  m.split = split;
  m.token_file = token_file;
  m.ingest_seed = ingest_seed;
  m.split_fraction = split_fraction;
  Fnv1a64 h;
  uint64_t file_pos = 0;
  for (uint32_t di = 0; di < docs.size(); ++di) {
    const auto& d = docs[di];
    m.docs.push_back({d.doc_id, file_pos, d.tokens.size()});
    for (size_t off = 0; off + L <= d.tokens.size(); off += L) {
      m.entries.push_back({di, off});
      h.update(d.tokens.data() + off, L * sizeof(TokenId));
    }
    file_pos += d.tokens.size();
  }
  m.token_count = static_cast<uint64_t>(L) * m.entries.size();
  m.digest = h.hex();
  return m;
}

inline nlohmann::json manifest_to_json(const CorpusManifest& m) {
  nlohmann::json docs = nlohmann::json::array();
  for (const auto& d : m.docs)
    docs.push_back({{"doc_id", d.doc_id}, {"start", d.start},
                    {"length", d.length}});
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({e.doc_index, e.offset});
  return {
      {"tokenizer",
       {{"scheme", m.tokenizer.scheme}, {"vocab_size", m.tokenizer.vocab_size}}},
      {"sequence_length", m.sequence_length},
      {"split", m.split},
      {"token_file", m.token_file},
      {"docs", docs},
      {"entries", entries},
      {"token_count", m.token_count},
      {"digest", m.digest},
      {"metadata",
       {{"ingest_seed", m.ingest_seed}, {"split_fraction", m.split_fraction}}},
  };
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
  CorpusManifest m;
  m.tokenizer.scheme = j.at("tokenizer").at("scheme").get<std::string>();
  m.tokenizer.vocab_size = j.at("tokenizer").at("vocab_size").get<int>();
  m.sequence_length = j.at("sequence_length").get<size_t>();
  m.split = j.at("split").get<std::string>();
  m.token_file = j.at("token_file").get<std::string>();
  for (const auto& d : j.at("docs"))
    m.docs.push_back({d.at("doc_id").get<std::string>(),
                      d.at("start").get<uint64_t>(),
                      d.at("length").get<uint64_t>()});
  for (const auto& e : j.at("entries"))
    m.entries.push_back({e.at(0).get<uint32_t>(), e.at(1).get<uint64_t>()});
  m.token_count = j.at("token_count").get<uint64_t>();
  m.digest = j.at("digest").get<std::string>();
  m.ingest_seed = j.at("metadata").at("ingest_seed").get<uint64_t>();
  m.split_fraction = j.at("metadata").at("split_fraction").get<double>();
  return m;
}

inline void save_manifest(const CorpusManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_manifest: cannot open " + path);
  out << manifest_to_json(m).dump(1) << "\n";
}

inline CorpusManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_manifest: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return manifest_from_json(j);
}

// Seeded per-epoch permutation of manifest entries; each epoch visits every
// entry exactly once, and the final partial batch is emitted as-is.
inline std::vector<size_t> epoch_order(const CorpusManifest& m, uint64_t seed,
                                       uint64_t epoch) {
  std::vector<size_t> order(m.entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0xba7c4e5u, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

class BatchIterator {
 public:
  BatchIterator(const CorpusManifest& manifest, const TokenStore& store,
                size_t batch_size, uint64_t shuffle_seed, uint64_t epoch = 0)
      : manifest_(&manifest), store_(&store), batch_size_(batch_size),
        seed_(shuffle_seed) {
    if (batch_size_ < 1)
      throw ConfigError("batch_iterator: batch_size must be >= 1");
    if (manifest.entries.empty())
      throw DataError("batch_iterator: empty manifest");
    begin_epoch(epoch);
  }

  void begin_epoch(uint64_t epoch) {
    epoch_ = epoch;
    order_ = epoch_order(*manifest_, seed_, epoch);
    pos_ = 0;
  }

  // Entry indices of the next batch; empty when the epoch is exhausted.
  std::vector<size_t> next_indices() {
    size_t n = std::min(batch_size_, order_.size() - pos_);
    std::vector<size_t> out(order_.begin() + pos_, order_.begin() + pos_ + n);
    pos_ += n;
    return out;
  }

  std::vector<TokenSequence> next() {
    std::vector<TokenSequence> batch;
    for (size_t idx : next_indices()) {
      const auto& e = manifest_->entries[idx];
      auto s = manifest_->sequence(*store_, idx);
      batch.push_back({manifest_->docs[e.doc_index].doc_id, e.offset,
                       {s.begin(), s.end()}});
    }
    return batch;
  }

  uint64_t epoch() const { return epoch_; }

 private:
  const CorpusManifest* manifest_;
  const TokenStore* store_;
  size_t batch_size_;
  uint64_t seed_;
  uint64_t epoch_ = 0;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

}  // namespace ctxtend
