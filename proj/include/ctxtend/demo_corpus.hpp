#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "ctxtend/common.hpp"

namespace ctxtend {

// Deterministic synthetic corpus for experiments and tests. Each document is
// pseudo-English built from a shared word list with seeded bigram structure
// (local signal) plus a per-document set of recurring topic words (long-range
// signal: earlier context predicts later vocabulary).
namespace demo {

inline const std::vector<std::string>& base_words() {
  static const std::vector<std::string> words = {
      "the", "a", "of", "and", "to", "in", "is", "that", "for", "with",
      "on", "as", "by", "at", "from", "it", "this", "be", "are", "was",
      "we", "can", "our", "which", "an", "has", "have", "not", "but",
      "model", "result", "method", "value", "state", "field", "light",
      "energy", "force", "wave", "point", "space", "time", "rate",
      "phase", "system", "signal", "order", "range", "scale", "level",
      "sample", "figure", "table", "term", "form", "case", "part",
      "number", "function", "process", "change", "effect", "study",
      "measure", "control", "surface", "volume", "density", "pressure",
      "current", "charge", "motion", "period", "source", "region",
      "limit", "bound", "error", "noise", "input", "output", "layer",
      "node", "edge", "graph", "path", "step", "loop", "cycle", "group",
      "ring", "core", "shell", "beam", "pulse", "band", "peak", "mean",
      "given", "shown", "found", "under", "over", "between", "within",
      "across", "during", "after", "before", "small", "large", "high",
      "low", "first", "second", "final", "total", "local", "global",
  };
  return words;
}

inline std::string make_topic_word(std::mt19937_64& rng) {
  static const char* consonants = "bcdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::uniform_int_distribution<int> nc(0, 14), nv(0, 4), syl(3, 4);
  std::string w;
  const int s = syl(rng);
  for (int i = 0; i < s; ++i) {
    w += consonants[nc(rng)];
    w += vowels[nv(rng)];
  }
  return w;
}

// Bigram weight: a fixed pseudo-random subset of (prev, next) pairs is
// strongly preferred, giving the text learnable local structure shared
// across all documents.
inline bool favored_pair(uint64_t corpus_seed, size_t prev, size_t next) {
  return derive_seed(corpus_seed, 0xb16a, prev * 1000 + next) % 11 == 0;
}

inline std::string generate_document(uint64_t corpus_seed, uint64_t doc_seed,
                                     size_t target_bytes) {
  std::mt19937_64 rng(derive_seed(corpus_seed, 0xd0c5, doc_seed));
  const auto& words = base_words();
  std::vector<std::string> topic;
  for (int i = 0; i < 6; ++i) topic.push_back(make_topic_word(rng));

  std::string out;
  out.reserve(target_bytes + 64);
  std::uniform_int_distribution<int> sent_len(6, 14);
  std::uniform_int_distribution<size_t> any_word(0, words.size() - 1);
  std::uniform_int_distribution<size_t> any_topic(0, topic.size() - 1);
  std::uniform_int_distribution<int> para(0, 7);
  size_t prev = any_word(rng);
  int words_since_topic = 0;
  while (out.size() < target_bytes) {
    const int len = sent_len(rng);
    for (int i = 0; i < len; ++i) {
      std::string w;
      if (words_since_topic >= 9) {
        w = topic[any_topic(rng)];
        words_since_topic = 0;
      } else {
        // rejection-sample towards favored bigrams
        size_t cand = any_word(rng);
        for (int tries = 0; tries < 64 && !favored_pair(corpus_seed, prev, cand);
             ++tries)
          cand = any_word(rng);
        prev = cand;
        w = words[cand];
        ++words_since_topic;
      }
      if (i > 0) out += ' ';
      out += w;
    }
    out += '.';
    if (para(rng) == 0)
      out += "\n\n";
    else
      out += ' ';
  }
  out.resize(target_bytes);
  return out;
}

// Writes n_docs text files of ~bytes_per_doc each into dir.
inline std::vector<std::string> write_corpus(const std::string& dir,
                                             size_t n_docs,
                                             size_t bytes_per_doc,
                                             uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (size_t i = 0; i < n_docs; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "doc%04zu.txt", i);
    const std::string path = (std::filesystem::path(dir) / name).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("demo corpus: cannot write " + path);
    out << generate_document(seed, i, bytes_per_doc);
    paths.push_back(path);
  }
  return paths;
}

}  // namespace demo
}  // namespace ctxtend
