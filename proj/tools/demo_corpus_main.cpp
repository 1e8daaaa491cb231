// Generates the deterministic synthetic text corpus used by the examples and
// the repro experiment matrix.
#include <iostream>

#include <CLI11.hpp>

#include "ctxtend/demo_corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ctxtend-demo-corpus: write a deterministic synthetic corpus"};
  std::string dir = "corpus";
  size_t n_docs = 64;
  size_t bytes_per_doc = 90000;
  uint64_t seed = 7;
  app.add_option("--dir", dir, "output directory");
  app.add_option("--docs", n_docs, "number of documents");
  app.add_option("--bytes-per-doc", bytes_per_doc, "bytes per document");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    auto paths = ctxtend::demo::write_corpus(dir, n_docs, bytes_per_doc, seed);
    std::cout << "wrote " << paths.size() << " documents ("
              << n_docs * bytes_per_doc << " bytes) to " << dir << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
