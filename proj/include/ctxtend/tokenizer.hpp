#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ctxtend/common.hpp"

namespace ctxtend {

// Byte-level tokenizer: token ids 0..255 are raw byte values, then the
// specials. decode(encode(s)) == s for every byte string s.
struct TokenizerSpec {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr int kVocabSize = 259;

  std::string scheme = "byte-level";
  int vocab_size = kVocabSize;
};

inline std::vector<TokenId> encode(std::string_view bytes) {
  std::vector<TokenId> out;
  out.reserve(bytes.size());
  for (unsigned char ch : bytes) out.push_back(static_cast<TokenId>(ch));
  return out;
}

inline std::string decode(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || t > 255)
      throw DataError("decode: special or out-of-range token id " +
                      std::to_string(t) + " inside document body");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

}  // namespace ctxtend
