#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace prism {

/// Splits text into word tokens (runs of letters, digits, '-') and
/// single-character tokens for everything else. Concatenating the pieces
/// reproduces the input exactly.
std::vector<std::string> split_tokens(std::string_view text);

/// Word-level tokenizer over a closed corpus vocabulary with byte fallback,
/// so any string round-trips and corpus text never hits UNK.
class Tokenizer {
public:
  // Special ids. Byte b maps to kByteBase + b; corpus words follow.
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kSep = 2;
  static constexpr int kPad = 3;
  static constexpr int kUnk = 4;
  static constexpr int kByteBase = 5;
  static constexpr int kWordBase = kByteBase + 256;

  static Tokenizer build(const std::vector<std::string>& corpus, int max_len = 256);

  /// Rebuilds from a saved word list (checkpoint loading).
  static Tokenizer from_words(const std::vector<std::string>& words, int max_len);

  /// Text to ids, no specials added. Tokens outside the vocabulary fall back
  /// to their UTF-8 bytes.
  std::vector<int> tokenize(std::string_view text) const;

  /// Inverse of tokenize; special ids render as empty strings.
  std::string detokenize(const std::vector<int>& ids) const;

  int vocab_size() const { return kWordBase + static_cast<int>(words_.size()); }
  int max_len() const { return max_len_; }
  const std::vector<std::string>& words() const { return words_; }

  /// Id for a word token, or -1 when it is not in the closed vocabulary.
  int word_id(std::string_view token) const;

private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  int max_len_ = 256;
};

/// Seed for the default text embedding basis; the synthetic corpus and the
/// alignment tests must agree on it.
inline constexpr std::uint64_t kDefaultTextEmbedSeed = 0x54455854;  // "TEXT"

/// Deterministic bag-of-tokens embedder. Token vectors are hash-seeded
/// Gaussians, so embeddings depend only on (seed, text), not on any corpus.
class TextEmbedder {
public:
  explicit TextEmbedder(std::uint64_t seed = kDefaultTextEmbedSeed, int dim = 64);

  int dim() const { return dim_; }

  /// L2-normalized sum of token vectors plus a small sinusoidal position mix.
  /// Empty input returns the zero vector.
  Eigen::VectorXd embed_text(std::string_view text) const;

  /// One row per token: token vector plus position mix, unnormalized. Used as
  /// the diffusion conditioning matrix.
  Eigen::MatrixXd embed_tokens(std::string_view text) const;

private:
  Eigen::VectorXd token_vector(std::string_view token) const;
  Eigen::VectorXd position_mix(int t) const;

  std::uint64_t seed_;
  int dim_;
};

}  // namespace prism
