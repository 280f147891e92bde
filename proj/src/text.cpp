#include "prism/text.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "prism/common.hpp"

namespace prism {

namespace {

bool is_word_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) || c == '-';
}

}  // namespace

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_word_char(text[i])) {
      std::size_t j = i;
      while (j < text.size() && is_word_char(text[j])) ++j;
      tokens.emplace_back(text.substr(i, j - i));
      i = j;
    } else {
      tokens.emplace_back(1, text[i]);
      ++i;
    }
  }
  return tokens;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus, int max_len) {
  std::set<std::string> seen;  // ordered for a deterministic id assignment
  for (const std::string& text : corpus) {
    for (std::string& token : split_tokens(text)) {
      if (token.size() > 1) seen.insert(std::move(token));  // single chars ride the byte table
    }
  }
  return from_words(std::vector<std::string>(seen.begin(), seen.end()), max_len);
}

Tokenizer Tokenizer::from_words(const std::vector<std::string>& words, int max_len) {
  if (max_len < 1) throw Error(ErrorCode::usage, "tokenizer max_len must be positive");
  Tokenizer t;
  t.max_len_ = max_len;
  t.words_ = words;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!t.index_.emplace(words[i], kWordBase + static_cast<int>(i)).second) {
      throw Error(ErrorCode::parse, "duplicate vocabulary word '" + words[i] + "'");
    }
  }
  return t;
}

int Tokenizer::word_id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> Tokenizer::tokenize(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& token : split_tokens(text)) {
    if (token.size() == 1) {
      ids.push_back(kByteBase + static_cast<unsigned char>(token[0]));
      continue;
    }
    const int id = word_id(token);
    if (id >= 0) {
      ids.push_back(id);
    } else {
      for (char c : token) ids.push_back(kByteBase + static_cast<unsigned char>(c));
    }
  }
  return ids;
}

std::string Tokenizer::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) {
      throw Error(ErrorCode::range_violation, "token id " + std::to_string(id) + " out of range");
    }
    if (id < kByteBase) continue;  // specials render as nothing
    if (id < kWordBase) {
      out.push_back(static_cast<char>(id - kByteBase));
    } else {
      out += words_[id - kWordBase];
    }
  }
  return out;
}

TextEmbedder::TextEmbedder(std::uint64_t seed, int dim) : seed_(seed), dim_(dim) {
  if (dim < 2) throw Error(ErrorCode::usage, "embedding dim must be at least 2");
}

Eigen::VectorXd TextEmbedder::token_vector(std::string_view token) const {
  Rng rng(seed_stream(seed_, "tok-embed", fnv1a64(token)));
  Eigen::VectorXd v(dim_);
  for (int i = 0; i < dim_; ++i) v[i] = rng.normal();
  return v / std::sqrt(static_cast<double>(dim_));
}

Eigen::VectorXd TextEmbedder::position_mix(int t) const {
  Eigen::VectorXd p(dim_);
  for (int i = 0; i * 2 < dim_; ++i) {
    const double angle = t / std::pow(10000.0, (2.0 * i) / dim_);
    p[2 * i] = std::sin(angle);
    if (2 * i + 1 < dim_) p[2 * i + 1] = std::cos(angle);
  }
  return p;
}

Eigen::VectorXd TextEmbedder::embed_text(std::string_view text) const {
  const std::vector<std::string> tokens = split_tokens(text);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim_);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    sum += token_vector(tokens[t]) + 0.05 * position_mix(static_cast<int>(t));
  }
  const double norm = sum.norm();
  if (norm < 1e-12) return Eigen::VectorXd::Zero(dim_);
  return sum / norm;
}

Eigen::MatrixXd TextEmbedder::embed_tokens(std::string_view text) const {
  const std::vector<std::string> tokens = split_tokens(text);
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(tokens.size()), dim_);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    rows.row(static_cast<Eigen::Index>(t)) =
        (token_vector(tokens[t]) + position_mix(static_cast<int>(t))).transpose();
  }
  return rows;
}

}  // namespace prism
