#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <string>
#include <vector>

#include "prism/common.hpp"
#include "prism/descriptions.hpp"
#include "prism/text.hpp"

using namespace prism;

namespace {

const std::vector<std::string> kCorpus = {
    "(circle: red solid, left of the square: left-half), (square: blue solid, right of the "
    "circle: right-half), white background",
    "(triangle: green striped: top-half), (circle: yellow solid: bottom-half), gray background",
};

}  // namespace

TEST_CASE("token splitting reassembles the input exactly") {
  for (const std::string& text : kCorpus) {
    std::string joined;
    for (const std::string& token : split_tokens(text)) joined += token;
    CHECK(joined == text);
  }
  CHECK(split_tokens("left-half").size() == 1);  // '-' binds words
  CHECK(split_tokens("a b").size() == 3);
}

TEST_CASE("tokenizer round-trips corpus and arbitrary strings") {
  const Tokenizer tok = Tokenizer::build(kCorpus);
  for (const std::string& text : kCorpus) {
    CHECK(tok.detokenize(tok.tokenize(text)) == text);
  }
  // Out-of-vocabulary and multi-byte input survives via byte fallback.
  const std::string weird = "caf\xc3\xa9 \xf0\x9f\x8e\xa8 novel-words";
  CHECK(tok.detokenize(tok.tokenize(weird)) == weird);
  CHECK(tok.detokenize({Tokenizer::kBos, Tokenizer::kEos, Tokenizer::kPad}) == "");
}

TEST_CASE("corpus text never needs byte fallback") {
  const Tokenizer tok = Tokenizer::build(kCorpus);
  for (const std::string& text : kCorpus) {
    for (int id : tok.tokenize(text)) {
      const bool word = id >= Tokenizer::kWordBase;
      const bool single_char = id >= Tokenizer::kByteBase && id < Tokenizer::kWordBase;
      // Multi-char words resolve in the vocabulary; single chars use the
      // fixed byte table by construction, which is not a fallback.
      CHECK((word || single_char));
      if (single_char) {
        const char c = static_cast<char>(id - Tokenizer::kByteBase);
        CHECK(!std::isalnum(static_cast<unsigned char>(c)));
      }
    }
  }
  CHECK(tok.word_id("circle") >= Tokenizer::kWordBase);
  CHECK(tok.word_id("zebra") == -1);
}

TEST_CASE("serialized descriptions tokenize with zero unknown tokens") {
  const Tokenizer tok = Tokenizer::build(kCorpus);
  Rng rng(5);
  const std::vector<std::string> names = {"circle", "square", "triangle"};
  const std::vector<std::string> descs = {"red solid", "blue striped", "green solid"};
  for (int i = 0; i < 50; ++i) {
    StructuredDescription d;
    const auto a = rng.below(5);
    auto b = rng.below(5);
    while (b == a) b = rng.below(5);
    d.objects[0] = {names[rng.below(3)], descs[rng.below(3)], kAllLocations[a]};
    d.objects[1] = {names[rng.below(3)], descs[rng.below(3)], kAllLocations[b]};
    d.background = "white background";
    const std::string wire = serialize_description(d);
    const auto ids = tok.tokenize(wire);
    CHECK(std::count(ids.begin(), ids.end(), Tokenizer::kUnk) == 0);
    CHECK(tok.detokenize(ids) == wire);
  }
}

TEST_CASE("tokenizer vocabulary survives a word-list rebuild") {
  const Tokenizer tok = Tokenizer::build(kCorpus, 128);
  const Tokenizer again = Tokenizer::from_words(tok.words(), tok.max_len());
  CHECK(again.vocab_size() == tok.vocab_size());
  CHECK(again.max_len() == 128);
  for (const std::string& text : kCorpus) CHECK(again.tokenize(text) == tok.tokenize(text));
}

TEST_CASE("embed_text is unit-norm, empty-safe and deterministic") {
  const TextEmbedder emb;
  const Eigen::VectorXd v = emb.embed_text(kCorpus[0]);
  CHECK(v.size() == 64);
  CHECK(v.norm() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(emb.embed_text("").norm() == 0.0);
  CHECK((emb.embed_text(kCorpus[0]) - v).norm() == 0.0);

  const TextEmbedder other(kDefaultTextEmbedSeed + 1);
  CHECK((other.embed_text(kCorpus[0]) - v).norm() > 1e-3);
}

TEST_CASE("changing only the location word moves the embedding") {
  const TextEmbedder emb;
  const std::string a = "(a: b: left-half), (c: d: right-half), sky";
  const std::string b = "(a: b: top-half), (c: d: right-half), sky";
  const double cosine = emb.embed_text(a).dot(emb.embed_text(b));
  CHECK(cosine < 1.0 - 1e-6);
  CHECK(cosine > 0.0);  // mostly shared tokens keep them close
}

TEST_CASE("embed_tokens yields one row per token") {
  const TextEmbedder emb;
  const std::string text = "red circle";
  const Eigen::MatrixXd rows = emb.embed_tokens(text);
  CHECK(rows.rows() == 3);  // "red", " ", "circle"
  CHECK(rows.cols() == 64);
  CHECK(rows.allFinite());
  // Same token at different positions differs only by the position mix.
  const Eigen::MatrixXd twice = emb.embed_tokens("red red");
  CHECK((twice.row(0) - twice.row(2)).norm() > 1e-9);
}
