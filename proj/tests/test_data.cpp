#include <doctest.h>

#include <filesystem>
#include <set>

#include "jtnmt/data.hpp"

using namespace jtnmt::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("jtnmt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("  The CAT\tsat  ") == Sentence{"the", "cat", "sat"});
  CHECK(tokenize("").empty());
  CHECK(join({"a", "b"}) == "a b");
}

TEST_CASE("vocabulary keeps reserved ids and round-trips") {
  const Vocabulary v = build_vocab({{"b", "a", "c"}, {"a"}}, 10);
  CHECK(v.size() == 3 + kNumReserved);
  CHECK(v.id("<pad>") == kPad);
  CHECK(v.id("</s>") == kEos);
  CHECK(v.id("a") == kNumReserved);  // most frequent first
  CHECK(v.id("b") == kNumReserved + 1);  // tie with c broken lexicographically
  CHECK(v.id("zzz") == kUnk);
  const Sentence s = {"c", "a", "b"};
  CHECK(v.decode(v.encode(s)) == s);
  CHECK(v.decode({v.id("a"), kEos, v.id("b")}) == Sentence{"a"});
}

TEST_CASE("build_vocab keeps the more frequent token at the size boundary") {
  const Vocabulary v = build_vocab({{"once", "twice", "twice", "top", "top", "top"}}, 2);
  CHECK(v.contains("twice"));
  CHECK_FALSE(v.contains("once"));
  CHECK(v.id("once") == kUnk);
}

TEST_CASE("vocabulary save and load") {
  const fs::path dir = scratch_dir("vocab");
  const Vocabulary v({"x1", "x2", "x0"});
  v.save(dir / "v.txt");
  const Vocabulary w = Vocabulary::load(dir / "v.txt");
  CHECK(w.words() == v.words());
  CHECK_THROWS(Vocabulary({"a", "a"}));
}

TEST_CASE("filter_by_length drops a pair when either side is too long") {
  ParallelCorpus c;
  c.source = {Sentence(61, "a"), Sentence(3, "a"), Sentence(60, "a")};
  c.target = {Sentence(10, "b"), Sentence(70, "b"), Sentence(60, "b")};
  FilterReport r;
  const ParallelCorpus f = filter_by_length(c, 60, &r);
  CHECK(f.size() == 1);
  CHECK(r.dropped == 2);
  CHECK(r.kept == 1);
  const ParallelCorpus again = filter_by_length(f, 60, &r);
  CHECK(again.source == f.source);
  CHECK(r.dropped == 0);
  CHECK(filter_by_length(c, 1).size() == 0);
}

TEST_CASE("make_batches shapes, padding, and determinism") {
  std::vector<TokenIds> s;
  for (int i = 0; i < 10; ++i) s.push_back(TokenIds(static_cast<std::size_t>(1 + (i * 7) % 5), 4 + i));
  const auto shuffled = make_batches(s, 4, 3, false);
  REQUIRE(shuffled.size() == 3);
  CHECK(shuffled[0].indices.size() == 4);
  CHECK(shuffled[2].indices.size() == 2);
  const auto again = make_batches(s, 4, 3, false);
  for (std::size_t b = 0; b < 3; ++b) CHECK(again[b].indices == shuffled[b].indices);
  for (const Batch& b : shuffled) {
    for (std::size_t r = 0; r < b.indices.size(); ++r) {
      for (std::size_t t = b.lengths[r]; t < b.max_len; ++t) CHECK(b.ids[r * b.max_len + t] == kPad);
    }
  }

  // Sorted mode: buckets are consecutive runs of the stable length order.
  const auto sorted = make_batches(s, 4, 0, true);
  std::vector<std::size_t> lengths;
  for (const auto& x : s) lengths.push_back(x.size());
  std::sort(lengths.begin(), lengths.end());
  std::size_t at = 0;
  for (const Batch& b : sorted) {
    const auto [lo, hi] = std::minmax_element(b.lengths.begin(), b.lengths.end());
    CHECK(*hi - *lo == lengths[at + b.lengths.size() - 1] - lengths[at]);
    at += b.lengths.size();
  }
}

TEST_CASE("weighted corpus lines") {
  const WeightedLine l{0.25, {"a", "b"}, {"c"}};
  CHECK(format_weighted(l) == "0.250000\ta b\tc");
  const WeightedLine p = parse_weighted("1.000000\tx y\tz");
  CHECK(p.weight == 1.0);
  CHECK(p.source == Sentence{"x", "y"});
  CHECK_THROWS(parse_weighted("1.5\ta\tb"));
  CHECK_THROWS(parse_weighted("0\ta\tb"));
  CHECK_THROWS(parse_weighted("0.5\tab"));
  const fs::path dir = scratch_dir("weighted");
  write_weighted(dir / "w.tsv", {l, p});
  const auto back = read_weighted(dir / "w.tsv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].weight == 0.25);
  CHECK(back[1].target == Sentence{"z"});
}

TEST_CASE("toy languages") {
  ToySpec spec;
  spec.seed = 5;
  const ToyLanguagePair lang(spec);

  SUBCASE("the cipher is a bijection") {
    std::set<std::string> images;
    for (std::size_t k = 0; k < spec.vocab_size; ++k) {
      const Sentence y = lang.translate({lang.source_word(k)});
      images.insert(y[0]);
    }
    CHECK(images.size() == spec.vocab_size);
  }
  SUBCASE("reordering swaps adjacent pairs") {
    ToySpec r = spec;
    r.transform = Transform::kCipherReorder;
    const ToyLanguagePair reorder(r);
    const Sentence x = {"x1", "x2", "x3"};
    const Sentence plain = lang.translate(x);
    CHECK(reorder.translate(x) == Sentence{plain[1], plain[0], plain[2]});
  }
  SUBCASE("too small a vocabulary is rejected") {
    ToySpec bad = spec;
    bad.vocab_size = 3;
    CHECK_THROWS_AS(ToyLanguagePair{bad}, std::invalid_argument);
  }
  SUBCASE("corpora are deterministic, disjoint, and noise only touches bitext") {
    ToySpec noisy = spec;
    noisy.noise_rate = 0.2;
    const ToyCorpora a = generate_toy_corpus(noisy, 200, 300, 300, 50, 50);
    const ToyCorpora b = generate_toy_corpus(noisy, 200, 300, 300, 50, 50);
    CHECK(a.bitext.source == b.bitext.source);
    CHECK(a.mono_y == b.mono_y);
    CHECK(a.bitext.size() == 200);
    CHECK(a.mono_x.size() == 300);
    CHECK(a.dev.size() == 50);

    std::set<Sentence> train(a.mono_x.begin(), a.mono_x.end());
    train.insert(a.bitext.source.begin(), a.bitext.source.end());
    for (const auto& s : a.dev.source) CHECK(train.count(s) == 0);
    for (const auto& s : a.test.source) CHECK(train.count(s) == 0);

    for (std::size_t i = 0; i < a.dev.size(); ++i) {
      CHECK(lang.translate(a.dev.source[i]) == a.dev.target[i]);
    }
    std::size_t corrupted = 0;
    for (std::size_t i = 0; i < a.bitext.size(); ++i) {
      if (lang.translate(a.bitext.source[i]) != a.bitext.target[i]) ++corrupted;
    }
    CHECK(corrupted > 0);
  }
}
