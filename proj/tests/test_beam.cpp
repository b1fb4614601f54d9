#include <doctest.h>

#include <algorithm>
#include <random>

#include "jtnmt/beam.hpp"
#include "oracles.hpp"

using namespace jtnmt;
using beam::Hypothesis;

namespace {

model::ModelConfig config(int vocab) {
  model::ModelConfig c;
  c.src_vocab = vocab;
  c.tgt_vocab = vocab;
  c.d_emb = 4;
  c.d_hidden = 5;
  c.d_att = 4;
  c.max_len = 30;
  return c;
}

// Greedy argmax decoding written directly against decode_step.
data::TokenIds greedy(const model::ModelParams& p, const data::TokenIds& src, int max_len) {
  const auto enc = model::encode(p, src);
  model::Tensor state = enc.initial_state;
  data::TokenIds out;
  int prev = data::kBos;
  for (int t = 0; t < max_len; ++t) {
    const int pv[] = {prev};
    const auto step = model::decode_step(p, state, pv, enc);
    Eigen::Index best = data::kEos;
    for (Eigen::Index v = data::kEos; v < step.log_probs.cols(); ++v) {
      if (step.log_probs(0, v) > step.log_probs(0, best)) best = v;
    }
    out.push_back(static_cast<int>(best));
    if (best == data::kEos) break;
    state = step.state;
    prev = static_cast<int>(best);
  }
  return out;
}

}  // namespace

TEST_CASE("normalized_score") {
  CHECK(beam::normalized_score({{5, 6, 7, data::kEos}, -2.0, true, false}) == -0.5);
  CHECK(beam::normalized_score({{data::kEos}, -1.5, true, false}) == -1.5);
  const Hypothesis shorter{{5, data::kEos}, -3.0, true, false};
  const Hypothesis longer{{5, 6, 7, data::kEos}, -3.0, true, false};
  CHECK(beam::normalized_score(longer) > beam::normalized_score(shorter));
  CHECK_THROWS_AS(beam::normalized_score({}), std::invalid_argument);
}

TEST_CASE("beam size 1 is greedy decoding") {
  std::mt19937_64 rng(3);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto p = oracles::random_params(config(8), seed, 0.8);
    const auto src = oracles::random_sentence(rng, 8, 1, 6);
    const auto nb = beam::beam_search(p, src, 1, 1, 12);
    REQUIRE(nb.hypotheses.size() == 1);
    const data::TokenIds g = greedy(p, src, 12);
    if (g.back() == data::kEos) CHECK(nb.hypotheses[0].token_ids == g);
  }
}

TEST_CASE("exhaustive beam finds the enumerated optimum") {
  std::mt19937_64 rng(4);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto p = oracles::random_params(config(6), seed, 1.0);
    const auto src = oracles::random_sentence(rng, 6, 1, 4);
    const int max_len = 3;
    const auto all = oracles::enumerate_all(p, src, max_len);
    const auto best = *std::max_element(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.log_prob / static_cast<double>(a.tokens.size()) <
             b.log_prob / static_cast<double>(b.tokens.size());
    });
    const auto nb = beam::beam_search(p, src, 216, 1, max_len);
    REQUIRE(nb.hypotheses.size() == 1);
    CHECK(nb.hypotheses[0].token_ids == best.tokens);
    CHECK(nb.hypotheses[0].log_prob == doctest::Approx(best.log_prob).epsilon(1e-10));
  }
}

TEST_CASE("n-best lists are distinct, sorted, finished, and consistent with teacher forcing") {
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto p = oracles::random_params(config(9), seed, 0.7);
    const auto src = oracles::random_sentence(rng, 9, 2, 7);
    const auto nb = beam::beam_search(p, src, 4, 4, 15);
    REQUIRE_FALSE(nb.hypotheses.empty());
    for (std::size_t k = 0; k < nb.hypotheses.size(); ++k) {
      const Hypothesis& h = nb.hypotheses[k];
      CHECK(h.finished);
      CHECK(h.token_ids.back() == data::kEos);
      CHECK(h.log_prob <= 0.0);
      CHECK(std::abs(oracles::teacher_forced(p, src, h.token_ids) - h.log_prob) < 1e-10);
      if (k > 0) {
        CHECK(beam::normalized_score(h) <= beam::normalized_score(nb.hypotheses[k - 1]));
        CHECK(h.token_ids != nb.hypotheses[k - 1].token_ids);
      }
    }
  }
}

TEST_CASE("no narrower beam beats the exhaustive beam") {
  // Beam search is not monotone in general (a wider beam can prune the greedy
  // path or fill its pool earlier); only the exhaustive width is an upper bound.
  std::mt19937_64 rng(6);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto p = oracles::random_params(config(6), seed, 0.8);
    const auto src = oracles::random_sentence(rng, 6, 2, 5);
    const double exact = beam::normalized_score(beam::beam_search(p, src, 216, 1, 3).hypotheses[0]);
    for (int b : {1, 2, 4, 8}) {
      const auto nb = beam::beam_search(p, src, b, 1, 3);
      if (!nb.forced) CHECK(beam::normalized_score(nb.hypotheses[0]) <= exact + 1e-12);
    }
  }
}

TEST_CASE("force-finish when nothing emits EOS") {
  auto p = oracles::random_params(config(7), 2, 0.5);
  p.out_b.value(0, data::kEos) = -60.0;
  const data::TokenIds src = {4, 5};
  const auto nb = beam::beam_search(p, src, 3, 2, 4);
  CHECK(nb.forced);
  REQUIRE_FALSE(nb.hypotheses.empty());
  for (const auto& h : nb.hypotheses) {
    CHECK(h.forced);
    CHECK(h.token_ids.size() == 5);
    CHECK(h.token_ids.back() == data::kEos);
    CHECK(std::abs(oracles::teacher_forced(p, src, h.token_ids) - h.log_prob) < 1e-10);
  }
}

TEST_CASE("argument checks") {
  const auto p = oracles::random_params(config(7), 2, 0.5);
  const data::TokenIds src = {4};
  CHECK_THROWS_AS(beam::beam_search(p, src, 2, 3, 5), std::invalid_argument);
  CHECK_THROWS_AS(beam::beam_search(p, src, 2, 0, 5), std::invalid_argument);
  CHECK_THROWS_AS(beam::beam_search(p, src, 2, 1, 0), std::invalid_argument);
  CHECK(beam::default_max_len(3) == 11);
  CHECK(beam::default_max_len(40) == 60);
}

TEST_CASE("batch_translate keeps input order and isolates failures") {
  const auto p = oracles::random_params(config(9), 7, 0.7);
  std::mt19937_64 rng(8);
  std::vector<data::TokenIds> src;
  for (std::size_t len = 10; len >= 1; --len) src.push_back(oracles::random_sentence(rng, 9, len, len));
  src.insert(src.begin() + 3, data::TokenIds{42});  // outside the vocabulary

  const auto out = beam::batch_translate(p, src, 4, 2);
  REQUIRE(out.size() == src.size());
  CHECK_FALSE(out[3].nbest);
  CHECK_FALSE(out[3].error.empty());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (i == 3) continue;
    REQUIRE(out[i].nbest);
    const auto alone = beam::beam_search(p, src[i], 4, 2, beam::default_max_len(src[i].size(), 30));
    REQUIRE(alone.hypotheses.size() == out[i].nbest->hypotheses.size());
    for (std::size_t k = 0; k < alone.hypotheses.size(); ++k) {
      CHECK(alone.hypotheses[k].token_ids == out[i].nbest->hypotheses[k].token_ids);
      CHECK(alone.hypotheses[k].log_prob == out[i].nbest->hypotheses[k].log_prob);
    }
  }

  std::vector<data::TokenIds> shuffled = src;
  std::vector<std::size_t> perm(src.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = src[perm[i]];
  const auto out2 = beam::batch_translate(p, shuffled, 4, 2);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(out2[i].nbest.has_value() == out[perm[i]].nbest.has_value());
    if (out2[i].nbest) {
      CHECK(out2[i].nbest->hypotheses[0].token_ids == out[perm[i]].nbest->hypotheses[0].token_ids);
    }
  }
}
