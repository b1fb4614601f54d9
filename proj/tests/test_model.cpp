#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "jtnmt/model.hpp"
#include "oracles.hpp"

using namespace jtnmt;
using model::ModelConfig;
using model::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.src_vocab = 7;
  c.tgt_vocab = 7;
  c.d_emb = 4;
  c.d_hidden = 6;
  c.d_att = 5;
  c.max_len = 20;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.tgt_vocab = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("initialization: weights spread by fan sizes, biases zero") {
  ModelConfig c = tiny_config();
  c.d_hidden = 40;
  c.d_att = 40;
  const auto p = model::init_params(c, 3);
  CHECK(p.init_b.value.isZero());
  CHECK(p.enc_fwd.bx.value.isZero());
  CHECK(p.out_b.value.isZero());
  const Tensor& w = p.dec.u_cand.value;  // 40 x 40
  const double var = w.squaredNorm() / static_cast<double>(w.size());
  CHECK(var == doctest::Approx(6.0 / 80.0).epsilon(0.15));
  const auto q = model::init_params(c, 3);
  CHECK(q.dec.u_cand.value == w);
}

TEST_CASE("an all-zero model predicts the uniform distribution") {
  const auto p = model::zero_params(tiny_config());
  const data::TokenIds src = {4, 5, 6};
  const data::TokenIds tgt = {5, 4, data::kEos};
  CHECK(model::sequence_log_prob(p, src, tgt) == doctest::Approx(-3.0 * std::log(7.0)));
}

TEST_CASE("attention weights are distributions over source positions") {
  const auto p = oracles::random_params(tiny_config(), 4);
  const auto enc = model::encode(p, data::TokenIds{4, 5, 6, 4});
  CHECK(enc.annotations.rows() == 4);
  CHECK(enc.annotations.cols() == 12);
  const Tensor states = Tensor::Random(3, 6);
  const Tensor a = model::attention_weights(p, states, enc);
  CHECK(a.rows() == 3);
  for (Eigen::Index r = 0; r < 3; ++r) {
    CHECK(a.row(r).sum() == doctest::Approx(1.0));
    CHECK(a.row(r).minCoeff() >= 0.0);
  }
}

TEST_CASE("graph path, batched graph path, and inference path agree") {
  ModelConfig c = tiny_config();
  const auto p0 = oracles::random_params(c, 11);
  auto p = p0;
  std::mt19937_64 rng(5);
  std::vector<data::TokenIds> src;
  std::vector<data::TokenIds> tgt;
  for (int i = 0; i < 6; ++i) {
    src.push_back(oracles::random_sentence(rng, c.src_vocab, 1, 7));
    tgt.push_back(oracles::random_sentence(rng, c.tgt_vocab, 1, 6));
    tgt.back().push_back(data::kEos);
  }
  numerics::Graph g;
  const model::ParamVars pv(g, p);
  std::vector<const data::TokenIds*> s;
  std::vector<const data::TokenIds*> t;
  for (int i = 0; i < 6; ++i) {
    s.push_back(&src[i]);
    t.push_back(&tgt[i]);
  }
  const auto lp = model::batch_log_probs(g, pv, c, s, t);
  for (int i = 0; i < 6; ++i) {
    const double single = model::sequence_log_prob(p0, src[i], tgt[i]);
    CHECK(g.value(lp)(i, 0) == doctest::Approx(single).epsilon(1e-12));
    CHECK(oracles::teacher_forced(p0, src[i], tgt[i]) == doctest::Approx(single).epsilon(1e-12));
  }

  // Padding must not leak into gradients: batch gradient = sum of singles.
  g.backward(g.sum(lp));
  auto q = p0;
  for (int i = 0; i < 6; ++i) model::graph_sequence_log_prob(q, src[i], tgt[i], true);
  const auto pa = p.all();
  const auto qa = q.all();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    CHECK((pa[k]->grad - qa[k]->grad).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("analytic gradients match finite differences") {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto p = oracles::random_params(tiny_config(), seed);
    std::mt19937_64 rng(seed);
    const auto src = oracles::random_sentence(rng, 7, 2, 5);
    auto tgt = oracles::random_sentence(rng, 7, 1, 4);
    tgt.push_back(data::kEos);
    const auto r = oracles::check_sequence_gradient(p, src, tgt);
    INFO("worst entry " << r.worst);
    CHECK(r.max_rel_error < 1e-3);
    CHECK(r.checked == p.num_values());
  }
}

TEST_CASE("input validation") {
  const auto p = model::zero_params(tiny_config());
  CHECK_THROWS_AS(model::sequence_log_prob(p, data::TokenIds{}, data::TokenIds{data::kEos}),
                  std::invalid_argument);
  CHECK_THROWS_AS(model::sequence_log_prob(p, data::TokenIds{4}, data::TokenIds{}),
                  std::invalid_argument);
  CHECK_THROWS_AS(model::sequence_log_prob(p, data::TokenIds{4}, data::TokenIds{5}),
                  std::invalid_argument);
  CHECK_THROWS_AS(model::sequence_log_prob(p, data::TokenIds{9}, data::TokenIds{data::kEos}),
                  std::out_of_range);
  CHECK_THROWS_AS(model::encode(p, data::TokenIds(21, 4)), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip exactly and name missing paths") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "jtnmt_test_ckpt";
  fs::create_directories(dir);
  auto p = oracles::random_params(tiny_config(), 8);
  p.lineage = {"init:seed=8"};
  model::save_checkpoint(p, dir / "m.ckpt");
  const auto q = model::load_checkpoint(dir / "m.ckpt");
  CHECK(q.config == p.config);
  CHECK(q.lineage == p.lineage);
  const auto pa = p.all();
  const auto qa = q.all();
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == qa[k]->value);
  try {
    model::load_checkpoint(dir / "absent.ckpt");
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("absent.ckpt") != std::string::npos);
  }
}
