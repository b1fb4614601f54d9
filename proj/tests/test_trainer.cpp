#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "jtnmt/trainer.hpp"
#include "oracles.hpp"

using namespace jtnmt;
using trainer::WeightedPair;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.src_vocab = 10;
  c.tgt_vocab = 10;
  c.d_emb = 6;
  c.d_hidden = 8;
  c.d_att = 8;
  c.max_len = 20;
  return c;
}

std::vector<WeightedPair> random_pairs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<WeightedPair> out;
  std::uniform_real_distribution<double> w(0.05, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({oracles::random_sentence(rng, 10, 1, 6), oracles::random_sentence(rng, 10, 1, 6),
                   w(rng)});
  }
  return out;
}

double nll(const model::ModelParams& p, const WeightedPair& pair) {
  auto tgt = pair.target_ids;
  tgt.push_back(data::kEos);
  return -model::sequence_log_prob(p, pair.source_ids, tgt);
}

}  // namespace

TEST_CASE("batch_loss is the weighted mean negative log-likelihood") {
  auto p = oracles::random_params(small_config(), 2, 0.3);
  auto pairs = random_pairs(5, 9);

  SUBCASE("mixed weights match the per-pair recomputation") {
    double expected = 0.0;
    for (const auto& pr : pairs) expected += pr.weight * nll(p, pr);
    expected /= 5.0;
    CHECK(trainer::batch_loss(p, pairs) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("weight 1 everywhere is plain MLE") {
    double expected = 0.0;
    for (auto& pr : pairs) {
      pr.weight = 1.0;
      expected += nll(p, pr);
    }
    CHECK(std::abs(trainer::batch_loss(p, pairs) - expected / 5.0) < 1e-12);
  }
  SUBCASE("halving the weight of a single pair halves the loss") {
    WeightedPair one = pairs[0];
    one.weight = 1.0;
    const double full = trainer::batch_loss(p, std::span(&one, 1));
    one.weight = 0.5;
    CHECK(trainer::batch_loss(p, std::span(&one, 1)) == 0.5 * full);
  }
  SUBCASE("gradient of the batch loss equals the weighted sum of pair gradients") {
    p.zero_grad();
    trainer::batch_loss_and_grad(p, pairs);
    auto q = p;
    q.zero_grad();
    for (const auto& pr : pairs) {
      auto r = q;
      r.zero_grad();
      auto tgt = pr.target_ids;
      tgt.push_back(data::kEos);
      model::graph_sequence_log_prob(r, pr.source_ids, tgt, true);
      const auto ra = r.all();
      const auto qa = q.all();
      for (std::size_t k = 0; k < ra.size(); ++k) qa[k]->grad -= pr.weight / 5.0 * ra[k]->grad;
    }
    const auto pa = p.all();
    const auto qa = q.all();
    for (std::size_t k = 0; k < pa.size(); ++k) {
      CHECK((pa[k]->grad - qa[k]->grad).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("invalid pairs are rejected") {
    CHECK_THROWS(trainer::batch_loss(p, std::span<const WeightedPair>{}));
    WeightedPair bad = pairs[0];
    bad.weight = 0.0;
    CHECK_THROWS_AS(trainer::batch_loss(p, std::span(&bad, 1)), std::invalid_argument);
    bad.weight = 1.0;
    bad.target_ids.clear();
    CHECK_THROWS_AS(trainer::batch_loss(p, std::span(&bad, 1)), std::invalid_argument);
  }
}

TEST_CASE("clip_gradients") {
  numerics::Parameter a("a", numerics::Tensor::Zero(1, 2));
  numerics::Parameter b("b", numerics::Tensor::Zero(1, 1));
  std::vector<numerics::Parameter*> ps = {&a, &b};

  SUBCASE("norm below the threshold is untouched") {
    a.grad << 0.6, 0.0;
    b.grad << 0.8;
    CHECK(trainer::clip_gradients(ps, 2.0) == doctest::Approx(1.0));
    CHECK(a.grad(0, 0) == 0.6);
    CHECK(b.grad(0, 0) == 0.8);
  }
  SUBCASE("norm 4 with threshold 2 halves every entry") {
    a.grad << 2.4, 0.0;
    b.grad << 3.2;
    CHECK(trainer::clip_gradients(ps, 2.0) == doctest::Approx(4.0));
    CHECK(a.grad(0, 0) == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(b.grad(0, 0) == doctest::Approx(1.6).epsilon(1e-15));
    CHECK(trainer::global_norm(ps) <= 2.0 + 1e-9);
  }
  SUBCASE("zero gradients stay zero") {
    CHECK(trainer::clip_gradients(ps, 2.0) == 0.0);
    CHECK(a.grad.isZero());
  }
  SUBCASE("direction is preserved") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 10.0);
    a.grad << n(rng), n(rng);
    b.grad << n(rng);
    const Eigen::Vector3d before(a.grad(0, 0), a.grad(0, 1), b.grad(0, 0));
    trainer::clip_gradients(ps, 2.0);
    const Eigen::Vector3d after(a.grad(0, 0), a.grad(0, 1), b.grad(0, 0));
    CHECK(before.dot(after) / (before.norm() * after.norm()) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(after.norm() <= before.norm());
  }
  SUBCASE("non-finite gradients abort") {
    a.grad << std::numeric_limits<double>::infinity(), 0.0;
    CHECK_THROWS_AS(trainer::clip_gradients(ps, 2.0), std::domain_error);
  }
}

TEST_CASE("Adadelta update recurrence") {
  auto p = model::zero_params(small_config());
  trainer::Adadelta opt(p, 0.95, 1e-6);

  SUBCASE("zero gradient leaves parameters unchanged") {
    p.zero_grad();
    p.out_w.value.setConstant(0.5);
    opt.step(p);
    CHECK((p.out_w.value.array() == 0.5).all());
  }
  SUBCASE("two identical steps: the second moves further") {
    p.zero_grad();
    p.out_b.grad.setConstant(0.3);
    const double rho = 0.95;
    const double eps = 1e-6;
    // Direct recomputation of the recurrence for one scalar.
    double eg = 0.0;
    double ex = 0.0;
    double w = 0.0;
    std::vector<double> steps;
    for (int k = 0; k < 2; ++k) {
      eg = rho * eg + (1 - rho) * 0.09;
      const double dx = -std::sqrt(ex + eps) / std::sqrt(eg + eps) * 0.3;
      ex = rho * ex + (1 - rho) * dx * dx;
      w += dx;
      steps.push_back(std::abs(dx));
      const double before = p.out_b.value(0, 0);
      opt.step(p);
      CHECK(std::abs(p.out_b.value(0, 0) - before) == doctest::Approx(steps.back()).epsilon(1e-12));
    }
    CHECK(p.out_b.value(0, 0) == doctest::Approx(w).epsilon(1e-12));
    CHECK(steps[1] >= steps[0]);
    CHECK(opt.sq_grad().back()(0, 0) == doctest::Approx(eg));
    CHECK(opt.sq_update().back()(0, 0) >= 0.0);
  }
}

TEST_CASE("train") {
  const model::ModelConfig c = small_config();

  SUBCASE("a single pair is memorized") {
    const std::vector<WeightedPair> one = {{{4, 5, 6}, {7, 8}, 1.0}};
    trainer::TrainConfig tc;
    tc.max_epochs = 300;
    tc.batch_size = 1;
    const auto r = trainer::train(model::init_params(c, 1), one, nullptr, tc);
    CHECK(r.history.back().mean_loss < 0.1);
    CHECK(nll(r.best, one[0]) < 0.1);
  }
  SUBCASE("epoch loss falls over the first ten epochs") {
    auto pairs = random_pairs(50, 3);
    for (auto& p : pairs) p.weight = 1.0;
    trainer::TrainConfig tc;
    tc.max_epochs = 10;
    const auto r = trainer::train(model::init_params(c, 2), pairs, nullptr, tc);
    REQUIRE(r.history.size() == 10);
    for (std::size_t e = 1; e < r.history.size(); ++e) {
      CHECK(r.history[e].mean_loss < r.history[e - 1].mean_loss);
    }
  }
  SUBCASE("patience 0 stops after the first non-improving epoch") {
    const auto pairs = random_pairs(20, 4);
    trainer::TrainConfig tc;
    tc.max_epochs = 10;
    tc.patience = 0;
    int calls = 0;
    const std::vector<double> dev = {1.0, 2.0, 1.5, 3.0};
    const auto r = trainer::train(model::init_params(c, 2), pairs,
                                  [&](const model::ModelParams&) { return dev[calls++]; }, tc);
    CHECK(r.history.size() == 3);
    CHECK(r.best_epoch == 2);
  }
  SUBCASE("fixed seed gives identical loss histories and logs") {
    const auto pairs = random_pairs(30, 5);
    trainer::TrainConfig tc;
    tc.max_epochs = 3;
    tc.seed = 17;
    std::ostringstream l1;
    std::ostringstream l2;
    const auto a = trainer::train(model::init_params(c, 2), pairs, nullptr, tc, &l1);
    const auto b = trainer::train(model::init_params(c, 2), pairs, nullptr, tc, &l2);
    for (std::size_t e = 0; e < a.history.size(); ++e) {
      CHECK(a.history[e].mean_loss == b.history[e].mean_loss);
    }
    CHECK(a.best.out_w.value == b.best.out_w.value);
    CHECK(l1.str().find("\"loss\"") != std::string::npos);
  }
  SUBCASE("divergence returns the last good parameters") {
    const auto pairs = random_pairs(10, 6);
    auto p = model::init_params(c, 2);
    p.out_b.value(0, 5) = std::numeric_limits<double>::quiet_NaN();
    trainer::TrainConfig tc;
    tc.max_epochs = 2;
    const auto r = trainer::train(p, pairs, nullptr, tc);
    CHECK(r.diverged);
    CHECK(r.best_epoch == -1);
    CHECK(r.history.empty());
    CHECK_FALSE(r.abort_reason.empty());
  }
  SUBCASE("empty corpus is rejected") {
    CHECK_THROWS(trainer::train(model::init_params(c, 2), std::vector<WeightedPair>{}, nullptr, {}));
  }
}
