#include "jtnmt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace jtnmt::trainer {

using numerics::Graph;
using numerics::Tensor;
using numerics::Var;

void check_pair(const WeightedPair& pair, const model::ModelConfig& config) {
  if (!(pair.weight > 0.0 && pair.weight <= 1.0)) {
    throw std::invalid_argument("pair weight must be in (0, 1], got " + std::to_string(pair.weight));
  }
  const auto cap = static_cast<std::size_t>(config.max_len);
  if (pair.source_ids.empty() || pair.target_ids.empty()) {
    throw std::invalid_argument("pair has an empty side");
  }
  if (pair.source_ids.size() > cap || pair.target_ids.size() > cap) {
    throw std::invalid_argument("pair longer than max_len " + std::to_string(cap));
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("rho must be in (0, 1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
}

namespace {

double run_batch(ModelParams& params, std::span<const WeightedPair> batch, bool with_grad) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  std::vector<data::TokenIds> targets;
  targets.reserve(batch.size());
  std::vector<const data::TokenIds*> src;
  std::vector<const data::TokenIds*> tgt;
  Tensor weights(static_cast<Eigen::Index>(batch.size()), 1);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    check_pair(batch[k], params.config);
    targets.push_back(batch[k].target_ids);
    targets.back().push_back(data::kEos);
    weights(static_cast<Eigen::Index>(k), 0) = batch[k].weight;
  }
  for (std::size_t k = 0; k < batch.size(); ++k) {
    src.push_back(&batch[k].source_ids);
    tgt.push_back(&targets[k]);
  }

  Graph g;
  const model::ParamVars pv(g, params);
  const Var lp = model::batch_log_probs(g, pv, params.config, src, tgt);
  const Var scale = g.input(Tensor::Constant(1, 1, -1.0 / static_cast<double>(batch.size())));
  const Var loss = g.mul(g.sum(g.mul(lp, g.input(std::move(weights)))), scale);
  if (with_grad) g.backward(loss);
  return g.value(loss)(0, 0);
}

}  // namespace

double batch_loss(ModelParams& params, std::span<const WeightedPair> batch) {
  return run_batch(params, batch, false);
}

double batch_loss_and_grad(ModelParams& params, std::span<const WeightedPair> batch) {
  return run_batch(params, batch, true);
}

double global_norm(std::span<Parameter* const> params) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

double clip_gradients(std::span<Parameter* const> params, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be > 0");
  const double norm = global_norm(params);
  if (!std::isfinite(norm)) throw std::domain_error("non-finite gradient norm");
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (Parameter* p : params) p->grad *= scale;
  }
  return norm;
}

Adadelta::Adadelta(const ModelParams& params, double rho, double epsilon)
    : rho_(rho), epsilon_(epsilon) {
  for (const Parameter* p : params.all()) {
    sq_grad_.push_back(Tensor::Zero(p->value.rows(), p->value.cols()));
    sq_update_.push_back(Tensor::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adadelta::step(ModelParams& params) {
  const std::vector<Parameter*> ps = params.all();
  if (ps.size() != sq_grad_.size()) throw std::invalid_argument("Adadelta: parameter count changed");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto g = ps[i]->grad.array();
    auto eg = sq_grad_[i].array();
    auto ex = sq_update_[i].array();
    if (g.rows() != eg.rows() || g.cols() != eg.cols()) {
      throw std::invalid_argument("Adadelta: shape mismatch for " + ps[i]->name);
    }
    eg = rho_ * eg + (1.0 - rho_) * g.square();
    const Eigen::ArrayXXd dx = -((ex + epsilon_).sqrt() / (eg + epsilon_).sqrt()) * g;
    ex = rho_ * ex + (1.0 - rho_) * dx.square();
    ps[i]->value.array() += dx;
  }
}

namespace {

// Shuffle, sort by length inside pools of 20 batches to limit padding, then
// shuffle the batch order.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const WeightedPair> corpus,
                                                    std::size_t batch_size, std::uint64_t seed,
                                                    int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t pool = batch_size * 20;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t lo = 0; lo < order.size(); lo += pool) {
    const auto first = order.begin() + static_cast<std::ptrdiff_t>(lo);
    const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), lo + pool));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return corpus[a].target_ids.size() + corpus[a].source_ids.size() <
             corpus[b].target_ids.size() + corpus[b].source_ids.size();
    });
    for (auto it = first; it < last; it += static_cast<std::ptrdiff_t>(
                                          std::min<std::size_t>(batch_size, last - it))) {
      batches.emplace_back(it, it + static_cast<std::ptrdiff_t>(
                                        std::min<std::size_t>(batch_size, last - it)));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace

TrainResult train(ModelParams params, std::span<const WeightedPair> corpus, const DevCallback& dev,
                  const TrainConfig& config, std::ostream* log) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  for (const WeightedPair& p : corpus) check_pair(p, params.config);

  TrainResult result;
  result.best = params;
  double best_metric = -std::numeric_limits<double>::infinity();
  int stale = 0;
  Adadelta opt(params, config.rho, config.epsilon);
  const std::vector<Parameter*> ps = params.all();
  std::vector<WeightedPair> batch;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    try {
      for (const auto& idx : epoch_batches(corpus, static_cast<std::size_t>(config.batch_size),
                                           config.seed, epoch)) {
        batch.clear();
        for (std::size_t i : idx) batch.push_back(corpus[i]);
        params.zero_grad();
        const double loss = batch_loss_and_grad(params, batch);
        clip_gradients(ps, config.clip_norm);
        opt.step(params);
        loss_sum += loss * static_cast<double>(idx.size());
      }
    } catch (const std::domain_error& e) {
      result.diverged = true;
      result.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(corpus.size());
    if (dev) rec.dev_metric = dev(params);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (log) {
      nlohmann::json j = {{"epoch", rec.epoch}, {"loss", rec.mean_loss},
                          {"wall_s", rec.wall_seconds}};
      j["dev"] = rec.dev_metric ? nlohmann::json(*rec.dev_metric) : nlohmann::json(nullptr);
      *log << j.dump() << '\n';
      log->flush();
    }

    const double metric = rec.dev_metric ? *rec.dev_metric : -rec.mean_loss;
    if (metric > best_metric) {
      best_metric = metric;
      result.best = params;
      result.best_epoch = epoch;
      stale = 0;
    } else if (config.patience >= 0 && ++stale > config.patience) {
      break;
    }
  }
  return result;
}

}  // namespace jtnmt::trainer
