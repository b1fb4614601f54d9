#pragma once

// Weighted maximum-likelihood training: sentence-weighted batch loss,
// global-norm clipping, Adadelta, and the epoch loop with dev selection.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "jtnmt/model.hpp"

namespace jtnmt::trainer {

using model::ModelParams;
using numerics::Parameter;

/// Target ids exclude EOS; it is appended when the pair is scored.
struct WeightedPair {
  data::TokenIds source_ids;
  data::TokenIds target_ids;
  double weight = 1.0;
};

/// Throws std::invalid_argument unless weight is in (0, 1] and both sides
/// are non-empty and no longer than config.max_len.
void check_pair(const WeightedPair& pair, const model::ModelConfig& config);

struct TrainConfig {
  int batch_size = 16;
  double clip_norm = 2.0;
  int max_epochs = 10;
  /// Non-improving epochs tolerated before stopping; negative disables.
  int patience = -1;
  std::uint64_t seed = 1;
  double rho = 0.95;
  double epsilon = 1e-6;

  void validate() const;
};

/// -(1/K) sum_k w_k log p(y_k | x_k) over the K pairs of the batch.
double batch_loss(ModelParams& params, std::span<const WeightedPair> batch);

/// Same value; additionally accumulates d loss / d theta into Parameter::grad.
double batch_loss_and_grad(ModelParams& params, std::span<const WeightedPair> batch);

double global_norm(std::span<Parameter* const> params);

/// Rescales all gradients by clip_norm / norm when the global norm exceeds
/// clip_norm. Returns the norm before clipping. Non-finite gradients throw
/// std::domain_error and leave the gradients untouched.
double clip_gradients(std::span<Parameter* const> params, double clip_norm);

class Adadelta {
 public:
  Adadelta(const ModelParams& params, double rho = 0.95, double epsilon = 1e-6);

  /// theta += -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g, using the
  /// gradients currently stored in each Parameter.
  void step(ModelParams& params);

  const std::vector<numerics::Tensor>& sq_grad() const { return sq_grad_; }
  const std::vector<numerics::Tensor>& sq_update() const { return sq_update_; }

 private:
  double rho_;
  double epsilon_;
  std::vector<numerics::Tensor> sq_grad_;
  std::vector<numerics::Tensor> sq_update_;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> dev_metric;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelParams best;
  int best_epoch = -1;  // -1: no epoch completed, `best` is the input
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string abort_reason;
};

/// Higher is better (dev BLEU in practice).
using DevCallback = std::function<double(const ModelParams&)>;

/// Epoch loop over shuffled length-bucketed mini-batches. Returns the epoch
/// with the best dev metric (lowest mean loss without a callback). A
/// non-finite loss or gradient stops training and returns the best params
/// seen so far with `diverged` set. When `log` is given, one JSON object per
/// epoch is written to it.
TrainResult train(ModelParams params, std::span<const WeightedPair> corpus, const DevCallback& dev,
                  const TrainConfig& config, std::ostream* log = nullptr);

}  // namespace jtnmt::trainer
