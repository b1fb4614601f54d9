#pragma once

// Attention-based encoder-decoder: bidirectional GRU encoder, GRU decoder,
// single-hidden-layer attention network, softmax readout.
//
// Row-vector convention: an input batch is B x d and weights are d x d'.
//
// GRU cell (input x, previous state h):
//   [r | u] = sigmoid(x Wx[:, :2H] + bx[:2H] + h U_gates)
//   c       = tanh(x Wx[:, 2H:] + bx[2H:] + (r * h) U_cand)
//   h'      = h + u * (c - h)                      (= (1 - u) h + u c)
//
// Encoder:  f_t = GRU_f(emb(x_t), f_{t-1}),  b_t = GRU_b(emb(x_t), b_{t+1}),
//           h_t = [f_t ; b_t],  f_0 = b_{T+1} = 0.
// Decoder:  z_0   = tanh(b_1 W_init + b_init)
//           e_t   = v . tanh(h_t U_att + z_{i-1} W_att + b_att)
//           alpha = softmax(e),  c_i = sum_t alpha_t h_t
//           z_i   = GRU_dec([emb(y_{i-1}) ; c_i], z_{i-1})
//           p(y_i | y_<i, x) = softmax([z_i ; c_i ; emb(y_{i-1})] W_out + b_out)
// Attention reads z_{i-1}, before the state update; y_0 is BOS.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "jtnmt/data.hpp"
#include "jtnmt/numerics.hpp"

namespace jtnmt::model {

using numerics::Parameter;
using numerics::Tensor;

struct ModelConfig {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int d_emb = 32;
  int d_hidden = 64;
  int d_att = 64;
  int max_len = 60;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct GruParams {
  Parameter wx;       // in x 3H
  Parameter bx;       // 1 x 3H
  Parameter u_gates;  // H x 2H
  Parameter u_cand;   // H x H
};

struct ModelParams {
  ModelConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> lineage;  // seeds / checkpoints this model descends from

  Parameter src_emb;  // |Vs| x E
  Parameter tgt_emb;  // |Vt| x E
  GruParams enc_fwd;
  GruParams enc_bwd;
  Parameter init_w;  // H x H
  Parameter init_b;  // 1 x H
  Parameter att_w;   // H x A   (decoder state)
  Parameter att_u;   // 2H x A  (annotations)
  Parameter att_b;   // 1 x A
  Parameter att_v;   // A x 1
  GruParams dec;     // input E + 2H
  Parameter out_w;   // (H + 2H + E) x |Vt|
  Parameter out_b;   // 1 x |Vt|

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  void zero_grad();
  std::size_t num_values() const;
};

/// Weights ~ normal(0, variance 6 / (rows + cols)); biases zero.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Every parameter set to zero (uniform output distribution).
ModelParams zero_params(const ModelConfig& config);

// ---- inference path (plain Eigen, no graph) -----------------------------------

struct EncodedSource {
  Tensor annotations;  // T x 2H, row t = [f_t ; b_t]
  Tensor keys;         // T x A, annotations * U_att
  Tensor initial_state;  // 1 x H
  std::size_t length() const { return static_cast<std::size_t>(annotations.rows()); }
};

struct StepOutput {
  Tensor state;      // k x H
  Tensor context;    // k x 2H
  Tensor log_probs;  // k x |Vt|
};

void check_source(const ModelConfig& config, std::span<const int> ids);

EncodedSource encode(const ModelParams& params, std::span<const int> source_ids);

/// k x T attention weights for k decoder states (rows of `states`).
Tensor attention_weights(const ModelParams& params, const Tensor& states, const EncodedSource& enc);

/// One decoder step for k hypotheses at once.
StepOutput decode_step(const ModelParams& params, const Tensor& states,
                       std::span<const int> prev_tokens, const EncodedSource& enc);

/// Teacher-forced sum of log p(y_i | y_<i, x); the target must end with EOS.
double sequence_log_prob(const ModelParams& params, std::span<const int> source_ids,
                         std::span<const int> target_ids);

/// Per-step log-probabilities of the gold tokens (same path as above).
std::vector<double> stepwise_log_probs(const ModelParams& params, std::span<const int> source_ids,
                                       std::span<const int> target_ids);

// ---- training path (graph) ----------------------------------------------------

/// Graph handles for every parameter, created once per graph.
struct ParamVars {
  numerics::Var src_emb, tgt_emb;
  numerics::Var enc_fwd[4], enc_bwd[4], dec[4];
  numerics::Var init_w, init_b, att_w, att_u, att_b, att_v, out_w, out_b;

  ParamVars(numerics::Graph& g, ModelParams& params);
};

/// B x 1 teacher-forced log-probabilities of targets given sources. Targets
/// must end with EOS. Sequences of unequal length are padded and masked.
numerics::Var batch_log_probs(numerics::Graph& g, const ParamVars& pv, const ModelConfig& config,
                              std::span<const data::TokenIds* const> sources,
                              std::span<const data::TokenIds* const> targets);

/// Graph-path log-probability of a single pair; useful for gradient checks.
double graph_sequence_log_prob(ModelParams& params, const data::TokenIds& source,
                               const data::TokenIds& target, bool accumulate_grad);

// ---- checkpoints --------------------------------------------------------------

/// Binary container: magic, length-prefixed JSON header (config, seed lineage,
/// tensor names and shapes), then raw little-endian doubles in header order.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace jtnmt::model
