#pragma once

// Joint training of the x->y and y->x models: pre-training on bitext, then
// alternating E-steps (each model back-translates the other side's
// monolingual data into weighted pseudo pairs) and M-steps (each model is
// retrained on bitext plus its pseudo corpus).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "jtnmt/beam.hpp"
#include "jtnmt/model.hpp"
#include "jtnmt/trainer.hpp"

namespace jtnmt::em {

using model::ModelParams;
using trainer::WeightedPair;

enum Direction : std::size_t { kXY = 0, kYX = 1 };
const char* direction_name(Direction d);  // "xy" / "yx"

/// Held-out pairs for one direction.
struct DevSet {
  std::vector<data::TokenIds> sources;
  std::vector<data::TokenIds> references;
};

DevSet reversed(const DevSet& dev);

/// Top-1 beam outputs scored against the references. A sentence that fails
/// to decode counts as an empty hypothesis.
double dev_bleu(const ModelParams& params, const DevSet& dev, int beam_size);

/// Softmax over the length-normalized scores of the list.
std::vector<double> normalize_weights(const beam::NBestList& nbest);

struct EStepConfig {
  int n_best = 4;
  int beam_size = 4;
  /// Every pseudo pair gets weight 1 (plain back-translation).
  bool weight_ablation = false;
  /// Drop sentences whose n-best holds only force-finished hypotheses.
  bool drop_forced = false;
};

struct PseudoCorpus {
  std::vector<WeightedPair> pairs;
  /// groups[i]: index of the monolingual sentence pairs[i] was built from.
  std::vector<std::size_t> groups;
  Direction direction = kXY;  // the model this corpus trains
  int iteration = 0;
  std::string generator;  // id of the checkpoint that produced it
  std::size_t translated = 0;
  std::size_t skipped = 0;  // no usable hypothesis, or decoding failed
  std::size_t forced = 0;   // kept (or dropped) sentences with only forced hypotheses

  double mean_weight() const;
};

/// Back-translates `mono_targets` with `generator` (the reverse model). Each
/// usable n-best hypothesis x_k of target y becomes the pair (x_k, y) with
/// the normalized weight of x_k among the usable hypotheses. Hypotheses that
/// are empty or longer than the generator's max_len are not usable.
PseudoCorpus e_step(const ModelParams& generator, std::span<const data::TokenIds> mono_targets,
                    const EStepConfig& config, Direction trains, int iteration,
                    std::string generator_id);

struct EMConfig {
  model::ModelConfig model;  // x -> y; the y -> x model swaps the vocabularies
  trainer::TrainConfig pretrain;
  trainer::TrainConfig m_step;
  int iterations = 5;
  EStepConfig e_step;
  int dev_beam = 4;
  /// Re-initialize before every M-step instead of warm-starting.
  bool cold_restart = false;
  std::uint64_t seed = 1;

  model::ModelConfig model_for(Direction d) const;
};

struct TrainLog {
  std::string stage;  // e.g. "iter0.xy"
  std::vector<trainer::EpochRecord> epochs;
};

struct IterationSummary {
  int iteration = 0;
  std::array<std::size_t, 2> pseudo_pairs{};
  std::array<double, 2> mean_weight{};
  std::array<std::size_t, 2> skipped{};
  std::array<std::size_t, 2> forced{};
  std::array<double, 2> dev_bleu{};
  double wall_seconds = 0.0;

  std::string to_json() const;
  static IterationSummary from_json(const std::string& line);
};

struct EMState {
  int iteration = 0;
  std::array<ModelParams, 2> params;
  std::array<ModelParams, 2> best_params;
  std::array<int, 2> best_iteration{0, 0};
  std::vector<std::array<double, 2>> dev_bleu_history;  // index = iteration
  std::vector<IterationSummary> summaries;
  std::vector<TrainLog> train_logs;
  std::string error;  // set when the loop stopped early
};

struct JointData {
  std::vector<WeightedPair> bitext;  // x -> y, weight 1
  std::vector<data::TokenIds> mono_x;
  std::vector<data::TokenIds> mono_y;
  DevSet dev;  // x -> y
};

/// Encodes text corpora with the two vocabularies (bitext weights 1).
JointData encode_corpora(const data::ParallelCorpus& bitext, const std::vector<data::Sentence>& mono_x,
                         const std::vector<data::Sentence>& mono_y, const data::ParallelCorpus& dev,
                         const data::Vocabulary& vocab_x, const data::Vocabulary& vocab_y);

/// Persisted per-iteration artifacts. Layout under `dir`:
///   summary.jsonl                one IterationSummary per line
///   iter_<k>/model_{xy,yx}.ckpt  M-step result of iteration k (k = 0: pre-training)
///   iter_<k>/train_{xy,yx}.jsonl epoch records
///   iter_<k>/pseudo_{xy,yx}.tsv  weighted pseudo corpora (k >= 1)
struct Artifacts {
  std::filesystem::path dir;
  data::Vocabulary vocab_x;
  data::Vocabulary vocab_y;
};

std::filesystem::path iteration_dir(const std::filesystem::path& dir, int iteration);

/// Trains both directions on the bitext from the same seed; iteration 0.
EMState pretrain(const JointData& data, const EMConfig& config,
                 const Artifacts* artifacts = nullptr);

/// Continued training on bitext (weight 1) plus the pseudo corpus.
trainer::TrainResult m_step(const ModelParams& params, std::span<const WeightedPair> bitext,
                            const PseudoCorpus& pseudo, const DevSet& dev, const EMConfig& config,
                            std::ostream* log = nullptr);

/// Runs iterations state.iteration + 1 .. config.iterations. Both E-steps read
/// the previous iteration's parameters before either M-step runs. Errors stop
/// the loop and are reported in state.error.
void run_iterations(EMState& state, const JointData& data, const EMConfig& config,
                    const Artifacts* artifacts = nullptr);

/// pretrain followed by run_iterations.
EMState joint_train(const JointData& data, const EMConfig& config,
                    const Artifacts* artifacts = nullptr);

/// Rebuilds the state of the last completed iteration from an experiment
/// directory (summary plus checkpoints).
EMState load_state(const std::filesystem::path& dir);

}  // namespace jtnmt::em
