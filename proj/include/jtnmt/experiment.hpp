#pragma once

// Experiment configuration, presets, and the commands behind the CLI:
// gen-data, pretrain, joint-train, translate, evaluate.
//
// Data directory layout (written by gen_data):
//   train.x train.y mono.x mono.y dev.x dev.y test.x test.y
// Experiment directory layout:
//   config.ini vocab.x vocab.y plus the em::Artifacts layout.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "jtnmt/bleu.hpp"
#include "jtnmt/data.hpp"
#include "jtnmt/em.hpp"

namespace jtnmt::experiment {

namespace fs = std::filesystem;

enum class Preset { kBaseline, kBacktrans, kJointEm };

std::string to_string(Preset p);
Preset parse_preset(std::string_view s);  // "baseline" | "backtrans" | "joint-em"

struct DataConfig {
  fs::path dir = "data";
  data::ToySpec toy;
  std::size_t n_parallel = 2000;
  std::size_t n_mono_x = 8000;
  std::size_t n_mono_y = 8000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  std::size_t max_sentence_len = 60;
  std::size_t vocab_limit = 50000;
};

struct TrainSection {
  int batch_size = 16;
  double clip_norm = 2.0;
  double rho = 0.95;
  double epsilon = 1e-6;
  int pretrain_epochs = 12;
  int pretrain_patience = -1;
  int m_step_epochs = 1;
  int m_step_patience = -1;
};

struct EMSection {
  int iterations = 5;
  int n_best = 4;
  int synth_beam = 4;
  int test_beam = 8;
  int dev_beam = 4;
  bool weight_ablation = false;
  bool drop_forced = false;
  bool cold_restart = false;
};

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;  // mandatory at run time
  Preset preset = Preset::kJointEm;
  DataConfig data;
  model::ModelConfig model;  // vocabulary sizes are filled in from the data
  TrainSection train;
  EMSection em;

  /// Throws std::invalid_argument on a missing seed or out-of-range value.
  void validate() const;
  std::uint64_t require_seed() const;
};

/// Shipped defaults: the desk-scale values, joint-em preset, no seed.
ExperimentConfig default_config();

/// Overwrites the EM fields a preset controls.
///   baseline:  iterations 0
///   backtrans: iterations 1, n_best 1, weight_ablation on
///   joint-em:  iterations 5, n_best 4, weight_ablation off
void apply_preset(ExperimentConfig& config, Preset preset);

/// Flat INI text with one section per module. Every key is written. Keys with
/// a full-size value carry it in a trailing comment.
std::string to_ini(const ExperimentConfig& config);
/// Unknown sections or keys are rejected; absent keys keep their defaults.
ExperimentConfig parse_ini(const std::string& text);
ExperimentConfig load_config(const fs::path& path);
void save_config(const ExperimentConfig& config, const fs::path& path);

/// Every config key as "section.key", in file order.
std::vector<std::string> config_keys();
/// Sets one key from its text form, as in the INI file.
void set_config_value(ExperimentConfig& config, const std::string& dotted_key, const std::string& value);

/// Builds the EM configuration for the given vocabulary sizes.
em::EMConfig make_em_config(const ExperimentConfig& config, std::size_t vocab_x, std::size_t vocab_y);

// ---- data -----------------------------------------------------------------

struct SplitSizes {
  std::size_t train = 0;
  std::size_t mono_x = 0;
  std::size_t mono_y = 0;
  std::size_t dev = 0;
  std::size_t test = 0;
};

/// Writes the toy corpora under `out`. A non-empty `out` is refused unless
/// `force` is set.
SplitSizes gen_data(const ExperimentConfig& config, const fs::path& out, bool force);

struct LoadedData {
  data::Vocabulary vocab_x;
  data::Vocabulary vocab_y;
  em::JointData joint;
  data::ParallelCorpus test;
  data::FilterReport filter;  // bitext length filtering
};

/// Reads config.data.dir, filters training data by length, and encodes it
/// with the given vocabularies (or vocabularies built from the bitext).
LoadedData load_data(const ExperimentConfig& config, const data::Vocabulary* vocab_x = nullptr,
                     const data::Vocabulary* vocab_y = nullptr);

/// In-memory toy corpora, encoded; nothing touches the disk.
LoadedData make_toy_data(const ExperimentConfig& config);

// ---- commands ---------------------------------------------------------------

/// Iteration 0 into `exp_dir`. Refuses a non-empty directory unless `force`.
em::EMState cmd_pretrain(const ExperimentConfig& config, const fs::path& exp_dir, bool force);

/// Continues the experiment in `exp_dir` from its last completed iteration up
/// to the configured number of iterations (the directory's config.ini, with
/// `iterations` overridden when given). Requires pre-trained checkpoints.
em::EMState cmd_joint_train(const fs::path& exp_dir, std::optional<int> iterations = std::nullopt);

struct TranslateOptions {
  em::Direction direction = em::kXY;
  std::optional<int> iteration;  // default: the best iteration on dev
  int beam_size = 8;
};

struct TranslateReport {
  fs::path checkpoint;
  std::size_t sentences = 0;
  std::size_t failed = 0;  // written as empty lines
};

TranslateReport cmd_translate(const fs::path& exp_dir, const fs::path& input, const fs::path& output,
                              const TranslateOptions& options);

bleu::BleuReport cmd_evaluate(const fs::path& hypotheses, const std::vector<fs::path>& references);

// ---- in-memory runs ---------------------------------------------------------

struct PresetRun {
  Preset preset = Preset::kBaseline;
  em::EMState state;
};

/// Runs the preset on encoded data. With `pretrained`, iteration 0 is taken
/// from it instead of being retrained (it must come from the same config).
PresetRun run_preset(const ExperimentConfig& config, Preset preset, const LoadedData& data,
                     const em::EMState* pretrained = nullptr);

}  // namespace jtnmt::experiment
