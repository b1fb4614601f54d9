#include "jtnmt/em.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "jtnmt/bleu.hpp"

namespace jtnmt::em {

namespace fs = std::filesystem;

const char* direction_name(Direction d) { return d == kXY ? "xy" : "yx"; }

DevSet reversed(const DevSet& dev) { return {dev.references, dev.sources}; }

double dev_bleu(const ModelParams& params, const DevSet& dev, int beam_size) {
  const auto results = beam::batch_translate(params, dev.sources, beam_size, 1);
  std::vector<data::TokenIds> hyps;
  hyps.reserve(results.size());
  for (const auto& r : results) {
    hyps.push_back(r.nbest && !r.nbest->hypotheses.empty() ? r.nbest->hypotheses.front().output()
                                                           : data::TokenIds{});
  }
  return bleu::corpus_bleu_ids(hyps, dev.references).bleu;
}

std::vector<double> normalize_weights(const beam::NBestList& nbest) {
  if (nbest.hypotheses.empty()) throw std::invalid_argument("normalize_weights: empty n-best");
  std::vector<double> w;
  w.reserve(nbest.hypotheses.size());
  double top = -std::numeric_limits<double>::infinity();
  for (const auto& h : nbest.hypotheses) {
    w.push_back(beam::normalized_score(h));
    top = std::max(top, w.back());
  }
  double total = 0.0;
  for (double& x : w) {
    x = std::exp(x - top);
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

double PseudoCorpus::mean_weight() const {
  if (pairs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& p : pairs) s += p.weight;
  return s / static_cast<double>(pairs.size());
}

PseudoCorpus e_step(const ModelParams& generator, std::span<const data::TokenIds> mono_targets,
                    const EStepConfig& config, Direction trains, int iteration,
                    std::string generator_id) {
  PseudoCorpus out;
  out.direction = trains;
  out.iteration = iteration;
  out.generator = std::move(generator_id);
  const auto cap = static_cast<std::size_t>(generator.config.max_len);
  const auto results = beam::batch_translate(generator, mono_targets, config.beam_size, config.n_best);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (!r.nbest) {
      ++out.skipped;
      continue;
    }
    beam::NBestList usable;
    usable.forced = r.nbest->forced;
    for (const auto& h : r.nbest->hypotheses) {
      const std::size_t len = h.token_ids.size() - 1;
      if (len >= 1 && len <= cap) usable.hypotheses.push_back(h);
    }
    if (usable.hypotheses.empty()) {
      ++out.skipped;
      continue;
    }
    if (usable.forced) {
      ++out.forced;
      if (config.drop_forced) continue;
    }
    ++out.translated;
    const std::vector<double> w = normalize_weights(usable);
    for (std::size_t k = 0; k < usable.hypotheses.size(); ++k) {
      out.pairs.push_back({usable.hypotheses[k].output(), mono_targets[i],
                           config.weight_ablation ? 1.0 : w[k]});
      out.groups.push_back(i);
    }
  }
  return out;
}

model::ModelConfig EMConfig::model_for(Direction d) const {
  model::ModelConfig c = model;
  if (d == kYX) std::swap(c.src_vocab, c.tgt_vocab);
  return c;
}

std::string IterationSummary::to_json() const {
  nlohmann::json j = {{"iteration", iteration},   {"pseudo_pairs", pseudo_pairs},
                      {"mean_weight", mean_weight}, {"skipped", skipped},
                      {"forced", forced},         {"dev_bleu", dev_bleu},
                      {"wall_s", wall_seconds}};
  return j.dump();
}

IterationSummary IterationSummary::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  IterationSummary s;
  s.iteration = j.at("iteration").get<int>();
  s.pseudo_pairs = j.at("pseudo_pairs").get<std::array<std::size_t, 2>>();
  s.mean_weight = j.at("mean_weight").get<std::array<double, 2>>();
  s.skipped = j.at("skipped").get<std::array<std::size_t, 2>>();
  s.forced = j.at("forced").get<std::array<std::size_t, 2>>();
  s.dev_bleu = j.at("dev_bleu").get<std::array<double, 2>>();
  s.wall_seconds = j.at("wall_s").get<double>();
  return s;
}

JointData encode_corpora(const data::ParallelCorpus& bitext, const std::vector<data::Sentence>& mono_x,
                         const std::vector<data::Sentence>& mono_y, const data::ParallelCorpus& dev,
                         const data::Vocabulary& vocab_x, const data::Vocabulary& vocab_y) {
  JointData out;
  out.bitext.reserve(bitext.size());
  for (std::size_t i = 0; i < bitext.size(); ++i) {
    out.bitext.push_back({vocab_x.encode(bitext.source[i]), vocab_y.encode(bitext.target[i]), 1.0});
  }
  for (const auto& s : mono_x) out.mono_x.push_back(vocab_x.encode(s));
  for (const auto& s : mono_y) out.mono_y.push_back(vocab_y.encode(s));
  for (std::size_t i = 0; i < dev.size(); ++i) {
    out.dev.sources.push_back(vocab_x.encode(dev.source[i]));
    out.dev.references.push_back(vocab_y.encode(dev.target[i]));
  }
  return out;
}

fs::path iteration_dir(const fs::path& dir, int iteration) {
  char name[32];
  std::snprintf(name, sizeof name, "iter_%03d", iteration);
  return dir / name;
}

namespace {

std::vector<WeightedPair> swap_sides(std::span<const WeightedPair> pairs) {
  std::vector<WeightedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.target_ids, p.source_ids, p.weight});
  return out;
}

std::string checkpoint_name(Direction d) { return std::string("model_") + direction_name(d) + ".ckpt"; }

// Records one finished training run and returns the dev BLEU of its result.
double finish_training(EMState& state, Direction d, const trainer::TrainResult& r,
                       const DevSet& dev, int dev_beam, int iteration) {
  state.train_logs.push_back(
      {"iter" + std::to_string(iteration) + "." + direction_name(d), r.history});
  state.params[d] = r.best;
  if (r.best_epoch >= 1) {
    const auto& rec = r.history[static_cast<std::size_t>(r.best_epoch - 1)];
    if (rec.dev_metric) return *rec.dev_metric;
  }
  return dev_bleu(r.best, dev, dev_beam);
}

void record_iteration(EMState& state, IterationSummary summary, const Artifacts* artifacts) {
  state.iteration = summary.iteration;
  state.dev_bleu_history.push_back(summary.dev_bleu);
  for (Direction d : {kXY, kYX}) {
    std::vector<double> h;
    for (const auto& b : state.dev_bleu_history) h.push_back(b[d]);
    const auto best = static_cast<int>(bleu::select_best(h));
    if (best == summary.iteration) state.best_params[d] = state.params[d];
    state.best_iteration[d] = best;
  }
  state.summaries.push_back(summary);
  if (artifacts) {
    const fs::path dir = iteration_dir(artifacts->dir, summary.iteration);
    fs::create_directories(dir);
    for (Direction d : {kXY, kYX}) model::save_checkpoint(state.params[d], dir / checkpoint_name(d));
    std::ofstream s(artifacts->dir / "summary.jsonl", std::ios::app);
    s << summary.to_json() << '\n';
    if (!s) throw std::runtime_error("cannot write " + (artifacts->dir / "summary.jsonl").string());
  }
}

std::unique_ptr<std::ofstream> open_log(const Artifacts* artifacts, int iteration, Direction d) {
  if (!artifacts) return nullptr;
  const fs::path dir = iteration_dir(artifacts->dir, iteration);
  fs::create_directories(dir);
  auto f = std::make_unique<std::ofstream>(dir / (std::string("train_") + direction_name(d) + ".jsonl"));
  if (!*f) throw std::runtime_error("cannot write training log under " + dir.string());
  return f;
}

void write_pseudo(const PseudoCorpus& pc, const Artifacts& a) {
  const data::Vocabulary& src = pc.direction == kXY ? a.vocab_x : a.vocab_y;
  const data::Vocabulary& tgt = pc.direction == kXY ? a.vocab_y : a.vocab_x;
  std::vector<data::WeightedLine> lines;
  lines.reserve(pc.pairs.size());
  for (const auto& p : pc.pairs) lines.push_back({p.weight, src.decode(p.source_ids), tgt.decode(p.target_ids)});
  data::write_weighted(iteration_dir(a.dir, pc.iteration) /
                           (std::string("pseudo_") + direction_name(pc.direction) + ".tsv"),
                       lines);
}

std::uint64_t stage_seed(std::uint64_t base, int iteration, Direction d) {
  return base + 1000003ULL * static_cast<std::uint64_t>(iteration) + static_cast<std::uint64_t>(d);
}

}  // namespace

EMState pretrain(const JointData& data, const EMConfig& config, const Artifacts* artifacts) {
  if (data.bitext.empty()) throw std::invalid_argument("pretrain: empty bitext");
  for (const auto& p : data.bitext) {
    if (p.weight != 1.0) throw std::invalid_argument("pretrain: bitext weights must be 1");
  }
  const auto t0 = std::chrono::steady_clock::now();
  EMState state;
  const std::vector<WeightedPair> bitext_yx = swap_sides(data.bitext);
  const std::array<const std::vector<WeightedPair>*, 2> corpora = {&data.bitext, &bitext_yx};
  const std::array<DevSet, 2> devs = {data.dev, reversed(data.dev)};
  IterationSummary summary;
  for (Direction d : {kXY, kYX}) {
    ModelParams init = model::init_params(config.model_for(d), config.seed);
    init.lineage.push_back("init:seed=" + std::to_string(config.seed));
    const auto log = open_log(artifacts, 0, d);
    const int beam = config.dev_beam;
    const DevSet& dev = devs[d];
    const auto r = trainer::train(
        std::move(init), *corpora[d], [&](const ModelParams& p) { return dev_bleu(p, dev, beam); },
        config.pretrain, log.get());
    summary.dev_bleu[d] = finish_training(state, d, r, dev, beam, 0);
  }
  summary.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record_iteration(state, summary, artifacts);
  return state;
}

trainer::TrainResult m_step(const ModelParams& params, std::span<const WeightedPair> bitext,
                            const PseudoCorpus& pseudo, const DevSet& dev, const EMConfig& config,
                            std::ostream* log) {
  std::vector<WeightedPair> corpus(bitext.begin(), bitext.end());
  corpus.insert(corpus.end(), pseudo.pairs.begin(), pseudo.pairs.end());
  if (corpus.empty()) throw std::invalid_argument("m_step: empty training corpus");
  ModelParams start = config.cold_restart
                          ? model::init_params(params.config,
                                               stage_seed(config.seed, pseudo.iteration, pseudo.direction))
                          : params;
  start.lineage = params.lineage;
  start.lineage.push_back("m_step:iter=" + std::to_string(pseudo.iteration) +
                          (config.cold_restart ? ",cold" : ",warm"));
  trainer::TrainConfig tc = config.m_step;
  tc.seed = stage_seed(config.m_step.seed, pseudo.iteration, pseudo.direction);
  const int beam = config.dev_beam;
  return trainer::train(
      std::move(start), corpus, [&](const ModelParams& p) { return dev_bleu(p, dev, beam); }, tc,
      log);
}

void run_iterations(EMState& state, const JointData& data, const EMConfig& config,
                    const Artifacts* artifacts) {
  const std::vector<WeightedPair> bitext_yx = swap_sides(data.bitext);
  const std::array<const std::vector<WeightedPair>*, 2> bitexts = {&data.bitext, &bitext_yx};
  const std::array<DevSet, 2> devs = {data.dev, reversed(data.dev)};
  const std::array<const std::vector<data::TokenIds>*, 2> targets = {&data.mono_y, &data.mono_x};

  while (state.iteration < config.iterations) {
    const int it = state.iteration + 1;
    try {
      const auto t0 = std::chrono::steady_clock::now();
      // Synchronous E-steps: both read iteration it-1 parameters.
      std::array<PseudoCorpus, 2> pseudo;
      for (Direction d : {kXY, kYX}) {
        const Direction gen = d == kXY ? kYX : kXY;
        pseudo[d] = e_step(state.params[gen], *targets[d], config.e_step, d, it,
                           "iter" + std::to_string(it - 1) + "." + direction_name(gen));
      }
      if (artifacts) {
        fs::create_directories(iteration_dir(artifacts->dir, it));
        for (const auto& pc : pseudo) write_pseudo(pc, *artifacts);
      }
      IterationSummary summary;
      summary.iteration = it;
      EMState next = state;
      for (Direction d : {kXY, kYX}) {
        const auto log = open_log(artifacts, it, d);
        const auto r = m_step(state.params[d], *bitexts[d], pseudo[d], devs[d], config, log.get());
        summary.dev_bleu[d] = finish_training(next, d, r, devs[d], config.dev_beam, it);
        summary.pseudo_pairs[d] = pseudo[d].pairs.size();
        summary.mean_weight[d] = pseudo[d].mean_weight();
        summary.skipped[d] = pseudo[d].skipped;
        summary.forced[d] = pseudo[d].forced;
      }
      summary.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      record_iteration(next, summary, artifacts);
      state = std::move(next);
    } catch (const std::exception& e) {
      state.error = "iteration " + std::to_string(it) + ": " + e.what();
      return;
    }
  }
}

EMState joint_train(const JointData& data, const EMConfig& config, const Artifacts* artifacts) {
  if (data.mono_x.empty() || data.mono_y.empty() || data.dev.sources.empty()) {
    throw std::invalid_argument("joint_train: all corpora must be non-empty");
  }
  EMState state = pretrain(data, config, artifacts);
  run_iterations(state, data, config, artifacts);
  return state;
}

EMState load_state(const fs::path& dir) {
  std::ifstream in(dir / "summary.jsonl");
  if (!in) throw std::runtime_error("missing iteration summary: expected " + (dir / "summary.jsonl").string());
  EMState state;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    IterationSummary s = IterationSummary::from_json(line);
    if (s.iteration != static_cast<int>(state.summaries.size())) {
      throw std::runtime_error("summary.jsonl: iterations out of order at " + std::to_string(s.iteration));
    }
    state.dev_bleu_history.push_back(s.dev_bleu);
    state.summaries.push_back(s);
  }
  if (state.summaries.empty()) throw std::runtime_error("summary.jsonl holds no completed iteration");
  state.iteration = state.summaries.back().iteration;
  for (Direction d : {kXY, kYX}) {
    std::vector<double> h;
    for (const auto& b : state.dev_bleu_history) h.push_back(b[d]);
    state.best_iteration[d] = static_cast<int>(bleu::select_best(h));
    state.params[d] = model::load_checkpoint(iteration_dir(dir, state.iteration) / checkpoint_name(d));
    state.best_params[d] =
        model::load_checkpoint(iteration_dir(dir, state.best_iteration[d]) / checkpoint_name(d));
  }
  for (int it = 0; it <= state.iteration; ++it) {
    for (Direction d : {kXY, kYX}) {
      TrainLog tl{"iter" + std::to_string(it) + "." + direction_name(d), {}};
      std::ifstream f(iteration_dir(dir, it) / (std::string("train_") + direction_name(d) + ".jsonl"));
      while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        trainer::EpochRecord rec;
        rec.epoch = j.at("epoch").get<int>();
        rec.mean_loss = j.at("loss").get<double>();
        if (!j.at("dev").is_null()) rec.dev_metric = j.at("dev").get<double>();
        rec.wall_seconds = j.at("wall_s").get<double>();
        tl.epochs.push_back(rec);
      }
      state.train_logs.push_back(std::move(tl));
    }
  }
  return state;
}

}  // namespace jtnmt::em
