#include "jtnmt/experiment.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "jtnmt/beam.hpp"

namespace jtnmt::experiment {

namespace pt = boost::property_tree;

std::string to_string(Preset p) {
  switch (p) {
    case Preset::kBaseline: return "baseline";
    case Preset::kBacktrans: return "backtrans";
    case Preset::kJointEm: return "joint-em";
  }
  throw std::invalid_argument("unknown preset");
}

Preset parse_preset(std::string_view s) {
  if (s == "baseline") return Preset::kBaseline;
  if (s == "backtrans") return Preset::kBacktrans;
  if (s == "joint-em") return Preset::kJointEm;
  throw std::invalid_argument("unknown preset '" + std::string(s) + "' (baseline, backtrans, joint-em)");
}

std::uint64_t ExperimentConfig::require_seed() const {
  if (!seed) throw std::invalid_argument("config: experiment.seed is mandatory");
  return *seed;
}

void ExperimentConfig::validate() const {
  require_seed();
  auto positive = [](long long v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("config: ") + name + " must be >= 1");
  };
  positive(static_cast<long long>(data.n_parallel), "data.n_parallel");
  positive(static_cast<long long>(data.n_dev), "data.n_dev");
  positive(static_cast<long long>(data.max_sentence_len), "data.max_sentence_len");
  positive(static_cast<long long>(data.vocab_limit), "data.vocab_limit");
  if (data.toy.noise_rate < 0.0 || data.toy.noise_rate > 1.0) {
    throw std::invalid_argument("config: data.noise_rate must lie in [0, 1]");
  }
  positive(model.d_emb, "model.d_emb");
  positive(model.d_hidden, "model.d_hidden");
  positive(model.d_att, "model.d_att");
  positive(model.max_len, "model.max_len");
  positive(train.batch_size, "train.batch_size");
  positive(train.pretrain_epochs, "train.pretrain_epochs");
  positive(train.m_step_epochs, "train.m_step_epochs");
  if (!(train.clip_norm > 0.0)) throw std::invalid_argument("config: train.clip_norm must be > 0");
  if (!(train.rho > 0.0 && train.rho < 1.0)) throw std::invalid_argument("config: train.rho must lie in (0, 1)");
  if (!(train.epsilon > 0.0)) throw std::invalid_argument("config: train.epsilon must be > 0");
  if (em.iterations < 0) throw std::invalid_argument("config: em.iterations must be >= 0");
  positive(em.n_best, "em.n_best");
  positive(em.synth_beam, "em.synth_beam");
  positive(em.test_beam, "em.test_beam");
  positive(em.dev_beam, "em.dev_beam");
  if (em.n_best > em.synth_beam) throw std::invalid_argument("config: em.n_best exceeds em.synth_beam");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.data.toy.noise_rate = 0.2;
  return c;
}

void apply_preset(ExperimentConfig& config, Preset preset) {
  config.preset = preset;
  switch (preset) {
    case Preset::kBaseline:
      config.em.iterations = 0;
      break;
    case Preset::kBacktrans:
      config.em.iterations = 1;
      config.em.n_best = 1;
      config.em.weight_ablation = true;
      break;
    case Preset::kJointEm:
      config.em.iterations = 5;
      config.em.n_best = 4;
      config.em.weight_ablation = false;
      break;
  }
}

// ---- INI ----------------------------------------------------------------------

namespace {

// One key: how to print it, how to read it, and the full-scale value if any.
struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::string full_scale;
};

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  char rest = 0;
  if (!in || (in >> rest)) throw std::invalid_argument("config: bad value '" + v + "' for " + key);
  if constexpr (std::is_unsigned_v<T>) {
    if (v.find('-') != std::string::npos) throw std::invalid_argument("config: negative value for " + key);
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

#define JT_NUM(sec, name, member, type, scale_value)                                              \
  Field {                                                                                         \
    sec, name, [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.member)); },      \
        [](ExperimentConfig& c, const std::string& v) {                                           \
          c.member = parse_number<type>(std::string(sec) + "." + name, v);                        \
        },                                                                                        \
        scale_value                                                                               \
  }
#define JT_BOOL(sec, name, member)                                                                   \
  Field {                                                                                            \
    sec, name, [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }, \
        [](ExperimentConfig& c, const std::string& v) {                                              \
          c.member = parse_bool(std::string(sec) + "." + name, v);                                   \
        },                                                                                           \
        ""                                                                                           \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"experiment", "seed",
       [](const ExperimentConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); },
       [](ExperimentConfig& c, const std::string& v) {
         c.seed = parse_number<std::uint64_t>("experiment.seed", v);
       },
       ""},
      {"experiment", "preset", [](const ExperimentConfig& c) { return to_string(c.preset); },
       [](ExperimentConfig& c, const std::string& v) { c.preset = parse_preset(v); }, ""},
      {"data", "dir", [](const ExperimentConfig& c) { return c.data.dir.string(); },
       [](ExperimentConfig& c, const std::string& v) { c.data.dir = v; }, ""},
      JT_NUM("data", "vocab_size", data.toy.vocab_size, std::size_t, ""),
      JT_NUM("data", "min_len", data.toy.min_len, std::size_t, ""),
      JT_NUM("data", "max_len", data.toy.max_len, std::size_t, ""),
      {"data", "transform", [](const ExperimentConfig& c) { return data::to_string(c.data.toy.transform); },
       [](ExperimentConfig& c, const std::string& v) { c.data.toy.transform = data::parse_transform(v); },
       ""},
      JT_NUM("data", "zipf_exponent", data.toy.zipf_exponent, double, ""),
      JT_NUM("data", "noise_rate", data.toy.noise_rate, double, ""),
      JT_NUM("data", "n_parallel", data.n_parallel, std::size_t, ""),
      JT_NUM("data", "n_mono_x", data.n_mono_x, std::size_t, "8000000"),
      JT_NUM("data", "n_mono_y", data.n_mono_y, std::size_t, "8000000"),
      JT_NUM("data", "n_dev", data.n_dev, std::size_t, ""),
      JT_NUM("data", "n_test", data.n_test, std::size_t, ""),
      JT_NUM("data", "max_sentence_len", data.max_sentence_len, std::size_t, "60"),
      JT_NUM("data", "vocab_limit", data.vocab_limit, std::size_t, "50000"),
      JT_NUM("model", "d_emb", model.d_emb, int, "256"),
      JT_NUM("model", "d_hidden", model.d_hidden, int, "1024"),
      JT_NUM("model", "d_att", model.d_att, int, ""),
      JT_NUM("model", "max_len", model.max_len, int, "60"),
      JT_NUM("train", "batch_size", train.batch_size, int, "128"),
      JT_NUM("train", "clip_norm", train.clip_norm, double, "2.0"),
      JT_NUM("train", "rho", train.rho, double, ""),
      JT_NUM("train", "epsilon", train.epsilon, double, ""),
      JT_NUM("train", "pretrain_epochs", train.pretrain_epochs, int, ""),
      JT_NUM("train", "pretrain_patience", train.pretrain_patience, int, ""),
      JT_NUM("train", "m_step_epochs", train.m_step_epochs, int, ""),
      JT_NUM("train", "m_step_patience", train.m_step_patience, int, ""),
      JT_NUM("em", "iterations", em.iterations, int, "5"),
      JT_NUM("em", "n_best", em.n_best, int, ""),
      JT_NUM("em", "synth_beam", em.synth_beam, int, "4"),
      JT_NUM("em", "test_beam", em.test_beam, int, "8"),
      JT_NUM("em", "dev_beam", em.dev_beam, int, "8"),
      JT_BOOL("em", "weight_ablation", em.weight_ablation),
      JT_BOOL("em", "drop_forced", em.drop_forced),
      JT_BOOL("em", "cold_restart", em.cold_restart),
  };
  return f;
}

#undef JT_NUM
#undef JT_BOOL

}  // namespace

std::string to_ini(const ExperimentConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const Field& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(config);
    if (!f.full_scale.empty()) out << "  ; full scale: " << f.full_scale;
    out << '\n';
  }
  return out.str();
}

ExperimentConfig parse_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  std::map<std::string, const Field*> index;
  for (const Field& f : fields()) index[f.section + "." + f.key] = &f;
  ExperimentConfig c = default_config();
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) {
      throw std::invalid_argument("config: key '" + section + "' outside any section");
    }
    for (const auto& [key, value] : keys) {
      const auto it = index.find(section + "." + key);
      if (it == index.end()) throw std::invalid_argument("config: unknown key " + section + "." + key);
      std::string v = value.data();
      // Trailing comments are not stripped by the ini parser.
      if (const auto pos = v.find(';'); pos != std::string::npos) v.erase(pos);
      while (!v.empty() && (v.back() == ' ' || v.back() == '\t')) v.pop_back();
      if (v.empty()) continue;
      it->second->set(c, v);
    }
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing config: expected " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str());
}

void save_config(const ExperimentConfig& config, const fs::path& path) {
  std::ofstream out(path);
  out << to_ini(config);
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

void set_config_value(ExperimentConfig& config, const std::string& dotted_key, const std::string& value) {
  for (const Field& f : fields()) {
    if (f.section + "." + f.key == dotted_key) {
      f.set(config, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key " + dotted_key);
}

em::EMConfig make_em_config(const ExperimentConfig& config, std::size_t vocab_x, std::size_t vocab_y) {
  config.validate();
  em::EMConfig e;
  e.model = config.model;
  e.model.src_vocab = static_cast<int>(vocab_x);
  e.model.tgt_vocab = static_cast<int>(vocab_y);
  const std::uint64_t seed = *config.seed;
  e.seed = seed;
  e.pretrain.batch_size = config.train.batch_size;
  e.pretrain.clip_norm = config.train.clip_norm;
  e.pretrain.rho = config.train.rho;
  e.pretrain.epsilon = config.train.epsilon;
  e.pretrain.seed = seed;
  e.m_step = e.pretrain;
  e.pretrain.max_epochs = config.train.pretrain_epochs;
  e.pretrain.patience = config.train.pretrain_patience;
  e.m_step.max_epochs = config.train.m_step_epochs;
  e.m_step.patience = config.train.m_step_patience;
  e.iterations = config.em.iterations;
  e.e_step.n_best = config.em.n_best;
  e.e_step.beam_size = config.em.synth_beam;
  e.e_step.weight_ablation = config.em.weight_ablation;
  e.e_step.drop_forced = config.em.drop_forced;
  e.dev_beam = config.em.dev_beam;
  e.cold_restart = config.em.cold_restart;
  return e;
}

// ---- data ---------------------------------------------------------------------

namespace {

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

data::ToySpec toy_spec(const ExperimentConfig& config) {
  data::ToySpec s = config.data.toy;
  s.seed = config.require_seed();
  return s;
}

LoadedData encode(const ExperimentConfig& config, data::ParallelCorpus bitext, std::vector<data::Sentence> mono_x,
                  std::vector<data::Sentence> mono_y, const data::ParallelCorpus& dev,
                  data::ParallelCorpus test, const data::Vocabulary* vocab_x,
                  const data::Vocabulary* vocab_y) {
  LoadedData out;
  const std::size_t max_len = config.data.max_sentence_len;
  bitext = data::filter_by_length(bitext, max_len, &out.filter);
  mono_x = data::filter_by_length(mono_x, max_len);
  mono_y = data::filter_by_length(mono_y, max_len);
  out.vocab_x = vocab_x ? *vocab_x : data::build_vocab(bitext.source, config.data.vocab_limit);
  out.vocab_y = vocab_y ? *vocab_y : data::build_vocab(bitext.target, config.data.vocab_limit);
  out.joint = em::encode_corpora(bitext, mono_x, mono_y, dev, out.vocab_x, out.vocab_y);
  out.test = std::move(test);
  return out;
}

const char* const kSplitFiles[] = {"train.x", "train.y", "mono.x", "mono.y",
                                   "dev.x",   "dev.y",   "test.x", "test.y"};

std::vector<data::Sentence> read_required(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing corpus file: expected " + p.string());
  return data::read_sentences(p);
}

data::ParallelCorpus read_pair(const fs::path& dir, const std::string& stem) {
  data::ParallelCorpus c;
  c.source = read_required(dir / (stem + ".x"));
  c.target = read_required(dir / (stem + ".y"));
  if (c.source.size() != c.target.size()) {
    throw std::runtime_error(stem + ".x and " + stem + ".y differ in line count under " + dir.string());
  }
  return c;
}

}  // namespace

SplitSizes gen_data(const ExperimentConfig& config, const fs::path& out, bool force) {
  config.validate();
  if (non_empty_dir(out) && !force) {
    throw std::runtime_error("output directory " + out.string() + " is not empty (use --force)");
  }
  const auto c = data::generate_toy_corpus(toy_spec(config), config.data.n_parallel, config.data.n_mono_x,
                                           config.data.n_mono_y, config.data.n_dev, config.data.n_test);
  fs::create_directories(out);
  data::write_sentences(out / kSplitFiles[0], c.bitext.source);
  data::write_sentences(out / kSplitFiles[1], c.bitext.target);
  data::write_sentences(out / kSplitFiles[2], c.mono_x);
  data::write_sentences(out / kSplitFiles[3], c.mono_y);
  data::write_sentences(out / kSplitFiles[4], c.dev.source);
  data::write_sentences(out / kSplitFiles[5], c.dev.target);
  data::write_sentences(out / kSplitFiles[6], c.test.source);
  data::write_sentences(out / kSplitFiles[7], c.test.target);
  return {c.bitext.size(), c.mono_x.size(), c.mono_y.size(), c.dev.size(), c.test.size()};
}

LoadedData load_data(const ExperimentConfig& config, const data::Vocabulary* vocab_x,
                     const data::Vocabulary* vocab_y) {
  const fs::path& dir = config.data.dir;
  if (!fs::is_directory(dir)) throw std::runtime_error("missing data directory: expected " + dir.string());
  auto bitext = read_pair(dir, "train");
  auto mono_x = read_required(dir / "mono.x");
  auto mono_y = read_required(dir / "mono.y");
  const auto dev = read_pair(dir, "dev");
  auto test = read_pair(dir, "test");
  return encode(config, std::move(bitext), std::move(mono_x), std::move(mono_y), dev, std::move(test),
                vocab_x, vocab_y);
}

LoadedData make_toy_data(const ExperimentConfig& config) {
  config.validate();
  auto c = data::generate_toy_corpus(toy_spec(config), config.data.n_parallel, config.data.n_mono_x,
                                     config.data.n_mono_y, config.data.n_dev, config.data.n_test);
  return encode(config, std::move(c.bitext), std::move(c.mono_x), std::move(c.mono_y), c.dev,
                std::move(c.test), nullptr, nullptr);
}

// ---- commands -------------------------------------------------------------------

em::EMState cmd_pretrain(const ExperimentConfig& config, const fs::path& exp_dir, bool force) {
  config.validate();
  if (non_empty_dir(exp_dir)) {
    if (!force) throw std::runtime_error("experiment directory " + exp_dir.string() + " is not empty (use --force)");
    fs::remove_all(exp_dir);
  }
  const LoadedData d = load_data(config);
  fs::create_directories(exp_dir);
  save_config(config, exp_dir / "config.ini");
  d.vocab_x.save(exp_dir / "vocab.x");
  d.vocab_y.save(exp_dir / "vocab.y");
  const em::Artifacts art{exp_dir, d.vocab_x, d.vocab_y};
  return em::pretrain(d.joint, make_em_config(config, d.vocab_x.size(), d.vocab_y.size()), &art);
}

namespace {

data::Vocabulary load_vocab(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing vocabulary: expected " + p.string());
  return data::Vocabulary::load(p);
}

fs::path checkpoint_path(const fs::path& exp_dir, int iteration, em::Direction d) {
  return em::iteration_dir(exp_dir, iteration) / (std::string("model_") + em::direction_name(d) + ".ckpt");
}

}  // namespace

em::EMState cmd_joint_train(const fs::path& exp_dir, std::optional<int> iterations) {
  ExperimentConfig config = load_config(exp_dir / "config.ini");
  if (iterations) config.em.iterations = *iterations;
  config.validate();
  for (em::Direction d : {em::kXY, em::kYX}) {
    const fs::path p = checkpoint_path(exp_dir, 0, d);
    if (!fs::exists(p)) throw std::runtime_error("missing pre-trained checkpoint: expected " + p.string());
  }
  const auto vx = load_vocab(exp_dir / "vocab.x");
  const auto vy = load_vocab(exp_dir / "vocab.y");
  const LoadedData d = load_data(config, &vx, &vy);
  em::EMState state = em::load_state(exp_dir);
  const em::Artifacts art{exp_dir, vx, vy};
  em::run_iterations(state, d.joint, make_em_config(config, vx.size(), vy.size()), &art);
  if (!state.error.empty()) throw std::runtime_error("joint training stopped: " + state.error);
  return state;
}

TranslateReport cmd_translate(const fs::path& exp_dir, const fs::path& input, const fs::path& output,
                              const TranslateOptions& options) {
  if (options.beam_size < 1) throw std::invalid_argument("translate: beam size must be >= 1");
  int iteration = 0;
  if (options.iteration) {
    iteration = *options.iteration;
  } else {
    iteration = em::load_state(exp_dir).best_iteration[options.direction];
  }
  TranslateReport report;
  report.checkpoint = checkpoint_path(exp_dir, iteration, options.direction);
  const auto params = model::load_checkpoint(report.checkpoint);
  const bool xy = options.direction == em::kXY;
  const auto src_vocab = load_vocab(exp_dir / (xy ? "vocab.x" : "vocab.y"));
  const auto tgt_vocab = load_vocab(exp_dir / (xy ? "vocab.y" : "vocab.x"));
  if (!fs::exists(input)) throw std::runtime_error("missing input: expected " + input.string());
  const auto sentences = data::read_sentences(input);
  std::vector<data::TokenIds> ids;
  ids.reserve(sentences.size());
  for (const auto& s : sentences) ids.push_back(src_vocab.encode(s));
  const auto results = beam::batch_translate(params, ids, options.beam_size, 1);
  std::vector<data::Sentence> out;
  out.reserve(results.size());
  for (const auto& r : results) {
    if (r.nbest && !r.nbest->hypotheses.empty()) {
      out.push_back(tgt_vocab.decode(r.nbest->hypotheses[0].token_ids));
    } else {
      out.emplace_back();
      ++report.failed;
    }
  }
  data::write_sentences(output, out);
  report.sentences = sentences.size();
  return report;
}

bleu::BleuReport cmd_evaluate(const fs::path& hypotheses, const std::vector<fs::path>& references) {
  if (references.empty()) throw std::invalid_argument("evaluate: at least one reference file is required");
  const auto hyp = read_required(hypotheses);
  std::vector<std::vector<data::Sentence>> refs(hyp.size());
  for (const auto& r : references) {
    const auto lines = read_required(r);
    if (lines.size() != hyp.size()) {
      throw std::runtime_error(r.string() + " has " + std::to_string(lines.size()) + " lines, hypotheses have " +
                               std::to_string(hyp.size()));
    }
    for (std::size_t i = 0; i < lines.size(); ++i) refs[i].push_back(lines[i]);
  }
  return bleu::corpus_bleu(hyp, refs);
}

PresetRun run_preset(const ExperimentConfig& config, Preset preset, const LoadedData& data,
                     const em::EMState* pretrained) {
  ExperimentConfig c = config;
  apply_preset(c, preset);
  const em::EMConfig e = make_em_config(c, data.vocab_x.size(), data.vocab_y.size());
  PresetRun run{preset, {}};
  if (pretrained) {
    if (pretrained->iteration != 0) throw std::invalid_argument("run_preset: expected an iteration-0 state");
    run.state = *pretrained;
  } else {
    run.state = em::pretrain(data.joint, e);
  }
  em::run_iterations(run.state, data.joint, e);
  return run;
}

}  // namespace jtnmt::experiment
