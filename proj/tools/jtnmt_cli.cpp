// jtnmt: gen-data, pretrain, joint-train, translate, evaluate.

#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "jtnmt/experiment.hpp"

using namespace jtnmt;
namespace ex = jtnmt::experiment;

namespace {

// --config FILE, --preset NAME, and one --<section>.<key> flag per config field.
struct ConfigFlags {
  std::string path;
  std::string preset;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", path, "INI experiment config (defaults apply when omitted)");
    cmd->add_option("--preset", preset, "baseline | backtrans | joint-em");
    for (const auto& key : ex::config_keys()) {
      cmd->add_option("--" + key, values[key], "override " + key)->group("Config fields");
    }
  }

  ex::ExperimentConfig resolve(bool need_seed = true) const {
    ex::ExperimentConfig c = path.empty() ? ex::default_config() : ex::load_config(path);
    if (!preset.empty()) ex::apply_preset(c, ex::parse_preset(preset));
    for (const auto& [k, v] : values) {
      if (!v.empty()) ex::set_config_value(c, k, v);
    }
    if (need_seed || c.seed) {
      c.validate();
    } else {
      ex::ExperimentConfig probe = c;
      probe.seed = 0;
      probe.validate();
    }
    return c;
  }
};

void print_summaries(const em::EMState& s) {
  for (const auto& sum : s.summaries) std::cout << sum.to_json() << '\n';
  std::cout << "best iteration: xy " << s.best_iteration[em::kXY] << ", yx " << s.best_iteration[em::kYX]
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint EM training of paired translation models"};
  app.require_subcommand(1);

  auto* print_cfg = app.add_subcommand("print-config", "Print the resolved config as INI");
  ConfigFlags print_flags;
  print_flags.attach(print_cfg);

  auto* gen = app.add_subcommand("gen-data", "Write the toy corpora");
  ConfigFlags gen_flags;
  gen_flags.attach(gen);
  std::string gen_out;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "output directory (default: data.dir)");
  gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

  auto* pre = app.add_subcommand("pretrain", "Train both directions on the bitext (iteration 0)");
  ConfigFlags pre_flags;
  pre_flags.attach(pre);
  std::string pre_exp;
  bool pre_force = false;
  pre->add_option("--exp", pre_exp, "experiment directory")->required();
  pre->add_flag("--force", pre_force, "replace a non-empty experiment directory");

  auto* joint = app.add_subcommand("joint-train", "Run (or resume) EM iterations in an experiment directory");
  std::string joint_exp;
  std::optional<int> joint_iters;
  joint->add_option("--exp", joint_exp, "experiment directory")->required();
  joint->add_option("--iterations", joint_iters, "override em.iterations");

  auto* tr = app.add_subcommand("translate", "Translate a file with a checkpoint");
  std::string tr_exp, tr_in, tr_out, tr_dir = "xy";
  std::optional<int> tr_iter;
  int tr_beam = 8;
  tr->add_option("--exp", tr_exp, "experiment directory")->required();
  tr->add_option("--input", tr_in, "one sentence per line")->required();
  tr->add_option("--output", tr_out, "output file")->required();
  tr->add_option("--direction", tr_dir, "xy | yx")->check(CLI::IsMember({"xy", "yx"}));
  tr->add_option("--iteration", tr_iter, "checkpoint iteration (default: best on dev)");
  tr->add_option("--beam", tr_beam, "beam size")->capture_default_str();

  auto* ev = app.add_subcommand("evaluate", "Corpus BLEU of a hypothesis file");
  std::string ev_hyp;
  std::vector<std::string> ev_refs;
  ev->add_option("--hyp", ev_hyp, "hypotheses, one per line")->required();
  ev->add_option("--ref", ev_refs, "reference file (repeatable)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*print_cfg) {
      std::cout << ex::to_ini(print_flags.resolve(false));
    } else if (*gen) {
      const auto cfg = gen_flags.resolve();
      const auto out = gen_out.empty() ? cfg.data.dir : std::filesystem::path(gen_out);
      const auto s = ex::gen_data(cfg, out, gen_force);
      std::cout << "train " << s.train << "\nmono.x " << s.mono_x << "\nmono.y " << s.mono_y << "\ndev "
                << s.dev << "\ntest " << s.test << '\n';
    } else if (*pre) {
      print_summaries(ex::cmd_pretrain(pre_flags.resolve(), pre_exp, pre_force));
    } else if (*joint) {
      print_summaries(ex::cmd_joint_train(joint_exp, joint_iters));
    } else if (*tr) {
      ex::TranslateOptions o;
      o.direction = tr_dir == "xy" ? em::kXY : em::kYX;
      o.iteration = tr_iter;
      o.beam_size = tr_beam;
      const auto r = ex::cmd_translate(tr_exp, tr_in, tr_out, o);
      std::cerr << "translated " << r.sentences << " sentences with " << r.checkpoint.string();
      if (r.failed) std::cerr << " (" << r.failed << " failed, written empty)";
      std::cerr << '\n';
    } else if (*ev) {
      std::vector<std::filesystem::path> refs(ev_refs.begin(), ev_refs.end());
      std::cout << ex::cmd_evaluate(ev_hyp, refs).to_json() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
