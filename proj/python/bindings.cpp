// Python module _jtnmt: models, beam search, BLEU, and the experiment commands.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "jtnmt/beam.hpp"
#include "jtnmt/bleu.hpp"
#include "jtnmt/em.hpp"
#include "jtnmt/experiment.hpp"

namespace py = pybind11;
namespace ex = jtnmt::experiment;
using namespace jtnmt;

namespace {

py::object json_to_py(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

py::list summaries(const em::EMState& s) {
  py::list out;
  for (const auto& sum : s.summaries) out.append(json_to_py(sum.to_json()));
  return out;
}

em::Direction parse_direction(const std::string& d) {
  if (d == "xy") return em::kXY;
  if (d == "yx") return em::kYX;
  throw std::invalid_argument("direction must be 'xy' or 'yx'");
}

ex::ExperimentConfig config_from(const std::string& ini, const std::optional<std::string>& preset) {
  ex::ExperimentConfig c = ini.empty() ? ex::default_config() : ex::parse_ini(ini);
  if (preset) ex::apply_preset(c, ex::parse_preset(*preset));
  return c;
}

py::list hypotheses(const beam::NBestList& nb) {
  py::list out;
  for (const auto& h : nb.hypotheses) {
    py::dict d;
    d["tokens"] = h.output();
    d["log_prob"] = h.log_prob;
    d["score"] = beam::normalized_score(h);
    d["forced"] = h.forced;
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_jtnmt, m) {
  m.doc() = "Joint EM training of paired translation models";
  m.attr("PAD") = data::kPad;
  m.attr("BOS") = data::kBos;
  m.attr("EOS") = data::kEos;
  m.attr("UNK") = data::kUnk;

  py::class_<model::ModelParams>(m, "Model")
      .def(py::init([](int src_vocab, int tgt_vocab, int d_emb, int d_hidden, int d_att, int max_len,
                       std::uint64_t seed) {
             model::ModelConfig c{src_vocab, tgt_vocab, d_emb, d_hidden, d_att, max_len};
             return model::init_params(c, seed);
           }),
           py::arg("src_vocab"), py::arg("tgt_vocab"), py::arg("d_emb") = 32, py::arg("d_hidden") = 64,
           py::arg("d_att") = 64, py::arg("max_len") = 60, py::arg("seed") = 1)
      .def_static("load", &model::load_checkpoint, py::arg("path"))
      .def("save", [](const model::ModelParams& p, const std::filesystem::path& path) { model::save_checkpoint(p, path); })
      .def_property_readonly("config",
                             [](const model::ModelParams& p) {
                               const auto& c = p.config;
                               py::dict d;
                               d["src_vocab"] = c.src_vocab;
                               d["tgt_vocab"] = c.tgt_vocab;
                               d["d_emb"] = c.d_emb;
                               d["d_hidden"] = c.d_hidden;
                               d["d_att"] = c.d_att;
                               d["max_len"] = c.max_len;
                               return d;
                             })
      .def_property_readonly("num_values", &model::ModelParams::num_values)
      .def(
          "sequence_log_prob",
          [](const model::ModelParams& p, const data::TokenIds& src, data::TokenIds tgt) {
            tgt.push_back(data::kEos);
            return model::sequence_log_prob(p, src, tgt);
          },
          py::arg("source"), py::arg("target"), "log p(target + EOS | source)")
      .def(
          "beam_search",
          [](const model::ModelParams& p, const data::TokenIds& src, int beam_size, int n_best,
             std::optional<int> max_len) {
            const int ml = max_len ? *max_len : beam::default_max_len(src.size(), p.config.max_len);
            return hypotheses(beam::beam_search(p, src, beam_size, n_best, ml));
          },
          py::arg("source"), py::arg("beam_size") = 8, py::arg("n_best") = 1, py::arg("max_len") = py::none());

  m.def(
      "corpus_bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::vector<std::string>>& refs) {
        std::vector<data::Sentence> h;
        for (const auto& s : hyps) h.push_back(data::tokenize(s));
        std::vector<std::vector<data::Sentence>> r;
        for (const auto& set : refs) {
          r.emplace_back();
          for (const auto& s : set) r.back().push_back(data::tokenize(s));
        }
        return json_to_py(bleu::corpus_bleu(h, r).to_json());
      },
      py::arg("hypotheses"), py::arg("references"),
      "Corpus BLEU-4; references[i] lists the references of hypothesis i.");

  m.def(
      "normalize_weights",
      [](const std::vector<std::pair<std::size_t, double>>& hyps) {
        beam::NBestList nb;
        for (const auto& [len, lp] : hyps) {
          if (len < 1) throw std::invalid_argument("hypothesis length must be >= 1");
          data::TokenIds t(len - 1, data::kNumReserved);
          t.push_back(data::kEos);
          nb.hypotheses.push_back({t, lp, true, false});
        }
        return em::normalize_weights(nb);
      },
      py::arg("hypotheses"), "Weights for (length including EOS, log-prob) pairs.");

  m.def(
      "default_config",
      [](std::optional<std::string> preset, std::optional<std::uint64_t> seed) {
        ex::ExperimentConfig c = config_from("", preset);
        if (seed) c.seed = *seed;
        return ex::to_ini(c);
      },
      py::arg("preset") = py::none(), py::arg("seed") = py::none(), "Default config as INI text.");

  m.def(
      "gen_data",
      [](const std::string& ini, const std::filesystem::path& out, bool force) {
        const auto s = ex::gen_data(ex::parse_ini(ini), out, force);
        py::dict d;
        d["train"] = s.train;
        d["mono_x"] = s.mono_x;
        d["mono_y"] = s.mono_y;
        d["dev"] = s.dev;
        d["test"] = s.test;
        return d;
      },
      py::arg("config"), py::arg("out"), py::arg("force") = false);

  m.def(
      "pretrain",
      [](const std::string& ini, const std::filesystem::path& exp, bool force) {
        ex::ExperimentConfig c = ex::parse_ini(ini);
        py::gil_scoped_release release;
        auto s = ex::cmd_pretrain(c, exp, force);
        py::gil_scoped_acquire acquire;
        return summaries(s);
      },
      py::arg("config"), py::arg("exp_dir"), py::arg("force") = false);

  m.def(
      "joint_train",
      [](const std::filesystem::path& exp, std::optional<int> iterations) {
        py::gil_scoped_release release;
        auto s = ex::cmd_joint_train(exp, iterations);
        py::gil_scoped_acquire acquire;
        return summaries(s);
      },
      py::arg("exp_dir"), py::arg("iterations") = py::none());

  m.def(
      "translate",
      [](const std::filesystem::path& exp, const std::filesystem::path& input, const std::filesystem::path& output,
         const std::string& direction, std::optional<int> iteration, int beam) {
        ex::TranslateOptions o;
        o.direction = parse_direction(direction);
        o.iteration = iteration;
        o.beam_size = beam;
        const auto r = ex::cmd_translate(exp, input, output, o);
        py::dict d;
        d["checkpoint"] = r.checkpoint.string();
        d["sentences"] = r.sentences;
        d["failed"] = r.failed;
        return d;
      },
      py::arg("exp_dir"), py::arg("input"), py::arg("output"), py::arg("direction") = "xy",
      py::arg("iteration") = py::none(), py::arg("beam") = 8);

  m.def(
      "evaluate",
      [](const std::filesystem::path& hyp, const std::vector<std::filesystem::path>& refs) {
        return json_to_py(ex::cmd_evaluate(hyp, refs).to_json());
      },
      py::arg("hypotheses"), py::arg("references"));
}
