#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

#include "dport/cli.hpp"
#include "dport/corpus.hpp"
#include "dport/errors.hpp"
#include "dport/eval.hpp"
#include "dport/finetune.hpp"
#include "dport/tokenizer.hpp"

namespace py = pybind11;
using namespace dport;

namespace {

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

std::unique_ptr<bool[]> flags(const std::vector<bool>& labels) {
  auto out = std::make_unique<bool[]>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i];
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Core routines of the depression-classifier portability toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", PyExc_ArithmeticError);

  m.def("binarize_phq", [](int score) { return std::string(to_string(binarize_phq(score))); }, py::arg("score"));
  m.def("tokenize", &tokenize, py::arg("text"));

  m.def("corpus_stats", [](const std::string& path) { return to_python(corpus_stats(load_corpus(path)).to_json()); },
        py::arg("path"), "Session and subject counts of a JSONL corpus, split by class pattern.");

  m.def("roc_auc",
        [](const std::vector<double>& pos, const std::vector<double>& neg) { return roc_auc(pos, neg); },
        py::arg("positive_scores"), py::arg("negative_scores"));
  m.def(
      "eer_operating_point",
      [](const std::vector<double>& scores, const std::vector<bool>& labels) {
        if (scores.size() != labels.size()) throw DomainError("scores and labels differ in length");
        const auto f = flags(labels);
        const auto e = eer_operating_point(scores, std::span<const bool>(f.get(), labels.size()));
        py::dict d;
        d["threshold"] = e.threshold;
        d["specificity"] = e.specificity;
        d["sensitivity"] = e.sensitivity;
        return d;
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "spearman",
      [](const std::vector<double>& x, const std::vector<double>& y) {
        const auto s = spearman(x, y);
        return py::make_tuple(s.rho, s.p_value);
      },
      py::arg("x"), py::arg("y"));

  m.def(
      "stlr",
      [](std::size_t t, double lr_max, std::size_t total_steps, double cut_frac, double ratio) {
        FinetuneSchedule s;
        s.lr_max = lr_max;
        s.total_steps = total_steps;
        s.cut_frac = cut_frac;
        s.ratio = ratio;
        return stlr(t, s);
      },
      py::arg("t"), py::arg("lr_max"), py::arg("total_steps"), py::arg("cut_frac") = 0.1, py::arg("ratio") = 32.0);
  m.def("discriminative_lrs", &discriminative_lrs, py::arg("base_lr"), py::arg("n_layers"),
        py::arg("layer_decay") = 1.0 / 2.6);
  m.def("unfreeze_plan", &unfreeze_plan, py::arg("epoch"), py::arg("n_groups"), py::arg("per_epoch") = 1);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"dport"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a dport subcommand in-process; returns (exit_code, stdout, stderr).");
}
