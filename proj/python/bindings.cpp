#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "unlearn/errors.hpp"
#include "unlearn/harness.hpp"

namespace py = pybind11;
using namespace unlearn;

namespace {

py::object to_py(const nlohmann::json &j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_py(const py::handle &obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::dict pair_dict(const QAPair &qa) {
  py::dict d;
  d["id"] = qa.id;
  d["entity_id"] = qa.entity_id;
  d["neighbor_kind"] = std::string(to_string(qa.kind));
  d["question"] = qa.question;
  d["answer"] = qa.answer;
  return d;
}

py::list pair_list(const std::vector<QAPair> &pairs) {
  py::list out;
  for (const auto &qa : pairs) out.append(pair_dict(qa));
  return out;
}

std::vector<SampleScores> scores_from(const std::vector<std::tuple<double, double, double>> &t) {
  std::vector<SampleScores> out;
  for (const auto &[r, p, c] : t) out.push_back({r, p, c, ""});
  return out;
}

} // namespace

PYBIND11_MODULE(unlearn_lab, m) {
  m.doc() = "Entity-level machine unlearning lab";

  static py::exception<Error> base(m, "UnlearnError");
  static py::exception<StageError> stage(m, "StageError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const StageError &e) {
      stage(e.what());
    } catch (const Error &e) {
      base(e.what());
    }
  });

  py::class_<CorpusBundle>(m, "Corpus")
      .def_property_readonly("forget", [](const CorpusBundle &b) { return pair_list(b.forget); })
      .def_property_readonly("retain", [](const CorpusBundle &b) { return pair_list(b.retain); })
      .def_property_readonly("test", [](const CorpusBundle &b) { return pair_list(b.test); })
      .def_readonly("entities", &CorpusBundle::entities)
      .def("__len__", &CorpusBundle::size)
      .def("save", [](const CorpusBundle &b, const std::filesystem::path &p) { save_corpus(b, p); })
      .def(py::self == py::self);

  m.def(
      "generate_synthetic",
      [](std::size_t n_entities, std::size_t forget_per_entity, std::size_t direct_per_entity,
         std::size_t indirect_per_entity, std::size_t n_general, std::size_t test_per_entity,
         std::size_t n_test_general, std::uint64_t seed) {
        return generate_synthetic({n_entities, forget_per_entity, direct_per_entity,
                                   indirect_per_entity, n_general, test_per_entity,
                                   n_test_general, seed});
      },
      py::arg("n_entities") = 10, py::arg("forget_per_entity") = 5,
      py::arg("direct_per_entity") = 4, py::arg("indirect_per_entity") = 8,
      py::arg("n_general") = 30, py::arg("test_per_entity") = 2, py::arg("n_test_general") = 10,
      py::arg("seed") = 7);
  m.def("load_corpus", [](const std::filesystem::path &p) { return load_corpus(p); },
        py::arg("path"));

  m.def(
      "compose_retain",
      [](const CorpusBundle &b, const std::string &mode, std::uint64_t seed) {
        return pair_list(compose_retain(b, {parse_retain_mode(mode), seed}));
      },
      py::arg("corpus"), py::arg("mode") = "full", py::arg("seed") = 0);

  m.def(
      "build_schedule",
      [](const CorpusBundle &b, const std::string &strategy, std::size_t epochs,
         std::uint64_t seed, const std::string &composition) {
        const auto retain = compose_retain(b, {parse_retain_mode(composition), seed});
        const auto s = build_schedule({parse_strategy(strategy), seed}, b.forget, retain, epochs);
        std::vector<std::vector<std::pair<std::string, std::string>>> out;
        for (const auto &epoch : s.epochs) {
          auto &e = out.emplace_back();
          for (const auto &p : epoch) e.emplace_back(p.forget_id, p.retain_id);
        }
        return out;
      },
      py::arg("corpus"), py::arg("strategy") = "melu", py::arg("epochs") = kDefaultEpochs,
      py::arg("seed") = 0, py::arg("composition") = "full",
      "Epochs of (forget_id, retain_id) pairs.");

  m.def("rouge_l", [](const std::vector<TokenId> &g, const std::vector<TokenId> &r) {
    return rouge_l(g, r);
  });
  m.def(
      "distinct_n",
      [](const std::vector<std::vector<TokenId>> &gens, std::size_t n) {
        return distinct_n(gens, n);
      },
      py::arg("generations"), py::arg("n"));
  m.def(
      "forget_efficacy",
      [](const std::vector<std::tuple<double, double, double>> &s) {
        return forget_efficacy(scores_from(s));
      },
      py::arg("scores"), "scores: (rouge_l, probability, cosine) per sample.");
  m.def(
      "model_utility",
      [](const std::vector<std::tuple<double, double, double>> &s) {
        return model_utility(scores_from(s));
      },
      py::arg("scores"));

  m.def("default_config", [] { return to_py(to_json(ExperimentConfig{})); });
  m.def(
      "run_experiment",
      [](const py::dict &config) {
        const auto cfg = config_from_json(from_py(config));
        std::vector<RunResult> results;
        {
          py::gil_scoped_release release;
          results = run_experiment(cfg);
        }
        py::list out;
        for (const auto &r : results) out.append(to_py(to_json(r)));
        return out;
      },
      py::arg("config"), "Runs every seed of the config; returns one run record per seed.");
  m.def(
      "evaluate",
      [](const std::filesystem::path &checkpoint, const CorpusBundle &corpus) {
        const auto model = load_checkpoint(checkpoint);
        return to_py(to_json(evaluate(model, corpus)));
      },
      py::arg("checkpoint"), py::arg("corpus"));
  m.def(
      "emit_report",
      [](const std::vector<std::filesystem::path> &runs, const std::filesystem::path &out) {
        std::vector<RunResult> results;
        for (const auto &p : runs) results.push_back(load_run(p));
        emit_report(results, out);
      },
      py::arg("run_files"), py::arg("out_dir"));
}
