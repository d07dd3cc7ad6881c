#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nlte/annotio.hpp"
#include "nlte/gradcheck.hpp"
#include "nlte/rng.hpp"
#include "nlte/synthworld.hpp"
#include "nlte/trainer.hpp"

namespace py = pybind11;
using namespace nlte;

namespace {

// Everything crosses the boundary as interchange documents (scene.v1,
// detections.v1, metrics.v1, CSV), so python never holds references into
// C++ training state.
struct PyRunResult {
  std::string config_json;
  std::string run_csv_text;
  std::string metrics_json_text;
  std::string detections_json_text;
  std::string target_gt_json;
  std::string corruption_log;
  std::vector<std::string> relmat_csv;
  std::vector<double> epoch_map;
  double final_map = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

PyRunResult run_training(const std::string& config_json) {
  const TrainConfig cfg = parse_train_config(config_json);
  TrainResult result = train(cfg);
  PyRunResult out;
  out.config_json = train_config_json(result.cfg);
  out.run_csv_text = run_csv(result.record);
  out.metrics_json_text = metrics_json(result);
  out.detections_json_text = detections_json(detect(result.bundle, result.target_scenes));
  out.target_gt_json = scenes_to_json(result.target_scenes);
  out.corruption_log = corruption_log_csv(result.corruption);
  out.relmat_csv = std::move(result.relmat_csv);
  out.epoch_map = result.record.epoch_map;
  out.final_map = result.final_eval.map;
  out.aborted = result.record.aborted;
  out.abort_reason = result.record.abort_reason;
  return out;
}

// The dataset exactly as a training run with this config sees it: same
// root-rng derivation, same corruption pass.
py::tuple generate_scenario(const std::string& config_json) {
  const TrainConfig cfg = parse_train_config(config_json);
  Rng root(cfg.seed);
  std::vector<Scene> source = generate_scenes(cfg.scenario, Domain::kSource, root);
  const std::vector<Scene> target = generate_scenes(cfg.scenario, Domain::kTarget, root);
  const std::uint64_t noise_seed = root.stream("noise-seed").next_u64();
  const CorruptionLog log = inject_label_noise(source, cfg.scenario, cfg.scenario.rho, noise_seed);
  return py::make_tuple(scenes_to_json(source), scenes_to_json(target), corruption_log_csv(log));
}

std::string ablation(const std::string& config_json, const std::vector<std::uint64_t>& seeds) {
  return ablation_csv(ablation_grid(parse_train_config(config_json), seeds));
}

std::string evaluate_documents(const std::string& detections_json_text,
                               const std::string& scenes_json_text) {
  return eval_summary_json(evaluate_interchange(detections_json_text, scenes_json_text).summary);
}

std::vector<py::tuple> gradient_checks(std::uint64_t seed, int instances, double tolerance) {
  std::vector<py::tuple> out;
  for (const GradCheckCase& c : run_gradient_checks(seed, instances, tolerance))
    out.push_back(py::make_tuple(c.name, c.max_rel_err, c.pass));
  return out;
}

py::tuple corrupt_voc(const std::vector<std::string>& xml_texts,
                      const std::vector<std::string>& file_names, double rate,
                      std::uint64_t seed) {
  std::vector<VocDoc> docs;
  docs.reserve(xml_texts.size());
  for (const std::string& xml : xml_texts) docs.push_back(parse_voc(xml));
  const AnnotCorruptionLog log = corrupt_annotations(docs, file_names, voc_categories(), rate, seed);
  std::vector<std::string> out;
  out.reserve(docs.size());
  for (const VocDoc& doc : docs) out.push_back(write_voc(doc));
  return py::make_tuple(out, annot_corruption_log_csv(log));
}

}  // namespace

PYBIND11_MODULE(_nlte, m) {
  m.doc() = "noise-robust domain-adaptive detection core";

  py::class_<PyRunResult>(m, "RunResult")
      .def_readonly("config_json", &PyRunResult::config_json)
      .def_readonly("run_csv", &PyRunResult::run_csv_text)
      .def_readonly("metrics_json", &PyRunResult::metrics_json_text)
      .def_readonly("detections_json", &PyRunResult::detections_json_text)
      .def_readonly("target_gt_json", &PyRunResult::target_gt_json)
      .def_readonly("corruption_log_csv", &PyRunResult::corruption_log)
      .def_readonly("relmat_csv", &PyRunResult::relmat_csv)
      .def_readonly("epoch_map", &PyRunResult::epoch_map)
      .def_readonly("final_map", &PyRunResult::final_map)
      .def_readonly("aborted", &PyRunResult::aborted)
      .def_readonly("abort_reason", &PyRunResult::abort_reason);

  m.def("run_training", &run_training, py::arg("config_json"),
        "Run one training configuration; returns a RunResult of interchange documents.");
  m.def("generate_scenario", &generate_scenario, py::arg("config_json"),
        "Build the (source, target, corruption log) dataset a run with this config trains on.");
  m.def("ablation", &ablation, py::arg("config_json"), py::arg("seeds"),
        "Module ablation grid over the given seeds; returns the aggregate CSV.");
  m.def("evaluate_detections", &evaluate_documents, py::arg("detections_json"),
        py::arg("scenes_json"),
        "Score a detections.v1 document against scene.v1 truth; returns metrics.v1 JSON.");
  m.def("gradient_checks", &gradient_checks, py::arg("seed") = 1, py::arg("instances") = 50,
        py::arg("tolerance") = 1e-4,
        "Finite-difference audit; returns (name, max_rel_err, pass) per operation.");
  m.def("corrupt_voc", &corrupt_voc, py::arg("xml_texts"), py::arg("file_names"), py::arg("rate"),
        py::arg("seed"),
        "Label-noise protocol over VOC documents; returns (corrupted_texts, log_csv).");

#ifdef NLTE_VERSION_INFO
  m.attr("__version__") = NLTE_VERSION_INFO;
#else
  m.attr("__version__") = "dev";
#endif
}
