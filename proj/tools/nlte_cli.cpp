#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "nlte/annotio.hpp"
#include "nlte/evalkit.hpp"
#include "nlte/gradcheck.hpp"
#include "nlte/synthworld.hpp"
#include "nlte/trainer.hpp"

namespace fs = std::filesystem;
using namespace nlte;

namespace {

// Exit codes: 0 success, 1 runtime failure (divergence, failed checks),
// 2 bad input (malformed files, schema or config violations).
constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kBadInput = 2;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Sorted so runs are reproducible regardless of directory iteration order.
std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ext) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

int run_corrupt(double rate, std::uint64_t seed, const std::string& format,
                const fs::path& in_dir, const fs::path& out_dir, const fs::path& log_path) {
  if (format != "voc" && format != "json") {
    std::cerr << "error: --format must be voc or json\n";
    return kBadInput;
  }
  const std::string ext = format == "voc" ? ".xml" : ".json";
  const std::vector<fs::path> inputs = files_with_extension(in_dir, ext);
  if (inputs.empty()) {
    std::cerr << "error: no " << ext << " files in " << in_dir.string() << "\n";
    return kBadInput;
  }
  std::vector<std::string> names;
  names.reserve(inputs.size());
  for (const auto& p : inputs) names.push_back(p.filename().string());

  fs::create_directories(out_dir);
  AnnotCorruptionLog log;
  if (format == "voc") {
    std::vector<VocDoc> docs;
    docs.reserve(inputs.size());
    for (const auto& p : inputs) docs.push_back(parse_voc(read_file(p)));
    log = corrupt_annotations(docs, names, voc_categories(), rate, seed);
    for (std::size_t i = 0; i < docs.size(); ++i) write_file(out_dir / names[i], write_voc(docs[i]));
  } else {
    std::vector<CocoLikeDoc> docs;
    docs.reserve(inputs.size());
    for (const auto& p : inputs) docs.push_back(parse_coco(read_file(p)));
    log = corrupt_annotations(docs, names, voc_categories(), rate, seed);
    for (std::size_t i = 0; i < docs.size(); ++i)
      write_file(out_dir / names[i], write_coco(docs[i]));
  }
  write_file(log_path, annot_corruption_log_csv(log));
  std::cout << inputs.size() << " files, " << log.size() << " log entries -> "
            << out_dir.string() << "\n";
  return kOk;
}

int run_train(const fs::path& config_path, const fs::path& out_dir) {
  TrainConfig cfg;
  try {
    cfg = parse_train_config(read_file(config_path));
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadInput;
  }
  const TrainResult result = train(cfg);

  fs::create_directories(out_dir);
  write_file(out_dir / "config.json", train_config_json(result.cfg));
  write_file(out_dir / "run.csv", run_csv(result.record));
  write_file(out_dir / "metrics.json", metrics_json(result));
  write_file(out_dir / "corruption_log.csv", corruption_log_csv(result.corruption));
  write_file(out_dir / "target_gt.json", scenes_to_json(result.target_scenes));
  write_file(out_dir / "detections_final.json",
             detections_json(detect(result.bundle, result.target_scenes)));
  for (std::size_t i = 0; i < result.relmat_csv.size(); ++i)
    write_file(out_dir / ("relmat_epoch_" + std::to_string(i + 1) + ".csv"),
               result.relmat_csv[i]);

  if (result.record.aborted) {
    std::cerr << "aborted: " << result.record.abort_reason << " (outputs flushed to "
              << out_dir.string() << ")\n";
    return kRuntimeFailure;
  }
  std::printf("steps=%zu final_map=%.6f -> %s\n", result.record.rows.size(),
              result.final_eval.map, out_dir.string().c_str());
  return kOk;
}

int run_ablate(const fs::path& config_path, int seeds, const fs::path& out_dir) {
  TrainConfig cfg;
  try {
    cfg = parse_train_config(read_file(config_path));
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadInput;
  }
  if (seeds < 2) {
    std::cerr << "error: --seeds must be at least 2 for mean/sd aggregation\n";
    return kBadInput;
  }
  std::vector<std::uint64_t> seed_list;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  const std::vector<AblationRow> rows = ablation_grid(cfg, seed_list);
  const std::string csv = ablation_csv(rows);
  fs::create_directories(out_dir);
  write_file(out_dir / "ablation.csv", csv);
  std::cout << csv;
  return kOk;
}

int run_gradcheck(std::uint64_t seed, int instances, double tolerance) {
  const std::vector<GradCheckCase> cases = run_gradient_checks(seed, instances, tolerance);
  bool all_pass = true;
  for (const GradCheckCase& c : cases) {
    std::printf("%-28s max_rel_err=%.3e %s\n", c.name.c_str(), c.max_rel_err,
                c.pass ? "pass" : "FAIL");
    all_pass = all_pass && c.pass;
  }
  return all_pass ? kOk : kRuntimeFailure;
}

int run_relmat(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) {
    std::cerr << "error: " << run_dir.string() << " is not a directory\n";
    return kBadInput;
  }
  const std::regex name_re("relmat_epoch_([0-9]+)\\.csv");
  std::vector<std::pair<int, fs::path>> dumps;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, name_re))
      dumps.emplace_back(std::stoi(m[1].str()), entry.path());
  }
  if (dumps.empty()) {
    std::cerr << "error: no relmat_epoch_<n>.csv in " << run_dir.string()
              << " (run trained without the relation module?)\n";
    return kBadInput;
  }
  std::sort(dumps.begin(), dumps.end());
  for (const auto& [epoch, path] : dumps) {
    std::cout << "== epoch " << epoch << " ==\n";
    std::cout << read_file(path);
  }
  return kOk;
}

int run_eval(const fs::path& det_path, const fs::path& gt_path, const fs::path& out_path) {
  const InterchangeEval result = evaluate_interchange(read_file(det_path), read_file(gt_path));
  write_file(out_path, eval_summary_json(result.summary));
  std::printf("map=%.6f categories=%d -> %s\n", result.summary.map, result.categories,
              out_path.string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noise-robust domain-adaptive detection toolkit"};
  app.require_subcommand(1);

  double rate = 0.0;
  std::uint64_t corrupt_seed = 1;
  std::string format;
  std::string in_dir, corrupt_out, log_path;
  CLI::App* corrupt = app.add_subcommand("corrupt", "inject label noise into a dataset");
  corrupt->add_option("--rate", rate, "fraction of objects to corrupt, in [0,1]")->required();
  corrupt->add_option("--seed", corrupt_seed, "rng seed");
  corrupt->add_option("--format", format, "voc or json")->required();
  corrupt->add_option("--in", in_dir, "input dataset directory")->required();
  corrupt->add_option("--out", corrupt_out, "output directory")->required();
  corrupt->add_option("--log", log_path, "corruption log csv path")->required();

  std::string train_config, train_out;
  CLI::App* train_cmd = app.add_subcommand("train", "run one training configuration");
  train_cmd->add_option("--config", train_config, "json config path")->required();
  train_cmd->add_option("--out", train_out, "output directory")->required();

  std::string ablate_config, ablate_out;
  int ablate_seeds = 5;
  CLI::App* ablate = app.add_subcommand("ablate", "module ablation grid over seeds");
  ablate->add_option("--config", ablate_config, "json config path")->required();
  ablate->add_option("--seeds", ablate_seeds, "seed count, consecutive from the config seed");
  ablate->add_option("--out", ablate_out, "output directory")->required();

  std::uint64_t gc_seed = 1;
  int gc_instances = 50;
  double gc_tolerance = 1e-4;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--seed", gc_seed, "rng seed");
  gradcheck->add_option("--instances", gc_instances, "random instances per case");
  gradcheck->add_option("--tolerance", gc_tolerance, "max relative error allowed");

  std::string relmat_run;
  CLI::App* relmat = app.add_subcommand("relmat", "print per-epoch relation matrices of a run");
  relmat->add_option("--run", relmat_run, "train output directory")->required();

  std::string eval_det, eval_gt, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "score detections against scene ground truth");
  eval->add_option("--detections", eval_det, "detections.v1 json path")->required();
  eval->add_option("--gt", eval_gt, "scene.v1 json path")->required();
  eval->add_option("--out", eval_out, "metrics json output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (corrupt->parsed())
      return run_corrupt(rate, corrupt_seed, format, in_dir, corrupt_out, log_path);
    if (train_cmd->parsed()) return run_train(train_config, train_out);
    if (ablate->parsed()) return run_ablate(ablate_config, ablate_seeds, ablate_out);
    if (gradcheck->parsed()) return run_gradcheck(gc_seed, gc_instances, gc_tolerance);
    if (relmat->parsed()) return run_relmat(relmat_run);
    if (eval->parsed()) return run_eval(eval_det, eval_gt, eval_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  }
  return kOk;
}
