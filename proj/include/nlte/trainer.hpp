#pragma once
// Full training loop: detection loss on (possibly noisy) source labels, the
// instance-level domain discriminator, the relation regularizer, the
// entropy-aware discriminator with its meta update, ablation grid, and the
// run artifacts (run.csv, metrics.json, relation-matrix dumps).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nlte/eagr.hpp"
#include "nlte/evalkit.hpp"
#include "nlte/mgrm.hpp"
#include "nlte/mlp.hpp"
#include "nlte/pim.hpp"
#include "nlte/synthworld.hpp"

namespace nlte {

struct TrainConfig {
  int epochs = 6;
  int steps_per_epoch = 100;
  double lr = 1e-3;
  std::vector<int> decay_steps = {430, 515};  // absolute step indices, x0.1 each
  double lambda_mgrm = 0.1;
  bool pim = false;
  bool mgrm = false;
  bool eagr = false;
  // Mined source proposals always join the adversarial and relation batches;
  // they enter the detection loss only behind this flag.
  bool pim_in_det_loss = false;
  Eq4Mode mgrm_eq4_mode = Eq4Mode::kAdaptive;
  double grl_mu = 1.0;  // plateau value; linear warm-up over the first third of steps
  int batch_source = 32;
  int batch_target = 32;
  std::uint64_t seed = 1;
  MetaConfig meta;
  PimConfig pim_cfg;
  ScenarioConfig scenario;

  int total_steps() const { return epochs * steps_per_epoch; }
};

void validate_train_config(const TrainConfig& cfg);

// Strict JSON mirror of TrainConfig: top-level fields plus nested "meta",
// "pim_config", and "scenario" objects. Any unknown key anywhere throws.
TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_json(const TrainConfig& cfg);

enum class Role { kClean, kCorrupted, kMined, kTarget };

struct TrainBatch {
  Matrix features;          // N x D_raw
  std::vector<int> labels;  // category or pseudo-label; -1 unlabeled
  std::vector<Role> roles;
};

struct ModelBundle {
  Mlp feat;      // D_raw -> D
  Mlp det;       // D -> C logits
  Mlp dis_daf;   // D -> 1 logit
  Mlp dis_eagr;  // D + C -> 1 logit
  AggregationWeights agg;  // fixed after init; no loss reaches it
  PrototypeBank bank;

  ModelBundle(int feature_dim, int categories);
};

void init_bundle(ModelBundle& bundle, Rng root);

struct LossBreakdown {
  double det = 0.0;
  double mgrm = 0.0;      // unweighted; total applies lambda_mgrm
  double dis_daf = 0.0;
  double dis_eagr = 0.0;
  double total = 0.0;
};

struct StepGradients {
  GradBundle feat, det, dis_daf, dis_eagr;
};

struct StepEval {
  LossBreakdown losses;
  StepGradients grads;
  double mean_entropy = 0.0;      // eagr diagnostic, 0 when off
  RelationMatrix z, pi;           // last relation matrices when mgrm ran
};

// Loss and gradients at the current parameters. Either batch may be empty
// (terms over the missing side vanish); update_bank false freezes the
// prototype bank so diagnostic evaluations stay side-effect free.
StepEval eval_losses(ModelBundle& bundle, const TrainBatch& source, const TrainBatch& target,
                     const TrainConfig& cfg, double grl_mu, bool update_bank);

// Public objective per the training contract: both batches must be non-empty.
StepEval total_loss(ModelBundle& bundle, const TrainBatch& source, const TrainBatch& target,
                    const TrainConfig& cfg, double grl_mu = 1.0);

struct StepRow {
  int step = 0;
  double lr = 0.0;
  double grl_mu = 0.0;
  LossBreakdown losses;
  GradReport report;
  double mean_entropy = 0.0;
  int mined_source = 0;
  int mined_target = 0;
};

struct RunRecord {
  std::vector<StepRow> rows;
  std::vector<double> epoch_map;  // target mAP at each epoch end
  double wall_seconds = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainResult {
  TrainConfig cfg;
  RunRecord record;
  std::vector<Scene> source_scenes;  // post-corruption view
  std::vector<Scene> target_scenes;
  CorruptionLog corruption;
  EvalSummary final_eval;
  std::vector<std::string> relmat_csv;  // one Pi/Z dump per epoch when mgrm on
  ModelBundle bundle;

  explicit TrainResult(const TrainConfig& c)
      : cfg(c), bundle(c.scenario.feature_dim, c.scenario.categories) {}
};

TrainResult train(const TrainConfig& cfg);

// Deterministic %.17g per-step table; excludes wall time on purpose so
// identical seeds produce identical bytes.
std::string run_csv(const RunRecord& record);

// Argmax detections over every proposal of every scene: score = softmax
// probability of the winning category times objectness.
std::vector<Detection> detect(const ModelBundle& bundle, const std::vector<Scene>& scenes);

// detections.v1 interchange.
std::string detections_json(const std::vector<Detection>& detections);
std::vector<Detection> detections_from_json(const std::string& text);

std::string eval_summary_json(const EvalSummary& summary);
std::string metrics_json(const TrainResult& result);

// Scores a detections.v1 document against scene.v1 ground truth. The category
// count is inferred as 1 + the highest category present in either input.
struct InterchangeEval {
  EvalSummary summary;
  int categories = 0;
};
InterchangeEval evaluate_interchange(const std::string& detections_json_text,
                                     const std::string& scenes_json_text);

struct AblationRow {
  std::string label;
  bool pim = false, mgrm = false, eagr = false;
  std::vector<double> maps;  // one per seed
  double mean = 0.0;
  double sd = 0.0;
};

// Five-row grid {baseline, +PIM, +PIM+MGRM, +PIM+EAGR, full} over the given
// seeds; every run uses cfg with only flags and seed replaced.
std::vector<AblationRow> ablation_grid(const TrainConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds);
std::string ablation_csv(const std::vector<AblationRow>& rows);

// Fraction of truth-matched target proposals whose argmax category is right.
double target_proposal_accuracy(const ModelBundle& bundle, const std::vector<Scene>& scenes);

}  // namespace nlte
