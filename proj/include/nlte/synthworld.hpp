#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlte/geometry.hpp"
#include "nlte/rng.hpp"

namespace nlte {

enum class Domain { kSource, kTarget };

struct GtObject {
  Box box;
  int category = 0;
  // False means the learner cannot see this object (miss-annotated, or any
  // target-domain object); the evaluator always sees it.
  bool annotated = true;
  std::optional<int> corrupted_from;

  bool operator==(const GtObject&) const = default;
};

struct Proposal {
  Box box;
  std::vector<double> feature;
  double objectness = 0.0;
  // Index of the object this proposal was spawned from; empty for clutter.
  std::optional<int> matched_gt;

  bool operator==(const Proposal&) const = default;
};

struct Scene {
  Domain domain = Domain::kSource;
  std::vector<GtObject> objects;
  std::vector<Proposal> proposals;

  bool operator==(const Scene&) const = default;
};

// Synthetic two-domain scenario. Category features are diagonal Gaussians;
// the target domain sees them through an affine map (paired-dimension
// rotation, scale, constant offset) plus isotropic noise. Default category
// means are drawn once from a fixed internal stream, so they depend only on
// (categories, feature_dim, mean_scale), never on the run seed.
struct ScenarioConfig {
  int categories = 5;
  int feature_dim = 16;
  int scenes_per_domain = 200;
  int objects_per_scene = 4;
  int background_proposals = 16;
  int proposals_per_object = 2;

  double mean_scale = 15.0;
  std::vector<std::vector<double>> category_means;    // empty -> defaults
  std::vector<std::vector<double>> category_stddevs;  // empty -> all 2.5
  double background_std = 6.0;

  double shift_rotate = 0.5;   // radians, applied to dimension pairs
  double shift_scale = 1.0;    // must be non-zero (map stays invertible)
  double shift_offset = 5.0;   // offset vector norm, spread evenly over dims
  double noise_scale = 1.0;    // target-domain additive feature noise

  double obj_gain = 8.0;       // objectness = logistic(gain*(maxIoU+jitter)+bias)
  double obj_bias = -2.0;
  double obj_jitter_std = 0.05;
  double bg_obj_alpha = 2.0;   // background objectness ~ Beta(alpha, beta)
  double bg_obj_beta = 5.0;

  double canvas_size = 100.0;
  double box_min = 8.0;
  double box_max = 24.0;
  double proposal_jitter = 0.15;

  double rho = 0.0;            // label-noise rate on the source domain
  bool background_in_noise = true;
  std::uint64_t seed = 1;
};

// Throws std::invalid_argument on out-of-range fields, degenerate stddevs,
// or a non-invertible shift map.
void validate_config(const ScenarioConfig& cfg);

// Means/stddevs with defaults materialized; always C x D.
std::vector<std::vector<double>> resolved_means(const ScenarioConfig& cfg);
std::vector<std::vector<double>> resolved_stddevs(const ScenarioConfig& cfg);

// The target-domain feature map without the noise term.
std::vector<double> shift_map(const ScenarioConfig& cfg, std::span<const double> x);

Scene generate_scene(const ScenarioConfig& cfg, Domain domain, Rng rng);
std::vector<Scene> generate_scenes(const ScenarioConfig& cfg, Domain domain, const Rng& root);

struct CorruptionRecord {
  int scene_id = 0;
  int object_id = 0;
  int original_category = 0;
  bool removed = false;
  int new_category = -1;  // -1 when removed

  bool operator==(const CorruptionRecord&) const = default;
};
using CorruptionLog = std::vector<CorruptionRecord>;

// Applies the label-noise protocol in place: exactly floor(rho*N) objects
// selected without replacement; each draws uniformly among the C-1 other
// categories plus background (background clears `annotated`). With
// cfg.background_in_noise off the background outcome is excluded.
CorruptionLog inject_label_noise(std::vector<Scene>& scenes, const ScenarioConfig& cfg,
                                 double rho, std::uint64_t seed);

// Undoes a corruption exactly.
void restore_from_log(std::vector<Scene>& scenes, const CorruptionLog& log);

// CSV with header scene_id,object_id,original_category,new_category_or_REMOVED.
std::string corruption_log_csv(const CorruptionLog& log);
CorruptionLog parse_corruption_log_csv(const std::string& text);

// scene.v1 JSON interchange (objects: box/category/annotated, proposals:
// box/feature/objectness). Spawn links and corruption marks are runtime
// state, not part of the schema.
std::string scenes_to_json(const std::vector<Scene>& scenes);
std::vector<Scene> scenes_from_json(const std::string& text);

const char* domain_name(Domain d);

}  // namespace nlte
