#pragma once
// Detection-quality evaluation: greedy NMS, per-category average precision,
// mAP, and the three-way error taxonomy of top-scoring detections.

#include <optional>
#include <vector>

#include "nlte/geometry.hpp"
#include "nlte/synthworld.hpp"

namespace nlte {

struct Detection {
  int scene = 0;
  Box box;
  int category = 0;
  double score = 0.0;  // in [0,1]
};

struct TruthBox {
  int scene = 0;
  Box box;
  int category = 0;
};

// Flattens scene objects into evaluation truth. Every object counts,
// annotated or not, under its original category; evaluation is against what
// is really in the scene, not against the (possibly corrupted) annotations.
std::vector<TruthBox> ground_truth_from_scenes(const std::vector<Scene>& scenes);

// Greedy per-scene, per-category suppression by descending score; ties break
// toward lower x1 then lower y1. A detection is dropped when its IoU with an
// already-kept one strictly exceeds the threshold. Threshold must be in (0,1).
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold = 0.5);

struct ApOptions {
  double iou_threshold = 0.5;
  bool eleven_point = false;
};

// VOC-style greedy matching by descending score, one match per truth box,
// same scene and category, TP iff IoU >= threshold. Empty truth for the
// category leaves the AP undefined.
std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<TruthBox>& truth, int category,
                                        const ApOptions& opts = {});

std::vector<std::optional<double>> per_category_ap(const std::vector<Detection>& detections,
                                                   const std::vector<TruthBox>& truth,
                                                   int categories, const ApOptions& opts = {});

// Mean over defined categories; throws when none is defined.
double mean_ap(const std::vector<std::optional<double>>& aps);

struct TaxonomyCounts {
  std::vector<int> correct;       // max same-category IoU >= 0.5
  std::vector<int> mislocalized;  // in [0.3, 0.5)
  std::vector<int> background;    // below 0.3
  int analyzed() const;
};

// Per category, the top-k detections by score with k = that category's truth
// count, binned by their best IoU against same-scene same-category truth.
TaxonomyCounts error_taxonomy(const std::vector<Detection>& detections,
                              const std::vector<TruthBox>& truth, int categories);

// Per-category mean fractions over categories with at least one analyzed
// detection (the averaging axis is per-category, not pooled).
struct TaxonomyShares {
  double correct = 0.0;
  double mislocalized = 0.0;
  double background = 0.0;
  int categories_counted = 0;
};
TaxonomyShares taxonomy_shares(const TaxonomyCounts& counts);

struct EvalSummary {
  std::vector<std::optional<double>> per_category_ap;
  double map = 0.0;
  TaxonomyCounts taxonomy;
  TaxonomyShares shares;
};

// NMS at threshold 0.5 first, then AP/mAP and the taxonomy.
EvalSummary evaluate(std::vector<Detection> detections, const std::vector<TruthBox>& truth,
                     int categories, const ApOptions& opts = {});

}  // namespace nlte
