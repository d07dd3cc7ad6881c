#include "nlte/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nlte {
namespace {

void check_detections(const std::vector<Detection>& detections) {
  for (const auto& d : detections) {
    validate_box(d.box);
    if (!(d.score >= 0.0 && d.score <= 1.0))
      throw std::invalid_argument("detection score must be in [0,1]");
    if (d.category < 0) throw std::invalid_argument("detection category must be non-negative");
  }
}

// Shared ranking: score descending, then lower x1, then lower y1; stable for
// full ties so input order is the last resort and results stay deterministic.
bool rank_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  return a.box.y1 < b.box.y1;
}

std::vector<int> ranked_indices(const std::vector<Detection>& detections) {
  std::vector<int> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rank_before(detections[a], detections[b]); });
  return order;
}

}  // namespace

std::vector<TruthBox> ground_truth_from_scenes(const std::vector<Scene>& scenes) {
  std::vector<TruthBox> truth;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& obj : scenes[s].objects)
      truth.push_back({static_cast<int>(s), obj.box, obj.corrupted_from.value_or(obj.category)});
  return truth;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw std::invalid_argument("nms: threshold must be in (0,1)");
  check_detections(detections);

  const std::vector<int> order = ranked_indices(detections);
  std::vector<bool> kept(detections.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const Detection& d = detections[order[oi]];
    bool suppressed = false;
    for (std::size_t oj = 0; oj < oi && !suppressed; ++oj) {
      if (!kept[order[oj]]) continue;
      const Detection& k = detections[order[oj]];
      if (k.scene == d.scene && k.category == d.category && iou(k.box, d.box) > iou_threshold)
        suppressed = true;
    }
    kept[order[oi]] = !suppressed;
  }

  std::vector<Detection> out;
  for (int idx : order)
    if (kept[idx]) out.push_back(detections[idx]);
  return out;
}

std::optional<double> average_precision(const std::vector<Detection>& detections,
                                        const std::vector<TruthBox>& truth, int category,
                                        const ApOptions& opts) {
  if (!(opts.iou_threshold > 0.0 && opts.iou_threshold < 1.0))
    throw std::invalid_argument("average_precision: threshold must be in (0,1)");
  check_detections(detections);

  std::vector<const TruthBox*> gt;
  for (const auto& t : truth)
    if (t.category == category) gt.push_back(&t);
  if (gt.empty()) return std::nullopt;

  std::vector<Detection> dets;
  for (const auto& d : detections)
    if (d.category == category) dets.push_back(d);

  const std::vector<int> order = ranked_indices(dets);
  std::vector<bool> matched(gt.size(), false);
  std::vector<int> tp;
  tp.reserve(order.size());
  for (int idx : order) {
    const Detection& d = dets[idx];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (matched[g] || gt[g]->scene != d.scene) continue;
      const double v = iou(d.box, gt[g]->box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= opts.iou_threshold) {
      matched[best] = true;
      tp.push_back(1);
    } else {
      tp.push_back(0);
    }
  }

  const int n_gt = static_cast<int>(gt.size());
  std::vector<double> precision, recall;
  int cum = 0;
  for (std::size_t k = 0; k < tp.size(); ++k) {
    cum += tp[k];
    precision.push_back(static_cast<double>(cum) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(cum) / n_gt);
  }

  if (opts.eleven_point) {
    double sum = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double level = t / 10.0;
      double best = 0.0;
      for (std::size_t k = 0; k < recall.size(); ++k)
        if (recall[k] >= level) best = std::max(best, precision[k]);
      sum += best;
    }
    return sum / 11.0;
  }

  // Area under the precision envelope, summed where recall rises. Walking
  // from the tail keeps the envelope equal to max precision at or after k.
  double ap = 0.0;
  double envelope = 0.0;
  for (int k = static_cast<int>(recall.size()) - 1; k >= 0; --k) {
    envelope = std::max(envelope, precision[k]);
    const double prev = k > 0 ? recall[k - 1] : 0.0;
    if (recall[k] > prev) ap += (recall[k] - prev) * envelope;
  }
  return ap;
}

std::vector<std::optional<double>> per_category_ap(const std::vector<Detection>& detections,
                                                   const std::vector<TruthBox>& truth,
                                                   int categories, const ApOptions& opts) {
  if (categories < 1) throw std::invalid_argument("per_category_ap: categories must be positive");
  std::vector<std::optional<double>> aps;
  for (int c = 0; c < categories; ++c) aps.push_back(average_precision(detections, truth, c, opts));
  return aps;
}

double mean_ap(const std::vector<std::optional<double>>& aps) {
  double sum = 0.0;
  int defined = 0;
  for (const auto& ap : aps) {
    if (!ap.has_value()) continue;
    sum += *ap;
    ++defined;
  }
  if (defined == 0) throw std::invalid_argument("mean_ap: no category has a defined AP");
  return sum / defined;
}

int TaxonomyCounts::analyzed() const {
  int total = 0;
  for (std::size_t c = 0; c < correct.size(); ++c)
    total += correct[c] + mislocalized[c] + background[c];
  return total;
}

TaxonomyCounts error_taxonomy(const std::vector<Detection>& detections,
                              const std::vector<TruthBox>& truth, int categories) {
  if (categories < 1) throw std::invalid_argument("error_taxonomy: categories must be positive");
  check_detections(detections);
  TaxonomyCounts counts;
  counts.correct.assign(categories, 0);
  counts.mislocalized.assign(categories, 0);
  counts.background.assign(categories, 0);

  for (int c = 0; c < categories; ++c) {
    std::vector<const TruthBox*> gt;
    for (const auto& t : truth)
      if (t.category == c) gt.push_back(&t);
    if (gt.empty()) continue;

    std::vector<Detection> dets;
    for (const auto& d : detections)
      if (d.category == c) dets.push_back(d);
    const std::vector<int> order = ranked_indices(dets);
    const int k = std::min<int>(static_cast<int>(gt.size()), static_cast<int>(order.size()));

    for (int r = 0; r < k; ++r) {
      const Detection& d = dets[order[r]];
      double best = 0.0;
      for (const TruthBox* t : gt)
        if (t->scene == d.scene) best = std::max(best, iou(d.box, t->box));
      if (best >= 0.5)
        ++counts.correct[c];
      else if (best >= 0.3)
        ++counts.mislocalized[c];
      else
        ++counts.background[c];
    }
  }
  return counts;
}

TaxonomyShares taxonomy_shares(const TaxonomyCounts& counts) {
  TaxonomyShares shares;
  for (std::size_t c = 0; c < counts.correct.size(); ++c) {
    const int n = counts.correct[c] + counts.mislocalized[c] + counts.background[c];
    if (n == 0) continue;
    shares.correct += static_cast<double>(counts.correct[c]) / n;
    shares.mislocalized += static_cast<double>(counts.mislocalized[c]) / n;
    shares.background += static_cast<double>(counts.background[c]) / n;
    ++shares.categories_counted;
  }
  if (shares.categories_counted > 0) {
    shares.correct /= shares.categories_counted;
    shares.mislocalized /= shares.categories_counted;
    shares.background /= shares.categories_counted;
  }
  return shares;
}

EvalSummary evaluate(std::vector<Detection> detections, const std::vector<TruthBox>& truth,
                     int categories, const ApOptions& opts) {
  EvalSummary summary;
  const std::vector<Detection> kept = nms(std::move(detections), 0.5);
  summary.per_category_ap = per_category_ap(kept, truth, categories, opts);
  summary.map = mean_ap(summary.per_category_ap);
  summary.taxonomy = error_taxonomy(kept, truth, categories);
  summary.shares = taxonomy_shares(summary.taxonomy);
  return summary;
}

}  // namespace nlte
