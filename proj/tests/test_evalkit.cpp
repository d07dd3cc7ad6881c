#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "nlte/evalkit.hpp"
#include "nlte/geometry.hpp"
#include "nlte/rng.hpp"
#include "nlte/synthworld.hpp"

using namespace nlte;

namespace {

Detection det(int scene, double x1, double y1, double x2, double y2, int cat, double score) {
  return Detection{scene, Box{x1, y1, x2, y2}, cat, score};
}

TruthBox gt(int scene, double x1, double y1, double x2, double y2, int cat) {
  return TruthBox{scene, Box{x1, y1, x2, y2}, cat};
}

// Rank exactly like the library: score descending, then x1, then y1, stable.
std::vector<int> oracle_rank(const std::vector<Detection>& ds) {
  std::vector<int> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (ds[a].score != ds[b].score) return ds[a].score > ds[b].score;
    if (ds[a].box.x1 != ds[b].box.x1) return ds[a].box.x1 < ds[b].box.x1;
    return ds[a].box.y1 < ds[b].box.y1;
  });
  return order;
}

// Quadratic-time suppressor: keep a detection unless a kept, higher-ranked
// one of the same scene and category overlaps it past the threshold.
std::vector<Detection> oracle_nms(const std::vector<Detection>& ds, double thr) {
  const auto order = oracle_rank(ds);
  std::vector<Detection> kept;
  for (int idx : order) {
    bool dead = false;
    for (const auto& k : kept)
      if (k.scene == ds[idx].scene && k.category == ds[idx].category &&
          iou(k.box, ds[idx].box) > thr)
        dead = true;
    if (!dead) kept.push_back(ds[idx]);
  }
  return kept;
}

// Enumerated PR oracle: walk the ranked list, label TP/FP greedily, build the
// explicit PR point list, then integrate either interpolation from it.
double oracle_ap(const std::vector<Detection>& ds, const std::vector<TruthBox>& truth, int cat,
                 double thr, bool eleven) {
  std::vector<Detection> mine;
  for (const auto& d : ds)
    if (d.category == cat) mine.push_back(d);
  std::vector<TruthBox> gts;
  for (const auto& t : truth)
    if (t.category == cat) gts.push_back(t);

  const auto order = oracle_rank(mine);
  std::vector<bool> used(gts.size(), false);
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Detection& d = mine[order[k]];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].scene != d.scene) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= thr) {
      used[best] = true;
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }

  if (eleven) {
    double sum = 0.0;
    for (int t = 0; t <= 10; ++t) {
      double best = 0.0;
      for (std::size_t k = 0; k < rec.size(); ++k)
        if (rec[k] >= t / 10.0) best = std::max(best, prec[k]);
      sum += best;
    }
    return sum / 11.0;
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    const double prev = k > 0 ? rec[k - 1] : 0.0;
    if (rec[k] <= prev) continue;
    double best = 0.0;
    for (std::size_t j = k; j < rec.size(); ++j) best = std::max(best, prec[j]);
    ap += (rec[k] - prev) * best;
  }
  return ap;
}

struct RandomCase {
  std::vector<Detection> dets;
  std::vector<TruthBox> truth;
};

RandomCase random_case(Rng& rng, int categories) {
  RandomCase rc;
  const int scenes = 1 + rng.uniform_int(3);
  for (int s = 0; s < scenes; ++s) {
    const int n_gt = rng.uniform_int(5);
    for (int g = 0; g < n_gt; ++g) {
      const double x = 10.0 * rng.uniform_int(6), y = 10.0 * rng.uniform_int(6);
      rc.truth.push_back(gt(s, x, y, x + 10.0, y + 10.0, rng.uniform_int(categories)));
    }
    const int n_det = rng.uniform_int(11);
    for (int d = 0; d < n_det; ++d) {
      // Grid-aligned with jitter so IoUs cover all bands, including exact 0.
      const double x = 10.0 * rng.uniform_int(6) + rng.uniform_int(3) * 2.5;
      const double y = 10.0 * rng.uniform_int(6) + rng.uniform_int(3) * 2.5;
      // Coarse scores make ranking ties common on purpose.
      const double score = rng.uniform_int(20) / 20.0 + 0.025;
      rc.dets.push_back(det(s, x, y, x + 10.0, y + 10.0, rng.uniform_int(categories),
                            std::min(score, 1.0)));
    }
  }
  return rc;
}

}  // namespace

TEST_CASE("nms keeps the best of overlapping same-category boxes") {
  const auto single = nms({det(0, 0, 0, 10, 10, 1, 0.7)});
  REQUIRE(single.size() == 1);
  CHECK(single[0].score == 0.7);

  const auto pair = nms({det(0, 0, 0, 10, 10, 1, 0.9), det(0, 0, 0, 10, 10, 1, 0.8)});
  REQUIRE(pair.size() == 1);
  CHECK(pair[0].score == 0.9);

  // Different category or different scene: no suppression.
  const auto cross = nms({det(0, 0, 0, 10, 10, 1, 0.9), det(0, 0, 0, 10, 10, 2, 0.8),
                          det(1, 0, 0, 10, 10, 1, 0.7)});
  CHECK(cross.size() == 3);

  // IoU exactly at the threshold survives; suppression needs strictly more.
  // Boxes [0,0,10,10] and [0,5,10,15] overlap 50 of union 150: IoU = 1/3.
  const auto edge = nms({det(0, 0, 0, 10, 10, 1, 0.9), det(0, 0, 5, 10, 15, 1, 0.8)},
                        1.0 / 3.0);
  CHECK(edge.size() == 2);

  // Equal scores: lower x1 wins the first slot and suppresses.
  const auto tie = nms({det(0, 2, 0, 12, 10, 1, 0.8), det(0, 0, 0, 10, 10, 1, 0.8)});
  REQUIRE(tie.size() == 1);
  CHECK(tie[0].box.x1 == 0.0);

  CHECK_THROWS_AS(nms({det(0, 0, 0, 1, 1, 0, 0.5)}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(nms({det(0, 0, 0, 1, 1, 0, 1.5)}), std::invalid_argument);
}

TEST_CASE("nms agrees with the quadratic-time oracle on random piles") {
  Rng rng(101);
  for (int iter = 0; iter < 100; ++iter) {
    const RandomCase rc = random_case(rng, 3);
    const auto got = nms(rc.dets);
    const auto want = oracle_nms(rc.dets, 0.5);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].scene == want[i].scene);
      CHECK(got[i].box == want[i].box);
      CHECK(got[i].category == want[i].category);
      CHECK(got[i].score == want[i].score);
    }
  }
}

TEST_CASE("average precision on hand-built cases") {
  // One detection exactly on its lone truth box.
  const std::vector<TruthBox> one_gt = {gt(0, 0, 0, 10, 10, 0)};
  const auto perfect = average_precision({det(0, 0, 0, 10, 10, 0, 0.9)}, one_gt, 0);
  REQUIRE(perfect.has_value());
  CHECK(*perfect == doctest::Approx(1.0).epsilon(1e-15));

  // No detections at all.
  const auto empty = average_precision({}, one_gt, 0);
  REQUIRE(empty.has_value());
  CHECK(*empty == 0.0);

  // No truth for the category: undefined.
  CHECK_FALSE(average_precision({det(0, 0, 0, 10, 10, 3, 0.9)}, one_gt, 3).has_value());

  // Five detections, three truth boxes; AP enumerated by hand:
  // ranks TP,TP,FP,TP,FP -> all-point 11/12, 11-point 10/11.
  const std::vector<TruthBox> three = {gt(0, 0, 0, 10, 10, 0), gt(0, 20, 20, 30, 30, 0),
                                       gt(0, 40, 40, 50, 50, 0)};
  const std::vector<Detection> five = {
      det(0, 0, 0, 10, 10, 0, 0.95),   // IoU 1.0 with first
      det(0, 21, 21, 31, 31, 0, 0.9),  // IoU 81/119 with second
      det(0, 0, 0, 10, 10, 0, 0.8),    // duplicate: truth already matched
      det(0, 40, 43, 50, 53, 0, 0.7),  // IoU 70/130 with third
      det(0, 70, 70, 80, 80, 0, 0.6),  // hits nothing
  };
  const auto all_point = average_precision(five, three, 0);
  REQUIRE(all_point.has_value());
  CHECK(*all_point == doctest::Approx(11.0 / 12.0).epsilon(1e-12));
  ApOptions eleven;
  eleven.eleven_point = true;
  const auto eleven_point = average_precision(five, three, 0, eleven);
  REQUIRE(eleven_point.has_value());
  CHECK(*eleven_point == doctest::Approx(10.0 / 11.0).epsilon(1e-12));
}

TEST_CASE("average precision matches the enumerated oracle on 200 cases") {
  Rng rng(103);
  ApOptions eleven;
  eleven.eleven_point = true;
  for (int iter = 0; iter < 200; ++iter) {
    const RandomCase rc = random_case(rng, 3);
    for (int c = 0; c < 3; ++c) {
      bool has_gt = false;
      for (const auto& t : rc.truth) has_gt |= t.category == c;
      const auto all = average_precision(rc.dets, rc.truth, c);
      const auto elv = average_precision(rc.dets, rc.truth, c, eleven);
      CHECK(all.has_value() == has_gt);
      if (!has_gt) continue;
      CHECK(*all == doctest::Approx(oracle_ap(rc.dets, rc.truth, c, 0.5, false)).epsilon(1e-9));
      CHECK(*elv == doctest::Approx(oracle_ap(rc.dets, rc.truth, c, 0.5, true)).epsilon(1e-9));
      // Sanity band between the two interpolations.
      CHECK(*all >= *elv - 0.1);
    }
  }
}

TEST_CASE("a new top-scoring true positive never lowers AP") {
  Rng rng(107);
  for (int iter = 0; iter < 100; ++iter) {
    RandomCase rc = random_case(rng, 2);
    bool has_gt = false;
    for (const auto& t : rc.truth) has_gt |= t.category == 0;
    if (!has_gt) continue;
    const double before = *average_precision(rc.dets, rc.truth, 0);

    const TruthBox* target = nullptr;
    for (const auto& t : rc.truth)
      if (t.category == 0) target = &t;
    Detection extra = det(target->scene, target->box.x1, target->box.y1, target->box.x2,
                          target->box.y2, 0, 1.0);
    rc.dets.push_back(extra);
    const double after = *average_precision(rc.dets, rc.truth, 0);
    CHECK(after >= before - 1e-12);
  }
}

TEST_CASE("mean ap averages the defined categories only") {
  CHECK(mean_ap({0.4}) == doctest::Approx(0.4));
  CHECK(mean_ap({1.0, 0.0}) == doctest::Approx(0.5));
  CHECK(mean_ap({std::nullopt, 0.6, std::nullopt}) == doctest::Approx(0.6));

  Rng rng(109);
  std::vector<std::optional<double>> aps;
  double sum = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double v = rng.uniform01();
    aps.push_back(v);
    sum += v;
  }
  CHECK(mean_ap(aps) == doctest::Approx(sum / 20.0).epsilon(1e-12));
  CHECK(mean_ap(aps) >= 0.0);
  CHECK(mean_ap(aps) <= 1.0);
  CHECK_THROWS_AS(mean_ap({std::nullopt, std::nullopt}), std::invalid_argument);
}

TEST_CASE("taxonomy bins by the documented iou bands") {
  // A detection [0,0,k,1] inside truth [0,0,100,1] has intersection k and
  // union exactly 100, so its IoU is the correctly rounded double of k/100
  // and boundary comparisons against 0.3 / 0.5 are exact.
  const std::vector<TruthBox> truth = {gt(0, 0, 0, 100, 1, 0)};
  const auto bin_of = [&](double k) {
    const auto c = error_taxonomy({det(0, 0, 0, k, 1, 0, 0.9)}, truth, 1);
    REQUIRE(c.analyzed() == 1);
    if (c.correct[0] == 1) return 'c';
    if (c.mislocalized[0] == 1) return 'm';
    return 'b';
  };
  CHECK(iou(Box{0, 0, 30, 1}, Box{0, 0, 100, 1}) == 0.3);
  CHECK(bin_of(29.0) == 'b');
  CHECK(bin_of(30.0) == 'm');  // inclusive lower band edge
  CHECK(bin_of(40.0) == 'm');
  CHECK(bin_of(49.0) == 'm');
  CHECK(bin_of(50.0) == 'c');  // inclusive correctness edge
  CHECK(bin_of(60.0) == 'c');
  // Fully disjoint detection: IoU 0.
  const auto disjoint = error_taxonomy({det(0, 200, 200, 210, 201, 0, 0.9)}, truth, 1);
  CHECK(disjoint.background[0] == 1);
}

TEST_CASE("taxonomy analyzes the top k per category with k the truth count") {
  const std::vector<TruthBox> truth = {gt(0, 0, 0, 10, 10, 0), gt(0, 20, 0, 30, 10, 0),
                                       gt(0, 0, 20, 10, 30, 1)};
  const std::vector<Detection> dets = {
      det(0, 0, 0, 10, 10, 0, 0.9),     // correct, in top 2
      det(0, 20, 0, 30, 10, 0, 0.8),    // correct, in top 2
      det(0, 50, 50, 60, 60, 0, 0.7),   // beyond k=2: ignored
      det(0, 50, 50, 60, 60, 1, 0.6),   // background for category 1
      det(0, 0, 20, 10, 30, 1, 0.5),    // beyond k=1: ignored
      det(0, 0, 0, 10, 10, 2, 0.9),     // no truth for category 2: ignored
  };
  const auto c = error_taxonomy(dets, truth, 3);
  CHECK(c.correct[0] == 2);
  CHECK(c.background[0] == 0);
  CHECK(c.background[1] == 1);
  CHECK(c.correct[2] == 0);
  CHECK(c.analyzed() == 3);

  int expected = 0;
  for (int cat = 0; cat < 3; ++cat) {
    int n_gt = 0, n_det = 0;
    for (const auto& t : truth) n_gt += t.category == cat;
    for (const auto& d : dets) n_det += d.category == cat;
    expected += n_gt == 0 ? 0 : std::min(n_gt, n_det);
  }
  CHECK(c.analyzed() == expected);

  const auto shares = taxonomy_shares(c);
  CHECK(shares.categories_counted == 2);
  CHECK(shares.correct == doctest::Approx(0.5));     // (1.0 + 0.0) / 2
  CHECK(shares.background == doctest::Approx(0.5));  // (0.0 + 1.0) / 2
  CHECK(shares.correct + shares.mislocalized + shares.background == doctest::Approx(1.0));
}

TEST_CASE("evaluate suppresses duplicates before scoring") {
  const std::vector<TruthBox> truth = {gt(0, 0, 0, 10, 10, 0)};
  // Without NMS the duplicate would be a guaranteed false positive.
  const std::vector<Detection> dets = {det(0, 0, 0, 10, 10, 0, 0.9),
                                       det(0, 0.5, 0, 10.5, 10, 0, 0.8)};
  const auto summary = evaluate(dets, truth, 1);
  REQUIRE(summary.per_category_ap[0].has_value());
  CHECK(*summary.per_category_ap[0] == doctest::Approx(1.0));
  CHECK(summary.map == doctest::Approx(1.0));
  CHECK(summary.taxonomy.correct[0] == 1);
  CHECK(summary.shares.correct == doctest::Approx(1.0));
}

TEST_CASE("metrics are blind to corruption once truth is restored") {
  ScenarioConfig cfg;
  cfg.scenes_per_domain = 24;
  cfg.seed = 2024;
  auto scenes = generate_scenes(cfg, Domain::kSource, Rng(cfg.seed));
  const auto pristine = ground_truth_from_scenes(scenes);

  // Fixed detections derived from the uncorrupted scenes.
  std::vector<Detection> dets;
  Rng rng(77);
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& obj : scenes[s].objects)
      if (rng.uniform01() < 0.8)
        dets.push_back(det(static_cast<int>(s), obj.box.x1, obj.box.y1, obj.box.x2, obj.box.y2,
                           obj.category, rng.uniform(0.5, 1.0)));

  const auto before = evaluate(dets, pristine, cfg.categories);

  const auto log = inject_label_noise(scenes, cfg, 0.4, 99);
  REQUIRE(!log.empty());
  // Corrupted annotations still resolve to the original category for truth.
  const auto corrupted_truth = ground_truth_from_scenes(scenes);
  const auto during = evaluate(dets, corrupted_truth, cfg.categories);
  CHECK(during.map == doctest::Approx(before.map).epsilon(1e-15));

  restore_from_log(scenes, log);
  const auto after = evaluate(dets, ground_truth_from_scenes(scenes), cfg.categories);
  CHECK(after.map == doctest::Approx(before.map).epsilon(1e-15));
  for (int c = 0; c < cfg.categories; ++c) {
    CHECK(after.per_category_ap[c].has_value() == before.per_category_ap[c].has_value());
    if (after.per_category_ap[c].has_value())
      CHECK(*after.per_category_ap[c] == doctest::Approx(*before.per_category_ap[c]).epsilon(1e-15));
    CHECK(after.taxonomy.correct[c] == before.taxonomy.correct[c]);
    CHECK(after.taxonomy.mislocalized[c] == before.taxonomy.mislocalized[c]);
    CHECK(after.taxonomy.background[c] == before.taxonomy.background[c]);
  }
}
