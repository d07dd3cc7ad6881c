#include <doctest.h>

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "nlte/geometry.hpp"
#include "nlte/pim.hpp"
#include "nlte/rng.hpp"
#include "nlte/synthworld.hpp"

using namespace nlte;

namespace {

// Literal filter: objectness strictly above tau, not matched to an annotated
// object, zero IoU against every annotated GT box; sort by objectness,
// truncate. Kept deliberately independent of the library implementation.
std::vector<int> brute_force_mine(const Scene& scene, double tau, int cap) {
  std::vector<int> keep;
  for (int i = 0; i < static_cast<int>(scene.proposals.size()); ++i) {
    const Proposal& p = scene.proposals[i];
    if (!(p.objectness > tau)) continue;
    bool in_annotated_set = false;
    if (p.matched_gt.has_value() && scene.objects.at(*p.matched_gt).annotated)
      in_annotated_set = true;
    if (in_annotated_set) continue;
    bool zero_iou = true;
    for (const auto& o : scene.objects)
      if (o.annotated && iou(p.box, o.box) != 0.0) zero_iou = false;
    if (!zero_iou) continue;
    keep.push_back(i);
  }
  std::stable_sort(keep.begin(), keep.end(), [&](int a, int b) {
    return scene.proposals[a].objectness > scene.proposals[b].objectness;
  });
  if (static_cast<int>(keep.size()) > cap) keep.resize(cap);
  return keep;
}

Scene random_scene(Rng& rng, Domain domain, int n_objects, int n_proposals) {
  Scene s;
  s.domain = domain;
  for (int i = 0; i < n_objects; ++i) {
    GtObject o;
    const double x = rng.uniform(0.0, 80.0), y = rng.uniform(0.0, 80.0);
    o.box = Box{x, y, x + rng.uniform(2.0, 20.0), y + rng.uniform(2.0, 20.0)};
    o.category = rng.uniform_int(5);
    o.annotated = domain == Domain::kSource ? rng.uniform_int(4) != 0 : false;
    s.objects.push_back(o);
  }
  for (int i = 0; i < n_proposals; ++i) {
    Proposal p;
    const double x = rng.uniform(0.0, 90.0), y = rng.uniform(0.0, 90.0);
    p.box = Box{x, y, x + rng.uniform(2.0, 15.0), y + rng.uniform(2.0, 15.0)};
    p.feature = {rng.normal(), rng.normal()};
    p.objectness = rng.uniform01();
    if (n_objects > 0 && rng.uniform_int(3) == 0) p.matched_gt = rng.uniform_int(n_objects);
    s.proposals.push_back(p);
  }
  return s;
}

Matrix random_logits(Rng& rng, int rows, int cols) {
  Matrix m(rows, cols);
  for (double& x : m.data) x = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("mine handles empty scenes and validates input") {
  PimConfig cfg;
  Scene empty;
  CHECK(mine(empty, Matrix(0, 5), cfg).empty());
  Scene one;
  one.proposals.push_back({Box{0, 0, 1, 1}, {0.0}, 0.99, std::nullopt});
  CHECK_THROWS_AS(mine(one, Matrix(2, 5), cfg), std::invalid_argument);
  PimConfig bad;
  bad.tau_source = 1.5;
  CHECK_THROWS_AS(mine(one, Matrix(1, 5), bad), std::invalid_argument);
}

TEST_CASE("any intersection with annotated GT excludes a proposal") {
  Scene s;
  s.domain = Domain::kSource;
  s.objects.push_back({Box{0, 0, 10, 10}, 1, true, std::nullopt});
  // IoU about 0.01 against the GT: high objectness must not save it.
  Proposal grazing;
  grazing.box = Box{9.8, 9.8, 14, 14};
  grazing.feature = {1.0};
  grazing.objectness = 0.99;
  s.proposals.push_back(grazing);
  // A disjoint proposal with the same objectness is kept.
  Proposal clear;
  clear.box = Box{50, 50, 60, 60};
  clear.feature = {1.0};
  clear.objectness = 0.99;
  s.proposals.push_back(clear);

  REQUIRE(iou(grazing.box, s.objects[0].box) > 0.0);
  REQUIRE(iou(grazing.box, s.objects[0].box) < 0.02);

  Rng rng(1);
  const auto mined = mine(s, random_logits(rng, 2, 5), PimConfig{});
  REQUIRE(mined.size() == 1);
  CHECK(mined[0].proposal_index == 1);
}

TEST_CASE("threshold is strict and miss-annotated boxes do not block mining") {
  PimConfig cfg;
  cfg.tau_source = 0.9;
  Scene s;
  s.domain = Domain::kSource;
  s.objects.push_back({Box{0, 0, 10, 10}, 2, false, std::nullopt});  // miss-annotated
  Proposal at_tau;
  at_tau.box = Box{1, 1, 9, 9};
  at_tau.feature = {1.0};
  at_tau.objectness = 0.9;
  s.proposals.push_back(at_tau);
  Proposal above;
  above.box = Box{2, 2, 8, 8};
  above.feature = {1.0};
  above.objectness = 0.90001;
  above.matched_gt = 0;
  s.proposals.push_back(above);

  Rng rng(3);
  const auto mined = mine(s, random_logits(rng, 2, 4), cfg);
  // Ties at tau are excluded; the overlapping proposal survives because the
  // only GT there is miss-annotated.
  REQUIRE(mined.size() == 1);
  CHECK(mined[0].proposal_index == 1);
  CHECK(mined[0].confidence > 0.9);
}

TEST_CASE("mine equals the brute-force filter on 1000 random scenes") {
  Rng rng(77);
  PimConfig cfg;
  cfg.max_mined_per_scene = 6;
  for (int iter = 0; iter < 1000; ++iter) {
    const Domain domain = rng.uniform_int(2) == 0 ? Domain::kSource : Domain::kTarget;
    const Scene s = random_scene(rng, domain, rng.uniform_int(5), 10 + rng.uniform_int(20));
    const Matrix logits = random_logits(rng, static_cast<int>(s.proposals.size()), 5);
    const auto mined = mine(s, logits, cfg);
    const auto want = brute_force_mine(s, domain == Domain::kSource ? cfg.tau_source : cfg.tau_target,
                                       cfg.max_mined_per_scene);
    REQUIRE(mined.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(mined[i].proposal_index == want[i]);
      // Pseudo-label agrees with a direct argmax.
      const auto row = logits.row(want[i]);
      int best = 0;
      for (int c = 1; c < logits.cols; ++c)
        if (row[c] > row[best]) best = c;
      CHECK(mined[i].pseudo_label == best);
      CHECK(mined[i].domain == domain);
    }
  }
}

TEST_CASE("raising tau never adds a mined proposal") {
  Rng rng(88);
  PimConfig lo, hi;
  lo.tau_source = lo.tau_target = 0.5;
  hi.tau_source = hi.tau_target = 0.8;
  lo.max_mined_per_scene = hi.max_mined_per_scene = 1000;
  for (int iter = 0; iter < 200; ++iter) {
    const Scene s = random_scene(rng, Domain::kSource, rng.uniform_int(4), 15);
    const Matrix logits = random_logits(rng, 15, 5);
    const auto low = mine(s, logits, lo);
    const auto high = mine(s, logits, hi);
    for (const auto& m : high) {
      bool found = false;
      for (const auto& l : low) found |= l.proposal_index == m.proposal_index;
      CHECK(found);
    }
    CHECK(high.size() <= low.size());
    for (const auto& m : low) {
      bool zero = true;
      for (const auto& o : s.objects)
        if (o.annotated && iou(s.proposals[m.proposal_index].box, o.box) > 0.0) zero = false;
      CHECK(zero);
    }
  }
}

TEST_CASE("miss-annotated objects with confident proposals are fully recaptured") {
  // Four isolated objects, two miss-annotated. Proposals sit exactly on the
  // objects with objectness 0.95+; the classifier is an oracle.
  Scene s;
  s.domain = Domain::kSource;
  const double step = 25.0;
  for (int i = 0; i < 4; ++i) {
    GtObject o;
    o.box = Box{step * i, step * i, step * i + 10, step * i + 10};
    o.category = i;
    o.annotated = i < 2;
    s.objects.push_back(o);
  }
  Matrix logits(4, 4);
  for (int i = 0; i < 4; ++i) {
    Proposal p;
    p.box = s.objects[i].box;
    p.feature = {static_cast<double>(i)};
    p.objectness = 0.95 + 0.01 * i;
    p.matched_gt = i;
    s.proposals.push_back(p);
    logits.at(i, i) = 10.0;  // oracle
  }

  PimConfig cfg;
  cfg.tau_source = 0.9;
  const auto mined = mine(s, logits, cfg);

  // Recall of miss-annotated objects is 1.0 with correct pseudo-labels.
  std::vector<bool> recaptured(4, false);
  for (const auto& m : mined) {
    const int gt = *s.proposals[m.proposal_index].matched_gt;
    recaptured[gt] = true;
    CHECK(m.pseudo_label == s.objects[gt].category);
  }
  CHECK_FALSE(recaptured[0]);
  CHECK_FALSE(recaptured[1]);
  CHECK(recaptured[2]);
  CHECK(recaptured[3]);
}

TEST_CASE("cap truncates by descending objectness") {
  Scene s;
  s.domain = Domain::kTarget;
  for (int i = 0; i < 10; ++i) {
    Proposal p;
    p.box = Box{10.0 * i, 0, 10.0 * i + 5, 5};
    p.feature = {1.0};
    p.objectness = 0.91 + 0.005 * i;
    s.proposals.push_back(p);
  }
  PimConfig cfg;
  cfg.max_mined_per_scene = 3;
  Rng rng(5);
  const auto mined = mine(s, random_logits(rng, 10, 3), cfg);
  REQUIRE(mined.size() == 3);
  CHECK(mined[0].proposal_index == 9);
  CHECK(mined[1].proposal_index == 8);
  CHECK(mined[2].proposal_index == 7);
}
