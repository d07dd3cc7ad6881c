#include "nlte/pim.hpp"

#include <algorithm>
#include <stdexcept>

#include "nlte/geometry.hpp"

namespace nlte {

void validate_pim_config(const PimConfig& cfg) {
  if (!(cfg.tau_source > 0.0 && cfg.tau_source < 1.0) ||
      !(cfg.tau_target > 0.0 && cfg.tau_target < 1.0))
    throw std::invalid_argument("pim config: thresholds must lie in (0,1)");
  if (cfg.max_mined_per_scene < 0)
    throw std::invalid_argument("pim config: max_mined_per_scene must be non-negative");
}

std::vector<MinedProposal> mine(const Scene& scene, const Matrix& logits, const PimConfig& cfg) {
  validate_pim_config(cfg);
  if (logits.rows != static_cast<int>(scene.proposals.size()))
    throw std::invalid_argument("mine: one logits row per proposal required");

  const double tau = scene.domain == Domain::kSource ? cfg.tau_source : cfg.tau_target;

  std::vector<MinedProposal> mined;
  for (int i = 0; i < static_cast<int>(scene.proposals.size()); ++i) {
    const Proposal& p = scene.proposals[i];
    if (!(p.objectness > tau)) continue;
    if (p.matched_gt && scene.objects[*p.matched_gt].annotated) continue;
    bool overlaps = false;
    for (const auto& o : scene.objects) {
      if (!o.annotated) continue;
      if (iou(p.box, o.box) > 0.0) {
        overlaps = true;
        break;
      }
    }
    if (overlaps) continue;

    MinedProposal m;
    m.proposal_index = i;
    m.confidence = p.objectness;
    m.domain = scene.domain;
    const auto row = logits.row(i);
    int best = 0;
    for (int c = 1; c < logits.cols; ++c)
      if (row[c] > row[best]) best = c;
    m.pseudo_label = best;
    mined.push_back(m);
  }

  std::stable_sort(mined.begin(), mined.end(), [](const MinedProposal& a, const MinedProposal& b) {
    return a.confidence > b.confidence;
  });
  if (static_cast<int>(mined.size()) > cfg.max_mined_per_scene)
    mined.resize(cfg.max_mined_per_scene);
  return mined;
}

}  // namespace nlte
