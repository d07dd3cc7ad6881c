#pragma once

#include <vector>

#include "nlte/matrix.hpp"
#include "nlte/synthworld.hpp"

namespace nlte {

struct PimConfig {
  double tau_source = 0.9;
  double tau_target = 0.9;
  int max_mined_per_scene = 16;
};

void validate_pim_config(const PimConfig& cfg);

struct MinedProposal {
  int proposal_index = 0;  // index into the scene's proposal list
  int pseudo_label = 0;
  double confidence = 0.0;  // the proposal's objectness
  Domain domain = Domain::kSource;

  bool operator==(const MinedProposal&) const = default;
};

// Recaptures background proposals as pseudo-labeled foreground: keeps
// proposals with objectness strictly above the domain threshold that are not
// matched to an annotated object and have zero IoU with every annotated GT
// box. Miss-annotated objects are invisible here, which is what lets their
// proposals be recaptured. Result is sorted by descending objectness (ties
// by ascending index) and truncated to max_mined_per_scene; pseudo_label is
// the argmax of the proposal's classifier logits.
std::vector<MinedProposal> mine(const Scene& scene, const Matrix& logits, const PimConfig& cfg);

}  // namespace nlte
