#pragma once
// Intra-domain graph aggregation, prototype banks, and the relation-matrix
// regularizer that ties noisy local structure to the global structure.

#include <string>
#include <vector>

#include "nlte/matrix.hpp"
#include "nlte/synthworld.hpp"

namespace nlte {

struct IntraDomainGraph {
  Matrix features;  // N x D node features
  Matrix edges;     // N x N cosine similarities; symmetric, unit diagonal
};

// D x D map applied inside the aggregation; rectifier activation is part of
// the aggregate op itself.
struct AggregationWeights {
  Matrix w;
};

struct BatchPrototypes {
  Matrix beta;                // C x D per-category feature means; absent rows zero
  std::vector<bool> present;  // per category
};

// Global-prototype update rule. kAdaptive is the default: each present
// category runs its own EMA with retention cos(beta_u, B_u) clamped to [0,1].
// kCrossAvg averages cross-category EMA terms over the present set; kLiteral
// is the same sum without the normalization. kAdaptive is the only rule whose
// bank is a fixed point under beta == B with several categories present.
enum class Eq4Mode { kAdaptive, kCrossAvg, kLiteral };

Eq4Mode parse_eq4_mode(const std::string& name);
std::string eq4_mode_name(Eq4Mode mode);

struct PrototypeBank {
  int categories = 0;
  int dim = 0;
  Matrix source;  // C x D; rows with absent mask are zero
  Matrix target;
  std::vector<bool> source_present;
  std::vector<bool> target_present;
  std::vector<int> source_updates;
  std::vector<int> target_updates;

  PrototypeBank(int categories, int dim);
  bool any_source() const;
  bool any_target() const;
};

// C x C relation values with a validity mask; masked entries are zero and
// carry no meaning. Valid entries lie in [-1,1].
struct RelationMatrix {
  int categories = 0;
  Matrix values;
  std::vector<bool> valid;

  bool is_valid(int u, int v) const { return valid[static_cast<std::size_t>(u) * categories + v]; }
};

// Edges are pairwise cosine similarities; the diagonal is pinned to 1 so a
// zero-norm row still carries its self-edge.
IntraDomainGraph build_graph(const Matrix& features);

// p_i <- relu( sum_{i' in N(i)} (W p_i e_ii' + p_i) / |N(i)| ) with N(i) all
// nodes of the graph including i. The rectifier commutes with the positive
// normalization, so dividing inside or outside is the same function.
Matrix aggregate(const IntraDomainGraph& graph, const AggregationWeights& weights);

// Row-wise argmax of softmax probabilities; rows whose best probability is
// below the floor come back as -1 (skipped downstream).
std::vector<int> confident_argmax(const Matrix& probs, double floor = 0.5);

// Per-category feature means. Label -1 skips the row; empty categories stay
// masked with a zero row.
BatchPrototypes batch_prototypes(const Matrix& features, const std::vector<int>& labels,
                                 int categories);

void update_global(PrototypeBank& bank, const BatchPrototypes& beta, Domain domain,
                   Eq4Mode mode = Eq4Mode::kAdaptive);

// Pi: cosine between source slot u and target slot v; entries with an absent
// prototype are masked. Throws if either domain has no valid slot.
RelationMatrix global_relation(const PrototypeBank& bank);

// Z: local prototypes from the given (possibly corrupted) labels against the
// bank's target slots. Rows for absent categories masked, columns for absent
// target slots masked.
RelationMatrix noisy_local_relation(const Matrix& features, const std::vector<int>& labels,
                                    const PrototypeBank& bank);

struct MgrmLoss {
  double loss = 0.0;
  Matrix z_grad;  // C x C dL/dz; zero on masked entries
  int valid_entries = 0;
};

// Mean absolute difference over entries valid in both Z and Pi; Pi is a
// constant. Zero valid entries is a defined (warned) zero loss.
MgrmLoss mgrm_loss(const RelationMatrix& z, const RelationMatrix& pi);

struct MgrmPath {
  double loss = 0.0;
  RelationMatrix z;
  Matrix feature_grad;  // N x D, gradient w.r.t. the noisy features
  int valid_entries = 0;
};

// Full regularizer path: features -> local prototypes -> Z -> loss, with the
// gradient chained back onto the features. The bank never receives gradients.
MgrmPath mgrm_loss_path(const Matrix& features, const std::vector<int>& labels,
                        const PrototypeBank& bank);

// C x C comma-separated dump, masked entries empty, %.17g values.
std::string relation_csv(const RelationMatrix& rel);

}  // namespace nlte
