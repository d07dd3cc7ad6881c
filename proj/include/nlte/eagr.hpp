#pragma once
// Entropy-aware discriminator over feature/prediction concatenations and the
// first-order meta step that reconciles clean, corrupted, and target
// gradients.

#include <functional>
#include <vector>

#include "nlte/matrix.hpp"
#include "nlte/mlp.hpp"

namespace nlte {

// features row i pairs with probs row i; probs rows are softmax outputs and
// must sum to 1 within 1e-6. domain_labels: 1 source, 0 target.
struct EagrBatch {
  Matrix features;
  Matrix probs;
  std::vector<int> domain_labels;
};

enum class MetaBase { kBefore, kAfter };

struct MetaConfig {
  int inner_steps = 2;
  double inner_lr = 1e-3;
  double meta_weight = 0.5;
  MetaBase base = MetaBase::kBefore;
};

void validate_meta_config(const MetaConfig& cfg);

// Row i = [feature_i || probs_i]. Throws on row-count or label mismatch.
Matrix concat_feature_logits(const EagrBatch& batch);

struct ConcatGrads {
  Matrix feature_grad;  // N x D
  Matrix prob_grad;     // N x C
};
// Splits an upstream gradient on the concatenation back onto both inputs.
ConcatGrads split_concat_grad(const Matrix& upstream, int feature_dim, int prob_dim);

struct DiscLoss {
  double loss = 0.0;
  GradBundle disc_grads;   // direct gradients for the discriminator
  Matrix feature_grad;     // N x D, already gradient-reversed (-mu scale)
  Matrix prob_grad;        // N x C, already gradient-reversed
  double mean_entropy = 0.0;  // H of the probs rows, logged only
};

// Per-row BCE of disc(concat) against the domain labels, normalized by N.
// The discriminator net must emit one identity logit; sigmoid is fused here.
DiscLoss eagr_disc_loss(const EagrBatch& batch, const Mlp& disc, double grl_mu);

// One training objective evaluated at a flat parameter vector.
using Objective = std::function<GradBundle(const std::vector<double>&)>;

struct InnerLoopResult {
  std::vector<double> theta_before;
  std::vector<double> theta_after;
  std::vector<GradBundle> steps;  // loss and gradient at each pre-step point
};

// k sequential SGD steps at lr inner_lr, one objective (fresh batch) per
// step. Needs at least inner_steps objectives; extras are ignored.
InnerLoopResult inner_loop(std::vector<double> theta, const std::vector<Objective>& objectives,
                           const MetaConfig& cfg);

// theta_base + meta_weight * (theta_after - theta_before), with theta_base
// picked by `base`. Sizes must agree.
std::vector<double> meta_update(const std::vector<double>& theta_before,
                                const std::vector<double>& theta_after, double meta_weight,
                                MetaBase base = MetaBase::kBefore);

// Pairwise gradient geometry of the three proposal roles, all evaluated at
// identical parameters. Roles are known only in simulation; diagnostic only.
struct GradReport {
  double dot_cln_cpt = 0.0, dot_cln_t = 0.0, dot_cpt_t = 0.0;
  double norm_cln = 0.0, norm_cpt = 0.0, norm_t = 0.0;
  bool has_cln = false, has_cpt = false, has_t = false;

  double cos_cln_cpt() const;
  double cos_cln_t() const;
  double cos_cpt_t() const;
};

// Empty vectors mark missing roles; their entries stay masked at zero.
GradReport grad_report(const std::vector<double>& g_cln, const std::vector<double>& g_cpt,
                       const std::vector<double>& g_t);

}  // namespace nlte
