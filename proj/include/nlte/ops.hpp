#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nlte/matrix.hpp"

namespace nlte {

// Probabilities are clamped to [kProbEps, 1 - kProbEps] before any log.
inline constexpr double kProbEps = 1e-7;

double sigmoid(double x);

struct XentResult {
  double loss = 0.0;   // mean over rows
  Matrix dlogits;      // gradient of the mean loss
};
// labels[i] indexes the true column of row i; -1 marks a row to skip
// (contributes nothing to loss or gradient, and does not count in the mean).
XentResult softmax_xent(const Matrix& logits, const std::vector<int>& labels);

struct BceResult {
  double loss = 0.0;
  double dprob = 0.0;
};
// Binary cross-entropy of one probability against label z in {0, 1}.
BceResult bce(double prob, int z);

struct BceLogitsResult {
  double loss = 0.0;
  double dlogit = 0.0;
};
// Sigmoid fused with binary cross-entropy on a raw logit; stable at any
// magnitude, gradient sigmoid(logit) - z.
BceLogitsResult bce_logits(double logit, int z);

// Shannon entropy of a normalized distribution (natural log). Rejects inputs
// with negative mass or total mass off 1 by more than 1e-6.
double entropy(std::span<const double> probs);

// Cosine similarity; either vector with zero norm yields 0 and bumps a
// process-wide counter so silent degenerate batches stay observable.
double cosine(std::span<const double> a, std::span<const double> b);
std::uint64_t cosine_zero_norm_count();
void reset_cosine_zero_norm_count();

// Gradient reversal: identity forward, so only the backward transform exists
// as code. Scales the upstream gradient by -mu.
Matrix grad_reverse(const Matrix& upstream, double mu);

Matrix softmax_rows(const Matrix& logits);
// dLogits given row-softmax probabilities and dLoss/dProbs.
Matrix softmax_rows_backward(const Matrix& probs, const Matrix& upstream);

}  // namespace nlte
