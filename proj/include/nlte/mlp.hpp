#pragma once

#include <span>
#include <vector>

#include "nlte/matrix.hpp"
#include "nlte/rng.hpp"

namespace nlte {

enum class Activation { kRectifier, kIdentity };

// Flat parameter gradient paired with the loss it came from.
struct GradBundle {
  std::vector<double> grad;
  double loss = 0.0;
};

// Fully-connected net with per-layer activation and an optional softmax on
// the output. Parameters live in one flat vector (layer by layer, weights
// row-major then bias) so optimizer steps and meta updates are plain
// vector arithmetic.
struct Mlp {
  std::vector<int> widths;             // layer sizes, input first
  std::vector<Activation> activations; // one per layer transition
  bool softmax_output = false;
  std::vector<double> params;

  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  int param_count() const;
  // Offset of layer l's weight block; bias follows the weights.
  int weight_offset(int layer) const;
  int bias_offset(int layer) const;
};

Mlp make_mlp(std::vector<int> widths, std::vector<Activation> activations,
             bool softmax_output = false);
// Weights uniform on (-1, 1) scaled by 1/sqrt(fan_in); biases zero.
void init_params(Mlp& mlp, Rng& rng);

// acts[0] is the input batch; acts[l+1] is layer l's post-activation output.
// With the softmax flag a final extra entry holds the softmaxed rows.
struct ForwardTrace {
  std::vector<Matrix> acts;
  const Matrix& output() const { return acts.back(); }
};

ForwardTrace forward_trace(const Mlp& mlp, const Matrix& batch);
Matrix forward(const Mlp& mlp, const Matrix& batch);

struct BackwardResult {
  GradBundle grads;
  Matrix input_grad;
};

// upstream is dLoss/dOutput, same shape as the trace output.
BackwardResult backward(const Mlp& mlp, const ForwardTrace& trace, const Matrix& upstream);
BackwardResult backward(const Mlp& mlp, const Matrix& batch, const Matrix& upstream);

void sgd_step(Mlp& mlp, std::span<const double> grad, double lr);
void sgd_step(Mlp& mlp, const GradBundle& grads, double lr);

}  // namespace nlte
