#include "nlte/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace nlte {
namespace {

std::atomic<std::uint64_t> g_cosine_zero_norm{0};

double clamp_prob(double p) {
  if (p < kProbEps) return kProbEps;
  if (p > 1.0 - kProbEps) return 1.0 - kProbEps;
  return p;
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

XentResult softmax_xent(const Matrix& logits, const std::vector<int>& labels) {
  if (static_cast<int>(labels.size()) != logits.rows)
    throw std::invalid_argument("softmax_xent: one label per row required");
  int active = 0;
  for (int i = 0; i < logits.rows; ++i) {
    if (labels[i] == -1) continue;
    if (labels[i] < 0 || labels[i] >= logits.cols)
      throw std::invalid_argument("softmax_xent: label out of range");
    ++active;
  }
  XentResult res;
  res.dlogits = Matrix(logits.rows, logits.cols);
  if (active == 0) return res;

  const double inv = 1.0 / active;
  for (int i = 0; i < logits.rows; ++i) {
    if (labels[i] == -1) continue;
    const auto row = logits.row(i);
    double mx = row[0];
    for (double x : row) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    const double logz = mx + std::log(sum);
    res.loss += (logz - row[labels[i]]) * inv;
    for (int j = 0; j < logits.cols; ++j) {
      const double p = std::exp(row[j] - logz);
      res.dlogits.at(i, j) = (p - (j == labels[i] ? 1.0 : 0.0)) * inv;
    }
  }
  return res;
}

BceResult bce(double prob, int z) {
  if (z != 0 && z != 1) throw std::invalid_argument("bce: label must be 0 or 1");
  if (!std::isfinite(prob)) throw std::invalid_argument("bce: non-finite probability");
  const double p = clamp_prob(prob);
  BceResult res;
  res.loss = z == 1 ? -std::log(p) : -std::log(1.0 - p);
  // Zero gradient where the clamp is active: the clamped region is flat.
  if (prob > kProbEps && prob < 1.0 - kProbEps)
    res.dprob = z == 1 ? -1.0 / p : 1.0 / (1.0 - p);
  return res;
}

BceLogitsResult bce_logits(double logit, int z) {
  if (z != 0 && z != 1) throw std::invalid_argument("bce_logits: label must be 0 or 1");
  if (!std::isfinite(logit)) throw std::invalid_argument("bce_logits: non-finite logit");
  BceLogitsResult res;
  res.loss = std::max(logit, 0.0) - logit * z + std::log1p(std::exp(-std::abs(logit)));
  res.dlogit = sigmoid(logit) - z;
  return res;
}

double entropy(std::span<const double> probs) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw std::invalid_argument("entropy: negative or non-finite mass");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("entropy: input is not normalized");
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) {
    g_cosine_zero_norm.fetch_add(1, std::memory_order_relaxed);
    return 0.0;
  }
  return dot(a, b) / (na * nb);
}

std::uint64_t cosine_zero_norm_count() {
  return g_cosine_zero_norm.load(std::memory_order_relaxed);
}

void reset_cosine_zero_norm_count() {
  g_cosine_zero_norm.store(0, std::memory_order_relaxed);
}

Matrix grad_reverse(const Matrix& upstream, double mu) {
  Matrix out = upstream;
  for (double& x : out.data) x *= -mu;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (int i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    double mx = r[0];
    for (double x : r) mx = std::max(mx, x);
    double sum = 0.0;
    for (double& x : r) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (double& x : r) x /= sum;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& probs, const Matrix& upstream) {
  if (probs.rows != upstream.rows || probs.cols != upstream.cols)
    throw std::invalid_argument("softmax_rows_backward: shape mismatch");
  Matrix out(probs.rows, probs.cols);
  for (int i = 0; i < probs.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < probs.cols; ++j) s += upstream.at(i, j) * probs.at(i, j);
    for (int j = 0; j < probs.cols; ++j)
      out.at(i, j) = probs.at(i, j) * (upstream.at(i, j) - s);
  }
  return out;
}

}  // namespace nlte
