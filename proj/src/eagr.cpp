#include "nlte/eagr.hpp"

#include <cmath>
#include <stdexcept>

#include "nlte/ops.hpp"

namespace nlte {
namespace {

void check_batch(const EagrBatch& batch) {
  if (batch.features.rows != batch.probs.rows)
    throw std::invalid_argument("eagr batch: feature and prob row counts disagree");
  if (static_cast<int>(batch.domain_labels.size()) != batch.features.rows)
    throw std::invalid_argument("eagr batch: one domain label per row required");
  for (int z : batch.domain_labels)
    if (z != 0 && z != 1) throw std::invalid_argument("eagr batch: domain labels are 0 or 1");
  for (int i = 0; i < batch.probs.rows; ++i) {
    double sum = 0.0;
    for (double p : batch.probs.row(i)) sum += p;
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("eagr batch: prob rows must sum to 1");
  }
}

double safe_cos(double dot_ab, double na, double nb) {
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot_ab / (na * nb);
}

}  // namespace

void validate_meta_config(const MetaConfig& cfg) {
  if (cfg.inner_steps < 1) throw std::invalid_argument("meta config: inner_steps must be >= 1");
  if (!(cfg.inner_lr > 0.0)) throw std::invalid_argument("meta config: inner_lr must be > 0");
  if (!(cfg.meta_weight >= 0.0)) throw std::invalid_argument("meta config: meta_weight must be >= 0");
}

Matrix concat_feature_logits(const EagrBatch& batch) {
  check_batch(batch);
  const int n = batch.features.rows;
  const int d = batch.features.cols;
  const int c = batch.probs.cols;
  Matrix out(n, d + c);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.at(i, j) = batch.features.at(i, j);
    for (int j = 0; j < c; ++j) out.at(i, d + j) = batch.probs.at(i, j);
  }
  return out;
}

ConcatGrads split_concat_grad(const Matrix& upstream, int feature_dim, int prob_dim) {
  if (upstream.cols != feature_dim + prob_dim)
    throw std::invalid_argument("split_concat_grad: column count does not match the split");
  ConcatGrads out;
  out.feature_grad = Matrix(upstream.rows, feature_dim);
  out.prob_grad = Matrix(upstream.rows, prob_dim);
  for (int i = 0; i < upstream.rows; ++i) {
    for (int j = 0; j < feature_dim; ++j) out.feature_grad.at(i, j) = upstream.at(i, j);
    for (int j = 0; j < prob_dim; ++j) out.prob_grad.at(i, j) = upstream.at(i, feature_dim + j);
  }
  return out;
}

DiscLoss eagr_disc_loss(const EagrBatch& batch, const Mlp& disc, double grl_mu) {
  const Matrix input = concat_feature_logits(batch);
  if (disc.widths.front() != input.cols)
    throw std::invalid_argument("eagr_disc_loss: discriminator input width mismatch");
  if (disc.widths.back() != 1 || disc.softmax_output)
    throw std::invalid_argument("eagr_disc_loss: discriminator must emit one raw logit");

  const ForwardTrace trace = forward_trace(disc, input);
  const Matrix& logits = trace.output();
  const int n = input.rows;

  DiscLoss out;
  Matrix dlogits(n, 1);
  for (int i = 0; i < n; ++i) {
    const auto r = bce_logits(logits.at(i, 0), batch.domain_labels[i]);
    out.loss += r.loss / n;
    dlogits.at(i, 0) = r.dlogit / n;
  }
  for (int i = 0; i < n; ++i) out.mean_entropy += entropy(batch.probs.row(i)) / n;

  BackwardResult back = backward(disc, trace, dlogits);
  out.disc_grads = std::move(back.grads);
  out.disc_grads.loss = out.loss;
  ConcatGrads split = split_concat_grad(back.input_grad, batch.features.cols, batch.probs.cols);
  out.feature_grad = grad_reverse(split.feature_grad, grl_mu);
  out.prob_grad = grad_reverse(split.prob_grad, grl_mu);
  return out;
}

InnerLoopResult inner_loop(std::vector<double> theta, const std::vector<Objective>& objectives,
                           const MetaConfig& cfg) {
  validate_meta_config(cfg);
  if (static_cast<int>(objectives.size()) < cfg.inner_steps)
    throw std::invalid_argument("inner_loop: one objective per inner step required");

  InnerLoopResult out;
  out.theta_before = theta;
  for (int k = 0; k < cfg.inner_steps; ++k) {
    GradBundle g = objectives[k](theta);
    if (g.grad.size() != theta.size())
      throw std::invalid_argument("inner_loop: objective gradient size mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg.inner_lr * g.grad[i];
    out.steps.push_back(std::move(g));
  }
  validate_finite(theta, "inner_loop parameters");
  out.theta_after = std::move(theta);
  return out;
}

std::vector<double> meta_update(const std::vector<double>& theta_before,
                                const std::vector<double>& theta_after, double meta_weight,
                                MetaBase base) {
  if (theta_before.size() != theta_after.size())
    throw std::invalid_argument("meta_update: parameter vectors disagree in size");
  const std::vector<double>& origin = base == MetaBase::kBefore ? theta_before : theta_after;
  std::vector<double> out(origin);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += meta_weight * (theta_after[i] - theta_before[i]);
  return out;
}

double GradReport::cos_cln_cpt() const { return safe_cos(dot_cln_cpt, norm_cln, norm_cpt); }
double GradReport::cos_cln_t() const { return safe_cos(dot_cln_t, norm_cln, norm_t); }
double GradReport::cos_cpt_t() const { return safe_cos(dot_cpt_t, norm_cpt, norm_t); }

GradReport grad_report(const std::vector<double>& g_cln, const std::vector<double>& g_cpt,
                       const std::vector<double>& g_t) {
  GradReport rep;
  rep.has_cln = !g_cln.empty();
  rep.has_cpt = !g_cpt.empty();
  rep.has_t = !g_t.empty();
  const auto expect = [&](const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
      throw std::invalid_argument("grad_report: gradient sizes disagree");
  };
  if (rep.has_cln) rep.norm_cln = norm2(g_cln);
  if (rep.has_cpt) rep.norm_cpt = norm2(g_cpt);
  if (rep.has_t) rep.norm_t = norm2(g_t);
  if (rep.has_cln && rep.has_cpt) {
    expect(g_cln, g_cpt);
    rep.dot_cln_cpt = dot(g_cln, g_cpt);
  }
  if (rep.has_cln && rep.has_t) {
    expect(g_cln, g_t);
    rep.dot_cln_t = dot(g_cln, g_t);
  }
  if (rep.has_cpt && rep.has_t) {
    expect(g_cpt, g_t);
    rep.dot_cpt_t = dot(g_cpt, g_t);
  }
  return rep;
}

}  // namespace nlte
