#include "nlte/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nlte/eagr.hpp"
#include "nlte/matrix.hpp"
#include "nlte/mgrm.hpp"
#include "nlte/mlp.hpp"
#include "nlte/ops.hpp"
#include "nlte/rng.hpp"

namespace nlte {

std::vector<double> numeric_gradient(const ScalarFn& fn, std::vector<double> x,
                                     double step) {
  if (!(step > 0.0)) throw std::invalid_argument("numeric_gradient: step must be > 0");
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = fn(x);
    x[i] = saved - step;
    const double lo = fn(x);
    x[i] = saved;
    g[i] = (hi - lo) / (2.0 * step);
  }
  return g;
}

double rel_error(double analytic, double numeric, double floor) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < floor) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

double max_rel_error(const std::vector<double>& analytic,
                     const std::vector<double>& numeric, double floor) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("max_rel_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, rel_error(analytic[i], numeric[i], floor));
  return worst;
}

namespace {

// Central differences straddle rectifier and absolute-value kinks, so every
// sampled problem keeps its nonsmooth arguments at least this far from zero.
constexpr double kKinkMargin = 1e-3;
constexpr int kRedraws = 200;

Matrix random_matrix(Rng& rng, int rows, int cols, double scale) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(-scale, scale);
  return m;
}

std::vector<double> flat(const Matrix& m) { return m.data; }

Matrix unflat(const std::vector<double>& v, int rows, int cols) {
  Matrix m(rows, cols);
  m.data = v;
  return m;
}

// Pre-activation values of every rectifier layer at the given input.
bool rectifier_inputs_clear(const Mlp& mlp, const Matrix& batch) {
  Matrix x = batch;
  for (int l = 0; l < mlp.layer_count(); ++l) {
    const int in = mlp.widths[l], out = mlp.widths[l + 1];
    Matrix pre(x.rows, out);
    for (int r = 0; r < x.rows; ++r)
      for (int j = 0; j < out; ++j) {
        double s = mlp.params[static_cast<std::size_t>(mlp.bias_offset(l)) + j];
        for (int i = 0; i < in; ++i)
          s += x.at(r, i) * mlp.params[static_cast<std::size_t>(mlp.weight_offset(l)) + static_cast<std::size_t>(i) * out + j];
        pre.at(r, j) = s;
      }
    if (mlp.activations[l] == Activation::kRectifier)
      for (double v : pre.data)
        if (std::abs(v) < kKinkMargin) return false;
    for (double& v : pre.data)
      if (mlp.activations[l] == Activation::kRectifier) v = std::max(v, 0.0);
    x = pre;
  }
  return true;
}

GradCheckCase check_net(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"net forward/backward", 0.0, false};
  for (int inst = 0; inst < instances; ++inst) {
    Mlp net = make_mlp({3, 5, 2}, {Activation::kRectifier, Activation::kIdentity});
    Matrix x;
    for (int attempt = 0; attempt < kRedraws; ++attempt) {
      init_params(net, rng);
      x = random_matrix(rng, 4, 3, 2.0);
      if (rectifier_inputs_clear(net, x)) break;
    }
    const Matrix upstream = random_matrix(rng, 4, 2, 1.0);
    const BackwardResult analytic = backward(net, x, upstream);

    const auto objective_params = [&](const std::vector<double>& p) {
      Mlp probe = net;
      probe.params = p;
      const Matrix y = forward(probe, x);
      double s = 0.0;
      for (std::size_t i = 0; i < y.data.size(); ++i) s += upstream.data[i] * y.data[i];
      return s;
    };
    const auto objective_input = [&](const std::vector<double>& v) {
      const Matrix y = forward(net, unflat(v, x.rows, x.cols));
      double s = 0.0;
      for (std::size_t i = 0; i < y.data.size(); ++i) s += upstream.data[i] * y.data[i];
      return s;
    };
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(analytic.grads.grad, numeric_gradient(objective_params, net.params)));
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(flat(analytic.input_grad), numeric_gradient(objective_input, flat(x))));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

GradCheckCase check_softmax_xent(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"softmax cross-entropy", 0.0, false};
  for (int inst = 0; inst < instances; ++inst) {
    const int n = 5, c = 3;
    const Matrix logits = random_matrix(rng, n, c, 3.0);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.uniform_int(c + 1)) - 1;
    if (std::all_of(labels.begin(), labels.end(), [](int l) { return l < 0; })) labels[0] = 0;
    const XentResult analytic = softmax_xent(logits, labels);
    const auto objective = [&](const std::vector<double>& v) {
      return softmax_xent(unflat(v, n, c), labels).loss;
    };
    result.max_rel_err =
        std::max(result.max_rel_err,
                 max_rel_error(flat(analytic.dlogits), numeric_gradient(objective, flat(logits))));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

GradCheckCase check_bce(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"binary cross-entropy", 0.0, false};
  for (int inst = 0; inst < instances; ++inst) {
    const int n = 8;
    std::vector<double> logits(n);
    std::vector<int> z(n);
    for (int i = 0; i < n; ++i) {
      logits[i] = rng.uniform(-4.0, 4.0);
      z[i] = rng.uniform01() < 0.5 ? 0 : 1;
    }
    std::vector<double> analytic(n);
    for (int i = 0; i < n; ++i) analytic[i] = bce_logits(logits[i], z[i]).dlogit / n;
    const auto objective = [&](const std::vector<double>& v) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += bce_logits(v[i], z[i]).loss;
      return s / n;
    };
    result.max_rel_err = std::max(
        result.max_rel_err, max_rel_error(analytic, numeric_gradient(objective, logits)));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

GradCheckCase check_disc_concat(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"discriminator concat path", 0.0, false};
  const int n = 4, d = 3, c = 2;
  for (int inst = 0; inst < instances; ++inst) {
    Mlp disc = make_mlp({d + c, 4, 1}, {Activation::kRectifier, Activation::kIdentity});
    Matrix feats, logits;
    std::vector<int> domains(n);
    for (int attempt = 0; attempt < kRedraws; ++attempt) {
      init_params(disc, rng);
      feats = random_matrix(rng, n, d, 2.0);
      logits = random_matrix(rng, n, c, 2.0);
      for (int i = 0; i < n; ++i) domains[i] = i % 2;
      const EagrBatch probe{feats, softmax_rows(logits), domains};
      if (rectifier_inputs_clear(disc, concat_feature_logits(probe))) break;
    }
    const double mu = 0.7;
    const Matrix probs = softmax_rows(logits);
    const EagrBatch batch{feats, probs, domains};
    const DiscLoss analytic = eagr_disc_loss(batch, disc, mu);

    // feature_grad/prob_grad come back through the reversal layer, so the
    // plain loss gradient is their -1/mu rescaling.
    Matrix dfeat = analytic.feature_grad;
    for (double& v : dfeat.data) v /= -mu;
    Matrix dprob = analytic.prob_grad;
    for (double& v : dprob.data) v /= -mu;
    const Matrix dlogits = softmax_rows_backward(probs, dprob);

    const auto objective_feats = [&](const std::vector<double>& v) {
      return eagr_disc_loss({unflat(v, n, d), probs, domains}, disc, mu).loss;
    };
    const auto objective_logits = [&](const std::vector<double>& v) {
      return eagr_disc_loss({feats, softmax_rows(unflat(v, n, c)), domains}, disc, mu).loss;
    };
    const auto objective_disc = [&](const std::vector<double>& p) {
      Mlp probe = disc;
      probe.params = p;
      return eagr_disc_loss(batch, probe, mu).loss;
    };
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(flat(dfeat), numeric_gradient(objective_feats, flat(feats))));
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(flat(dlogits), numeric_gradient(objective_logits, flat(logits))));
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(analytic.disc_grads.grad, numeric_gradient(objective_disc, disc.params)));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

GradCheckCase check_relation_path(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"relation regularizer path", 0.0, false};
  const int n = 5, d = 4, c = 3;
  for (int inst = 0; inst < instances; ++inst) {
    PrototypeBank bank(c, d);
    Matrix feats;
    std::vector<int> labels(n);
    bool clear = false;
    for (int attempt = 0; attempt < kRedraws && !clear; ++attempt) {
      bank.source = random_matrix(rng, c, d, 2.0);
      bank.target = random_matrix(rng, c, d, 2.0);
      bank.source_present.assign(c, true);
      bank.target_present.assign(c, true);
      feats = random_matrix(rng, n, d, 2.0);
      for (int i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.uniform_int(c));
      labels[0] = 0;

      clear = true;
      for (int r = 0; r < c && clear; ++r)
        if (norm2(bank.source.row(r)) < 0.5 || norm2(bank.target.row(r)) < 0.5) clear = false;
      for (int i = 0; i < n && clear; ++i)
        if (norm2(feats.row(i)) < 0.5) clear = false;
      if (!clear) continue;
      const RelationMatrix pi = global_relation(bank);
      const RelationMatrix z = noisy_local_relation(feats, labels, bank);
      for (int u = 0; u < c && clear; ++u)
        for (int v = 0; v < c && clear; ++v)
          if (z.is_valid(u, v) && pi.is_valid(u, v) &&
              std::abs(z.values.at(u, v) - pi.values.at(u, v)) < kKinkMargin)
            clear = false;
    }
    const MgrmPath analytic = mgrm_loss_path(feats, labels, bank);
    const auto objective = [&](const std::vector<double>& v) {
      return mgrm_loss_path(unflat(v, n, d), labels, bank).loss;
    };
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(flat(analytic.feature_grad), numeric_gradient(objective, flat(feats))));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

GradCheckCase check_grad_reverse(Rng rng, int instances, double tolerance) {
  GradCheckCase result{"gradient reversal", 0.0, false};
  const int n = 6;
  for (int inst = 0; inst < instances; ++inst) {
    const Matrix w = random_matrix(rng, n, n, 1.0);
    const double mu = rng.uniform(0.2, 2.0);
    Matrix x = random_matrix(rng, 1, n, 2.0);

    // Adversarial objective -mu * L with L = 0.5 |W x|^2; the reversal layer
    // must turn dL/dx into exactly that objective's gradient.
    Matrix upstream(1, n);
    const Matrix y = matmul(x, transpose(w));
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k) s += y.at(0, k) * w.at(k, j);
      upstream.at(0, j) = s;
    }
    const Matrix analytic = grad_reverse(upstream, mu);
    const auto objective = [&](const std::vector<double>& v) {
      const Matrix yy = matmul(unflat(v, 1, n), transpose(w));
      double s = 0.0;
      for (double e : yy.data) s += e * e;
      return -mu * 0.5 * s;
    };
    result.max_rel_err = std::max(
        result.max_rel_err,
        max_rel_error(flat(analytic), numeric_gradient(objective, flat(x))));
  }
  result.pass = result.max_rel_err <= tolerance;
  return result;
}

}  // namespace

std::vector<GradCheckCase> run_gradient_checks(std::uint64_t seed, int instances,
                                               double tolerance) {
  if (instances <= 0) throw std::invalid_argument("run_gradient_checks: instances must be > 0");
  Rng root(seed);
  std::vector<GradCheckCase> cases;
  cases.push_back(check_net(root.stream("net"), instances, tolerance));
  cases.push_back(check_softmax_xent(root.stream("xent"), instances, tolerance));
  cases.push_back(check_bce(root.stream("bce"), instances, tolerance));
  cases.push_back(check_disc_concat(root.stream("disc-concat"), instances, tolerance));
  cases.push_back(check_relation_path(root.stream("relation"), instances, tolerance));
  cases.push_back(check_grad_reverse(root.stream("reversal"), instances, tolerance));
  return cases;
}

}  // namespace nlte
