#include "nlte/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace nlte {

int Mlp::param_count() const {
  int n = 0;
  for (int l = 0; l < layer_count(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

int Mlp::weight_offset(int layer) const {
  int off = 0;
  for (int l = 0; l < layer; ++l) off += widths[l] * widths[l + 1] + widths[l + 1];
  return off;
}

int Mlp::bias_offset(int layer) const {
  return weight_offset(layer) + widths[layer] * widths[layer + 1];
}

Mlp make_mlp(std::vector<int> widths, std::vector<Activation> activations,
             bool softmax_output) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need at least two widths");
  for (int w : widths)
    if (w <= 0) throw std::invalid_argument("make_mlp: widths must be positive");
  if (activations.size() != widths.size() - 1)
    throw std::invalid_argument("make_mlp: one activation per layer transition");
  Mlp m;
  m.widths = std::move(widths);
  m.activations = std::move(activations);
  m.softmax_output = softmax_output;
  m.params.assign(m.param_count(), 0.0);
  return m;
}

void init_params(Mlp& mlp, Rng& rng) {
  for (int l = 0; l < mlp.layer_count(); ++l) {
    const int fan_in = mlp.widths[l];
    const int fan_out = mlp.widths[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
    double* w = mlp.params.data() + mlp.weight_offset(l);
    for (int i = 0; i < fan_in * fan_out; ++i) w[i] = rng.uniform(-1.0, 1.0) * scale;
    double* b = mlp.params.data() + mlp.bias_offset(l);
    for (int i = 0; i < fan_out; ++i) b[i] = 0.0;
  }
}

namespace {

void softmax_rows_inplace(Matrix& m) {
  for (int i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    double mx = r[0];
    for (double x : r) mx = std::max(mx, x);
    double sum = 0.0;
    for (double& x : r) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (double& x : r) x /= sum;
  }
}

}  // namespace

ForwardTrace forward_trace(const Mlp& mlp, const Matrix& batch) {
  if (batch.cols != mlp.widths.front())
    throw std::invalid_argument("forward: batch width does not match input width");
  ForwardTrace t;
  t.acts.reserve(mlp.layer_count() + 1);
  t.acts.push_back(batch);
  for (int l = 0; l < mlp.layer_count(); ++l) {
    const Matrix& in = t.acts.back();
    const int nin = mlp.widths[l];
    const int nout = mlp.widths[l + 1];
    const double* w = mlp.params.data() + mlp.weight_offset(l);
    const double* b = mlp.params.data() + mlp.bias_offset(l);
    Matrix out(in.rows, nout);
    for (int r = 0; r < in.rows; ++r) {
      for (int j = 0; j < nout; ++j) out.at(r, j) = b[j];
      for (int k = 0; k < nin; ++k) {
        const double x = in.at(r, k);
        if (x == 0.0) continue;
        const double* wrow = w + static_cast<std::size_t>(k) * nout;
        for (int j = 0; j < nout; ++j) out.at(r, j) += x * wrow[j];
      }
      if (mlp.activations[l] == Activation::kRectifier)
        for (int j = 0; j < nout; ++j) out.at(r, j) = out.at(r, j) > 0.0 ? out.at(r, j) : 0.0;
    }
    t.acts.push_back(std::move(out));
  }
  if (mlp.softmax_output) {
    // Keep the pre-softmax activation; backward needs it for the rectifier mask.
    Matrix probs = t.acts.back();
    softmax_rows_inplace(probs);
    t.acts.push_back(std::move(probs));
  }
  return t;
}

Matrix forward(const Mlp& mlp, const Matrix& batch) {
  return forward_trace(mlp, batch).acts.back();
}

BackwardResult backward(const Mlp& mlp, const ForwardTrace& trace, const Matrix& upstream) {
  const Matrix& out = trace.output();
  if (upstream.rows != out.rows || upstream.cols != out.cols)
    throw std::invalid_argument("backward: upstream shape does not match output");

  BackwardResult res;
  res.grads.grad.assign(mlp.params.size(), 0.0);

  Matrix delta = upstream;
  if (mlp.softmax_output) {
    // d/dlogits through the softmax rows.
    for (int r = 0; r < delta.rows; ++r) {
      const auto p = out.row(r);
      auto d = delta.row(r);
      double s = 0.0;
      for (std::size_t j = 0; j < p.size(); ++j) s += d[j] * p[j];
      for (std::size_t j = 0; j < p.size(); ++j) d[j] = p[j] * (d[j] - s);
    }
  }

  for (int l = mlp.layer_count() - 1; l >= 0; --l) {
    const Matrix& in = trace.acts[l];
    const Matrix& act = trace.acts[l + 1];
    const int nin = mlp.widths[l];
    const int nout = mlp.widths[l + 1];

    // Rectifier subgradient at 0 is 0: mask strictly positive outputs.
    if (mlp.activations[l] == Activation::kRectifier) {
      for (int r = 0; r < delta.rows; ++r)
        for (int j = 0; j < nout; ++j)
          if (!(act.at(r, j) > 0.0)) delta.at(r, j) = 0.0;
    }

    double* gw = res.grads.grad.data() + mlp.weight_offset(l);
    double* gb = res.grads.grad.data() + mlp.bias_offset(l);
    for (int r = 0; r < delta.rows; ++r) {
      for (int k = 0; k < nin; ++k) {
        const double x = in.at(r, k);
        if (x == 0.0) continue;
        double* grow = gw + static_cast<std::size_t>(k) * nout;
        for (int j = 0; j < nout; ++j) grow[j] += x * delta.at(r, j);
      }
      for (int j = 0; j < nout; ++j) gb[j] += delta.at(r, j);
    }

    const double* w = mlp.params.data() + mlp.weight_offset(l);
    Matrix next(delta.rows, nin);
    for (int r = 0; r < delta.rows; ++r)
      for (int k = 0; k < nin; ++k) {
        const double* wrow = w + static_cast<std::size_t>(k) * nout;
        double s = 0.0;
        for (int j = 0; j < nout; ++j) s += wrow[j] * delta.at(r, j);
        next.at(r, k) = s;
      }
    delta = std::move(next);
  }
  res.input_grad = std::move(delta);
  return res;
}

BackwardResult backward(const Mlp& mlp, const Matrix& batch, const Matrix& upstream) {
  return backward(mlp, forward_trace(mlp, batch), upstream);
}

void sgd_step(Mlp& mlp, std::span<const double> grad, double lr) {
  if (grad.size() != mlp.params.size())
    throw std::invalid_argument("sgd_step: gradient size does not match parameters");
  for (std::size_t i = 0; i < grad.size(); ++i) mlp.params[i] -= lr * grad[i];
}

void sgd_step(Mlp& mlp, const GradBundle& grads, double lr) {
  sgd_step(mlp, std::span<const double>(grads.grad), lr);
}

}  // namespace nlte
