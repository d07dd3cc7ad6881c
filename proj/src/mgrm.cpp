#include "nlte/mgrm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <stdexcept>

#include "nlte/ops.hpp"

namespace nlte {
namespace {

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

void check_labels(const Matrix& features, const std::vector<int>& labels, int categories) {
  if (static_cast<int>(labels.size()) != features.rows)
    throw std::invalid_argument("batch_prototypes: one label per feature row required");
  for (int y : labels)
    if (y < -1 || y >= categories)
      throw std::invalid_argument("batch_prototypes: label out of range");
}

// Shared by noisy_local_relation and the loss path so both see the same Z.
RelationMatrix relation_from_local(const BatchPrototypes& local, const PrototypeBank& bank) {
  RelationMatrix rel;
  rel.categories = bank.categories;
  rel.values = Matrix(bank.categories, bank.categories);
  rel.valid.assign(static_cast<std::size_t>(bank.categories) * bank.categories, false);
  for (int u = 0; u < bank.categories; ++u) {
    if (!local.present[u]) continue;
    for (int v = 0; v < bank.categories; ++v) {
      if (!bank.target_present[v]) continue;
      rel.values.at(u, v) = clamp_unit(cosine(local.beta.row(u), bank.target.row(v)));
      rel.valid[static_cast<std::size_t>(u) * bank.categories + v] = true;
    }
  }
  return rel;
}

}  // namespace

Eq4Mode parse_eq4_mode(const std::string& name) {
  if (name == "adaptive") return Eq4Mode::kAdaptive;
  if (name == "cross_avg") return Eq4Mode::kCrossAvg;
  if (name == "literal") return Eq4Mode::kLiteral;
  throw std::invalid_argument("unknown eq4 mode: " + name);
}

std::string eq4_mode_name(Eq4Mode mode) {
  switch (mode) {
    case Eq4Mode::kAdaptive: return "adaptive";
    case Eq4Mode::kCrossAvg: return "cross_avg";
    case Eq4Mode::kLiteral: return "literal";
  }
  throw std::logic_error("eq4_mode_name: bad enum");
}

PrototypeBank::PrototypeBank(int categories_, int dim_)
    : categories(categories_),
      dim(dim_),
      source(categories_, dim_),
      target(categories_, dim_),
      source_present(categories_, false),
      target_present(categories_, false),
      source_updates(categories_, 0),
      target_updates(categories_, 0) {
  if (categories_ < 1 || dim_ < 1)
    throw std::invalid_argument("PrototypeBank: categories and dim must be positive");
}

bool PrototypeBank::any_source() const {
  return std::find(source_present.begin(), source_present.end(), true) != source_present.end();
}

bool PrototypeBank::any_target() const {
  return std::find(target_present.begin(), target_present.end(), true) != target_present.end();
}

IntraDomainGraph build_graph(const Matrix& features) {
  if (features.rows < 1) throw std::invalid_argument("build_graph: at least one node required");
  validate_finite(features, "build_graph features");
  IntraDomainGraph g;
  g.features = features;
  g.edges = Matrix(features.rows, features.rows);
  for (int i = 0; i < features.rows; ++i) {
    g.edges.at(i, i) = 1.0;
    for (int j = i + 1; j < features.rows; ++j) {
      const double e = clamp_unit(cosine(features.row(i), features.row(j)));
      g.edges.at(i, j) = e;
      g.edges.at(j, i) = e;
    }
  }
  return g;
}

Matrix aggregate(const IntraDomainGraph& graph, const AggregationWeights& weights) {
  const int n = graph.features.rows;
  const int d = graph.features.cols;
  if (weights.w.rows != d || weights.w.cols != d)
    throw std::invalid_argument("aggregate: weight matrix must be DxD");
  if (graph.edges.rows != n || graph.edges.cols != n)
    throw std::invalid_argument("aggregate: edge matrix does not match node count");

  Matrix out(n, d);
  for (int i = 0; i < n; ++i) {
    // sum_{i'} (W p_i e_ii' + p_i) = W p_i * rowsum(e_i) + n * p_i.
    double rowsum = 0.0;
    for (int j = 0; j < n; ++j) rowsum += graph.edges.at(i, j);
    const auto p = graph.features.row(i);
    for (int r = 0; r < d; ++r) {
      double wp = 0.0;
      for (int c = 0; c < d; ++c) wp += weights.w.at(r, c) * p[c];
      const double pre = (wp * rowsum + n * p[r]) / n;
      out.at(i, r) = pre > 0.0 ? pre : 0.0;
    }
  }
  return out;
}

std::vector<int> confident_argmax(const Matrix& probs, double floor) {
  std::vector<int> labels(probs.rows, -1);
  for (int i = 0; i < probs.rows; ++i) {
    const auto r = probs.row(i);
    int best = 0;
    for (int j = 1; j < probs.cols; ++j)
      if (r[j] > r[best]) best = j;
    if (r[best] >= floor) labels[i] = best;
  }
  return labels;
}

BatchPrototypes batch_prototypes(const Matrix& features, const std::vector<int>& labels,
                                 int categories) {
  check_labels(features, labels, categories);
  BatchPrototypes out;
  out.beta = Matrix(categories, features.cols);
  out.present.assign(categories, false);
  std::vector<int> count(categories, 0);
  for (int i = 0; i < features.rows; ++i) {
    if (labels[i] < 0) continue;
    const auto row = features.row(i);
    for (int c = 0; c < features.cols; ++c) out.beta.at(labels[i], c) += row[c];
    ++count[labels[i]];
  }
  for (int u = 0; u < categories; ++u) {
    if (count[u] == 0) continue;
    out.present[u] = true;
    for (int c = 0; c < features.cols; ++c) out.beta.at(u, c) /= count[u];
  }
  return out;
}

void update_global(PrototypeBank& bank, const BatchPrototypes& beta, Domain domain, Eq4Mode mode) {
  if (beta.beta.rows != bank.categories || beta.beta.cols != bank.dim)
    throw std::invalid_argument("update_global: prototype shape does not match bank");
  Matrix& slots = domain == Domain::kSource ? bank.source : bank.target;
  std::vector<bool>& present = domain == Domain::kSource ? bank.source_present : bank.target_present;
  std::vector<int>& updates = domain == Domain::kSource ? bank.source_updates : bank.target_updates;

  std::vector<int> incoming;
  for (int u = 0; u < bank.categories; ++u)
    if (beta.present[u]) incoming.push_back(u);
  if (incoming.empty()) return;

  // Adoption first, in all modes: an empty slot takes its category's beta.
  std::vector<bool> adopted(bank.categories, false);
  for (int u : incoming) {
    if (present[u]) continue;
    for (int c = 0; c < bank.dim; ++c) slots.at(u, c) = beta.beta.at(u, c);
    present[u] = true;
    updates[u] += 1;
    adopted[u] = true;
  }

  auto retention = [&](int m, int u) {
    return std::clamp(cosine(beta.beta.row(m), slots.row(u)), 0.0, 1.0);
  };

  if (mode == Eq4Mode::kAdaptive) {
    for (int u : incoming) {
      if (adopted[u]) continue;
      const double tau = retention(u, u);
      for (int c = 0; c < bank.dim; ++c)
        slots.at(u, c) = (1.0 - tau) * beta.beta.at(u, c) + tau * slots.at(u, c);
      updates[u] += 1;
    }
    validate_finite(slots, "update_global slots");
    return;
  }

  // Cross-category modes touch every initialized slot; read taus against the
  // pre-update slots so the batch order of categories cannot matter.
  Matrix before = slots;
  for (int u = 0; u < bank.categories; ++u) {
    if (!present[u] || adopted[u]) continue;
    std::vector<double> acc(bank.dim, 0.0);
    for (int m : incoming) {
      const double tau = std::clamp(cosine(beta.beta.row(m), before.row(u)), 0.0, 1.0);
      for (int c = 0; c < bank.dim; ++c)
        acc[c] += (1.0 - tau) * beta.beta.at(m, c) + tau * before.at(u, c);
    }
    const double denom = mode == Eq4Mode::kCrossAvg ? static_cast<double>(incoming.size()) : 1.0;
    for (int c = 0; c < bank.dim; ++c) slots.at(u, c) = acc[c] / denom;
    updates[u] += 1;
  }
  validate_finite(slots, "update_global slots");
}

RelationMatrix global_relation(const PrototypeBank& bank) {
  if (!bank.any_source() || !bank.any_target())
    throw std::invalid_argument("global_relation: bank needs at least one slot per domain");
  RelationMatrix rel;
  rel.categories = bank.categories;
  rel.values = Matrix(bank.categories, bank.categories);
  rel.valid.assign(static_cast<std::size_t>(bank.categories) * bank.categories, false);
  for (int u = 0; u < bank.categories; ++u) {
    if (!bank.source_present[u]) continue;
    for (int v = 0; v < bank.categories; ++v) {
      if (!bank.target_present[v]) continue;
      rel.values.at(u, v) = clamp_unit(cosine(bank.source.row(u), bank.target.row(v)));
      rel.valid[static_cast<std::size_t>(u) * bank.categories + v] = true;
    }
  }
  return rel;
}

RelationMatrix noisy_local_relation(const Matrix& features, const std::vector<int>& labels,
                                    const PrototypeBank& bank) {
  if (features.cols != bank.dim)
    throw std::invalid_argument("noisy_local_relation: feature dim does not match bank");
  return relation_from_local(batch_prototypes(features, labels, bank.categories), bank);
}

MgrmLoss mgrm_loss(const RelationMatrix& z, const RelationMatrix& pi) {
  if (z.categories != pi.categories)
    throw std::invalid_argument("mgrm_loss: relation matrices disagree on category count");
  MgrmLoss out;
  out.z_grad = Matrix(z.categories, z.categories);
  for (int u = 0; u < z.categories; ++u)
    for (int v = 0; v < z.categories; ++v)
      if (z.is_valid(u, v) && pi.is_valid(u, v)) ++out.valid_entries;
  if (out.valid_entries == 0) {
    std::cerr << "mgrm_loss: no entries valid in both relation matrices; loss is 0\n";
    return out;
  }
  const double inv = 1.0 / out.valid_entries;
  for (int u = 0; u < z.categories; ++u) {
    for (int v = 0; v < z.categories; ++v) {
      if (!z.is_valid(u, v) || !pi.is_valid(u, v)) continue;
      const double diff = z.values.at(u, v) - pi.values.at(u, v);
      out.loss += std::abs(diff) * inv;
      out.z_grad.at(u, v) = diff > 0.0 ? inv : diff < 0.0 ? -inv : 0.0;
    }
  }
  return out;
}

MgrmPath mgrm_loss_path(const Matrix& features, const std::vector<int>& labels,
                        const PrototypeBank& bank) {
  if (features.cols != bank.dim)
    throw std::invalid_argument("mgrm_loss_path: feature dim does not match bank");
  const BatchPrototypes local = batch_prototypes(features, labels, bank.categories);

  MgrmPath out;
  out.z = relation_from_local(local, bank);
  const MgrmLoss l = mgrm_loss(out.z, global_relation(bank));
  out.loss = l.loss;
  out.valid_entries = l.valid_entries;
  out.feature_grad = Matrix(features.rows, features.cols);
  if (l.valid_entries == 0) return out;

  std::vector<int> count(bank.categories, 0);
  for (int y : labels)
    if (y >= 0) ++count[y];

  // dL/dbeta_u = sum_v g_uv * dcos(beta_u, t_v)/dbeta_u, then split evenly
  // across the rows averaged into beta_u.
  Matrix beta_grad(bank.categories, bank.dim);
  for (int u = 0; u < bank.categories; ++u) {
    if (!local.present[u]) continue;
    const auto b = local.beta.row(u);
    const double nb = norm2(b);
    if (nb == 0.0) continue;
    for (int v = 0; v < bank.categories; ++v) {
      const double g = l.z_grad.at(u, v);
      if (g == 0.0) continue;
      const auto t = bank.target.row(v);
      const double nt = norm2(t);
      if (nt == 0.0) continue;
      const double cos_uv = dot(b, t) / (nb * nt);
      for (int c = 0; c < bank.dim; ++c)
        beta_grad.at(u, c) += g * (t[c] / (nb * nt) - cos_uv * b[c] / (nb * nb));
    }
  }
  for (int i = 0; i < features.rows; ++i) {
    const int y = labels[i];
    if (y < 0) continue;
    for (int c = 0; c < bank.dim; ++c)
      out.feature_grad.at(i, c) = beta_grad.at(y, c) / count[y];
  }
  return out;
}

std::string relation_csv(const RelationMatrix& rel) {
  std::string out;
  char buf[64];
  for (int u = 0; u < rel.categories; ++u) {
    for (int v = 0; v < rel.categories; ++v) {
      if (v > 0) out += ',';
      if (rel.is_valid(u, v)) {
        std::snprintf(buf, sizeof buf, "%.17g", rel.values.at(u, v));
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

}  // namespace nlte
