#include "nlte/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "nlte/ops.hpp"

namespace nlte {
namespace {

using nlohmann::json;

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_positive(int v, const char* what) {
  if (v <= 0) throw std::invalid_argument(std::string(what) + " must be positive");
}

void check_finite_nonneg(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0)
    throw std::invalid_argument(std::string(what) + " must be finite and non-negative");
}

// Pool entry: one proposal addressed by scene, with the label it trains under.
struct PoolEntry {
  int scene = 0;
  int proposal = 0;
  int label = -1;
  Role role = Role::kTarget;
};

struct InstancePool {
  std::vector<PoolEntry> source;
  std::vector<PoolEntry> target;
  int mined_source = 0;
  int mined_target = 0;
};

Matrix proposal_matrix(const Scene& scene) {
  const int n = static_cast<int>(scene.proposals.size());
  const int d = n > 0 ? static_cast<int>(scene.proposals[0].feature.size()) : 0;
  Matrix m(n, d);
  for (int i = 0; i < n; ++i)
    std::copy(scene.proposals[i].feature.begin(), scene.proposals[i].feature.end(),
              m.row(i).begin());
  return m;
}

std::vector<MinedProposal> mine_scene(const ModelBundle& bundle, const Scene& scene,
                                      const PimConfig& cfg) {
  Matrix logits = forward(bundle.det, forward(bundle.feat, proposal_matrix(scene)));
  return mine(scene, logits, cfg);
}

InstancePool build_pools(const ModelBundle& bundle, const std::vector<Scene>& source,
                         const std::vector<Scene>& target, const TrainConfig& cfg) {
  InstancePool pool;
  for (int s = 0; s < static_cast<int>(source.size()); ++s) {
    const Scene& scene = source[s];
    for (int p = 0; p < static_cast<int>(scene.proposals.size()); ++p) {
      const Proposal& prop = scene.proposals[p];
      if (!prop.matched_gt) continue;
      const GtObject& obj = scene.objects[*prop.matched_gt];
      if (!obj.annotated) continue;
      Role role = obj.corrupted_from ? Role::kCorrupted : Role::kClean;
      pool.source.push_back({s, p, obj.category, role});
    }
    if (cfg.pim) {
      for (const MinedProposal& m : mine_scene(bundle, scene, cfg.pim_cfg)) {
        pool.source.push_back({s, m.proposal_index, m.pseudo_label, Role::kMined});
        ++pool.mined_source;
      }
    }
  }
  if (cfg.pim) {
    for (int s = 0; s < static_cast<int>(target.size()); ++s)
      for (const MinedProposal& m : mine_scene(bundle, target[s], cfg.pim_cfg)) {
        pool.target.push_back({s, m.proposal_index, -1, Role::kTarget});
        ++pool.mined_target;
      }
  }
  // Mined-only target pool, but never an empty one: before the model can mine
  // anything the adversarial pass still needs target rows.
  if (pool.target.empty()) {
    pool.mined_target = 0;
    for (int s = 0; s < static_cast<int>(target.size()); ++s)
      for (int p = 0; p < static_cast<int>(target[s].proposals.size()); ++p)
        pool.target.push_back({s, p, -1, Role::kTarget});
  }
  if (pool.source.empty()) throw std::runtime_error("source pool is empty; nothing to train on");
  if (pool.target.empty()) throw std::runtime_error("target pool is empty; nothing to align to");
  return pool;
}

TrainBatch draw_batch(const std::vector<PoolEntry>& pool, const std::vector<Scene>& scenes,
                      int batch_size, int feature_dim, Rng& rng) {
  TrainBatch batch;
  batch.features = Matrix(batch_size, feature_dim);
  batch.labels.resize(batch_size);
  batch.roles.resize(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const PoolEntry& e = pool[rng.uniform_int(static_cast<int>(pool.size()))];
    const Proposal& prop = scenes[e.scene].proposals[e.proposal];
    std::copy(prop.feature.begin(), prop.feature.end(), batch.features.row(i).begin());
    batch.labels[i] = e.label;
    batch.roles[i] = e.role;
  }
  return batch;
}

TrainBatch filter_batch(const TrainBatch& batch, Role keep) {
  TrainBatch out;
  std::vector<int> rows;
  for (int i = 0; i < batch.features.rows; ++i)
    if (batch.roles[i] == keep) rows.push_back(i);
  out.features = Matrix(static_cast<int>(rows.size()), batch.features.cols);
  for (int i = 0; i < static_cast<int>(rows.size()); ++i) {
    std::copy(batch.features.row(rows[i]).begin(), batch.features.row(rows[i]).end(),
              out.features.row(i).begin());
    out.labels.push_back(batch.labels[rows[i]]);
    out.roles.push_back(batch.roles[rows[i]]);
  }
  return out;
}

void accumulate(GradBundle& acc, const GradBundle& add) {
  if (acc.grad.size() != add.grad.size())
    throw std::logic_error("gradient accumulation size mismatch");
  for (std::size_t i = 0; i < acc.grad.size(); ++i) acc.grad[i] += add.grad[i];
}

void add_rows(Matrix& acc, const Matrix& add, int row_offset) {
  for (int r = 0; r < add.rows; ++r)
    for (int c = 0; c < add.cols; ++c) acc.at(row_offset + r, c) += add.at(r, c);
}

Matrix vstack(const Matrix& a, const Matrix& b) {
  if (a.rows == 0) return b;
  if (b.rows == 0) return a;
  if (a.cols != b.cols) throw std::invalid_argument("vstack column mismatch");
  Matrix m(a.rows + b.rows, a.cols);
  std::copy(a.data.begin(), a.data.end(), m.data.begin());
  std::copy(b.data.begin(), b.data.end(), m.data.begin() + a.data.size());
  return m;
}

Matrix slice_rows(const Matrix& m, int begin, int count) {
  Matrix out(count, m.cols);
  std::copy(m.data.begin() + static_cast<std::size_t>(begin) * m.cols,
            m.data.begin() + static_cast<std::size_t>(begin + count) * m.cols, out.data.begin());
  return out;
}

std::vector<double> flatten_meta(const ModelBundle& b) {
  std::vector<double> v;
  v.reserve(b.feat.params.size() + b.det.params.size());
  v.insert(v.end(), b.feat.params.begin(), b.feat.params.end());
  v.insert(v.end(), b.det.params.begin(), b.det.params.end());
  return v;
}

void write_meta(ModelBundle& b, const std::vector<double>& v) {
  if (v.size() != b.feat.params.size() + b.det.params.size())
    throw std::logic_error("meta parameter vector size mismatch");
  std::copy(v.begin(), v.begin() + b.feat.params.size(), b.feat.params.begin());
  std::copy(v.begin() + b.feat.params.size(), v.end(), b.det.params.begin());
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool bundle_finite(const ModelBundle& b) {
  return all_finite(b.feat.params) && all_finite(b.det.params) && all_finite(b.dis_daf.params) &&
         all_finite(b.dis_eagr.params);
}

double lr_at(const TrainConfig& cfg, int step) {
  double lr = cfg.lr;
  for (int d : cfg.decay_steps)
    if (step >= d) lr *= 0.1;
  return lr;
}

double mu_at(const TrainConfig& cfg, int step) {
  // Classifier-first schedule: the reversal ramps in over the first third of
  // training so alignment pressure arrives after class structure forms.
  int warmup = std::max(1, cfg.total_steps() / 3);
  double ramp = std::min(1.0, static_cast<double>(step + 1) / warmup);
  return cfg.grl_mu * ramp;
}

GradReport role_report(ModelBundle& bundle, const TrainBatch& source, const TrainBatch& target,
                       const TrainConfig& cfg, double grl_mu) {
  TrainBatch empty;
  empty.features = Matrix(0, source.features.cols > 0 ? source.features.cols
                                                      : target.features.cols);
  auto role_grad = [&](const TrainBatch& src, const TrainBatch& tgt) {
    StepEval ev = eval_losses(bundle, src, tgt, cfg, grl_mu, false);
    std::vector<double> g;
    g.reserve(ev.grads.feat.grad.size() + ev.grads.det.grad.size());
    g.insert(g.end(), ev.grads.feat.grad.begin(), ev.grads.feat.grad.end());
    g.insert(g.end(), ev.grads.det.grad.begin(), ev.grads.det.grad.end());
    return g;
  };
  TrainBatch clean = filter_batch(source, Role::kClean);
  TrainBatch corrupted = filter_batch(source, Role::kCorrupted);
  std::vector<double> g_cln, g_cpt, g_t;
  if (clean.features.rows > 0) g_cln = role_grad(clean, empty);
  if (corrupted.features.rows > 0) g_cpt = role_grad(corrupted, empty);
  if (target.features.rows > 0) g_t = role_grad(empty, target);
  return grad_report(g_cln, g_cpt, g_t);
}

json summary_to_json(const EvalSummary& s) {
  json j;
  j["map"] = s.map;
  json aps = json::array();
  for (const auto& ap : s.per_category_ap) {
    if (ap)
      aps.push_back(*ap);
    else
      aps.push_back(nullptr);
  }
  j["per_category_ap"] = aps;
  j["taxonomy"] = {{"correct", s.taxonomy.correct},
                   {"mislocalized", s.taxonomy.mislocalized},
                   {"background", s.taxonomy.background}};
  j["shares"] = {{"correct", s.shares.correct},
                 {"mislocalized", s.shares.mislocalized},
                 {"background", s.shares.background},
                 {"categories_counted", s.shares.categories_counted}};
  return j;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const char* where) {
  for (const auto& item : j.items())
    if (!allowed.count(item.key()))
      throw std::invalid_argument(std::string("unknown key \"") + item.key() + "\" in " + where);
}

void parse_scenario(const json& j, ScenarioConfig& s) {
  if (!j.is_object()) throw std::invalid_argument("scenario must be a JSON object");
  reject_unknown_keys(
      j,
      {"categories", "feature_dim", "scenes_per_domain", "objects_per_scene",
       "background_proposals", "proposals_per_object", "mean_scale", "category_means",
       "category_stddevs", "background_std", "shift_rotate", "shift_scale", "shift_offset",
       "noise_scale", "obj_gain", "obj_bias", "obj_jitter_std", "bg_obj_alpha", "bg_obj_beta",
       "canvas_size", "box_min", "box_max", "proposal_jitter", "rho", "background_in_noise"},
      "scenario");
  s.categories = j.value("categories", s.categories);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.scenes_per_domain = j.value("scenes_per_domain", s.scenes_per_domain);
  s.objects_per_scene = j.value("objects_per_scene", s.objects_per_scene);
  s.background_proposals = j.value("background_proposals", s.background_proposals);
  s.proposals_per_object = j.value("proposals_per_object", s.proposals_per_object);
  s.mean_scale = j.value("mean_scale", s.mean_scale);
  if (j.contains("category_means"))
    s.category_means = j.at("category_means").get<std::vector<std::vector<double>>>();
  if (j.contains("category_stddevs"))
    s.category_stddevs = j.at("category_stddevs").get<std::vector<std::vector<double>>>();
  s.background_std = j.value("background_std", s.background_std);
  s.shift_rotate = j.value("shift_rotate", s.shift_rotate);
  s.shift_scale = j.value("shift_scale", s.shift_scale);
  s.shift_offset = j.value("shift_offset", s.shift_offset);
  s.noise_scale = j.value("noise_scale", s.noise_scale);
  s.obj_gain = j.value("obj_gain", s.obj_gain);
  s.obj_bias = j.value("obj_bias", s.obj_bias);
  s.obj_jitter_std = j.value("obj_jitter_std", s.obj_jitter_std);
  s.bg_obj_alpha = j.value("bg_obj_alpha", s.bg_obj_alpha);
  s.bg_obj_beta = j.value("bg_obj_beta", s.bg_obj_beta);
  s.canvas_size = j.value("canvas_size", s.canvas_size);
  s.box_min = j.value("box_min", s.box_min);
  s.box_max = j.value("box_max", s.box_max);
  s.proposal_jitter = j.value("proposal_jitter", s.proposal_jitter);
  s.rho = j.value("rho", s.rho);
  s.background_in_noise = j.value("background_in_noise", s.background_in_noise);
}

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  check_positive(cfg.steps_per_epoch, "steps_per_epoch");
  if (!std::isfinite(cfg.lr) || cfg.lr <= 0.0)
    throw std::invalid_argument("lr must be finite and positive");
  for (int d : cfg.decay_steps)
    if (d < 0) throw std::invalid_argument("decay_steps entries must be non-negative");
  check_finite_nonneg(cfg.lambda_mgrm, "lambda_mgrm");
  check_finite_nonneg(cfg.grl_mu, "grl_mu");
  check_positive(cfg.batch_source, "batch_source");
  check_positive(cfg.batch_target, "batch_target");
  validate_meta_config(cfg.meta);
  validate_pim_config(cfg.pim_cfg);
  validate_config(cfg.scenario);
}

namespace {

TrainConfig parse_train_config_impl(const std::string& json_text) {
  json j = json::parse(json_text);
  if (!j.is_object()) throw std::invalid_argument("config root must be a JSON object");
  reject_unknown_keys(j,
                      {"epochs", "steps_per_epoch", "lr", "decay_steps", "lambda_mgrm", "pim",
                       "mgrm", "eagr", "pim_in_det_loss", "mgrm_eq4_mode", "grl_mu",
                       "batch_source", "batch_target", "seed", "meta", "pim_config", "scenario"},
                      "config");
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.steps_per_epoch = j.value("steps_per_epoch", cfg.steps_per_epoch);
  cfg.lr = j.value("lr", cfg.lr);
  if (j.contains("decay_steps")) cfg.decay_steps = j.at("decay_steps").get<std::vector<int>>();
  cfg.lambda_mgrm = j.value("lambda_mgrm", cfg.lambda_mgrm);
  cfg.pim = j.value("pim", cfg.pim);
  cfg.mgrm = j.value("mgrm", cfg.mgrm);
  cfg.eagr = j.value("eagr", cfg.eagr);
  cfg.pim_in_det_loss = j.value("pim_in_det_loss", cfg.pim_in_det_loss);
  if (j.contains("mgrm_eq4_mode"))
    cfg.mgrm_eq4_mode = parse_eq4_mode(j.at("mgrm_eq4_mode").get<std::string>());
  cfg.grl_mu = j.value("grl_mu", cfg.grl_mu);
  cfg.batch_source = j.value("batch_source", cfg.batch_source);
  cfg.batch_target = j.value("batch_target", cfg.batch_target);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("meta")) {
    const json& m = j.at("meta");
    if (!m.is_object()) throw std::invalid_argument("meta must be a JSON object");
    reject_unknown_keys(m, {"inner_steps", "inner_lr", "meta_weight", "base"}, "meta");
    cfg.meta.inner_steps = m.value("inner_steps", cfg.meta.inner_steps);
    cfg.meta.inner_lr = m.value("inner_lr", cfg.meta.inner_lr);
    cfg.meta.meta_weight = m.value("meta_weight", cfg.meta.meta_weight);
    if (m.contains("base")) {
      std::string base = m.at("base").get<std::string>();
      if (base == "before")
        cfg.meta.base = MetaBase::kBefore;
      else if (base == "after")
        cfg.meta.base = MetaBase::kAfter;
      else
        throw std::invalid_argument("meta.base must be \"before\" or \"after\"");
    }
  }
  if (j.contains("pim_config")) {
    const json& p = j.at("pim_config");
    if (!p.is_object()) throw std::invalid_argument("pim_config must be a JSON object");
    reject_unknown_keys(p, {"tau_source", "tau_target", "max_mined_per_scene"}, "pim_config");
    cfg.pim_cfg.tau_source = p.value("tau_source", cfg.pim_cfg.tau_source);
    cfg.pim_cfg.tau_target = p.value("tau_target", cfg.pim_cfg.tau_target);
    cfg.pim_cfg.max_mined_per_scene =
        p.value("max_mined_per_scene", cfg.pim_cfg.max_mined_per_scene);
  }
  if (j.contains("scenario")) parse_scenario(j.at("scenario"), cfg.scenario);
  // One seed drives the whole run; the scenario block deliberately has no
  // seed key of its own.
  cfg.scenario.seed = cfg.seed;
  validate_train_config(cfg);
  return cfg;
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  // Malformed text and type mismatches surface as the same argument error as
  // the explicit schema checks, so callers handle one failure mode.
  try {
    return parse_train_config_impl(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config parse failed: ") + e.what());
  }
}

std::string train_config_json(const TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["steps_per_epoch"] = cfg.steps_per_epoch;
  j["lr"] = cfg.lr;
  j["decay_steps"] = cfg.decay_steps;
  j["lambda_mgrm"] = cfg.lambda_mgrm;
  j["pim"] = cfg.pim;
  j["mgrm"] = cfg.mgrm;
  j["eagr"] = cfg.eagr;
  j["pim_in_det_loss"] = cfg.pim_in_det_loss;
  j["mgrm_eq4_mode"] = eq4_mode_name(cfg.mgrm_eq4_mode);
  j["grl_mu"] = cfg.grl_mu;
  j["batch_source"] = cfg.batch_source;
  j["batch_target"] = cfg.batch_target;
  j["seed"] = cfg.seed;
  j["meta"] = {{"inner_steps", cfg.meta.inner_steps},
               {"inner_lr", cfg.meta.inner_lr},
               {"meta_weight", cfg.meta.meta_weight},
               {"base", cfg.meta.base == MetaBase::kBefore ? "before" : "after"}};
  j["pim_config"] = {{"tau_source", cfg.pim_cfg.tau_source},
                     {"tau_target", cfg.pim_cfg.tau_target},
                     {"max_mined_per_scene", cfg.pim_cfg.max_mined_per_scene}};
  json s;
  s["categories"] = cfg.scenario.categories;
  s["feature_dim"] = cfg.scenario.feature_dim;
  s["scenes_per_domain"] = cfg.scenario.scenes_per_domain;
  s["objects_per_scene"] = cfg.scenario.objects_per_scene;
  s["background_proposals"] = cfg.scenario.background_proposals;
  s["proposals_per_object"] = cfg.scenario.proposals_per_object;
  s["mean_scale"] = cfg.scenario.mean_scale;
  s["background_std"] = cfg.scenario.background_std;
  s["shift_rotate"] = cfg.scenario.shift_rotate;
  s["shift_scale"] = cfg.scenario.shift_scale;
  s["shift_offset"] = cfg.scenario.shift_offset;
  s["noise_scale"] = cfg.scenario.noise_scale;
  s["obj_gain"] = cfg.scenario.obj_gain;
  s["obj_bias"] = cfg.scenario.obj_bias;
  s["obj_jitter_std"] = cfg.scenario.obj_jitter_std;
  s["bg_obj_alpha"] = cfg.scenario.bg_obj_alpha;
  s["bg_obj_beta"] = cfg.scenario.bg_obj_beta;
  s["canvas_size"] = cfg.scenario.canvas_size;
  s["box_min"] = cfg.scenario.box_min;
  s["box_max"] = cfg.scenario.box_max;
  s["proposal_jitter"] = cfg.scenario.proposal_jitter;
  s["rho"] = cfg.scenario.rho;
  s["background_in_noise"] = cfg.scenario.background_in_noise;
  j["scenario"] = s;
  return j.dump(2) + "\n";
}

ModelBundle::ModelBundle(int feature_dim, int categories)
    : feat(make_mlp({feature_dim, 2 * feature_dim, feature_dim},
                    {Activation::kRectifier, Activation::kIdentity})),
      det(make_mlp({feature_dim, categories}, {Activation::kIdentity})),
      dis_daf(make_mlp({feature_dim, feature_dim, 1},
                       {Activation::kRectifier, Activation::kIdentity})),
      dis_eagr(make_mlp({feature_dim + categories, feature_dim, 1},
                        {Activation::kRectifier, Activation::kIdentity})),
      agg{Matrix(feature_dim, feature_dim)},
      bank(categories, feature_dim) {}

void init_bundle(ModelBundle& bundle, Rng root) {
  // Purpose-keyed streams: toggling one module never shifts another's init.
  Rng r_feat = root.stream("init-feat");
  Rng r_det = root.stream("init-det");
  Rng r_daf = root.stream("init-daf");
  Rng r_eagr = root.stream("init-eagr");
  Rng r_agg = root.stream("init-agg");
  init_params(bundle.feat, r_feat);
  init_params(bundle.det, r_det);
  init_params(bundle.dis_daf, r_daf);
  init_params(bundle.dis_eagr, r_eagr);
  const int d = bundle.agg.w.rows;
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& v : bundle.agg.w.data) v = r_agg.uniform(-scale, scale);
}

StepEval eval_losses(ModelBundle& bundle, const TrainBatch& source, const TrainBatch& target,
                     const TrainConfig& cfg, double grl_mu, bool update_bank) {
  const int ns = source.features.rows;
  const int nt = target.features.rows;
  const int d = bundle.feat.widths.back();
  const int c = bundle.det.widths.back();

  StepEval out;
  out.grads.feat.grad.assign(static_cast<std::size_t>(bundle.feat.param_count()), 0.0);
  out.grads.det.grad.assign(static_cast<std::size_t>(bundle.det.param_count()), 0.0);
  out.grads.dis_daf.grad.assign(static_cast<std::size_t>(bundle.dis_daf.param_count()), 0.0);
  out.grads.dis_eagr.grad.assign(static_cast<std::size_t>(bundle.dis_eagr.param_count()), 0.0);
  if (ns + nt == 0) return out;

  ForwardTrace trace_feat_s, trace_feat_t;
  if (ns > 0) trace_feat_s = forward_trace(bundle.feat, source.features);
  if (nt > 0) trace_feat_t = forward_trace(bundle.feat, target.features);
  Matrix f_s = ns > 0 ? trace_feat_s.output() : Matrix{};
  Matrix f_t = nt > 0 ? trace_feat_t.output() : Matrix{};

  Matrix df_s(ns, d);
  Matrix df_t(nt, d);

  // Detection loss on labeled source rows. Mined rows join only when asked.
  ForwardTrace trace_det_s;
  Matrix dlogits_s(ns, c);
  if (ns > 0) {
    trace_det_s = forward_trace(bundle.det, f_s);
    std::vector<int> det_labels = source.labels;
    if (!cfg.pim_in_det_loss)
      for (int i = 0; i < ns; ++i)
        if (source.roles[i] == Role::kMined) det_labels[i] = -1;
    XentResult xe = softmax_xent(trace_det_s.output(), det_labels);
    out.losses.det = xe.loss;
    dlogits_s = xe.dlogits;
  }

  // Instance-level domain discriminator over raw features, both domains.
  {
    Matrix disc_in = vstack(f_s, f_t);
    ForwardTrace trace_daf = forward_trace(bundle.dis_daf, disc_in);
    const int n = disc_in.rows;
    Matrix dlogit(n, 1);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      BceLogitsResult r = bce_logits(trace_daf.output().at(i, 0), i < ns ? 1 : 0);
      loss += r.loss / n;
      dlogit.at(i, 0) = r.dlogit / n;
    }
    out.losses.dis_daf = loss;
    BackwardResult back = backward(bundle.dis_daf, trace_daf, dlogit);
    accumulate(out.grads.dis_daf, back.grads);
    Matrix reversed = grad_reverse(back.input_grad, grl_mu);
    if (ns > 0) add_rows(df_s, slice_rows(reversed, 0, ns), 0);
    if (nt > 0) add_rows(df_t, slice_rows(reversed, ns, nt), 0);
  }

  // Relation regularizer: aggregate each domain's graph, refresh the bank
  // from confident aggregated rows, then pull noisy local structure toward
  // the global structure. Gradients flow only through the raw-feature path.
  if (cfg.mgrm && ns > 0) {
    if (update_bank) {
      auto refresh = [&](const Matrix& feats, Domain domain) {
        if (feats.rows == 0) return;
        IntraDomainGraph graph = build_graph(feats);
        Matrix aggregated = aggregate(graph, bundle.agg);
        Matrix probs = softmax_rows(forward(bundle.det, aggregated));
        std::vector<int> confident = confident_argmax(probs, 0.5);
        BatchPrototypes beta = batch_prototypes(aggregated, confident, c);
        bool any = false;
        for (bool p : beta.present) any = any || p;
        if (any) update_global(bundle.bank, beta, domain, cfg.mgrm_eq4_mode);
      };
      refresh(f_s, Domain::kSource);
      refresh(f_t, Domain::kTarget);
    }
    if (bundle.bank.any_source() && bundle.bank.any_target()) {
      std::vector<int> z_labels = source.labels;
      for (int i = 0; i < ns; ++i)
        if (source.roles[i] == Role::kMined) z_labels[i] = -1;
      // Z and Pi only overlap where a batch category already has a source
      // slot; skip quietly until the bank has warmed up that far.
      bool overlap = false;
      for (int i = 0; i < ns; ++i)
        if (z_labels[i] >= 0 && bundle.bank.source_present[z_labels[i]]) overlap = true;
      if (overlap) {
        MgrmPath path = mgrm_loss_path(f_s, z_labels, bundle.bank);
        out.losses.mgrm = path.loss;
        out.z = path.z;
        out.pi = global_relation(bundle.bank);
        for (int r = 0; r < ns; ++r)
          for (int col = 0; col < d; ++col)
            df_s.at(r, col) += cfg.lambda_mgrm * path.feature_grad.at(r, col);
      }
    }
  }

  // Entropy-aware discriminator over feature||probability rows.
  ForwardTrace trace_det_t;
  Matrix dlogits_t(nt, c);
  bool det_t_used = false;
  if (cfg.eagr) {
    Matrix probs_s, probs_t;
    if (ns > 0) probs_s = softmax_rows(trace_det_s.output());
    if (nt > 0) {
      trace_det_t = forward_trace(bundle.det, f_t);
      probs_t = softmax_rows(trace_det_t.output());
      det_t_used = true;
    }
    EagrBatch batch;
    batch.features = vstack(f_s, f_t);
    batch.probs = vstack(probs_s, probs_t);
    batch.domain_labels.assign(static_cast<std::size_t>(ns), 1);
    batch.domain_labels.insert(batch.domain_labels.end(), static_cast<std::size_t>(nt), 0);
    DiscLoss dl = eagr_disc_loss(batch, bundle.dis_eagr, grl_mu);
    out.losses.dis_eagr = dl.loss;
    out.mean_entropy = dl.mean_entropy;
    accumulate(out.grads.dis_eagr, dl.disc_grads);
    if (ns > 0) {
      add_rows(df_s, slice_rows(dl.feature_grad, 0, ns), 0);
      Matrix dlog = softmax_rows_backward(probs_s, slice_rows(dl.prob_grad, 0, ns));
      add_rows(dlogits_s, dlog, 0);
    }
    if (nt > 0) {
      add_rows(df_t, slice_rows(dl.feature_grad, ns, nt), 0);
      dlogits_t = softmax_rows_backward(probs_t, slice_rows(dl.prob_grad, ns, nt));
    }
  }

  if (ns > 0) {
    BackwardResult back = backward(bundle.det, trace_det_s, dlogits_s);
    accumulate(out.grads.det, back.grads);
    add_rows(df_s, back.input_grad, 0);
  }
  if (det_t_used) {
    BackwardResult back = backward(bundle.det, trace_det_t, dlogits_t);
    accumulate(out.grads.det, back.grads);
    add_rows(df_t, back.input_grad, 0);
  }
  if (ns > 0) accumulate(out.grads.feat, backward(bundle.feat, trace_feat_s, df_s).grads);
  if (nt > 0) accumulate(out.grads.feat, backward(bundle.feat, trace_feat_t, df_t).grads);

  out.losses.total = out.losses.det + cfg.lambda_mgrm * out.losses.mgrm + out.losses.dis_daf +
                     out.losses.dis_eagr;
  out.grads.feat.loss = out.losses.total;
  out.grads.det.loss = out.losses.total;
  out.grads.dis_daf.loss = out.losses.dis_daf;
  out.grads.dis_eagr.loss = out.losses.dis_eagr;
  return out;
}

StepEval total_loss(ModelBundle& bundle, const TrainBatch& source, const TrainBatch& target,
                    const TrainConfig& cfg, double grl_mu) {
  if (source.features.rows == 0 || target.features.rows == 0)
    throw std::invalid_argument("total_loss needs non-empty source and target batches");
  if (static_cast<int>(source.labels.size()) != source.features.rows ||
      static_cast<int>(source.roles.size()) != source.features.rows)
    throw std::invalid_argument("source batch labels/roles must match its row count");
  return eval_losses(bundle, source, target, cfg, grl_mu, true);
}

std::vector<Detection> detect(const ModelBundle& bundle, const std::vector<Scene>& scenes) {
  std::vector<Detection> out;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s) {
    const Scene& scene = scenes[s];
    if (scene.proposals.empty()) continue;
    Matrix probs = softmax_rows(forward(bundle.det, forward(bundle.feat, proposal_matrix(scene))));
    for (int i = 0; i < probs.rows; ++i) {
      int best = 0;
      for (int cc = 1; cc < probs.cols; ++cc)
        if (probs.at(i, cc) > probs.at(i, best)) best = cc;
      out.push_back({s, scene.proposals[i].box, best,
                     probs.at(i, best) * scene.proposals[i].objectness});
    }
  }
  return out;
}

double target_proposal_accuracy(const ModelBundle& bundle, const std::vector<Scene>& scenes) {
  int total = 0, correct = 0;
  for (const Scene& scene : scenes) {
    if (scene.proposals.empty()) continue;
    Matrix logits = forward(bundle.det, forward(bundle.feat, proposal_matrix(scene)));
    for (int i = 0; i < logits.rows; ++i) {
      const Proposal& p = scene.proposals[i];
      if (!p.matched_gt) continue;
      int best = 0;
      for (int cc = 1; cc < logits.cols; ++cc)
        if (logits.at(i, cc) > logits.at(i, best)) best = cc;
      ++total;
      if (best == scene.objects[*p.matched_gt].category) ++correct;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

TrainResult train(const TrainConfig& cfg) {
  validate_train_config(cfg);
  auto t0 = std::chrono::steady_clock::now();

  TrainResult result(cfg);
  Rng root(cfg.seed);
  result.source_scenes = generate_scenes(cfg.scenario, Domain::kSource, root);
  result.target_scenes = generate_scenes(cfg.scenario, Domain::kTarget, root);
  std::uint64_t noise_seed = root.stream("noise-seed").next_u64();
  result.corruption =
      inject_label_noise(result.source_scenes, cfg.scenario, cfg.scenario.rho, noise_seed);
  init_bundle(result.bundle, root);

  std::vector<TruthBox> target_truth = ground_truth_from_scenes(result.target_scenes);
  Rng batch_rng = root.stream("batches");
  const int c = cfg.scenario.categories;
  const int d_raw = cfg.scenario.feature_dim;

  auto abort_run = [&](int step, const std::string& why) {
    result.record.aborted = true;
    result.record.abort_reason = "step " + std::to_string(step) + ": " + why;
  };

  StepEval last_eval;
  for (int epoch = 0; epoch < cfg.epochs && !result.record.aborted; ++epoch) {
    InstancePool pool = build_pools(result.bundle, result.source_scenes, result.target_scenes, cfg);
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int step = epoch * cfg.steps_per_epoch + s;
      const double lr = lr_at(cfg, step);
      const double mu = mu_at(cfg, step);

      StepRow row;
      row.step = step;
      row.lr = lr;
      row.grl_mu = mu;
      row.mined_source = pool.mined_source;
      row.mined_target = pool.mined_target;

      auto one_pass = [&](bool first) -> bool {
        TrainBatch src = draw_batch(pool.source, result.source_scenes, cfg.batch_source, d_raw,
                                    batch_rng);
        TrainBatch tgt = draw_batch(pool.target, result.target_scenes, cfg.batch_target, d_raw,
                                    batch_rng);
        if (first) row.report = role_report(result.bundle, src, tgt, cfg, mu);
        StepEval ev = eval_losses(result.bundle, src, tgt, cfg, mu, true);
        if (!std::isfinite(ev.losses.total) || ev.losses.total > 1e6) {
          abort_run(step, "loss diverged (" + fmt_g(ev.losses.total) + ")");
          return false;
        }
        if (first) {
          row.losses = ev.losses;
          row.mean_entropy = ev.mean_entropy;
        }
        if (ev.z.categories > 0) {
          last_eval.z = ev.z;
          last_eval.pi = ev.pi;
        }
        // Inner steps take the meta rate, scaled by the same decay factor as
        // the outer rate so late training still settles.
        double step_lr = cfg.eagr ? cfg.meta.inner_lr * (lr / cfg.lr) : lr;
        sgd_step(result.bundle.feat, ev.grads.feat, step_lr);
        sgd_step(result.bundle.det, ev.grads.det, step_lr);
        sgd_step(result.bundle.dis_daf, ev.grads.dis_daf, step_lr);
        sgd_step(result.bundle.dis_eagr, ev.grads.dis_eagr, step_lr);
        if (!bundle_finite(result.bundle)) {
          abort_run(step, "non-finite parameters after update");
          return false;
        }
        return true;
      };

      if (cfg.eagr) {
        // Meta step: snapshot the task nets, run the inner steps on fresh
        // batches, interpolate back. Discriminator updates persist as-is.
        std::vector<double> theta_before = flatten_meta(result.bundle);
        bool ok = true;
        for (int k = 0; k < cfg.meta.inner_steps && ok; ++k) ok = one_pass(k == 0);
        if (!ok) {
          result.record.rows.push_back(row);
          break;
        }
        std::vector<double> theta_after = flatten_meta(result.bundle);
        write_meta(result.bundle, meta_update(theta_before, theta_after, cfg.meta.meta_weight,
                                              cfg.meta.base));
        result.record.rows.push_back(row);
      } else {
        if (!one_pass(true)) {
          result.record.rows.push_back(row);
          break;
        }
        result.record.rows.push_back(row);
      }
    }
    if (result.record.aborted) break;

    EvalSummary summary =
        evaluate(detect(result.bundle, result.target_scenes), target_truth, c);
    result.record.epoch_map.push_back(summary.map);
    result.final_eval = summary;
    if (cfg.mgrm) {
      std::string dump = "# pi\n";
      if (last_eval.pi.categories > 0) {
        dump += relation_csv(last_eval.pi);
      } else {
        dump += relation_csv(RelationMatrix{c, Matrix(c, c), std::vector<bool>(
                                                static_cast<std::size_t>(c) * c, false)});
      }
      dump += "# z\n";
      if (last_eval.z.categories > 0) {
        dump += relation_csv(last_eval.z);
      } else {
        dump += relation_csv(RelationMatrix{c, Matrix(c, c), std::vector<bool>(
                                                static_cast<std::size_t>(c) * c, false)});
      }
      result.relmat_csv.push_back(dump);
    }
  }

  if (cfg.epochs == 0)
    result.final_eval = evaluate(detect(result.bundle, result.target_scenes), target_truth, c);

  result.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::string run_csv(const RunRecord& record) {
  std::string out =
      "step,lr,grl_mu,loss_det,loss_mgrm,loss_daf,loss_eagr,loss_total,"
      "dot_cln_cpt,dot_cln_t,dot_cpt_t,cos_cln_cpt,cos_cln_t,cos_cpt_t,"
      "mean_entropy,mined_source,mined_target\n";
  for (const StepRow& r : record.rows) {
    out += std::to_string(r.step);
    out += ',' + fmt_g(r.lr) + ',' + fmt_g(r.grl_mu);
    out += ',' + fmt_g(r.losses.det) + ',' + fmt_g(r.losses.mgrm) + ',' +
           fmt_g(r.losses.dis_daf) + ',' + fmt_g(r.losses.dis_eagr) + ',' +
           fmt_g(r.losses.total);
    out += ',' + fmt_g(r.report.dot_cln_cpt) + ',' + fmt_g(r.report.dot_cln_t) + ',' +
           fmt_g(r.report.dot_cpt_t);
    out += ',' + fmt_g(r.report.cos_cln_cpt()) + ',' + fmt_g(r.report.cos_cln_t()) + ',' +
           fmt_g(r.report.cos_cpt_t());
    out += ',' + fmt_g(r.mean_entropy);
    out += ',' + std::to_string(r.mined_source) + ',' + std::to_string(r.mined_target);
    out += '\n';
  }
  return out;
}

std::string detections_json(const std::vector<Detection>& detections) {
  json j;
  j["schema"] = "detections.v1";
  json list = json::array();
  for (const Detection& d : detections) {
    list.push_back({{"scene", d.scene},
                    {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
                    {"category", d.category},
                    {"score", d.score}});
  }
  j["detections"] = list;
  return j.dump(2) + "\n";
}

std::vector<Detection> detections_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("detections are not valid JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("schema", "") != std::string("detections.v1"))
    throw std::invalid_argument("expected schema \"detections.v1\"");
  if (!j.contains("detections") || !j.at("detections").is_array())
    throw std::invalid_argument("detections.v1 requires a \"detections\" array");
  reject_unknown_keys(j, {"schema", "detections"}, "detections.v1");
  std::vector<Detection> out;
  try {
    for (const json& e : j.at("detections")) {
      reject_unknown_keys(e, {"scene", "box", "category", "score"}, "detection entry");
      Detection d;
      d.scene = e.at("scene").get<int>();
      auto box = e.at("box").get<std::vector<double>>();
      if (box.size() != 4) throw std::invalid_argument("detection box must have 4 values");
      d.box = {box[0], box[1], box[2], box[3]};
      d.category = e.at("category").get<int>();
      d.score = e.at("score").get<double>();
      out.push_back(d);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed detection entry: ") + e.what());
  }
  return out;
}

std::string eval_summary_json(const EvalSummary& summary) {
  json j = summary_to_json(summary);
  j["schema"] = "metrics.v1";
  return j.dump(2) + "\n";
}

InterchangeEval evaluate_interchange(const std::string& detections_json_text,
                                     const std::string& scenes_json_text) {
  const std::vector<Detection> detections = detections_from_json(detections_json_text);
  const std::vector<TruthBox> truth = ground_truth_from_scenes(scenes_from_json(scenes_json_text));
  InterchangeEval out;
  for (const TruthBox& t : truth) out.categories = std::max(out.categories, t.category + 1);
  for (const Detection& d : detections) out.categories = std::max(out.categories, d.category + 1);
  if (out.categories == 0)
    throw std::invalid_argument("evaluate_interchange: no categories in either input");
  out.summary = evaluate(detections, truth, out.categories);
  return out;
}

std::string metrics_json(const TrainResult& result) {
  json j = summary_to_json(result.final_eval);
  j["schema"] = "metrics.v1";
  j["final_map"] = result.final_eval.map;
  j["per_epoch_map"] = result.record.epoch_map;
  j["steps"] = result.record.rows.size();
  j["aborted"] = result.record.aborted;
  j["abort_reason"] = result.record.abort_reason;
  j["wall_seconds"] = result.record.wall_seconds;
  j["score_rule"] = "softmax probability times objectness";
  return j.dump(2) + "\n";
}

std::vector<AblationRow> ablation_grid(const TrainConfig& cfg,
                                       const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("ablation grid needs at least one seed");
  std::vector<AblationRow> rows = {
      {"baseline", false, false, false, {}, 0.0, 0.0},
      {"+PIM", true, false, false, {}, 0.0, 0.0},
      {"+PIM+MGRM", true, true, false, {}, 0.0, 0.0},
      {"+PIM+EAGR", true, false, true, {}, 0.0, 0.0},
      {"full", true, true, true, {}, 0.0, 0.0},
  };
  for (AblationRow& row : rows) {
    for (std::uint64_t seed : seeds) {
      TrainConfig run_cfg = cfg;
      run_cfg.pim = row.pim;
      run_cfg.mgrm = row.mgrm;
      run_cfg.eagr = row.eagr;
      run_cfg.seed = seed;
      run_cfg.scenario.seed = seed;
      TrainResult result = train(run_cfg);
      row.maps.push_back(result.final_eval.map);
    }
    double mean = 0.0;
    for (double m : row.maps) mean += m;
    mean /= row.maps.size();
    double var = 0.0;
    for (double m : row.maps) var += (m - mean) * (m - mean);
    row.mean = mean;
    row.sd = row.maps.size() > 1 ? std::sqrt(var / (row.maps.size() - 1)) : 0.0;
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "label,pim,mgrm,eagr,mean_map,sd_map";
  const std::size_t n = rows.empty() ? 0 : rows[0].maps.size();
  for (std::size_t i = 0; i < n; ++i) out += ",map_run_" + std::to_string(i);
  out += '\n';
  for (const AblationRow& r : rows) {
    out += r.label;
    out += ',' + std::to_string(r.pim ? 1 : 0) + ',' + std::to_string(r.mgrm ? 1 : 0) + ',' +
           std::to_string(r.eagr ? 1 : 0);
    out += ',' + fmt_g(r.mean) + ',' + fmt_g(r.sd);
    for (double m : r.maps) out += ',' + fmt_g(m);
    out += '\n';
  }
  return out;
}

}  // namespace nlte
