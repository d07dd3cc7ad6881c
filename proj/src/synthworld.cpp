#include "nlte/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "nlte/matrix.hpp"
#include "nlte/ops.hpp"

namespace nlte {

void validate_config(const ScenarioConfig& cfg) {
  if (cfg.categories < 2) throw std::invalid_argument("config: need at least 2 categories");
  if (cfg.feature_dim < 1) throw std::invalid_argument("config: feature_dim must be positive");
  if (cfg.scenes_per_domain < 0 || cfg.objects_per_scene < 0 ||
      cfg.background_proposals < 0 || cfg.proposals_per_object < 1)
    throw std::invalid_argument("config: negative scene sizing");
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0))
    throw std::invalid_argument("config: rho must lie in [0,1]");
  if (cfg.shift_scale == 0.0)
    throw std::invalid_argument("config: shift map must stay invertible (scale != 0)");
  if (!(cfg.box_min > 0.0) || !(cfg.box_max >= cfg.box_min) ||
      !(cfg.canvas_size >= cfg.box_max))
    throw std::invalid_argument("config: box size range does not fit the canvas");
  if (!(cfg.proposal_jitter >= 0.0) || cfg.proposal_jitter >= 0.5)
    throw std::invalid_argument("config: proposal_jitter must lie in [0, 0.5)");
  if (!(cfg.bg_obj_alpha > 0.0) || !(cfg.bg_obj_beta > 0.0))
    throw std::invalid_argument("config: beta parameters must be positive");
  if (!cfg.category_means.empty()) {
    if (static_cast<int>(cfg.category_means.size()) != cfg.categories)
      throw std::invalid_argument("config: one mean per category required");
    for (const auto& m : cfg.category_means)
      if (static_cast<int>(m.size()) != cfg.feature_dim)
        throw std::invalid_argument("config: mean dimension mismatch");
  }
  if (!cfg.category_stddevs.empty()) {
    if (static_cast<int>(cfg.category_stddevs.size()) != cfg.categories)
      throw std::invalid_argument("config: one stddev vector per category required");
    for (const auto& s : cfg.category_stddevs) {
      if (static_cast<int>(s.size()) != cfg.feature_dim)
        throw std::invalid_argument("config: stddev dimension mismatch");
      for (double v : s)
        if (!(v > 0.0)) throw std::invalid_argument("config: degenerate covariance");
    }
  }
  if (!(cfg.background_std > 0.0))
    throw std::invalid_argument("config: degenerate covariance");
}

std::vector<std::vector<double>> resolved_means(const ScenarioConfig& cfg) {
  if (!cfg.category_means.empty()) return cfg.category_means;
  std::vector<std::vector<double>> means(cfg.categories);
  // Fixed stream: defaults depend only on shape, never on the run seed.
  Rng base = Rng(0x636174u).stream("category-means");
  for (int c = 0; c < cfg.categories; ++c) {
    Rng r = base.stream(static_cast<std::uint64_t>(c));
    std::vector<double> m(cfg.feature_dim);
    double n2 = 0.0;
    for (double& v : m) {
      v = r.normal();
      n2 += v * v;
    }
    const double scale = cfg.mean_scale / std::max(std::sqrt(n2), 1e-12);
    for (double& v : m) v *= scale;
    means[c] = std::move(m);
  }
  return means;
}

std::vector<std::vector<double>> resolved_stddevs(const ScenarioConfig& cfg) {
  if (!cfg.category_stddevs.empty()) return cfg.category_stddevs;
  return std::vector<std::vector<double>>(
      cfg.categories, std::vector<double>(cfg.feature_dim, 2.5));
}

std::vector<double> shift_map(const ScenarioConfig& cfg, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  const double c = std::cos(cfg.shift_rotate);
  const double s = std::sin(cfg.shift_rotate);
  for (std::size_t d = 0; d + 1 < y.size(); d += 2) {
    const double a = y[d], b = y[d + 1];
    y[d] = c * a - s * b;
    y[d + 1] = s * a + c * b;
  }
  const double off = cfg.shift_offset / std::sqrt(static_cast<double>(y.size()));
  for (double& v : y) v = cfg.shift_scale * v + off;
  return y;
}

namespace {

Box draw_box(const ScenarioConfig& cfg, Rng& rng) {
  const double w = rng.uniform(cfg.box_min, cfg.box_max);
  const double h = rng.uniform(cfg.box_min, cfg.box_max);
  const double cx = rng.uniform(w / 2.0, cfg.canvas_size - w / 2.0);
  const double cy = rng.uniform(h / 2.0, cfg.canvas_size - h / 2.0);
  return Box{cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
}

std::vector<double> draw_feature(const ScenarioConfig& cfg, Domain domain,
                                 std::span<const double> mean,
                                 std::span<const double> stddev, Rng& rng) {
  std::vector<double> f(cfg.feature_dim);
  for (int d = 0; d < cfg.feature_dim; ++d) f[d] = mean[d] + stddev[d] * rng.normal();
  if (domain == Domain::kTarget) {
    f = shift_map(cfg, f);
    for (double& v : f) v += cfg.noise_scale * rng.normal();
  }
  return f;
}

double max_iou_with_objects(const Box& b, const std::vector<GtObject>& objects) {
  double best = 0.0;
  for (const auto& o : objects) best = std::max(best, iou(b, o.box));
  return best;
}

}  // namespace

Scene generate_scene(const ScenarioConfig& cfg, Domain domain, Rng rng) {
  validate_config(cfg);
  const auto means = resolved_means(cfg);
  const auto stddevs = resolved_stddevs(cfg);
  const std::vector<double> bg_mean(cfg.feature_dim, 0.0);
  const std::vector<double> bg_std(cfg.feature_dim, cfg.background_std);

  Scene scene;
  scene.domain = domain;

  for (int i = 0; i < cfg.objects_per_scene; ++i) {
    GtObject obj;
    obj.box = draw_box(cfg, rng);
    obj.category = rng.uniform_int(cfg.categories);
    // Target annotations exist only for the evaluator.
    obj.annotated = domain == Domain::kSource;
    scene.objects.push_back(obj);
  }

  for (int i = 0; i < static_cast<int>(scene.objects.size()); ++i) {
    const GtObject& obj = scene.objects[i];
    const double w = obj.box.x2 - obj.box.x1;
    const double h = obj.box.y2 - obj.box.y1;
    const double cx = (obj.box.x1 + obj.box.x2) / 2.0;
    const double cy = (obj.box.y1 + obj.box.y2) / 2.0;
    for (int p = 0; p < cfg.proposals_per_object; ++p) {
      const double j = cfg.proposal_jitter;
      const double pw = w * rng.uniform(1.0 - j, 1.0 + j);
      const double ph = h * rng.uniform(1.0 - j, 1.0 + j);
      const double pcx = cx + rng.uniform(-j, j) * w;
      const double pcy = cy + rng.uniform(-j, j) * h;
      Proposal prop;
      prop.box = Box{pcx - pw / 2.0, pcy - ph / 2.0, pcx + pw / 2.0, pcy + ph / 2.0};
      prop.feature = draw_feature(cfg, domain, means[obj.category], stddevs[obj.category], rng);
      const double jit = rng.normal(0.0, cfg.obj_jitter_std);
      prop.objectness = sigmoid(cfg.obj_gain * (max_iou_with_objects(prop.box, scene.objects) + jit) + cfg.obj_bias);
      prop.matched_gt = i;
      scene.proposals.push_back(std::move(prop));
    }
  }

  for (int p = 0; p < cfg.background_proposals; ++p) {
    Proposal prop;
    prop.box = draw_box(cfg, rng);
    prop.feature = draw_feature(cfg, domain, bg_mean, bg_std, rng);
    prop.objectness = rng.beta(cfg.bg_obj_alpha, cfg.bg_obj_beta);
    scene.proposals.push_back(std::move(prop));
  }
  return scene;
}

std::vector<Scene> generate_scenes(const ScenarioConfig& cfg, Domain domain, const Rng& root) {
  validate_config(cfg);
  const Rng base = root.stream(domain == Domain::kSource ? "scenes-source" : "scenes-target");
  std::vector<Scene> scenes;
  scenes.reserve(cfg.scenes_per_domain);
  for (int i = 0; i < cfg.scenes_per_domain; ++i)
    scenes.push_back(generate_scene(cfg, domain, base.stream(static_cast<std::uint64_t>(i))));
  return scenes;
}

CorruptionLog inject_label_noise(std::vector<Scene>& scenes, const ScenarioConfig& cfg,
                                 double rho, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0))
    throw std::invalid_argument("inject_label_noise: rho must lie in [0,1]");
  for (const auto& s : scenes)
    if (s.domain != Domain::kSource)
      throw std::invalid_argument("inject_label_noise: only source scenes are corrupted");

  std::vector<std::pair<int, int>> instances;
  for (int s = 0; s < static_cast<int>(scenes.size()); ++s)
    for (int o = 0; o < static_cast<int>(scenes[s].objects.size()); ++o)
      instances.emplace_back(s, o);

  const std::size_t n = instances.size();
  // Epsilon keeps exact decimal products (0.6 * 10) from losing a unit to
  // binary representation error; genuine fractional products sit far from
  // the next integer.
  const std::size_t k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(n) + 1e-9));

  Rng rng = Rng(seed).stream("label-noise");
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n - i)));
    std::swap(instances[i], instances[j]);
  }
  std::vector<std::pair<int, int>> selected(instances.begin(), instances.begin() + k);
  std::sort(selected.begin(), selected.end());

  CorruptionLog log;
  log.reserve(k);
  for (const auto& [s, o] : selected) {
    GtObject& obj = scenes[s].objects[o];
    CorruptionRecord rec;
    rec.scene_id = s;
    rec.object_id = o;
    rec.original_category = obj.category;
    const int outcomes = cfg.background_in_noise ? cfg.categories : cfg.categories - 1;
    const int draw = rng.uniform_int(outcomes);
    if (cfg.background_in_noise && draw == cfg.categories - 1) {
      obj.annotated = false;
      rec.removed = true;
    } else {
      // draw indexes the ascending list of the C-1 other categories.
      const int new_cat = draw < obj.category ? draw : draw + 1;
      obj.corrupted_from = obj.category;
      obj.category = new_cat;
      rec.new_category = new_cat;
    }
    log.push_back(rec);
  }
  return log;
}

void restore_from_log(std::vector<Scene>& scenes, const CorruptionLog& log) {
  for (const auto& rec : log) {
    if (rec.scene_id < 0 || rec.scene_id >= static_cast<int>(scenes.size()))
      throw std::invalid_argument("restore_from_log: scene_id out of range");
    auto& objects = scenes[rec.scene_id].objects;
    if (rec.object_id < 0 || rec.object_id >= static_cast<int>(objects.size()))
      throw std::invalid_argument("restore_from_log: object_id out of range");
    GtObject& obj = objects[rec.object_id];
    if (rec.removed) {
      obj.annotated = true;
    } else {
      obj.category = rec.original_category;
      obj.corrupted_from.reset();
    }
  }
}

std::string corruption_log_csv(const CorruptionLog& log) {
  std::ostringstream out;
  out << "scene_id,object_id,original_category,new_category_or_REMOVED\n";
  for (const auto& rec : log) {
    out << rec.scene_id << ',' << rec.object_id << ',' << rec.original_category << ',';
    if (rec.removed)
      out << "REMOVED";
    else
      out << rec.new_category;
    out << '\n';
  }
  return out.str();
}

CorruptionLog parse_corruption_log_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "scene_id,object_id,original_category,new_category_or_REMOVED")
    throw std::invalid_argument("corruption log: missing or wrong header");
  CorruptionLog log;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f0, f1, f2, f3;
    if (!std::getline(ls, f0, ',') || !std::getline(ls, f1, ',') ||
        !std::getline(ls, f2, ',') || !std::getline(ls, f3))
      throw std::invalid_argument("corruption log: bad row at line " + std::to_string(lineno));
    CorruptionRecord rec;
    try {
      rec.scene_id = std::stoi(f0);
      rec.object_id = std::stoi(f1);
      rec.original_category = std::stoi(f2);
      if (f3 == "REMOVED")
        rec.removed = true;
      else
        rec.new_category = std::stoi(f3);
    } catch (const std::exception&) {
      throw std::invalid_argument("corruption log: bad value at line " + std::to_string(lineno));
    }
    log.push_back(rec);
  }
  return log;
}

namespace {

nlohmann::json box_to_json(const Box& b) {
  return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2});
}

Box box_from_json(const nlohmann::json& j, const char* where) {
  if (!j.is_array() || j.size() != 4 || !j[0].is_number() || !j[1].is_number() ||
      !j[2].is_number() || !j[3].is_number())
    throw std::invalid_argument(std::string(where) + ": box must be [x1,y1,x2,y2]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  validate_box(b);
  return b;
}

}  // namespace

std::string scenes_to_json(const std::vector<Scene>& scenes) {
  nlohmann::json root;
  root["schema"] = "scene.v1";
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& scene : scenes) {
    nlohmann::json js;
    js["domain"] = domain_name(scene.domain);
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : scene.objects) {
      objs.push_back({{"box", box_to_json(o.box)},
                      {"category", o.category},
                      {"annotated", o.annotated}});
    }
    js["objects"] = std::move(objs);
    nlohmann::json props = nlohmann::json::array();
    for (const auto& p : scene.proposals) {
      props.push_back({{"box", box_to_json(p.box)},
                       {"feature", p.feature},
                       {"objectness", p.objectness}});
    }
    js["proposals"] = std::move(props);
    arr.push_back(std::move(js));
  }
  root["scenes"] = std::move(arr);
  return root.dump(2) + "\n";
}

std::vector<Scene> scenes_from_json(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("scene json: ") + e.what());
  }
  if (!root.is_object() || root.value("schema", "") != "scene.v1")
    throw std::invalid_argument("scene json: expected schema scene.v1");
  if (!root.contains("scenes") || !root["scenes"].is_array())
    throw std::invalid_argument("scene json: missing scenes array");
  std::vector<Scene> scenes;
  for (const auto& js : root["scenes"]) {
    Scene scene;
    const std::string dom = js.value("domain", "");
    if (dom == "source")
      scene.domain = Domain::kSource;
    else if (dom == "target")
      scene.domain = Domain::kTarget;
    else
      throw std::invalid_argument("scene json: domain must be source or target");
    if (!js.contains("objects") || !js["objects"].is_array() ||
        !js.contains("proposals") || !js["proposals"].is_array())
      throw std::invalid_argument("scene json: objects and proposals arrays required");
    for (const auto& jo : js["objects"]) {
      GtObject o;
      o.box = box_from_json(jo.at("box"), "scene json object");
      if (!jo.contains("category") || !jo["category"].is_number_integer() ||
          jo["category"].get<int>() < 0)
        throw std::invalid_argument("scene json: object category must be a non-negative integer");
      o.category = jo["category"].get<int>();
      if (!jo.contains("annotated") || !jo["annotated"].is_boolean())
        throw std::invalid_argument("scene json: object annotated flag required");
      o.annotated = jo["annotated"].get<bool>();
      scene.objects.push_back(std::move(o));
    }
    for (const auto& jp : js["proposals"]) {
      Proposal p;
      p.box = box_from_json(jp.at("box"), "scene json proposal");
      if (!jp.contains("feature") || !jp["feature"].is_array())
        throw std::invalid_argument("scene json: proposal feature must be an array");
      for (const auto& v : jp["feature"]) {
        if (!v.is_number()) throw std::invalid_argument("scene json: feature entries must be numbers");
        p.feature.push_back(v.get<double>());
      }
      if (!jp.contains("objectness") || !jp["objectness"].is_number())
        throw std::invalid_argument("scene json: proposal objectness required");
      p.objectness = jp["objectness"].get<double>();
      if (!(p.objectness >= 0.0 && p.objectness <= 1.0))
        throw std::invalid_argument("scene json: objectness must lie in [0,1]");
      scene.proposals.push_back(std::move(p));
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

const char* domain_name(Domain d) {
  return d == Domain::kSource ? "source" : "target";
}

}  // namespace nlte
