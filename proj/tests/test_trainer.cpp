#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "nlte/ops.hpp"
#include "nlte/trainer.hpp"

using namespace nlte;

namespace {

// Small enough that a full run takes milliseconds, large enough that every
// loss term sees real data.
TrainConfig small_config() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 10;
  cfg.decay_steps = {12, 16};
  cfg.batch_source = 8;
  cfg.batch_target = 8;
  cfg.scenario.categories = 3;
  cfg.scenario.feature_dim = 6;
  cfg.scenario.scenes_per_domain = 20;
  cfg.scenario.objects_per_scene = 3;
  cfg.scenario.background_proposals = 4;
  cfg.scenario.rho = 0.3;
  return cfg;
}

// Hand-built batches at the scale the generated scenarios use, so every head
// produces non-trivial values and the detector is confident enough to seed
// the prototype bank.
struct MicroSetup {
  ModelBundle bundle;
  TrainBatch source;
  TrainBatch target;

  MicroSetup() : bundle(4, 3) {
    init_bundle(bundle, Rng(11));
    source.features = Matrix::from_rows({{6.0, -1.5, 4.0, 10.0},
                                         {-2.5, 7.0, 1.0, -5.5},
                                         {4.5, 4.5, -8.0, 2.0},
                                         {10.5, -6.0, 2.5, 3.0}});
    source.labels = {0, 1, 2, 0};
    source.roles = {Role::kClean, Role::kCorrupted, Role::kClean, Role::kClean};
    target.features = Matrix::from_rows({{2.0, 5.5, -3.5, 7.5},
                                         {-6.5, 1.0, 9.0, -1.0},
                                         {3.5, -4.5, 1.5, 5.0}});
    target.labels = {-1, -1, -1};
    target.roles = {Role::kTarget, Role::kTarget, Role::kTarget};
  }
};

TrainConfig micro_config() {
  TrainConfig cfg;
  cfg.scenario.categories = 3;
  cfg.scenario.feature_dim = 4;
  cfg.pim = true;
  cfg.mgrm = true;
  cfg.eagr = true;
  return cfg;
}

}  // namespace

TEST_CASE("loss breakdown stays additive at every logged step") {
  TrainConfig cfg = small_config();
  cfg.pim = cfg.mgrm = cfg.eagr = true;
  const TrainResult r = train(cfg);
  REQUIRE(!r.record.rows.empty());
  for (const StepRow& row : r.record.rows) {
    const double total = row.losses.det + cfg.lambda_mgrm * row.losses.mgrm +
                         row.losses.dis_daf + row.losses.dis_eagr;
    CHECK(std::abs(row.losses.total - total) <= 1e-12);
  }
}

TEST_CASE("disabled modules contribute exactly zero") {
  MicroSetup s;
  TrainConfig cfg = micro_config();
  cfg.pim = cfg.mgrm = cfg.eagr = false;
  cfg.lambda_mgrm = 123.0;  // must be inert with the flag off
  const StepEval ev = total_loss(s.bundle, s.source, s.target, cfg);
  CHECK(ev.losses.mgrm == 0.0);
  CHECK(ev.losses.dis_eagr == 0.0);
  CHECK(ev.losses.total == ev.losses.det + ev.losses.dis_daf);
  for (double g : ev.grads.dis_eagr.grad) CHECK(g == 0.0);
}

TEST_CASE("zero relation weight removes the relation gradient") {
  MicroSetup on_setup, off_setup;
  TrainConfig on_cfg = micro_config();
  on_cfg.pim = on_cfg.eagr = false;
  on_cfg.mgrm = true;
  on_cfg.lambda_mgrm = 0.0;
  TrainConfig off_cfg = on_cfg;
  off_cfg.mgrm = false;

  // Warm the bank so the relation term actually evaluates in the "on" run.
  (void)total_loss(on_setup.bundle, on_setup.source, on_setup.target, on_cfg);
  const StepEval on = total_loss(on_setup.bundle, on_setup.source, on_setup.target, on_cfg);
  CHECK(on.losses.mgrm > 0.0);

  (void)total_loss(off_setup.bundle, off_setup.source, off_setup.target, off_cfg);
  const StepEval off = total_loss(off_setup.bundle, off_setup.source, off_setup.target, off_cfg);
  REQUIRE(on.grads.feat.grad.size() == off.grads.feat.grad.size());
  for (std::size_t i = 0; i < on.grads.feat.grad.size(); ++i)
    CHECK(on.grads.feat.grad[i] == off.grads.feat.grad[i]);
  CHECK(on.losses.total == off.losses.total);
}

TEST_CASE("micro-batch components match the module-level computations") {
  MicroSetup s;
  TrainConfig cfg = micro_config();
  const double mu = 0.8;

  // Replicate the bank refresh on a copy before the loss call mutates it.
  ModelBundle replica = s.bundle;
  const Matrix f_s = forward(replica.feat, s.source.features);
  const Matrix f_t = forward(replica.feat, s.target.features);
  const auto refresh = [&](const Matrix& f, Domain domain) {
    IntraDomainGraph graph = build_graph(f);
    Matrix aggregated = aggregate(graph, replica.agg);
    Matrix probs = softmax_rows(forward(replica.det, aggregated));
    BatchPrototypes beta = batch_prototypes(aggregated, confident_argmax(probs, 0.5), 3);
    bool any = false;
    for (bool p : beta.present) any = any || p;
    if (any) update_global(replica.bank, beta, domain, cfg.mgrm_eq4_mode);
  };
  refresh(f_s, Domain::kSource);
  refresh(f_t, Domain::kTarget);

  const StepEval ev = total_loss(s.bundle, s.source, s.target, cfg, mu);

  const double det = softmax_xent(forward(s.bundle.det, f_s), s.source.labels).loss;
  CHECK(ev.losses.det == doctest::Approx(det).epsilon(1e-12));

  Matrix stacked(f_s.rows + f_t.rows, f_s.cols);
  for (int r = 0; r < f_s.rows; ++r)
    for (int c = 0; c < f_s.cols; ++c) stacked.at(r, c) = f_s.at(r, c);
  for (int r = 0; r < f_t.rows; ++r)
    for (int c = 0; c < f_t.cols; ++c) stacked.at(f_s.rows + r, c) = f_t.at(r, c);
  const Matrix daf_logits = forward(s.bundle.dis_daf, stacked);
  double daf = 0.0;
  for (int i = 0; i < stacked.rows; ++i)
    daf += bce_logits(daf_logits.at(i, 0), i < f_s.rows ? 1 : 0).loss / stacked.rows;
  CHECK(ev.losses.dis_daf == doctest::Approx(daf).epsilon(1e-12));

  Matrix probs(stacked.rows, 3);
  const Matrix probs_s = softmax_rows(forward(s.bundle.det, f_s));
  const Matrix probs_t = softmax_rows(forward(s.bundle.det, f_t));
  for (int r = 0; r < f_s.rows; ++r)
    for (int c = 0; c < 3; ++c) probs.at(r, c) = probs_s.at(r, c);
  for (int r = 0; r < f_t.rows; ++r)
    for (int c = 0; c < 3; ++c) probs.at(f_s.rows + r, c) = probs_t.at(r, c);
  std::vector<int> domains(stacked.rows, 0);
  for (int i = 0; i < f_s.rows; ++i) domains[i] = 1;
  const DiscLoss disc = eagr_disc_loss({stacked, probs, domains}, s.bundle.dis_eagr, mu);
  CHECK(ev.losses.dis_eagr == doctest::Approx(disc.loss).epsilon(1e-12));
  CHECK(ev.mean_entropy == doctest::Approx(disc.mean_entropy).epsilon(1e-12));

  const MgrmPath path = mgrm_loss_path(f_s, s.source.labels, replica.bank);
  CHECK(ev.losses.mgrm == doctest::Approx(path.loss).epsilon(1e-12));

  const double total =
      det + cfg.lambda_mgrm * path.loss + daf + disc.loss;
  CHECK(ev.losses.total == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("gradient isolation between module toggles") {
  TrainConfig base = micro_config();
  base.pim = base.mgrm = base.eagr = false;

  SUBCASE("relation term leaves both discriminators untouched") {
    MicroSetup a, b;
    TrainConfig with_mgrm = base;
    with_mgrm.mgrm = true;
    const StepEval on = total_loss(a.bundle, a.source, a.target, with_mgrm);
    const StepEval off = total_loss(b.bundle, b.source, b.target, base);
    CHECK(on.grads.dis_daf.grad == off.grads.dis_daf.grad);
    CHECK(on.grads.dis_eagr.grad == off.grads.dis_eagr.grad);
    CHECK(on.grads.det.grad == off.grads.det.grad);
  }

  SUBCASE("entropy-aware discriminator leaves the domain discriminator untouched") {
    MicroSetup a, b;
    TrainConfig with_eagr = base;
    with_eagr.eagr = true;
    const StepEval on = total_loss(a.bundle, a.source, a.target, with_eagr);
    const StepEval off = total_loss(b.bundle, b.source, b.target, base);
    CHECK(on.grads.dis_daf.grad == off.grads.dis_daf.grad);
    // The reverse is not true: the concat path feeds the detector and
    // feature gradients, so those must differ.
    CHECK(on.grads.det.grad != off.grads.det.grad);
  }
}

TEST_CASE("total_loss rejects empty batches") {
  MicroSetup s;
  const TrainConfig cfg = micro_config();
  TrainBatch empty;
  CHECK_THROWS_AS((void)total_loss(s.bundle, empty, s.target, cfg), std::invalid_argument);
  CHECK_THROWS_AS((void)total_loss(s.bundle, s.source, empty, cfg), std::invalid_argument);
}

TEST_CASE("zero epochs returns an initialized bundle and an empty record") {
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  const TrainResult a = train(cfg);
  CHECK(a.record.rows.empty());
  CHECK(a.record.epoch_map.empty());
  CHECK_FALSE(a.record.aborted);
  // Evaluation still runs at the initial parameters.
  CHECK(a.final_eval.map >= 0.0);
  const TrainResult b = train(cfg);
  CHECK(a.bundle.feat.params == b.bundle.feat.params);
  CHECK(a.bundle.det.params == b.bundle.det.params);
}

TEST_CASE("a plain run clears the accuracy floor") {
  // Default scenario, baseline flags, three epochs: accuracy must beat
  // chance (1/C) by at least twenty points.
  TrainConfig cfg;
  cfg.epochs = 3;
  for (std::uint64_t seed : {std::uint64_t{1}, std::uint64_t{4}}) {
    cfg.seed = seed;
    cfg.scenario.seed = seed;
    const TrainResult r = train(cfg);
    const double chance = 1.0 / cfg.scenario.categories;
    CHECK(target_proposal_accuracy(r.bundle, r.target_scenes) >= chance + 0.20);
  }
}

TEST_CASE("learning rate decays exactly twice at the configured steps") {
  TrainConfig cfg = small_config();
  cfg.epochs = 6;
  cfg.steps_per_epoch = 100;
  cfg.decay_steps = {430, 515};
  const TrainResult r = train(cfg);
  REQUIRE(static_cast<int>(r.record.rows.size()) == 600);
  int changes = 0;
  for (std::size_t i = 1; i < r.record.rows.size(); ++i)
    if (r.record.rows[i].lr != r.record.rows[i - 1].lr) ++changes;
  CHECK(changes == 2);
  CHECK(r.record.rows[429].lr == doctest::Approx(1e-3));
  CHECK(r.record.rows[430].lr == doctest::Approx(1e-4));
  CHECK(r.record.rows[514].lr == doctest::Approx(1e-4));
  CHECK(r.record.rows[515].lr == doctest::Approx(1e-5));
  CHECK(r.record.rows[599].lr == doctest::Approx(1e-5));
}

TEST_CASE("repeated seeds reproduce the run byte for byte") {
  TrainConfig cfg = small_config();
  cfg.pim = cfg.mgrm = cfg.eagr = true;
  const TrainResult a = train(cfg);
  const TrainResult b = train(cfg);
  CHECK(run_csv(a.record) == run_csv(b.record));
  CHECK(a.final_eval.map == b.final_eval.map);
  CHECK(a.bundle.feat.params == b.bundle.feat.params);
  CHECK(a.relmat_csv == b.relmat_csv);
}

TEST_CASE("trained parameters stay finite") {
  TrainConfig cfg = small_config();
  cfg.pim = cfg.mgrm = cfg.eagr = true;
  const TrainResult r = train(cfg);
  CHECK_FALSE(r.record.aborted);
  validate_finite(r.bundle.feat.params, "feat");
  validate_finite(r.bundle.det.params, "det");
  validate_finite(r.bundle.dis_daf.params, "dis_daf");
  validate_finite(r.bundle.dis_eagr.params, "dis_eagr");
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  TrainConfig cfg = small_config();
  cfg.pim = true;
  cfg.mgrm_eq4_mode = Eq4Mode::kCrossAvg;
  cfg.meta.inner_steps = 3;
  cfg.pim_cfg.tau_source = 0.8;
  cfg.scenario.rho = 0.25;
  cfg.seed = 9;

  const TrainConfig back = parse_train_config(train_config_json(cfg));
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.steps_per_epoch == cfg.steps_per_epoch);
  CHECK(back.decay_steps == cfg.decay_steps);
  CHECK(back.pim == cfg.pim);
  CHECK(back.mgrm_eq4_mode == Eq4Mode::kCrossAvg);
  CHECK(back.meta.inner_steps == 3);
  CHECK(back.pim_cfg.tau_source == doctest::Approx(0.8));
  CHECK(back.scenario.rho == doctest::Approx(0.25));
  CHECK(back.seed == 9);
  // The run seed drives the scenario.
  CHECK(back.scenario.seed == 9);

  CHECK_THROWS_AS(parse_train_config("{\"bogus\": 1}"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{\"meta\": {\"bogus\": 1}}"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{\"pim_config\": {\"bogus\": 1}}"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{\"scenario\": {\"bogus\": 1}}"), std::invalid_argument);
  // The scenario block has no independent seed.
  CHECK_THROWS_AS(parse_train_config("{\"scenario\": {\"seed\": 3}}"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{\"meta\": 5}"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("not json"), std::invalid_argument);
  CHECK_THROWS_AS(parse_train_config("{\"mgrm_eq4_mode\": \"bogus\"}"), std::invalid_argument);
}

TEST_CASE("detections interchange round-trips") {
  std::vector<Detection> dets;
  dets.push_back({0, Box{1.0, 2.0, 10.0, 12.0}, 2, 0.875});
  dets.push_back({3, Box{0.5, 0.5, 4.5, 6.0}, 0, 0.12345678901234567});
  const std::vector<Detection> back = detections_from_json(detections_json(dets));
  REQUIRE(back.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].scene == dets[i].scene);
    CHECK(back[i].category == dets[i].category);
    CHECK(back[i].score == dets[i].score);
    CHECK(back[i].box.x1 == dets[i].box.x1);
    CHECK(back[i].box.y2 == dets[i].box.y2);
  }
  CHECK_THROWS_AS(detections_from_json("{\"schema\": \"nope\", \"detections\": []}"),
                  std::invalid_argument);
  CHECK_THROWS_AS(detections_from_json("{\"schema\": \"detections.v1\"}"),
                  std::invalid_argument);
}

TEST_CASE("ablation grid shapes, labels, and aggregate stats") {
  TrainConfig cfg = small_config();
  const std::vector<std::uint64_t> seeds = {1, 2};
  const std::vector<AblationRow> rows = ablation_grid(cfg, seeds);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].label == "baseline");
  CHECK(rows[1].label == "+PIM");
  CHECK(rows[2].label == "+PIM+MGRM");
  CHECK(rows[3].label == "+PIM+EAGR");
  CHECK(rows[4].label == "full");
  CHECK_FALSE(rows[0].pim);
  CHECK(rows[2].mgrm);
  CHECK(rows[3].eagr);
  CHECK((rows[4].pim && rows[4].mgrm && rows[4].eagr));
  for (const AblationRow& row : rows) {
    REQUIRE(row.maps.size() == seeds.size());
    double mean = 0.0;
    for (double m : row.maps) mean += m;
    mean /= static_cast<double>(row.maps.size());
    CHECK(row.mean == doctest::Approx(mean).epsilon(1e-12));
    double var = 0.0;
    for (double m : row.maps) var += (m - mean) * (m - mean);
    var /= static_cast<double>(row.maps.size() - 1);
    CHECK(row.sd == doctest::Approx(std::sqrt(var)).epsilon(1e-9));
  }
  const std::string csv = ablation_csv(rows);
  CHECK(csv.rfind("label,pim,mgrm,eagr,mean_map,sd_map", 0) == 0);
  CHECK(csv.find("\nbaseline,0,0,0,") != std::string::npos);
  CHECK(csv.find("\nfull,1,1,1,") != std::string::npos);
}

TEST_CASE("relation matrices are dumped once per epoch when enabled") {
  TrainConfig cfg = small_config();
  cfg.mgrm = true;
  const TrainResult r = train(cfg);
  REQUIRE(static_cast<int>(r.relmat_csv.size()) == cfg.epochs);
  for (const std::string& dump : r.relmat_csv) {
    CHECK(dump.rfind("# pi\n", 0) == 0);
    CHECK(dump.find("# z\n") != std::string::npos);
  }
  TrainConfig off = small_config();
  CHECK(train(off).relmat_csv.empty());
}
