#include <doctest.h>

#include <cmath>
#include <random>

#include "../support.hpp"
#include "wmlab/checksum.hpp"
#include "wmlab/embedders.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/watermark.hpp"

using namespace wmlab;
using namespace wmtest;

namespace {

struct Toy {
  LabeledDataset clean, wm, test, wm_test;
  ModelState init;
};

Toy toy(std::uint64_t seed = 1) {
  Toy t;
  auto all = shapes(500, seed);
  WatermarkSpec spec;
  spec.target_label = 0;
  spec.seed = seed;
  auto s = build_watermarked_trainset(all, spec, 0.05);
  t.clean = std::move(s.clean_part);
  t.wm = std::move(s.wm_part);
  t.test = shapes(200, seed + 100, DatasetRole::Test);
  t.wm_test = make_watermark_testset(t.test, spec);
  t.init = make_architecture("tinycnn", t.clean.sample_shape(), 10, seed);
  return t;
}

TrainPlan small_plan(Embedder e) {
  TrainPlan p;
  p.embedder = e;
  p.epochs = 2;
  p.batch_clean = 32;
  p.batch_wm = 8;
  p.lr = {0.05, {}, 0, 0.1};
  p.pretrain_epochs = 1;
  p.seed = 5;
  return p;
}

double ew_direct(double v, double maxabs, double t) { return v * std::exp(std::abs(v) * t) / std::exp(maxabs * t); }

}  // namespace

TEST_CASE("ew_reweight on the worked example") {
  const auto r = ew_reweight(Tensor({3}, std::vector<double>{2, -1, 0}), 1.0);
  CHECK(r[0] == 2.0);
  CHECK(r[1] == doctest::Approx(-std::exp(-1.0)).epsilon(1e-15));
  CHECK(r[2] == 0.0);
  CHECK_THROWS_AS(ew_reweight(Tensor({3}, 1.0), 0.0), ArgumentError);
}

TEST_CASE("ew_reweight matches the formula and keeps the largest element") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.5, 1.5), temp(0.1, 4.0);
  for (int draw = 0; draw < 1000; ++draw) {
    const Tensor t = random_tensor({7, 5}, rng());
    const double T = temp(rng);
    const auto r = ew_reweight(t, T);
    std::size_t arg = 0;
    double mx = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (std::abs(t[i]) > mx) mx = std::abs(t[i]), arg = i;
    CHECK(r[arg] == t[arg]);
    for (std::size_t i = 0; i < t.size(); ++i) {
      REQUIRE(std::abs(r[i] - ew_direct(t[i], mx, T)) <= 1e-12);
      REQUIRE(std::signbit(r[i]) == std::signbit(t[i]));
    }
  }
  const Tensor t = random_tensor({20}, 4);
  const auto r = ew_reweight(t, 1e-12);
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(r[i] == doctest::Approx(t[i]).epsilon(1e-10));
}

TEST_CASE("gradient through the reweighting matches finite differences") {
  auto m = ModelBuilder({1, 6, 6}, 4).conv(4, 3, 1).batchnorm().relu().flatten().dense(3).build();
  const double T = 2.0;
  const auto x = random_tensor({5, 1, 6, 6}, 9);
  const auto y = random_labels(5, 3, 2);
  const ForwardOptions opts{.mode = BnMode::TrainStandard, .update_running_stats = false};
  const auto g = ew_backprop(m, loss_and_grad(ew_model(m, T), x, y, opts).grads, T);
  auto loss = [&](const ModelState& s) { return loss_and_grad(ew_model(s, T), x, y, opts).loss; };
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t p = 0; p < m.params.count(); ++p)
    for (std::size_t i = 0; i < m.params[p].size(); i += 3) {
      auto up = m, down = m;
      up.params[p][i] += h;
      down.params[p][i] -= h;
      const double num = (loss(up) - loss(down)) / (2 * h);
      worst = std::max(worst, std::abs(num - g[p][i]) / std::max({std::abs(num), std::abs(g[p][i]), 1e-6}));
    }
  CHECK(worst <= 1e-4);
}

TEST_CASE("ew_model only reweights dense and conv weights") {
  auto m = make_architecture("tinycnn", {1, 8, 8}, 10, 2);
  const auto r = ew_model(m, 2.0);
  for (std::size_t p = 0; p < m.params.count(); ++p) {
    const auto& name = m.params.name(p);
    if (name.ends_with(".weight"))
      CHECK(r.params[p] == ew_reweight(m.params[p], 2.0));
    else
      CHECK(r.params[p] == m.params[p]);
  }
}

TEST_CASE("cw_gradient with zero noise is the plain gradient") {
  const auto m = make_architecture("tinycnn", {1, 8, 8}, 10, 2);
  const auto x = random_tensor({6, 1, 8, 8}, 1, 0.0, 1.0);
  const auto y = random_labels(6, 10, 3);
  const ForwardOptions opts{.mode = BnMode::TrainStandard, .update_running_stats = false};
  std::mt19937_64 rng(1);
  const auto plain = loss_and_grad(m, x, y, opts).grads;
  CHECK(cw_gradient(m, x, y, 4, 0.0, 3, rng, opts) == plain);
}

TEST_CASE("cw_gradient with one level and one sample is the gradient at the noisy point") {
  const auto m = make_architecture("mlp", {1, 6, 6}, 4, 2);
  const auto x = random_tensor({5, 1, 6, 6}, 1, 0.0, 1.0);
  const auto y = random_labels(5, 4, 3);
  const ForwardOptions opts{.mode = BnMode::Eval};
  std::mt19937_64 rng(42), replay(42);
  const auto got = cw_gradient(m, x, y, 1, 0.05, 1, rng, opts);
  std::normal_distribution<double> noise(0.0, 0.05);
  auto G = m.params.zeros_like();
  for (std::size_t p = 0; p < G.count(); ++p)
    for (auto& v : G[p].values()) v = noise(replay);
  CHECK(got == loss_and_grad(add_scaled(m, G, 1.0), x, y, opts).grads);
}

TEST_CASE("cw_gradient mean converges to the plain gradient at small noise") {
  const auto m = make_architecture("mlp", {1, 6, 6}, 4, 2);
  const auto x = random_tensor({8, 1, 6, 6}, 1, 0.0, 1.0);
  const auto y = random_labels(8, 4, 3);
  const ForwardOptions opts{.mode = BnMode::Eval};
  std::mt19937_64 rng(7);
  const auto plain = loss_and_grad(m, x, y, opts).grads;
  const auto noisy = cw_gradient(m, x, y, 4, 1e-4, 50, rng, opts);
  auto diff = noisy;
  axpy(diff, -1.0, plain);
  CHECK(l2_norm(diff) / l2_norm(plain) < 1e-2);
}

TEST_CASE("APP keeps the perturbation on budget, restores parameters and uses clean statistics") {
  auto t = toy();
  auto plan = small_plan(Embedder::App);
  plan.epsilon = 0.02;
  std::size_t steps = 0;
  double worst = 0.0;
  bool restored = true, provenance = true;
  TrainHooks hooks;
  hooks.on_app_step = [&](const AppStepInfo& info) {
    ++steps;
    if (!info.skipped) worst = std::max(worst, std::abs(info.delta_norm / (plan.epsilon * info.theta_norm) - 1.0));
    restored = restored && info.params_before == info.params_after && !info.params_before.empty();
    provenance = provenance && info.wm_applied_checksums.size() == 2;
    for (const auto& c : info.wm_applied_checksums) provenance = provenance && c == info.clean_summary_checksum;
  };
  const auto res = train_app(plan, t.init, t.clean, t.wm, {}, hooks);
  CHECK(steps > 10);
  CHECK(worst <= 1e-9);
  CHECK(res.report.max_budget_deviation <= 1e-9);
  CHECK(restored);
  CHECK(provenance);
}

TEST_CASE("APP without clean BatchNorm normalizes watermark batches with their own statistics") {
  auto t = toy();
  auto plan = small_plan(Embedder::App);
  plan.epochs = 1;
  plan.clean_bn = false;
  bool differs = true;
  TrainHooks hooks;
  hooks.on_app_step = [&](const AppStepInfo& info) {
    for (const auto& c : info.wm_applied_checksums) differs = differs && c != info.clean_summary_checksum;
  };
  train_app(plan, t.init, t.clean, t.wm, {}, hooks);
  CHECK(differs);
}

TEST_CASE("watermark passes never update running statistics in APP") {
  // CW at sigma 0 draws the same batches and also keeps its watermark pass
  // out of the running estimates; with a negligible alpha both runs follow
  // the clean trajectory, so only a leak from the watermark batches into
  // the running statistics could separate them.
  auto t = toy();
  auto plan = small_plan(Embedder::App);
  plan.epochs = 1;
  plan.alpha = 1e-300;
  plan.finalize_bn = false;
  const auto app = train_app(plan, t.init, t.clean, t.wm);
  plan.embedder = Embedder::Cw;
  plan.cw_sigma = 0.0;
  const auto cw = train_cw(plan, t.init, t.clean, t.wm);
  for (const auto& [li, st] : app.model.bn_stats)
    for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
      CHECK(st.running_mean[c] == doctest::Approx(cw.model.bn_stats.at(li).running_mean[c]).epsilon(1e-9));
      CHECK(st.running_var[c] == doctest::Approx(cw.model.bn_stats.at(li).running_var[c]).epsilon(1e-9));
    }
}

TEST_CASE("BatchNorm finalization installs aggregate clean statistics") {
  auto t = toy();
  for (auto e : {Embedder::Vanilla, Embedder::App, Embedder::Ew}) {
    auto plan = small_plan(e);
    plan.finalize_bn = false;
    auto raw = train_embedder(plan, t.init, t.clean, t.wm).model;
    plan.finalize_bn = true;
    const auto fin = train_embedder(plan, t.init, t.clean, t.wm).model;
    INFO(to_string(e));
    CHECK(fin.params == raw.params);
    CHECK_FALSE(fin.bn_stats == raw.bn_stats);
    CHECK(fin == bn_reestimate(raw, t.clean.images, 1));
  }
}

TEST_CASE("training is seed-deterministic") {
  auto t = toy();
  for (auto e : {Embedder::Vanilla, Embedder::App, Embedder::Cw, Embedder::Ew}) {
    const auto plan = small_plan(e);
    const EvalSets ev{&t.test, &t.wm_test, 0};
    const auto a = train_embedder(plan, t.init, t.clean, t.wm, ev);
    const auto b = train_embedder(plan, t.init, t.clean, t.wm, ev);
    INFO(to_string(e));
    CHECK(a.model == b.model);
    CHECK(a.report.to_csv() == b.report.to_csv());
    CHECK(a.report.epochs.size() == static_cast<std::size_t>(plan.epochs));
  }
}

TEST_CASE("EW at vanishing temperature reduces to vanilla fine-tuning") {
  auto t = toy();
  auto plan = small_plan(Embedder::Ew);
  plan.epochs = 1;
  plan.ew_temperature = 1e-12;
  const auto ew = train_ew(plan, t.init, t.clean, t.wm);
  plan.embedder = Embedder::Vanilla;
  const auto van = train_vanilla(plan, t.init, t.clean, t.wm);
  CHECK(std::abs(ew.report.epochs[0].clean_loss - van.report.epochs[0].clean_loss) <= 1e-6);
  CHECK(std::abs(ew.report.epochs[0].wm_loss - van.report.epochs[0].wm_loss) <= 1e-6);
}

TEST_CASE("vanilla with alpha 0 does not learn the watermark") {
  auto t = toy(3);
  auto plan = small_plan(Embedder::Vanilla);
  plan.epochs = 10;
  plan.alpha = 0.0;
  const auto res = train_vanilla(plan, t.init, t.clean, t.wm, {&t.test, &t.wm_test, 0});
  CHECK(std::isnan(res.report.epochs.back().wm_loss));
  CHECK(res.report.epochs.back().ba > 0.5);
  CHECK(res.report.epochs.back().wsr < 0.2);
}

TEST_CASE("divergence surfaces as a TrainingError with its epoch") {
  auto t = toy();
  auto plan = small_plan(Embedder::Vanilla);
  plan.lr = {1e300, {}, 0, 0.1};
  plan.momentum = 0.0;
  try {
    train_vanilla(plan, t.init, t.clean, t.wm);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() == 0);
  }
}

TEST_CASE("embedders refuse attacker or test data") {
  auto t = toy();
  auto held = t.clean;
  held.role = DatasetRole::AttackerHoldout;
  CHECK_THROWS_AS(train_vanilla(small_plan(Embedder::Vanilla), t.init, held, t.wm), ArgumentError);
}

TEST_CASE("TrainPlan validation") {
  TrainPlan p;
  p.alpha = -1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.batch_clean = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = {};
  p.epsilon = -0.1;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK(embedder_from_string("app") == Embedder::App);
  CHECK_THROWS_AS(embedder_from_string("sam"), ConfigError);
}
