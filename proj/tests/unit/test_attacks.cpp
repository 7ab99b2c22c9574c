#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../support.hpp"
#include "wmlab/attacks.hpp"
#include "wmlab/embedders.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/watermark.hpp"

using namespace wmlab;
using namespace wmtest;

namespace {

struct Victim {
  ModelState model;
  LabeledDataset holdout, test, wm_test;
};

const Victim& victim() {
  static const Victim v = [] {
    Victim out;
    auto owner = shapes(600, 11);
    WatermarkSpec spec;
    auto s = build_watermarked_trainset(owner, spec, 0.05);
    TrainPlan p;
    p.embedder = Embedder::Vanilla;
    p.epochs = 3;
    p.batch_clean = 32;
    p.batch_wm = 8;
    p.alpha = 1.0;
    p.seed = 2;
    out.model = train_vanilla(p, make_architecture("tinycnn", owner.sample_shape(), 10, 3), s.clean_part,
                              s.wm_part).model;
    out.holdout = shapes(200, 12, DatasetRole::AttackerHoldout);
    out.test = shapes(200, 13, DatasetRole::Test);
    out.wm_test = make_watermark_testset(out.test, spec);
    return out;
  }();
  return v;
}

AttackPlan plan(AttackKind k, int epochs = 1) {
  AttackPlan p;
  p.attack = k;
  p.epochs = epochs;
  p.seed = 4;
  return p;
}

}  // namespace

TEST_CASE("fine-tuning with zero epochs is the identity") {
  const auto& v = victim();
  const auto r = attack_ft(v.model, v.holdout, plan(AttackKind::Ft, 0));
  CHECK(r.model == v.model);
  CHECK(r.report.epochs.size() == 1);
}

TEST_CASE("fine-tuning with zero learning rate leaves parameters unchanged") {
  const auto& v = victim();
  auto p = plan(AttackKind::Ft, 2);
  p.lr.initial = 0.0;
  const auto r = attack_ft(v.model, v.holdout, p, {&v.test, &v.wm_test, 0});
  CHECK(r.model.params == v.model.params);
  CHECK(r.model.channel_masks == v.model.channel_masks);
  // running statistics still track the holdout batches under train-mode BatchNorm
  CHECK_FALSE(r.model.bn_stats == v.model.bn_stats);
}

TEST_CASE("attack reports carry equal-length WSR and BA trajectories") {
  const auto& v = victim();
  const auto r = attack_ft(v.model, v.holdout, plan(AttackKind::Ft, 3), {&v.test, &v.wm_test, 0});
  REQUIRE(r.report.epochs.size() == 4);
  for (const auto& e : r.report.epochs) {
    CHECK(std::isfinite(e.wsr));
    CHECK(std::isfinite(e.ba));
  }
  CHECK(r.report.wsr_before == wsr(v.model, v.wm_test, 0));
  CHECK(r.report.wsr_after() == wsr(r.model, v.wm_test, 0));
  CHECK(r.report.to_csv().starts_with("epoch,wsr,ba\n"));
}

TEST_CASE("attacks only accept attacker-holdout data") {
  const auto& v = victim();
  for (auto k : {AttackKind::Ft, AttackKind::Fp, AttackKind::Anp}) {
    auto p = plan(k);
    CHECK_THROWS_AS(run_attack(v.model, v.test, p), ArgumentError);
  }
}

TEST_CASE("fine-pruning with fraction 0 equals fine-tuning") {
  const auto& v = victim();
  auto p = plan(AttackKind::Fp, 2);
  p.prune_fraction = 0.0;
  auto q = plan(AttackKind::Ft, 2);
  CHECK(attack_fp(v.model, v.holdout, p).model == attack_ft(v.model, v.holdout, q).model);
}

TEST_CASE("fine-pruning masks the least-activated channels of the last feature layer") {
  const auto& v = victim();
  const std::size_t layer = v.model.last_feature_layer();
  const Tensor act = layer_output(v.model, v.holdout.images, layer);
  const std::size_t n = act.dim(0), c = act.dim(1), s = act.size() / (n * c);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < s; ++k) mean[ch] += act[(i * c + ch) * s + k];
  for (auto& m : mean) m /= static_cast<double>(n * s);
  const auto got = channel_mean_activation(v.model, v.holdout.images, layer);
  for (std::size_t ch = 0; ch < c; ++ch) CHECK(got[ch] == doctest::Approx(mean[ch]).epsilon(1e-12));

  auto p = plan(AttackKind::Fp, 1);
  p.prune_fraction = 0.5;
  const auto r = attack_fp(v.model, v.holdout, p);
  const std::size_t expect = static_cast<std::size_t>(std::ceil(0.5 * static_cast<double>(c)));
  REQUIRE(r.report.pruned.size() == expect);
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mean[a] < mean[b]; });
  std::vector<std::size_t> want(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(expect));
  std::vector<std::size_t> pruned;
  for (const auto& pc : r.report.pruned) pruned.push_back(pc.channel);
  std::sort(want.begin(), want.end());
  std::sort(pruned.begin(), pruned.end());
  CHECK(pruned == want);

  // masked channels stay silent after fine-tuning, on any input
  const auto& mask = r.model.channel_masks.at(layer);
  const Tensor probe = layer_output(r.model, random_tensor({16, 1, 8, 8}, 5, 0.0, 1.0), layer);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      if (!mask[ch])
        for (std::size_t k = 0; k < s; ++k) CHECK(probe[(i * c + ch) * s + k] == 0.0);
}

TEST_CASE("fine-pruning refuses to remove every channel") {
  const auto& v = victim();
  auto p = plan(AttackKind::Fp);
  p.prune_fraction = 0.99;
  CHECK_THROWS_AS(attack_fp(v.model, v.holdout, p), ConfigError);
  p.prune_fraction = 1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("ANP-lite scores match an exhaustive per-channel perturbation oracle") {
  const auto& v = victim();
  const double eps = 0.3;
  const auto scores = anp_sensitivity(v.model, v.holdout, eps);
  const double base = evaluate_loss(v.model, v.holdout.images, v.holdout.labels);
  std::size_t total = 0;
  for (const auto& [l, st] : v.model.bn_stats) total += st.running_mean.size();
  REQUIRE(scores.size() == total);
  for (const auto& s : scores) {
    const std::size_t slot = v.model.param_slot(s.layer);
    auto scaled = [&](double f) {
      ModelState m = v.model;
      m.params[slot][s.channel] *= f;
      m.params[slot + 1][s.channel] *= f;
      return evaluate_loss(m, v.holdout.images, v.holdout.labels);
    };
    CHECK(s.score == doctest::Approx(scaled(1.0 + s.sign * eps) - base).epsilon(1e-12));
    // sign follows the derivative of the loss with respect to the channel scale
    const double h = 1e-6;
    const double deriv = (scaled(1.0 + h) - scaled(1.0 - h)) / (2 * h);
    if (std::abs(deriv) > 1e-8) CHECK(s.sign == (deriv > 0 ? 1.0 : -1.0));
  }
}

TEST_CASE("ANP-lite prunes the most sensitive channels and re-estimates BatchNorm") {
  const auto& v = victim();
  auto p = plan(AttackKind::Anp);
  p.prune_fraction = 0.25;
  const auto r = attack_anp(v.model, v.holdout, p);
  auto scores = anp_sensitivity(v.model, v.holdout, p.anp_epsilon);
  std::stable_sort(scores.begin(), scores.end(), [](auto& a, auto& b) { return a.score > b.score; });
  const std::size_t limit = static_cast<std::size_t>(std::ceil(0.25 * static_cast<double>(scores.size())));
  std::size_t positive = 0;
  for (std::size_t i = 0; i < limit; ++i) positive += scores[i].score > 0.0;
  REQUIRE(r.report.pruned.size() == positive);
  for (std::size_t i = 0; i < positive; ++i) {
    CHECK(r.report.pruned[i].layer == scores[i].layer);
    CHECK(r.report.pruned[i].channel == scores[i].channel);
    CHECK(r.model.channel_masks.at(scores[i].layer)[scores[i].channel] == 0);
  }
  CHECK(r.model.params == v.model.params);
  CHECK(r.model.bn_stats == bn_reestimate(r.model, v.holdout.images, 1).bn_stats);
}

TEST_CASE("ANP-lite degenerate settings leave the model alone") {
  const auto& v = victim();
  for (const auto& s : anp_sensitivity(v.model, v.holdout, 0.0)) CHECK(s.score == 0.0);
  auto p = plan(AttackKind::Anp);
  p.anp_epsilon = 0.0;
  CHECK(attack_anp(v.model, v.holdout, p).model == v.model);
  p = plan(AttackKind::Anp);
  p.prune_fraction = 0.0;
  CHECK(attack_anp(v.model, v.holdout, p).model == v.model);
}

TEST_CASE("attack plan defaults and names") {
  AttackPlan p;
  CHECK(p.epochs == 10);
  CHECK(p.lr.at(0) == 0.05);
  CHECK(p.lr.at(2) == 0.025);
  CHECK(p.lr.at(9) == 0.05 * std::pow(0.5, 4));
  p.attack = AttackKind::Fp;
  CHECK(p.resolved_prune_fraction() == 0.9);
  p.attack = AttackKind::Anp;
  CHECK(p.resolved_prune_fraction() == 0.6);
  CHECK(attack_kind_from_string("anp-lite") == AttackKind::Anp);
  CHECK_THROWS_AS(attack_kind_from_string("nad"), ConfigError);
}
