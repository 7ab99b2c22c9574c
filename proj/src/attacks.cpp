#include "wmlab/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "wmlab/engine.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::Ft: return "ft";
    case AttackKind::Fp: return "fp";
    case AttackKind::Anp: return "anp";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "ft") return AttackKind::Ft;
  if (s == "fp") return AttackKind::Fp;
  if (s == "anp" || s == "anp-lite") return AttackKind::Anp;
  throw ConfigError("unknown attack '" + s + "'");
}

double AttackPlan::resolved_prune_fraction() const {
  if (prune_fraction) return *prune_fraction;
  switch (attack) {
    case AttackKind::Fp: return 0.9;
    case AttackKind::Anp: return 0.6;
    case AttackKind::Ft: return 0.0;
  }
  return 0.0;
}

void AttackPlan::validate() const {
  if (epochs < 0) throw ConfigError("attack.epochs must be >= 0");
  if (!(lr.initial >= 0.0)) throw ConfigError("attack.lr must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("attack.momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("attack.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("attack.batch_size must be >= 1");
  const double f = resolved_prune_fraction();
  if (f < 0.0 || f >= 1.0) throw ConfigError("attack.prune_fraction must lie in [0,1)");
  if (anp_epsilon < 0.0) throw ConfigError("attack.anp_epsilon must be >= 0");
}

double AttackReport::wsr_after() const { return epochs.empty() ? wsr_before : epochs.back().wsr; }
double AttackReport::ba_after() const { return epochs.empty() ? ba_before : epochs.back().ba; }

std::string AttackReport::to_csv() const {
  std::string out = "epoch,wsr,ba\n";
  char buf[128];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g\n", e.epoch, e.wsr, e.ba);
    out += buf;
  }
  return out;
}

namespace {

void require_holdout(const LabeledDataset& holdout) {
  if (holdout.role != DatasetRole::AttackerHoldout)
    throw ArgumentError("attacks consume attacker-holdout data only, got role " + to_string(holdout.role));
  holdout.validate();
}

AttackEpoch measure(const ModelState& m, const EvalSets& eval, int epoch) {
  AttackEpoch e{epoch, std::nan(""), std::nan("")};
  if (eval.wm_test) e.wsr = wsr(m, *eval.wm_test, eval.target);
  if (eval.test) e.ba = benign_accuracy(m, *eval.test);
  return e;
}

void record_before(AttackReport& rep, const ModelState& m, const EvalSets& eval) {
  const auto e = measure(m, eval, 0);
  rep.wsr_before = e.wsr;
  rep.ba_before = e.ba;
}

// Fine-tunes `model` in place and appends one report row per epoch.
void finetune(ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan, const EvalSets& eval,
              AttackReport& rep) {
  std::mt19937_64 rng(plan.seed);
  GradientSet velocity = model.params.zeros_like();
  std::vector<std::size_t> order(holdout.size());
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const SgdOptions sgd{plan.lr.at(epoch), plan.momentum, plan.weight_decay, true};
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += plan.batch_size) {
      const std::size_t e = std::min(order.size(), b + plan.batch_size);
      if (e - b < 2 && b > 0) break;
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(b),
                                          order.begin() + static_cast<std::ptrdiff_t>(e));
      const Tensor x = holdout.images.gather_rows(rows);
      std::vector<int> y;
      y.reserve(rows.size());
      for (auto r : rows) y.push_back(holdout.labels[r]);
      LossGrad lg;
      try {
        lg = loss_and_grad(model, x, y, {.mode = BnMode::TrainStandard});
      } catch (const NumericError& ne) {
        throw TrainingError(std::string("attack diverged: ") + ne.what(), epoch);
      }
      if (!std::isfinite(lg.loss)) throw TrainingError("non-finite attack loss", epoch);
      sgd_step(model, lg.grads, sgd, velocity);
    }
    rep.epochs.push_back(measure(model, eval, epoch + 1));
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

AttackResult attack_ft(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                       const EvalSets& eval) {
  plan.validate();
  require_holdout(holdout);
  const auto t0 = std::chrono::steady_clock::now();
  AttackResult res{model, {}};
  res.report.attack = "ft";
  record_before(res.report, model, eval);
  res.report.epochs.push_back({0, res.report.wsr_before, res.report.ba_before});
  finetune(res.model, holdout, plan, eval, res.report);
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

std::vector<double> channel_mean_activation(const ModelState& model, const Tensor& images, std::size_t layer) {
  const Tensor out = layer_output(model, images, layer);
  const std::size_t n = out.dim(0);
  const std::size_t c = out.dim(1);
  const std::size_t inner = out.size() / (n * c);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = out.data() + (i * c + ch) * inner;
      double s = 0.0;
      for (std::size_t k = 0; k < inner; ++k) s += p[k];
      mean[ch] += s;
    }
  for (auto& m : mean) m /= static_cast<double>(n * inner);
  return mean;
}

AttackResult attack_fp(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                       const EvalSets& eval) {
  plan.validate();
  require_holdout(holdout);
  const auto t0 = std::chrono::steady_clock::now();
  AttackResult res{model, {}};
  res.report.attack = "fp";
  record_before(res.report, model, eval);

  const std::size_t layer = model.last_feature_layer();
  const auto act = channel_mean_activation(model, holdout.images, layer);
  const std::size_t c = act.size();
  const double frac = plan.resolved_prune_fraction();
  const auto count = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(c) - 1e-12));
  if (count >= c) throw ConfigError("prune_fraction would remove every channel of layer " + std::to_string(layer));
  std::vector<std::size_t> order(c);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return act[a] < act[b]; });
  for (std::size_t i = 0; i < count; ++i) {
    auto& mask = res.model.channel_masks[layer];
    if (mask.empty()) mask.assign(c, 1);
    mask[order[i]] = 0;
    res.report.pruned.push_back({layer, order[i], act[order[i]]});
  }
  res.report.epochs.push_back(measure(res.model, eval, 0));
  finetune(res.model, holdout, plan, eval, res.report);
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

std::vector<ChannelSensitivity> anp_sensitivity(const ModelState& model, const LabeledDataset& holdout,
                                                double epsilon) {
  if (epsilon < 0.0) throw ArgumentError("anp_sensitivity: epsilon must be >= 0");
  std::vector<ChannelSensitivity> out;
  if (model.bn_stats.empty()) throw ArgumentError("anp_sensitivity: model has no BatchNorm channels");
  const double base = evaluate_loss(model, holdout.images, holdout.labels);
  const auto lg = loss_and_grad(model, holdout.images, holdout.labels, {.mode = BnMode::Eval});
  for (const auto& [layer, stats] : model.bn_stats) {
    const std::size_t slot = model.param_slot(layer);
    const auto mask_it = model.channel_masks.find(layer);
    for (std::size_t ch = 0; ch < stats.running_mean.size(); ++ch) {
      ChannelSensitivity s{layer, ch, 0.0, 0.0};
      if (mask_it != model.channel_masks.end() && !mask_it->second[ch]) {
        out.push_back(s);
        continue;
      }
      const double g = model.params[slot][ch] * lg.grads[slot][ch] + model.params[slot + 1][ch] * lg.grads[slot + 1][ch];
      s.sign = g >= 0.0 ? 1.0 : -1.0;
      if (epsilon > 0.0) {
        ModelState p = model;
        p.params[slot][ch] *= 1.0 + s.sign * epsilon;
        p.params[slot + 1][ch] *= 1.0 + s.sign * epsilon;
        s.score = evaluate_loss(p, holdout.images, holdout.labels) - base;
      }
      out.push_back(s);
    }
  }
  return out;
}

AttackResult attack_anp(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                        const EvalSets& eval) {
  plan.validate();
  require_holdout(holdout);
  const auto t0 = std::chrono::steady_clock::now();
  AttackResult res{model, {}};
  res.report.attack = "anp-lite";
  record_before(res.report, model, eval);
  const double rate = plan.resolved_prune_fraction();
  if (rate > 0.0 && plan.anp_epsilon > 0.0) {
    auto scores = anp_sensitivity(model, holdout, plan.anp_epsilon);
    std::stable_sort(scores.begin(), scores.end(),
                     [](const ChannelSensitivity& a, const ChannelSensitivity& b) { return a.score > b.score; });
    const auto limit = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(scores.size()) - 1e-12));
    for (std::size_t i = 0; i < limit && i < scores.size(); ++i) {
      if (!(scores[i].score > 0.0)) break;
      auto& mask = res.model.channel_masks[scores[i].layer];
      if (mask.empty()) mask.assign(model.bn_stats.at(scores[i].layer).running_mean.size(), 1);
      mask[scores[i].channel] = 0;
      res.report.pruned.push_back({scores[i].layer, scores[i].channel, scores[i].score});
    }
    if (!res.report.pruned.empty()) res.model = bn_reestimate(res.model, holdout.images, 1);
  }
  res.report.epochs.push_back(measure(res.model, eval, 0));
  res.report.wall_seconds = seconds_since(t0);
  return res;
}

AttackResult run_attack(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                        const EvalSets& eval) {
  switch (plan.attack) {
    case AttackKind::Ft: return attack_ft(model, holdout, plan, eval);
    case AttackKind::Fp: return attack_fp(model, holdout, plan, eval);
    case AttackKind::Anp: return attack_anp(model, holdout, plan, eval);
  }
  throw ConfigError("unknown attack");
}

}  // namespace wmlab
