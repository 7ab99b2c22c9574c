#include "wmlab/embedders.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

std::string to_string(Embedder e) {
  switch (e) {
    case Embedder::Vanilla: return "vanilla";
    case Embedder::Ew: return "ew";
    case Embedder::Cw: return "cw";
    case Embedder::App: return "app";
  }
  return "?";
}

Embedder embedder_from_string(const std::string& s) {
  if (s == "vanilla") return Embedder::Vanilla;
  if (s == "ew") return Embedder::Ew;
  if (s == "cw") return Embedder::Cw;
  if (s == "app") return Embedder::App;
  throw ConfigError("unknown embedder '" + s + "'");
}

void TrainPlan::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (batch_clean < 1 || batch_wm < 1) throw ConfigError("train batch sizes must be >= 1");
  if (!(lr.initial >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (alpha < 0.0) throw ConfigError("train.alpha must be >= 0");
  if (epsilon < 0.0) throw ConfigError("train.epsilon must be >= 0");
  if (!(ew_temperature > 0.0)) throw ConfigError("train.ew_temperature must be > 0");
  if (cw_levels < 1) throw ConfigError("train.cw_levels must be >= 1");
  if (cw_sigma < 0.0) throw ConfigError("train.cw_sigma must be >= 0");
  if (cw_samples < 1) throw ConfigError("train.cw_samples must be >= 1");
  if (pretrain_epochs < 0) throw ConfigError("train.pretrain_epochs must be >= 0");
}

std::string TrainReport::to_csv() const {
  std::string out = "epoch,clean_loss,wm_loss,ba,wsr\n";
  char buf[256];
  for (const auto& r : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.clean_loss, r.wm_loss, r.ba, r.wsr);
    out += buf;
  }
  return out;
}

namespace {

// Cycles through reshuffled permutations of [0, n).
class CyclicSampler {
 public:
  CyclicSampler(std::size_t n, std::mt19937_64& rng) : perm_(n), rng_(rng) {
    std::iota(perm_.begin(), perm_.end(), std::size_t{0});
    pos_ = n;
  }
  std::vector<std::size_t> next(std::size_t m) {
    std::vector<std::size_t> out;
    out.reserve(m);
    while (out.size() < m) {
      if (pos_ == perm_.size()) {
        std::shuffle(perm_.begin(), perm_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(perm_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> perm_;
  std::size_t pos_;
  std::mt19937_64& rng_;
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

Batch take(const LabeledDataset& ds, const std::vector<std::size_t>& rows) {
  Batch b{ds.images.gather_rows(rows), {}};
  b.y.reserve(rows.size());
  for (auto r : rows) b.y.push_back(ds.labels[r]);
  return b;
}

struct StepOut {
  GradientSet grads;
  double clean_loss = 0.0;
  double wm_loss = 0.0;
};

struct StepContext {
  int epoch;
  std::size_t step;
};

using StepFn = std::function<StepOut(ModelState&, const Batch& clean, const Batch* wm, const StepContext&)>;

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

TrainResult run_loop(const TrainPlan& plan, ModelState model, const LabeledDataset& clean, const LabeledDataset& wm,
                     bool use_wm, const EvalSets& eval, const TrainHooks& hooks, const StepFn& step,
                     bool finalize = true) {
  plan.validate();
  clean.validate();
  if (use_wm) wm.validate();
  if (clean.role == DatasetRole::AttackerHoldout || clean.role == DatasetRole::Test)
    throw ArgumentError("embedders train on owner data only, got role " + to_string(clean.role));
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  std::mt19937_64 rng(plan.seed);
  CyclicSampler wm_sampler(use_wm ? wm.size() : 1, rng);
  GradientSet velocity = model.params.zeros_like();
  std::vector<std::size_t> order(clean.size());
  std::size_t global_step = 0;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const SgdOptions sgd{plan.lr.at(epoch), plan.momentum, plan.weight_decay, plan.decay_bn_affine};
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double clean_sum = 0.0, wm_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < order.size(); b += plan.batch_clean) {
      const std::size_t e = std::min(order.size(), b + plan.batch_clean);
      if (e - b < 2 && b > 0) break;  // a single-sample tail has no batch statistics
      const Batch cb = take(clean, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(b),
                                                             order.begin() + static_cast<std::ptrdiff_t>(e)));
      Batch wb;
      if (use_wm) wb = take(wm, wm_sampler.next(plan.batch_wm));
      StepOut out;
      try {
        out = step(model, cb, use_wm ? &wb : nullptr, {epoch, global_step});
      } catch (const NumericError& ne) {
        throw TrainingError(std::string("training diverged: ") + ne.what(), epoch);
      }
      if (!std::isfinite(out.clean_loss) || !std::isfinite(out.wm_loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch), epoch);
      sgd_step(model, out.grads, sgd, velocity);
      clean_sum += out.clean_loss;
      wm_sum += out.wm_loss;
      ++steps;
      ++global_step;
    }
    if (finalize && plan.finalize_bn && epoch + 1 == plan.epochs) model = bn_reestimate(model, clean.images, 1);
    EpochRecord rec{epoch, steps ? clean_sum / steps : nan(), (use_wm && steps) ? wm_sum / steps : nan(), nan(),
                    nan()};
    if (eval.test) rec.ba = benign_accuracy(model, *eval.test);
    if (eval.wm_test) rec.wsr = wsr(model, *eval.wm_test, eval.target);
    res.report.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  res.model = std::move(model);
  res.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// CE of rows [begin, end) of logits, mean over those rows.
double mean_ce(const Tensor& logits, std::span<const int> labels, std::size_t begin, std::size_t end) {
  const Tensor part = logits.slice_rows(begin, end);
  const std::vector<double> w(end - begin, 1.0 / static_cast<double>(end - begin));
  return softmax_cross_entropy(part, labels.subspan(begin, end - begin), w, nullptr);
}

// One mixed clean+watermark pass (or clean alone) under TrainStandard.
StepOut mixed_step(ModelState& model, const Batch& c, const Batch* w, double alpha) {
  StepOut out;
  if (!w) {
    auto lg = loss_and_grad(model, c.x, c.y, {.mode = BnMode::TrainStandard});
    out.grads = std::move(lg.grads);
    out.clean_loss = lg.loss;
    return out;
  }
  const Tensor x = concat_rows(c.x, w->x);
  std::vector<int> y = c.y;
  y.insert(y.end(), w->y.begin(), w->y.end());
  std::vector<double> weights(c.y.size(), 1.0 / static_cast<double>(c.y.size()));
  weights.resize(y.size(), alpha / static_cast<double>(w->y.size()));
  auto lg = loss_and_grad_weighted(model, x, y, weights, {.mode = BnMode::TrainStandard});
  out.grads = std::move(lg.grads);
  out.clean_loss = mean_ce(lg.logits, y, 0, c.y.size());
  out.wm_loss = mean_ce(lg.logits, y, c.y.size(), y.size());
  return out;
}

bool is_reweighted(const std::string& name) { return name.ends_with(".weight"); }

}  // namespace

// ----------------------------------------------------------------- vanilla

TrainResult train_vanilla(const TrainPlan& plan, ModelState init, const LabeledDataset& clean,
                          const LabeledDataset& wm, const EvalSets& eval, const TrainHooks& hooks) {
  const bool use_wm = plan.alpha > 0.0 && wm.size() > 0;
  return run_loop(plan, std::move(init), clean, wm, use_wm, eval, hooks,
                  [&](ModelState& m, const Batch& c, const Batch* w, const StepContext&) {
                    return mixed_step(m, c, w, plan.alpha);
                  });
}

// ---------------------------------------------------------------------- EW

Tensor ew_reweight(const Tensor& layer, double temperature) {
  if (layer.empty()) throw ArgumentError("ew_reweight: empty layer");
  if (!(temperature > 0.0)) throw ArgumentError("ew_reweight: temperature must be > 0");
  double mx = 0.0;
  for (double v : layer.values()) mx = std::max(mx, std::abs(v));
  Tensor out(layer.shape());
  for (std::size_t i = 0; i < layer.size(); ++i)
    out[i] = std::exp((std::abs(layer[i]) - mx) * temperature) * layer[i];
  return out;
}

ModelState ew_model(const ModelState& model, double temperature) {
  ModelState out = model;
  for (std::size_t i = 0; i < out.params.count(); ++i)
    if (is_reweighted(out.params.name(i))) out.params[i] = ew_reweight(model.params[i], temperature);
  return out;
}

GradientSet ew_backprop(const ModelState& raw, const GradientSet& grad_rw, double temperature) {
  raw.params.require_same_layout(grad_rw, "ew_backprop");
  GradientSet out = grad_rw;
  const double t = temperature;
  for (std::size_t p = 0; p < raw.params.count(); ++p) {
    if (!is_reweighted(raw.params.name(p))) continue;
    const Tensor& th = raw.params[p];
    const Tensor& g = grad_rw[p];
    Tensor& d = out[p];
    std::size_t arg = 0;
    for (std::size_t i = 1; i < th.size(); ++i)
      if (std::abs(th[i]) > std::abs(th[arg])) arg = i;
    const double mx = std::abs(th[arg]);
    double coupled = 0.0;  // sum_i g_i * reweighted_i
    for (std::size_t i = 0; i < th.size(); ++i) {
      const double f = std::exp((std::abs(th[i]) - mx) * t);
      coupled += g[i] * f * th[i];
      d[i] = g[i] * f * (1.0 + t * std::abs(th[i]));
    }
    const double sgn = th[arg] > 0 ? 1.0 : (th[arg] < 0 ? -1.0 : 0.0);
    d[arg] -= t * sgn * coupled;
  }
  return out;
}

TrainResult train_ew(const TrainPlan& plan, const ModelState& pretrained, const LabeledDataset& clean,
                     const LabeledDataset& wm, const EvalSets& eval, const TrainHooks& hooks) {
  const bool use_wm = plan.alpha > 0.0 && wm.size() > 0;
  auto res = run_loop(plan, pretrained, clean, wm, use_wm, EvalSets{}, {},
                      [&](ModelState& m, const Batch& c, const Batch* w, const StepContext&) {
                        ModelState rw = ew_model(m, plan.ew_temperature);
                        StepOut out = mixed_step(rw, c, w, plan.alpha);
                        m.bn_stats = rw.bn_stats;
                        out.grads = ew_backprop(m, out.grads, plan.ew_temperature);
                        return out;
                      },
                      false);
  // The deployed model carries the reweighted weights; metrics are on it.
  res.model = ew_model(res.model, plan.ew_temperature);
  if (plan.finalize_bn && plan.epochs > 0) res.model = bn_reestimate(res.model, clean.images, 1);
  if (eval.test || eval.wm_test || hooks.on_epoch) {
    // Re-evaluating per epoch would need per-epoch snapshots; the series
    // holds losses per epoch and final metrics on the last row.
    auto& last = res.report.epochs;
    if (!last.empty()) {
      if (eval.test) last.back().ba = benign_accuracy(res.model, *eval.test);
      if (eval.wm_test) last.back().wsr = wsr(res.model, *eval.wm_test, eval.target);
    }
    if (hooks.on_epoch)
      for (const auto& r : res.report.epochs) hooks.on_epoch(r);
  }
  return res;
}

// ---------------------------------------------------------------------- CW

GradientSet cw_gradient(const ModelState& model, const Tensor& batch, std::span<const int> labels, int levels,
                        double sigma, int samples_per_level, std::mt19937_64& rng, const ForwardOptions& opts,
                        double* mean_loss) {
  if (levels < 1) throw ArgumentError("cw_gradient: levels must be >= 1");
  if (sigma < 0.0) throw ArgumentError("cw_gradient: sigma must be >= 0");
  if (samples_per_level < 1) throw ArgumentError("cw_gradient: samples_per_level must be >= 1");
  if (sigma == 0.0) {
    auto lg = loss_and_grad(model, batch, labels, opts);
    if (mean_loss) *mean_loss = lg.loss;
    return std::move(lg.grads);
  }
  GradientSet acc = model.params.zeros_like();
  double loss = 0.0;
  const int terms = levels * samples_per_level;
  for (int i = 1; i <= levels; ++i) {
    std::normal_distribution<double> noise(0.0, sigma * static_cast<double>(i) / levels);
    for (int s = 0; s < samples_per_level; ++s) {
      GradientSet g = model.params.zeros_like();
      for (std::size_t p = 0; p < g.count(); ++p)
        for (auto& v : g[p].values()) v = noise(rng);
      const ModelState noisy = add_scaled(model, g, 1.0);
      auto lg = loss_and_grad(noisy, batch, labels, opts);
      axpy(acc, 1.0, lg.grads);
      loss += lg.loss;
    }
  }
  if (terms > 1) scale(acc, 1.0 / terms);
  if (mean_loss) *mean_loss = loss / terms;
  return acc;
}

TrainResult train_cw(const TrainPlan& plan, ModelState init, const LabeledDataset& clean, const LabeledDataset& wm,
                     const EvalSets& eval, const TrainHooks& hooks) {
  const bool use_wm = plan.alpha > 0.0 && wm.size() > 0;
  std::mt19937_64 noise_rng(plan.seed ^ 0x5bd1e995ULL);
  return run_loop(plan, std::move(init), clean, wm, use_wm, eval, hooks,
                  [&](ModelState& m, const Batch& c, const Batch* w, const StepContext&) {
                    StepOut out;
                    auto lg = loss_and_grad(m, c.x, c.y, {.mode = BnMode::TrainStandard});
                    out.grads = std::move(lg.grads);
                    out.clean_loss = lg.loss;
                    if (w) {
                      const auto g = cw_gradient(static_cast<const ModelState&>(m), w->x, w->y, plan.cw_levels,
                                                 plan.cw_sigma, plan.cw_samples, noise_rng,
                                                 {.mode = BnMode::TrainStandard, .update_running_stats = false},
                                                 &out.wm_loss);
                      axpy(out.grads, plan.alpha, g);
                    }
                    return out;
                  });
}

// --------------------------------------------------------------------- APP

TrainResult train_app(const TrainPlan& plan, ModelState init, const LabeledDataset& clean, const LabeledDataset& wm,
                      const EvalSets& eval, const TrainHooks& hooks) {
  const bool use_wm = plan.alpha > 0.0 && wm.size() > 0;
  constexpr double kGradFloor = 1e-12;
  std::size_t skipped = 0;
  double max_dev = 0.0;
  auto res = run_loop(
      plan, std::move(init), clean, wm, use_wm, eval, hooks,
      [&](ModelState& m, const Batch& c, const Batch* w, const StepContext& ctx) {
        StepOut out;
        // Clean gradient; its batch moments become the c-BN statistics.
        auto lc = loss_and_grad(m, c.x, c.y, {.mode = BnMode::TrainStandard});
        out.grads = std::move(lc.grads);
        out.clean_loss = lc.loss;
        if (!w) return out;

        const BatchStatsSummary summary = std::move(lc.observed);
        const ForwardOptions wm_opts =
            plan.clean_bn ? ForwardOptions{.mode = BnMode::CleanStats, .clean_stats = &summary}
                          : ForwardOptions{.mode = BnMode::TrainStandard, .update_running_stats = false};
        const ModelState& theta = m;
        AppStepInfo info;
        info.epoch = ctx.epoch;
        info.step = ctx.step;
        if (hooks.on_app_step) {
          info.clean_summary_checksum = summary.checksum();
          info.params_before = model_checksum(theta);
        }

        const ModelState* eval_at = &theta;
        ModelState perturbed;
        bool have_wm_loss = false;
        if (plan.epsilon > 0.0) {
          auto lw = loss_and_grad(theta, w->x, w->y, wm_opts);
          out.wm_loss = lw.loss;
          have_wm_loss = true;
          if (hooks.on_app_step) info.wm_applied_checksums.push_back(lw.applied.checksum());
          const double gnorm = l2_norm(lw.grads);
          info.theta_norm = param_l2_norm(theta);
          if (gnorm > kGradFloor) {
            GradientSet delta = std::move(lw.grads);
            scale(delta, plan.epsilon * info.theta_norm / gnorm);
            info.delta_norm = l2_norm(delta);
            if (info.theta_norm > 0.0)
              max_dev = std::max(max_dev, std::abs(info.delta_norm / (plan.epsilon * info.theta_norm) - 1.0));
            perturbed = add_scaled(theta, delta, 1.0);
            eval_at = &perturbed;
          } else {
            info.skipped = true;
            ++skipped;
          }
        }
        // Watermark gradient at theta + delta stands in for the gradient at theta.
        auto lp = loss_and_grad(*eval_at, w->x, w->y, wm_opts);
        if (!have_wm_loss) out.wm_loss = lp.loss;
        axpy(out.grads, plan.alpha, lp.grads);
        if (hooks.on_app_step) {
          info.wm_applied_checksums.push_back(lp.applied.checksum());
          info.params_after = model_checksum(theta);
          hooks.on_app_step(info);
        }
        return out;
      });
  res.report.skipped_perturbations = skipped;
  res.report.max_budget_deviation = max_dev;
  return res;
}

// ---------------------------------------------------------------- dispatch

TrainResult train_embedder(const TrainPlan& plan, ModelState init, const LabeledDataset& clean,
                           const LabeledDataset& wm, const EvalSets& eval, const TrainHooks& hooks) {
  switch (plan.embedder) {
    case Embedder::Vanilla: return train_vanilla(plan, std::move(init), clean, wm, eval, hooks);
    case Embedder::Cw: return train_cw(plan, std::move(init), clean, wm, eval, hooks);
    case Embedder::App: return train_app(plan, std::move(init), clean, wm, eval, hooks);
    case Embedder::Ew: {
      TrainPlan pre = plan;
      pre.embedder = Embedder::Vanilla;
      pre.alpha = 0.0;
      pre.epochs = plan.pretrain_epochs;
      pre.lr.milestones = {plan.pretrain_epochs / 2, plan.pretrain_epochs * 3 / 4};
      pre.lr.step_every = 0;
      pre.seed = plan.seed ^ 0xabcdefULL;
      const auto pretrained = train_vanilla(pre, std::move(init), clean, LabeledDataset{}).model;
      return train_ew(plan, pretrained, clean, wm, eval, hooks);
    }
  }
  throw ConfigError("unknown embedder");
}

}  // namespace wmlab
