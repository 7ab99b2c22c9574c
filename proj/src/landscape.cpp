#include "wmlab/landscape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>

#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/parallel.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

GradientSet adversarial_direction(const ModelState& model, const LabeledDataset& wm) {
  if (wm.size() == 0) throw ArgumentError("adversarial_direction: empty watermark set");
  auto lg = loss_and_grad(model, wm.images, wm.labels, {.mode = BnMode::Eval});
  if (!(l2_norm(lg.grads) > 0.0)) throw NumericError("adversarial direction has zero norm", 0);
  return std::move(lg.grads);
}

GradientSet finetune_direction(const ModelState& model, const LabeledDataset& holdout,
                               const FinetuneDirectionOptions& opts) {
  if (holdout.size() == 0) throw ArgumentError("finetune_direction: empty holdout");
  if (opts.iterations < 0) throw ArgumentError("finetune_direction: iterations must be >= 0");
  if (opts.batch_size < 1) throw ArgumentError("finetune_direction: batch_size must be >= 1");
  ModelState ft = model;
  GradientSet velocity = ft.params.zeros_like();
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(holdout.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = order.size();
  const std::size_t bs = std::min(opts.batch_size, holdout.size());
  const SgdOptions sgd{opts.lr, opts.momentum, 0.0, true};
  for (int it = 0; it < opts.iterations; ++it) {
    if (pos + bs > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      pos = 0;
    }
    const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                        order.begin() + static_cast<std::ptrdiff_t>(pos + bs));
    pos += bs;
    std::vector<int> y;
    for (auto r : rows) y.push_back(holdout.labels[r]);
    auto lg = loss_and_grad(ft, holdout.images.gather_rows(rows), y, {.mode = BnMode::TrainStandard});
    if (!std::isfinite(lg.loss)) throw TrainingError("finetune_direction diverged", it);
    sgd_step(ft, lg.grads, sgd, velocity);
  }
  GradientSet d = ft.params;
  axpy(d, -1.0, model.params);
  return d;
}

DirectionPair make_direction_pair(GradientSet d_adv, GradientSet d_ft) {
  d_adv.require_same_layout(d_ft, "direction pair");
  DirectionPair p{std::move(d_adv), std::move(d_ft), 0.0, 0.0};
  p.adv_norm = l2_norm(p.d_adv);
  p.ft_norm = l2_norm(p.d_ft);
  if (!(p.adv_norm > 0.0) || !(p.ft_norm > 0.0)) throw ArgumentError("landscape directions must be nonzero");
  return p;
}

std::vector<double> grid_axis(double lo, double hi, double step) {
  if (!(step > 0.0) || hi < lo) throw ConfigError("grid axis needs lo <= hi and step > 0");
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step)) + 1;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = lo + static_cast<double>(i) * step;
    if (std::abs(v[i]) < 1e-12) v[i] = 0.0;
  }
  return v;
}

void GridSpec::validate() const {
  const auto a = alphas(), b = betas();
  const auto has_zero = [](const std::vector<double>& v) { return std::find(v.begin(), v.end(), 0.0) != v.end(); };
  if (!has_zero(a) || !has_zero(b)) throw ConfigError("landscape grid must contain the origin (0,0)");
  if (bn_samples < 2) throw ConfigError("landscape.bn_samples must be >= 2");
  if (bn_passes < 1) throw ConfigError("landscape.bn_passes must be >= 1");
}

ModelState neighbor(const ModelState& theta_w, const DirectionPair& pair, double alpha, double beta) {
  const double tn = param_l2_norm(theta_w);
  GradientSet step = theta_w.params.zeros_like();
  if (alpha != 0.0) axpy(step, alpha * tn / pair.adv_norm, pair.d_adv);
  if (beta != 0.0) axpy(step, beta * tn / pair.ft_norm, pair.d_ft);
  return add_scaled(theta_w, step, 1.0);
}

const LandscapeCell& LandscapeGrid::at(std::size_t ai, std::size_t bi) const {
  if (ai >= alphas.size() || bi >= betas.size()) throw ArgumentError("landscape cell index out of range");
  return cells[bi * alphas.size() + ai];
}

const LandscapeCell& LandscapeGrid::origin() const {
  const auto ai = static_cast<std::size_t>(std::find(alphas.begin(), alphas.end(), 0.0) - alphas.begin());
  const auto bi = static_cast<std::size_t>(std::find(betas.begin(), betas.end(), 0.0) - betas.begin());
  return at(ai, bi);
}

double LandscapeGrid::erase_radius(double threshold) const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : cells)
    if (c.beta == 0.0 && c.wsr < threshold) best = std::min(best, std::abs(c.alpha));
  return best;
}

std::string LandscapeGrid::to_csv() const {
  std::string out = "alpha,beta,wsr,ba\n";
  char buf[160];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.10g,%.10g\n", c.alpha, c.beta, c.wsr, c.ba);
    out += buf;
  }
  return out;
}

nlohmann::json LandscapeGrid::metadata() const {
  return {{"model_checksum", model_checksum},
          {"theta_norm", theta_norm},
          {"adv_norm", adv_norm},
          {"ft_norm", ft_norm},
          {"grid",
           {{"alpha", {spec.alpha_min, spec.alpha_max, spec.alpha_step}},
            {"beta", {spec.beta_min, spec.beta_max, spec.beta_step}},
            {"cells", cells.size()}}},
          {"bn_reestimation", {{"samples", bn_samples_used}, {"passes", spec.bn_passes}}}};
}

LandscapeGrid scan(const ModelState& model, const DirectionPair& pair, const GridSpec& grid, const ScanData& data,
                   std::size_t threads) {
  grid.validate();
  if (!data.bn_clean || !data.test || !data.wm_test) throw ArgumentError("scan needs clean, test and watermark data");
  model.params.require_same_layout(pair.d_adv, "scan");
  LandscapeGrid g;
  g.spec = grid;
  g.alphas = grid.alphas();
  g.betas = grid.betas();
  g.model_checksum = model_checksum(model);
  g.theta_norm = param_l2_norm(model);
  g.adv_norm = pair.adv_norm;
  g.ft_norm = pair.ft_norm;
  const std::size_t nbn = std::min(grid.bn_samples, data.bn_clean->size());
  g.bn_samples_used = nbn;
  const Tensor bn_images = data.bn_clean->images.slice_rows(0, nbn);
  g.cells.resize(g.alphas.size() * g.betas.size());
  parallel_for(
      g.cells.size(),
      [&](std::size_t k) {
        const double a = g.alphas[k % g.alphas.size()];
        const double b = g.betas[k / g.alphas.size()];
        ModelState m = bn_reestimate(neighbor(model, pair, a, b), bn_images, grid.bn_passes);
        GradientSet diff = m.params;
        axpy(diff, -1.0, model.params);
        g.cells[k] = {a, b, wsr(m, *data.wm_test, data.target), benign_accuracy(m, *data.test),
                      l2_norm(diff) / g.theta_norm};
      },
      threads);
  return g;
}

std::string export_embeddings(const ModelState& model, const LabeledDataset& clean, const LabeledDataset& wm) {
  std::string out;
  std::size_t dim = 0;
  char buf[64];
  auto emit = [&](const LabeledDataset& ds, const char* tag) {
    if (ds.size() == 0) return;
    const Tensor f = penultimate_features(model, ds.images);
    const std::size_t d = f.row_size();
    if (dim == 0) {
      dim = d;
      out += "source,label";
      for (std::size_t j = 0; j < d; ++j) out += ",f" + std::to_string(j);
      out += '\n';
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
      out += tag;
      out += ',' + std::to_string(ds.labels[i]);
      for (std::size_t j = 0; j < d; ++j) {
        std::snprintf(buf, sizeof buf, ",%.10g", f[i * d + j]);
        out += buf;
      }
      out += '\n';
    }
  };
  emit(clean, "clean");
  emit(wm, "watermark");
  return out;
}

}  // namespace wmlab
