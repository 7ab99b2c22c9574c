#pragma once
// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wmlab/data.hpp"
#include "wmlab/engine.hpp"
#include "wmlab/model.hpp"

namespace wmtest {

using namespace wmlab;

inline Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> out(n);
  for (auto& l : out) l = u(rng);
  return out;
}

inline LabeledDataset shapes(std::size_t n, std::uint64_t seed, DatasetRole role = DatasetRole::OwnerTrain,
                             std::size_t image = 8, double noise = 0.05) {
  ShapesConfig c;
  c.samples = n;
  c.seed = seed;
  c.image_size = image;
  c.noise = noise;
  auto d = make_shapes_dataset(c);
  d.role = role;
  return d;
}

/// Random non-trivial running statistics so Eval mode differs from batch mode.
inline void scramble_running_stats(ModelState& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mu(-0.3, 0.3), var(0.5, 2.0);
  for (auto& [layer, st] : m.bn_stats) {
    for (auto& v : st.running_mean) v = mu(rng);
    for (auto& v : st.running_var) v = var(rng);
  }
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("wmlab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Networks that together contain every layer kind: padded and strided
/// convolutions, BatchNorm after conv and after dense, ReLU, max pooling,
/// flatten and dense. BatchNorm layers are wide enough that each parametrized
/// layer owns at least 100 scalars.
inline std::vector<ModelState> gradcheck_models() {
  std::vector<ModelState> out;
  out.push_back(ModelBuilder({2, 7, 7}, 11)
                    .conv(50, 3, 1).batchnorm().relu().maxpool(2)
                    .conv(60, 2).batchnorm().relu()
                    .flatten().dense(64).batchnorm().relu()
                    .dense(5)
                    .build());
  out.push_back(ModelBuilder({3, 8, 8}, 12).conv(12, 3, 1, 2).relu().flatten().dense(4).build());
  return out;
}

struct GradCheck {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::Dense;
  BnMode mode = BnMode::Eval;
  std::size_t sampled = 0;
  double max_rel_error = 0.0;
};

/// Central finite differences on up to `per_layer` randomly chosen scalars of
/// every parametrized layer (all of them when the layer has fewer).
/// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline std::vector<GradCheck> gradcheck(const ModelState& model, const Tensor& x, const std::vector<int>& y,
                                        BnMode mode, const BatchStatsSummary* clean, std::size_t per_layer,
                                        std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  ForwardOptions opts;
  opts.mode = mode;
  opts.clean_stats = clean;
  opts.update_running_stats = false;
  const auto analytic = loss_and_grad(model, x, y, opts).grads;
  std::vector<double> w(y.size(), 1.0 / static_cast<double>(y.size()));
  auto loss_at = [&](const ModelState& m) {
    auto f = forward(m, x, opts);
    return softmax_cross_entropy(f.logits, y, w, nullptr);
  };

  std::mt19937_64 rng(seed);
  std::vector<GradCheck> out;
  ModelState probe = model;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    if (!model.layers[l].has_params()) continue;
    const std::size_t slot = model.param_slot(l);
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t t = slot; t < slot + 2; ++t)
      for (std::size_t i = 0; i < model.params[t].size(); ++i) coords.emplace_back(t, i);
    std::shuffle(coords.begin(), coords.end(), rng);
    if (coords.size() > per_layer) coords.resize(per_layer);

    GradCheck gc{l, model.layers[l].kind, mode, coords.size(), 0.0};
    for (auto [t, i] : coords) {
      const double orig = probe.params[t][i];
      probe.params[t][i] = orig + h;
      const double up = loss_at(probe);
      probe.params[t][i] = orig - h;
      const double down = loss_at(probe);
      probe.params[t][i] = orig;
      const double num = (up - down) / (2.0 * h);
      const double ana = analytic[t][i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      gc.max_rel_error = std::max(gc.max_rel_error, rel);
    }
    out.push_back(gc);
  }
  return out;
}

/// Every (model, mode) combination at once.
inline std::vector<GradCheck> gradcheck_all(std::size_t per_layer) {
  std::vector<GradCheck> all;
  std::uint64_t seed = 100;
  for (auto model : gradcheck_models()) {
    scramble_running_stats(model, seed++);
    const auto x = random_tensor([&] {
      Shape s{8};
      s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
      return s;
    }(), seed++);
    const auto y = random_labels(8, static_cast<int>(model.num_classes()), seed++);
    Shape cs{8};
    cs.insert(cs.end(), model.input_shape.begin(), model.input_shape.end());
    const auto clean = collect_bn_stats(model, random_tensor(cs, seed++));
    for (auto mode : {BnMode::TrainStandard, BnMode::Eval, BnMode::CleanStats}) {
      auto r = gradcheck(model, x, y, mode, &clean, per_layer, seed++);
      all.insert(all.end(), r.begin(), r.end());
    }
  }
  return all;
}

}  // namespace wmtest
