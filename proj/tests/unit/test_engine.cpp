#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "../support.hpp"
#include "wmlab/checkpoint.hpp"
#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"

using namespace wmlab;
using namespace wmtest;

TEST_CASE("tensor shape checks") {
  CHECK_THROWS_AS(Tensor({2, 0}), ArgumentError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), ArgumentError);
  Tensor t({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(t.slice_rows(1, 3).storage() == std::vector<double>{3, 4, 5, 6});
  std::vector<std::size_t> rows{2, 0};
  CHECK(t.gather_rows(rows).storage() == std::vector<double>{5, 6, 1, 2});
  CHECK_THROWS_AS(t.reshaped({4}), ArgumentError);
}

TEST_CASE("finite differences agree with backprop for every layer and BatchNorm mode") {
  const auto checks = gradcheck_all(40);
  CHECK(checks.size() == 3 * (7 + 2));
  for (const auto& c : checks) {
    INFO("layer " << c.layer << " " << to_string(c.kind) << " " << to_string(c.mode));
    CHECK(c.max_rel_error <= 1e-4);
  }
}

TEST_CASE("finite differences hold with most channels of a layer pruned") {
  auto model = gradcheck_models().front();
  scramble_running_stats(model, 40);
  std::vector<std::uint8_t> keep(60, 0);
  for (std::size_t c = 0; c < 60; c += 10) keep[c] = 1;
  model.channel_masks[6] = keep;
  const auto x = random_tensor({8, 2, 7, 7}, 41);
  const auto y = random_labels(8, 5, 42);
  const auto clean = collect_bn_stats(model, random_tensor({8, 2, 7, 7}, 43));
  for (auto mode : {BnMode::TrainStandard, BnMode::Eval, BnMode::CleanStats})
    for (const auto& c : gradcheck(model, x, y, mode, &clean, 40, 44)) {
      INFO("layer " << c.layer << " " << to_string(mode));
      CHECK(c.max_rel_error <= 1e-4);
    }
}

TEST_CASE("two-layer net matches straight-line matrix evaluation") {
  auto m = ModelBuilder({4}, 7).dense(5).relu().dense(3).build();
  const auto x = random_tensor({6, 4}, 7);
  const auto got = forward(m, x, {.mode = BnMode::Eval}).logits;
  const auto& w1 = m.params.at("0.weight");
  const auto& b1 = m.params.at("0.bias");
  const auto& w2 = m.params.at("2.weight");
  const auto& b2 = m.params.at("2.bias");
  for (std::size_t n = 0; n < 6; ++n) {
    double h[5];
    for (std::size_t j = 0; j < 5; ++j) {
      h[j] = b1[j];
      for (std::size_t i = 0; i < 4; ++i) h[j] += w1[j * 4 + i] * x[n * 4 + i];
      h[j] = std::max(h[j], 0.0);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      double z = b2[k];
      for (std::size_t j = 0; j < 5; ++j) z += w2[k * 5 + j] * h[j];
      CHECK(got[n * 3 + k] == doctest::Approx(z).epsilon(1e-13));
    }
  }
}

TEST_CASE("softmax cross-entropy of uniform logits is log K") {
  Tensor logits({3, 5});
  std::vector<int> y{0, 3, 4};
  std::vector<double> w(3, 1.0 / 3.0);
  Tensor d;
  CHECK(softmax_cross_entropy(logits, y, w, &d) == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  // dL/dz = w (softmax - onehot)
  CHECK(d[0] == doctest::Approx((0.2 - 1.0) / 3.0));
  CHECK(d[1] == doctest::Approx(0.2 / 3.0));
  std::vector<int> bad{0, 5, 1};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad, w, nullptr), ArgumentError);
}

TEST_CASE("TrainStandard normalizes with batch moments and updates running estimates") {
  auto m = ModelBuilder({4}, 3).batchnorm().build();
  const auto x = random_tensor({16, 4}, 9, -2.0, 3.0);
  ForwardOptions opts{.mode = BnMode::TrainStandard};
  const auto before = m.bn_stats.at(0);
  const auto out = forward(m, x, opts);
  const double eps = before.eps;
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0, var = 0, omean = 0, ovar = 0;
    for (std::size_t n = 0; n < 16; ++n) mean += x[n * 4 + c], omean += out.logits[n * 4 + c];
    mean /= 16, omean /= 16;
    for (std::size_t n = 0; n < 16; ++n) {
      var += std::pow(x[n * 4 + c] - mean, 2);
      ovar += std::pow(out.logits[n * 4 + c] - omean, 2);
    }
    var /= 16, ovar /= 16;
    CHECK(omean == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(ovar == doctest::Approx(var / (var + eps)).epsilon(1e-12));
    const auto& r = m.bn_stats.at(0);
    CHECK(r.running_mean[c] == doctest::Approx(0.9 * before.running_mean[c] + 0.1 * mean).epsilon(1e-12));
    CHECK(r.running_var[c] == doctest::Approx(0.9 * before.running_var[c] + 0.1 * var * 16.0 / 15.0).epsilon(1e-12));
  }
}

TEST_CASE("Eval and CleanStats leave running estimates untouched") {
  auto m = make_architecture("tinycnn", {1, 8, 8}, 10, 1);
  scramble_running_stats(m, 4);
  const auto snapshot = m.bn_stats;
  const auto x = random_tensor({5, 1, 8, 8}, 2);
  forward(m, x, {.mode = BnMode::Eval});
  const auto clean = collect_bn_stats(m, random_tensor({7, 1, 8, 8}, 3));
  const auto fr = forward(m, x, {.mode = BnMode::CleanStats, .clean_stats = &clean});
  forward(m, x, {.mode = BnMode::TrainStandard, .update_running_stats = false});
  CHECK(m.bn_stats == snapshot);
  for (const auto& [li, st] : fr.cache.applied.layers) CHECK(st == clean.layers.at(li));
  CHECK_THROWS_AS(forward(m, x, {.mode = BnMode::CleanStats}), ArgumentError);
}

TEST_CASE("sgd_step follows the momentum recurrence with decoupled weight decay") {
  auto m = ModelBuilder({3}, 5).dense(2).build();
  const SgdOptions o{.lr = 0.1, .momentum = 0.9, .weight_decay = 0.01};
  auto theta = m.params.flatten();
  std::vector<double> v(theta.size(), 0.0);
  GradientSet vel;
  for (int step = 0; step < 3; ++step) {
    auto g = m.params.zeros_like();
    std::vector<double> gf(theta.size());
    for (std::size_t i = 0; i < gf.size(); ++i) gf[i] = std::sin(1.0 + i + 7.0 * step);
    g.unflatten(gf);
    sgd_step(m, g, o, vel);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = 0.9 * v[i] + gf[i];
      theta[i] = theta[i] - 0.1 * v[i] - 0.1 * 0.01 * theta[i];
    }
  }
  const auto got = m.params.flatten();
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(theta[i]).epsilon(1e-15));
  CHECK_THROWS_AS(sgd_step(m, m.params.zeros_like(), {.lr = -1.0}, vel), ArgumentError);
}

TEST_CASE("decay_bn_affine false exempts gamma and beta from weight decay") {
  auto m = ModelBuilder({2}, 5).dense(3).batchnorm().build();
  const auto before = m;
  GradientSet vel;
  sgd_step(m, m.params.zeros_like(), {.lr = 0.5, .weight_decay = 0.1, .decay_bn_affine = false}, vel);
  CHECK(m.params.at("1.gamma") == before.params.at("1.gamma"));
  CHECK(m.params.at("1.beta") == before.params.at("1.beta"));
  CHECK(m.params.at("0.weight")[0] == doctest::Approx(before.params.at("0.weight")[0] * 0.95));
}

TEST_CASE("bn_reestimate recovers the population moments of the data") {
  auto m = ModelBuilder({3}, 5).batchnorm().build();
  const auto x = random_tensor({300, 3}, 4, 1.0, 3.0);
  const auto r = bn_reestimate(m, x, 1, 64);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (std::size_t n = 0; n < 300; ++n) mean += x[n * 3 + c];
    mean /= 300;
    for (std::size_t n = 0; n < 300; ++n) var += std::pow(x[n * 3 + c] - mean, 2);
    var /= 300;
    CHECK(r.bn_stats.at(0).running_mean[c] == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.bn_stats.at(0).running_var[c] == doctest::Approx(var).epsilon(1e-10));
  }
  CHECK(r.params == m.params);
  CHECK_THROWS_AS(bn_reestimate(m, x, 0), ArgumentError);
}

TEST_CASE("add_scaled and parameter norms") {
  auto m = make_architecture("mlp", {1, 4, 4}, 3, 2);
  auto d = m.params.zeros_like();
  d[0][0] = 1.0;
  const auto n = add_scaled(m, d, 0.25);
  CHECK(n.params[0][0] == m.params[0][0] + 0.25);
  CHECK(n.bn_stats == m.bn_stats);
  const auto flat = m.params.flatten();
  double ss = 0;
  for (double v : flat) ss += v * v;
  CHECK(param_l2_norm(m) == doctest::Approx(std::sqrt(ss)).epsilon(1e-14));
}

TEST_CASE("non-finite activations raise NumericError") {
  auto m = make_architecture("mlp", {1, 4, 4}, 3, 2);
  m.params[0][0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(predict(m, random_tensor({2, 1, 4, 4}, 1)), NumericError);
}

TEST_CASE("checkpoints round-trip bit-exactly and detect tampering") {
  auto m = make_architecture("tinycnn", {1, 8, 8}, 10, 7);
  scramble_running_stats(m, 3);
  m.channel_masks[m.last_feature_layer()] = std::vector<std::uint8_t>(16, 1);
  m.channel_masks[m.last_feature_layer()][3] = 0;
  const auto dir = temp_dir("ckpt");
  const auto path = dir / "m.wmck";
  save_checkpoint(m, path, {{"note", "x"}});
  const auto back = load_checkpoint(path);
  CHECK(back.model == m);
  CHECK(model_checksum(back.model) == model_checksum(m));
  CHECK(back.sidecar["metadata"]["note"] == "x");
  CHECK(decode_checkpoint(encode_checkpoint(m)) == m);

  auto bytes = encode_checkpoint(m);
  bytes[bytes.size() / 2] ^= std::byte{1};
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(path, true), IntegrityError);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(bytes), IntegrityError);
}

TEST_CASE("architectures are deterministic in their seed") {
  for (const auto& id : architecture_ids()) {
    CHECK(make_architecture(id, {1, 16, 16}, 10, 3) == make_architecture(id, {1, 16, 16}, 10, 3));
    CHECK_FALSE(make_architecture(id, {1, 16, 16}, 10, 3).params == make_architecture(id, {1, 16, 16}, 10, 4).params);
  }
  CHECK_THROWS_AS(make_architecture("resnet", {1, 16, 16}, 10, 0), ConfigError);
}
