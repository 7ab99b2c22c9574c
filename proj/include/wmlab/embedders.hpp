#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "wmlab/data.hpp"
#include "wmlab/engine.hpp"
#include "wmlab/model.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

enum class Embedder { Vanilla, Ew, Cw, App };

std::string to_string(Embedder e);
Embedder embedder_from_string(const std::string& s);

struct TrainPlan {
  Embedder embedder = Embedder::App;
  int epochs = 20;
  std::size_t batch_clean = 64;  // n
  std::size_t batch_wm = 32;     // m
  LrSchedule lr{0.05, {10, 15}, 0, 0.1};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool decay_bn_affine = true;
  double alpha = 0.01;    // watermark-loss coefficient
  double epsilon = 0.02;  // relative perturbation budget
  bool clean_bn = true;   // normalize watermark batches with clean-batch statistics
  double ew_temperature = 2.0;
  int pretrain_epochs = 20;  // EW clean pre-training
  int cw_levels = 4;
  double cw_sigma = 0.02;
  int cw_samples = 1;
  // Replace the EMA running estimates by aggregate clean-set statistics
  // once training ends.
  bool finalize_bn = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double clean_loss = 0.0;
  double wm_loss = 0.0;
  double ba = 0.0;
  double wsr = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t skipped_perturbations = 0;
  double max_budget_deviation = 0.0;  // APP: max |‖δ‖/(ε‖θ‖) - 1|
  double wall_seconds = 0.0;

  /// CSV with header `epoch,clean_loss,wm_loss,ba,wsr`.
  std::string to_csv() const;
};

/// Per-step diagnostics surfaced by train_app.
struct AppStepInfo {
  int epoch = 0;
  std::size_t step = 0;
  double theta_norm = 0.0;
  double delta_norm = 0.0;
  bool skipped = false;
  std::string clean_summary_checksum;
  std::vector<std::string> wm_applied_checksums;  // stats used on watermark passes
  std::string params_before;                      // model checksum before the perturbed pass
  std::string params_after;                       // ... after it, before sgd_step
};

struct TrainHooks {
  std::function<void(const AppStepInfo&)> on_app_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Data the trainer reports on after every epoch (both optional).
struct EvalSets {
  const LabeledDataset* test = nullptr;
  const LabeledDataset* wm_test = nullptr;
  int target = 0;
};

struct TrainResult {
  ModelState model;
  TrainReport report;
};

/// Mixed clean + watermark batches under TrainStandard BN:
/// loss = mean CE(clean) + alpha * mean CE(watermark). alpha == 0 or an empty
/// watermark set trains on clean batches alone.
TrainResult train_vanilla(const TrainPlan& plan, ModelState init, const LabeledDataset& clean,
                          const LabeledDataset& wm, const EvalSets& eval = {}, const TrainHooks& hooks = {});

/// theta_i * exp(|theta_i| T) / max_j exp(|theta_j| T), evaluated stably.
Tensor ew_reweight(const Tensor& layer, double temperature);
/// Model whose dense/conv weights are replaced by their reweighted values.
ModelState ew_model(const ModelState& model, double temperature);
/// Pulls a gradient w.r.t. reweighted weights back to the raw weights.
GradientSet ew_backprop(const ModelState& raw, const GradientSet& grad_reweighted, double temperature);

/// Fine-tunes `pretrained` with reweighted forward passes on mixed batches.
TrainResult train_ew(const TrainPlan& plan, const ModelState& pretrained, const LabeledDataset& clean,
                     const LabeledDataset& wm, const EvalSets& eval = {}, const TrainHooks& hooks = {});

/// Mean over levels i = 1..k (and samples per level) of the gradient at
/// theta + G, G ~ N(0, (sigma i / k)^2 I). sigma == 0 returns the plain gradient.
GradientSet cw_gradient(const ModelState& model, const Tensor& batch, std::span<const int> labels, int levels,
                        double sigma, int samples_per_level, std::mt19937_64& rng, const ForwardOptions& opts,
                        double* mean_loss = nullptr);

/// Clean gradient plus alpha times the noisy watermark gradient.
TrainResult train_cw(const TrainPlan& plan, ModelState init, const LabeledDataset& clean, const LabeledDataset& wm,
                     const EvalSets& eval = {}, const TrainHooks& hooks = {});

/// Adversarial parametric perturbation with clean-sample BatchNorm.
TrainResult train_app(const TrainPlan& plan, ModelState init, const LabeledDataset& clean, const LabeledDataset& wm,
                      const EvalSets& eval = {}, const TrainHooks& hooks = {});

/// Dispatches on plan.embedder; EW pre-trains a clean model from `init` first.
TrainResult train_embedder(const TrainPlan& plan, ModelState init, const LabeledDataset& clean,
                           const LabeledDataset& wm, const EvalSets& eval = {}, const TrainHooks& hooks = {});

}  // namespace wmlab
