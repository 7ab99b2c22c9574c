#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "wmlab/model.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

/// How BatchNorm layers obtain their normalization statistics.
enum class BnMode {
  TrainStandard,  // current batch statistics; running estimates updated
  Eval,           // running estimates; nothing mutates
  CleanStats,     // injected clean-batch summary; nothing mutates
};

std::string to_string(BnMode m);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (population) variance
  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

/// Per-BatchNorm-layer channel moments of one forward pass, keyed by layer index.
struct BatchStatsSummary {
  std::map<std::size_t, ChannelStats> layers;
  std::string checksum() const;
  friend bool operator==(const BatchStatsSummary&, const BatchStatsSummary&) = default;
};

struct ForwardOptions {
  BnMode mode = BnMode::Eval;
  const BatchStatsSummary* clean_stats = nullptr;  // required for CleanStats
  // TrainStandard only: false normalizes with batch statistics but leaves the
  // running estimates alone (watermark-only batches, probes).
  bool update_running_stats = true;
};

struct LayerCache {
  Tensor input;
  std::vector<double> col;              // conv: im2col of the input
  Tensor xhat;                          // batchnorm
  std::vector<double> inv_std;          // batchnorm
  bool batch_normalized = false;        // batchnorm used batch statistics
  std::vector<std::uint32_t> argmax;    // maxpool
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  BatchStatsSummary observed;  // moments seen at each BatchNorm input
  BatchStatsSummary applied;   // statistics each BatchNorm normalized with
};

struct ForwardResult {
  Tensor logits;
  ForwardCache cache;
};

/// Runs the network. TrainStandard with update_running_stats mutates bn_stats.
ForwardResult forward(ModelState& model, const Tensor& batch, const ForwardOptions& opts);
/// Non-mutating overload; rejects TrainStandard with update_running_stats set.
ForwardResult forward(const ModelState& model, const Tensor& batch, const ForwardOptions& opts);

/// Reverse pass for a cached forward; `dlogits` is dLoss/dLogits.
GradientSet backward(const ModelState& model, const ForwardCache& cache, const Tensor& dlogits);

struct LossGrad {
  double loss = 0.0;
  GradientSet grads;
  Tensor logits;
  BatchStatsSummary observed;
  BatchStatsSummary applied;
};

/// Mean softmax cross-entropy and its exact parameter gradient.
LossGrad loss_and_grad(ModelState& model, const Tensor& batch, std::span<const int> labels,
                       const ForwardOptions& opts);
LossGrad loss_and_grad(const ModelState& model, const Tensor& batch, std::span<const int> labels,
                       const ForwardOptions& opts);
/// Cross-entropy weighted per sample: loss = sum_i weights[i] * ce_i.
LossGrad loss_and_grad_weighted(ModelState& model, const Tensor& batch, std::span<const int> labels,
                                std::span<const double> weights, const ForwardOptions& opts);
LossGrad loss_and_grad_weighted(const ModelState& model, const Tensor& batch, std::span<const int> labels,
                                std::span<const double> weights, const ForwardOptions& opts);

/// Per-sample cross-entropy and dLoss/dLogits for `loss = sum weights[i] * ce_i`.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const double> weights,
                             Tensor* dlogits);

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool decay_bn_affine = true;  // apply weight decay to BatchNorm gamma/beta
};

/// Momentum SGD with decoupled weight decay:
///   v <- mu v + g;  theta <- theta - lr v - lr wd theta.
void sgd_step(ModelState& model, const GradientSet& grads, const SgdOptions& opts, GradientSet& velocity);

double l2_norm(const ParamSet& p);
double dot(const ParamSet& a, const ParamSet& b);
/// y += a * x
void axpy(ParamSet& y, double a, const ParamSet& x);
void scale(ParamSet& p, double a);

/// Euclidean norm of all trainable parameters (running statistics excluded).
double param_l2_norm(const ModelState& model);

/// theta + scale * direction; bn_stats and masks copied unchanged.
ModelState add_scaled(const ModelState& model, const GradientSet& direction, double scale);

/// Replaces running mean/var by aggregate statistics of `clean_images`.
/// Pass 1 observes every layer under batch-statistics normalization; each
/// further pass re-observes under Eval mode using the previous estimates.
ModelState bn_reestimate(const ModelState& model, const Tensor& clean_images, int passes,
                         std::size_t batch_size = 256);

/// Channel moments at each BatchNorm input for one forward pass of `batch`
/// in `mode` (TrainStandard here never updates running estimates).
BatchStatsSummary collect_bn_stats(const ModelState& model, const Tensor& batch,
                                   BnMode mode = BnMode::TrainStandard);

/// Eval-mode top-1 predictions.
std::vector<int> predict(const ModelState& model, const Tensor& images, std::size_t batch_size = 256);
/// Eval-mode mean cross-entropy.
double evaluate_loss(const ModelState& model, const Tensor& images, std::span<const int> labels,
                     std::size_t batch_size = 256);
/// Eval-mode output of `layer` (pre-mask output is never exposed).
Tensor layer_output(const ModelState& model, const Tensor& images, std::size_t layer,
                    std::size_t batch_size = 256);
/// Eval-mode input to the final dense layer: the penultimate feature vector.
Tensor penultimate_features(const ModelState& model, const Tensor& images, std::size_t batch_size = 256);

}  // namespace wmlab
