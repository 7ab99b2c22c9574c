#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/data.hpp"
#include "wmlab/embedders.hpp"
#include "wmlab/model.hpp"
#include "wmlab/schedule.hpp"

namespace wmlab {

enum class AttackKind { Ft, Fp, Anp };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

struct AttackPlan {
  AttackKind attack = AttackKind::Ft;
  int epochs = 10;
  LrSchedule lr{0.05, {}, 2, 0.5};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  // Unset: 0.9 for fp, 0.6 for anp.
  std::optional<double> prune_fraction;
  double anp_epsilon = 0.4;  // relative perturbation of each channel's BN affine pair
  std::uint64_t seed = 0;

  double resolved_prune_fraction() const;
  void validate() const;
};

struct AttackEpoch {
  int epoch = 0;
  double wsr = 0.0;
  double ba = 0.0;
};

struct PrunedChannel {
  std::size_t layer = 0;
  std::size_t channel = 0;
  double score = 0.0;
};

struct AttackReport {
  std::string attack;  // "ft", "fp", "anp-lite"
  double wsr_before = 0.0;
  double ba_before = 0.0;
  // Epoch 0 is the model right after pruning (or the input for ft); row e>0
  // follows fine-tuning epoch e.
  std::vector<AttackEpoch> epochs;
  std::vector<PrunedChannel> pruned;
  double wall_seconds = 0.0;

  double wsr_after() const;
  double ba_after() const;
  /// CSV with header `epoch,wsr,ba`.
  std::string to_csv() const;
};

struct AttackResult {
  ModelState model;
  AttackReport report;
};

/// SGD fine-tuning on the attacker holdout. Batches come only from `holdout`,
/// whose role must be AttackerHoldout.
AttackResult attack_ft(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                       const EvalSets& eval = {});

/// Mean activation of every channel of `layer` over `images` (Eval mode).
std::vector<double> channel_mean_activation(const ModelState& model, const Tensor& images, std::size_t layer);

/// Masks the ceil(fraction * C) least-activated channels of the last feature
/// layer, then fine-tunes with attack_ft's schedule.
AttackResult attack_fp(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                       const EvalSets& eval = {});

/// One BatchNorm channel scored by ANP-lite.
struct ChannelSensitivity {
  std::size_t layer = 0;  // BatchNorm layer index
  std::size_t channel = 0;
  double sign = 0.0;      // direction of the single-step worst-case perturbation
  double score = 0.0;     // holdout loss increase under that perturbation
};

/// Scales gamma_c and beta_c by (1 + sign * epsilon) one channel at a time
/// and records the Eval-mode holdout loss increase. The sign follows the
/// loss gradient with respect to the channel's scale.
std::vector<ChannelSensitivity> anp_sensitivity(const ModelState& model, const LabeledDataset& holdout,
                                                double epsilon);

/// ANP-lite: prunes the most perturbation-sensitive BatchNorm channels up to
/// ceil(rate * total channels), then re-estimates BatchNorm on the holdout.
AttackResult attack_anp(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                        const EvalSets& eval = {});

AttackResult run_attack(const ModelState& model, const LabeledDataset& holdout, const AttackPlan& plan,
                        const EvalSets& eval = {});

}  // namespace wmlab
