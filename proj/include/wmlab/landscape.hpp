#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/data.hpp"
#include "wmlab/engine.hpp"
#include "wmlab/model.hpp"

namespace wmlab {

struct DirectionPair {
  GradientSet d_adv;  // watermark-loss gradient at theta_w
  GradientSet d_ft;   // theta_FT - theta_w
  double adv_norm = 0.0;
  double ft_norm = 0.0;
};

/// Full-batch watermark-loss gradient at the model, Eval-mode BatchNorm.
/// ArgumentError on an empty set, NumericError on a zero gradient.
GradientSet adversarial_direction(const ModelState& model, const LabeledDataset& wm);

struct FinetuneDirectionOptions {
  int iterations = 40;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

/// theta_FT - theta_w after `iterations` SGD steps on clean holdout batches.
GradientSet finetune_direction(const ModelState& model, const LabeledDataset& holdout,
                               const FinetuneDirectionOptions& opts = {});

DirectionPair make_direction_pair(GradientSet d_adv, GradientSet d_ft);

/// Axis values lo, lo + step, ..., hi; values within 1e-12 of zero snap to 0.
std::vector<double> grid_axis(double lo, double hi, double step);

struct GridSpec {
  double alpha_min = -0.05, alpha_max = 0.05, alpha_step = 0.005;
  double beta_min = -0.05, beta_max = 0.05, beta_step = 0.005;
  std::size_t bn_samples = 1024;  // clean images used to re-estimate BatchNorm per cell
  int bn_passes = 1;

  std::vector<double> alphas() const { return grid_axis(alpha_min, alpha_max, alpha_step); }
  std::vector<double> betas() const { return grid_axis(beta_min, beta_max, beta_step); }
  void validate() const;
};

/// theta_w + alpha d_adv/|d_adv| |theta_w| + beta d_ft/|d_ft| |theta_w|.
ModelState neighbor(const ModelState& theta_w, const DirectionPair& pair, double alpha, double beta);

struct LandscapeCell {
  double alpha = 0.0;
  double beta = 0.0;
  double wsr = 0.0;
  double ba = 0.0;
  double rel_distance = 0.0;
};

struct LandscapeGrid {
  GridSpec spec;
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<LandscapeCell> cells;  // beta-major: cells[j * alphas.size() + i]
  std::string model_checksum;
  double theta_norm = 0.0;
  double adv_norm = 0.0;
  double ft_norm = 0.0;
  std::size_t bn_samples_used = 0;

  const LandscapeCell& at(std::size_t alpha_index, std::size_t beta_index) const;
  const LandscapeCell& origin() const;
  /// Smallest |alpha| on the beta = 0 row whose WSR drops below `threshold`;
  /// +infinity when no cell does.
  double erase_radius(double threshold = 0.5) const;
  /// CSV with header `alpha,beta,wsr,ba`.
  std::string to_csv() const;
  nlohmann::json metadata() const;
};

struct ScanData {
  const LabeledDataset* bn_clean = nullptr;  // BatchNorm re-estimation source
  const LabeledDataset* test = nullptr;      // BA
  const LabeledDataset* wm_test = nullptr;   // WSR
  int target = 0;
};

/// Evaluates every grid cell on its own neighbor model with BatchNorm
/// re-estimated on the first bn_samples clean images. Cells run in parallel
/// (threads = 0 uses thread_count()); the input model is never modified.
LandscapeGrid scan(const ModelState& model, const DirectionPair& pair, const GridSpec& grid, const ScanData& data,
                   std::size_t threads = 0);

/// Penultimate features, one row per image: `source,label,f0,...,f{D-1}`
/// with source "clean" or "watermark".
std::string export_embeddings(const ModelState& model, const LabeledDataset& clean, const LabeledDataset& wm);

}  // namespace wmlab
