#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "wmlab/data.hpp"
#include "wmlab/model.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

enum class WatermarkKind { Content, Noise, Unrelated };

std::string to_string(WatermarkKind k);
WatermarkKind watermark_kind_from_string(const std::string& s);

struct WatermarkSpec {
  WatermarkKind kind = WatermarkKind::Content;
  int target_label = 0;
  std::uint64_t seed = 0;

  // Content: an opaque-to-transparent rectangular patch. Without an explicit
  // bitmap the built-in "TEST" glyph is rendered at `scale` * image width.
  std::optional<Tensor> patch;      // (h,w) or (C,h,w), values in [0,1]
  std::optional<std::size_t> row;   // top-left corner; default bottom-right
  std::optional<std::size_t> col;
  double transparency = 1.0;
  double scale = 0.5;

  // Noise: one fixed pattern drawn from `seed`, uniform in [-amplitude, amplitude].
  double amplitude = 0.1;

  // Unrelated: "builtin:textures", an IDX image file, or a PGM/PPM directory.
  std::string source = "builtin:textures";
  std::size_t source_count = 256;  // images drawn from builtin sources

  void validate(std::size_t num_classes) const;
};

/// 15x5 monochrome "TEST" bitmap (1 ink, 0 background).
Tensor test_glyph();

/// Prepared trigger for one image geometry. Pure: the output depends only on
/// (image, index); Unrelated cycles through its source as index mod count.
class Watermarker {
 public:
  Watermarker(WatermarkSpec spec, const Shape& image_shape);

  Tensor apply(const Tensor& image, std::size_t index = 0) const;
  /// Watermarks every row of an (N,C,H,W) batch; row i uses index i.
  Tensor apply_batch(const Tensor& images) const;

  const WatermarkSpec& spec() const noexcept { return spec_; }
  /// Content patch placement (row, col, h, w) after defaults resolve.
  struct Placement {
    std::size_t row, col, h, w;
  };
  const Placement& placement() const noexcept { return place_; }
  const Tensor& pattern() const noexcept { return pattern_; }

 private:
  WatermarkSpec spec_;
  Shape shape_;
  Placement place_{};
  Tensor pattern_;  // content patch (C,h,w), noise (C,H,W), or unrelated images
};

Tensor apply_watermark(const Tensor& image, const WatermarkSpec& spec, std::size_t index = 0);

struct WatermarkedSplit {
  LabeledDataset clean_part;
  LabeledDataset wm_part;           // watermarked, relabeled to the target
  std::vector<std::size_t> chosen;  // rows of `clean` moved into wm_part
};

/// Moves a uniformly random `fraction` of `clean` into the watermark part.
WatermarkedSplit build_watermarked_trainset(const LabeledDataset& clean, const WatermarkSpec& spec,
                                            double fraction);

/// Watermarks every image of `test`, keeping the original labels for the
/// WSR exclusion rule.
LabeledDataset make_watermark_testset(const LabeledDataset& test, const WatermarkSpec& spec);

/// Fraction of predictions equal to `target` among samples whose ground
/// truth differs from `target`. ArgumentError if no sample remains.
double wsr_from_predictions(const std::vector<int>& predictions, const std::vector<int>& ground_truth, int target);
double wsr(const ModelState& model, const LabeledDataset& wm_test, int target);

double benign_accuracy(const ModelState& model, const LabeledDataset& test);
std::vector<double> per_class_accuracy(const ModelState& model, const LabeledDataset& test);

}  // namespace wmlab
