#include "wmlab/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "wmlab/engine.hpp"
#include "wmlab/errors.hpp"

namespace wmlab {

std::string to_string(WatermarkKind k) {
  switch (k) {
    case WatermarkKind::Content: return "content";
    case WatermarkKind::Noise: return "noise";
    case WatermarkKind::Unrelated: return "unrelated";
  }
  return "?";
}

WatermarkKind watermark_kind_from_string(const std::string& s) {
  if (s == "content") return WatermarkKind::Content;
  if (s == "noise") return WatermarkKind::Noise;
  if (s == "unrelated") return WatermarkKind::Unrelated;
  throw ConfigError("unknown watermark kind '" + s + "'");
}

void WatermarkSpec::validate(std::size_t num_classes) const {
  if (target_label < 0 || static_cast<std::size_t>(target_label) >= num_classes)
    throw ConfigError("watermark target_label " + std::to_string(target_label) + " outside [0, " +
                      std::to_string(num_classes) + ")");
  if (transparency < 0.0 || transparency > 1.0) throw ConfigError("watermark transparency must lie in [0,1]");
  if (amplitude < 0.0 || amplitude > 1.0) throw ConfigError("watermark amplitude must lie in [0,1]");
  if (!(scale > 0.0) || scale > 1.0) throw ConfigError("watermark scale must lie in (0,1]");
}

Tensor test_glyph() {
  static constexpr const char* kRows[5] = {
      "###.###.###.###",
      ".#..#...#....#.",
      ".#..###.###..#.",
      ".#..#.....#..#.",
      ".#..###.###..#.",
  };
  Tensor g({5, 15});
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 15; ++x) g[y * 15 + x] = kRows[y][x] == '#' ? 1.0 : 0.0;
  return g;
}

namespace {

// Box-filter resample of a (h,w) bitmap to (th,tw).
Tensor resample(const Tensor& src, std::size_t th, std::size_t tw) {
  const std::size_t sh = src.dim(0), sw = src.dim(1);
  Tensor out({th, tw});
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x) {
      const double y0 = static_cast<double>(y) * sh / th, y1 = static_cast<double>(y + 1) * sh / th;
      const double x0 = static_cast<double>(x) * sw / tw, x1 = static_cast<double>(x + 1) * sw / tw;
      double acc = 0.0, area = 0.0;
      for (auto sy = static_cast<std::size_t>(y0); sy < sh && static_cast<double>(sy) < y1; ++sy)
        for (auto sx = static_cast<std::size_t>(x0); sx < sw && static_cast<double>(sx) < x1; ++sx) {
          const double wy = std::min<double>(y1, sy + 1) - std::max<double>(y0, sy);
          const double wx = std::min<double>(x1, sx + 1) - std::max<double>(x0, sx);
          acc += wy * wx * src[sy * sw + sx];
          area += wy * wx;
        }
      out[y * tw + x] = acc / area;
    }
  return out;
}

Tensor load_unrelated(const WatermarkSpec& spec, const Shape& shape) {
  Tensor imgs;
  if (spec.source == "builtin:textures") {
    imgs = make_texture_images(spec.source_count, shape[0], shape[1], spec.seed ^ 0x9e3779b97f4a7c15ULL);
  } else if (std::filesystem::is_directory(spec.source)) {
    imgs = read_image_dir(spec.source).images;
  } else {
    imgs = read_idx_images(spec.source);
  }
  if (imgs.dim(1) != shape[0] || imgs.dim(2) != shape[1] || imgs.dim(3) != shape[2])
    throw ConfigError("unrelated watermark source " + spec.source + " has image shape " + shape_str(imgs.shape()) +
                      ", expected " + shape_str(shape));
  return imgs;
}

}  // namespace

Watermarker::Watermarker(WatermarkSpec spec, const Shape& image_shape) : spec_(std::move(spec)), shape_(image_shape) {
  if (shape_.size() != 3) throw ArgumentError("watermarks apply to (C,H,W) images");
  const std::size_t c = shape_[0], h = shape_[1], w = shape_[2];
  switch (spec_.kind) {
    case WatermarkKind::Content: {
      Tensor patch;
      if (spec_.patch) {
        patch = *spec_.patch;
        if (patch.rank() == 2) patch = patch.reshaped({1, patch.dim(0), patch.dim(1)});
      } else {
        const auto pw = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(spec_.scale * w)));
        const auto ph = std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(pw / 3.0)));
        patch = resample(test_glyph(), ph, pw).reshaped({1, ph, pw});
        for (auto& v : patch.values()) v = v >= 0.5 ? 1.0 : 0.0;  // keep the glyph monochrome
      }
      if (patch.rank() != 3 || (patch.dim(0) != 1 && patch.dim(0) != c))
        throw ArgumentError("content patch must be (h,w) or (C,h,w) with matching channels");
      if (patch.dim(0) == 1 && c > 1) {
        Tensor rep({c, patch.dim(1), patch.dim(2)});
        for (std::size_t ch = 0; ch < c; ++ch)
          std::copy(patch.storage().begin(), patch.storage().end(), rep.data() + ch * patch.size());
        patch = std::move(rep);
      }
      const std::size_t ph = patch.dim(1), pw = patch.dim(2);
      place_.h = ph, place_.w = pw;
      place_.row = spec_.row.value_or(h >= ph + 1 ? h - ph - 1 : 0);
      place_.col = spec_.col.value_or(w >= pw + 1 ? w - pw - 1 : 0);
      if (place_.row + ph > h || place_.col + pw > w)
        throw ArgumentError("content patch " + std::to_string(ph) + "x" + std::to_string(pw) + " at (" +
                            std::to_string(place_.row) + "," + std::to_string(place_.col) +
                            ") exceeds image bounds " + shape_str(shape_));
      for (double v : patch.values())
        if (v < 0.0 || v > 1.0) throw ArgumentError("content patch values must lie in [0,1]");
      pattern_ = std::move(patch);
      break;
    }
    case WatermarkKind::Noise: {
      pattern_ = Tensor(shape_);
      std::mt19937_64 rng(spec_.seed);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      for (auto& v : pattern_.values()) v = spec_.amplitude * dist(rng);
      break;
    }
    case WatermarkKind::Unrelated: pattern_ = load_unrelated(spec_, shape_); break;
  }
}

Tensor Watermarker::apply(const Tensor& image, std::size_t index) const {
  if (image.shape() != shape_)
    throw ArgumentError("image shape " + shape_str(image.shape()) + " does not match watermark geometry " +
                        shape_str(shape_));
  const std::size_t c = shape_[0], h = shape_[1], w = shape_[2];
  switch (spec_.kind) {
    case WatermarkKind::Content: {
      Tensor out = image;
      const double t = spec_.transparency;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < place_.h; ++y)
          for (std::size_t x = 0; x < place_.w; ++x) {
            double& px = out[(ch * h + place_.row + y) * w + place_.col + x];
            const double p = pattern_[(ch * place_.h + y) * place_.w + x];
            px = t == 1.0 ? p : std::clamp((1.0 - t) * px + t * p, 0.0, 1.0);
          }
      return out;
    }
    case WatermarkKind::Noise: {
      Tensor out = image;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i] + pattern_[i], 0.0, 1.0);
      return out;
    }
    case WatermarkKind::Unrelated: {
      const std::size_t row = index % pattern_.dim(0);
      return pattern_.slice_rows(row, row + 1).reshaped(shape_);
    }
  }
  return image;
}

Tensor Watermarker::apply_batch(const Tensor& images) const {
  if (images.rank() != 4) throw ArgumentError("apply_batch expects (N,C,H,W)");
  Tensor out(images.shape());
  const std::size_t rs = images.row_size();
  for (std::size_t i = 0; i < images.dim(0); ++i) {
    const auto one = apply(images.slice_rows(i, i + 1).reshaped(shape_), i);
    std::copy(one.storage().begin(), one.storage().end(), out.data() + i * rs);
  }
  return out;
}

Tensor apply_watermark(const Tensor& image, const WatermarkSpec& spec, std::size_t index) {
  return Watermarker(spec, image.shape()).apply(image, index);
}

WatermarkedSplit build_watermarked_trainset(const LabeledDataset& clean, const WatermarkSpec& spec,
                                            double fraction) {
  clean.validate();
  if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("watermark fraction must lie in (0,1)");
  spec.validate(clean.num_classes);
  const auto split = split_indices(clean.size(), fraction, spec.seed);
  if (split.first.empty())
    throw ArgumentError("watermark fraction " + std::to_string(fraction) + " of " + std::to_string(clean.size()) +
                        " samples selects no sample");
  if (split.second.empty()) throw ArgumentError("watermark fraction leaves no clean samples");
  WatermarkedSplit out;
  out.chosen = split.first;
  out.clean_part = clean.subset(split.second);
  out.wm_part = clean.subset(split.first);
  out.wm_part.images = Watermarker(spec, clean.sample_shape()).apply_batch(out.wm_part.images);
  std::fill(out.wm_part.labels.begin(), out.wm_part.labels.end(), spec.target_label);
  return out;
}

LabeledDataset make_watermark_testset(const LabeledDataset& test, const WatermarkSpec& spec) {
  test.validate();
  spec.validate(test.num_classes);
  LabeledDataset out = test;
  out.images = Watermarker(spec, test.sample_shape()).apply_batch(test.images);
  return out;
}

double wsr_from_predictions(const std::vector<int>& predictions, const std::vector<int>& ground_truth, int target) {
  if (predictions.size() != ground_truth.size()) throw ArgumentError("wsr: prediction/label count mismatch");
  std::size_t counted = 0, hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (ground_truth[i] == target) continue;
    ++counted;
    hits += predictions[i] == target ? 1 : 0;
  }
  if (counted == 0) throw ArgumentError("wsr undefined: every watermark sample already belongs to the target class");
  return static_cast<double>(hits) / static_cast<double>(counted);
}

double wsr(const ModelState& model, const LabeledDataset& wm_test, int target) {
  if (wm_test.size() == 0) throw ArgumentError("wsr: empty watermark set");
  return wsr_from_predictions(predict(model, wm_test.images), wm_test.labels, target);
}

double benign_accuracy(const ModelState& model, const LabeledDataset& test) {
  if (test.size() == 0) throw ArgumentError("benign_accuracy: empty test set");
  const auto pred = predict(model, test.images);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test.labels[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::vector<double> per_class_accuracy(const ModelState& model, const LabeledDataset& test) {
  if (test.size() == 0) throw ArgumentError("per_class_accuracy: empty test set");
  const auto pred = predict(model, test.images);
  std::vector<double> ok(test.num_classes, 0.0), total(test.num_classes, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto y = static_cast<std::size_t>(test.labels[i]);
    total.at(y) += 1.0;
    ok[y] += pred[i] == test.labels[i] ? 1.0 : 0.0;
  }
  for (std::size_t k = 0; k < ok.size(); ++k) ok[k] = total[k] > 0 ? ok[k] / total[k] : 0.0;
  return ok;
}

}  // namespace wmlab
