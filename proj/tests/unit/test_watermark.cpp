#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "../support.hpp"
#include "wmlab/checkpoint.hpp"
#include "wmlab/errors.hpp"
#include "wmlab/watermark.hpp"

using namespace wmlab;
using namespace wmtest;

namespace {

// Flatten + dense whose argmax is always `label`.
ModelState constant_classifier(const Shape& in, std::size_t k, int label) {
  auto m = ModelBuilder(in, 1).flatten().dense(k).build();
  m.params[0].fill(0.0);
  m.params[1].fill(0.0);
  m.params[1][static_cast<std::size_t>(label)] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("wsr hand-counted fixture with two excluded samples") {
  // target 3; samples 0 and 5 already belong to it and do not count.
  const std::vector<int> truth{3, 1, 2, 0, 4, 3, 1, 2, 5, 6};
  const std::vector<int> pred{3, 3, 3, 1, 3, 3, 3, 0, 2, 1};
  // counted: indices 1,2,3,4,6,7,8,9 -> hits at 1,2,4,6
  CHECK(wsr_from_predictions(pred, truth, 3) == 0.5);

  auto with_extra_t = truth;
  auto with_extra_p = pred;
  with_extra_t.push_back(3);
  with_extra_p.push_back(0);
  CHECK(wsr_from_predictions(with_extra_p, with_extra_t, 3) == 0.5);

  CHECK_THROWS_AS(wsr_from_predictions({3, 3}, {3, 3}, 3), ArgumentError);
  CHECK_THROWS_AS(wsr_from_predictions({3}, {3, 1}, 3), ArgumentError);
}

TEST_CASE("constant classifiers give the extreme metric values") {
  const auto data = shapes(200, 4, DatasetRole::Test);
  const Shape in = data.sample_shape();
  CHECK(wsr(constant_classifier(in, 10, 2), data, 2) == 1.0);
  CHECK(wsr(constant_classifier(in, 10, 5), data, 2) == 0.0);

  // balanced labels: constant prediction hits exactly 1/K
  LabeledDataset bal = data;
  for (std::size_t i = 0; i < bal.size(); ++i) bal.labels[i] = static_cast<int>(i % 10);
  CHECK(benign_accuracy(constant_classifier(in, 10, 7), bal) == 0.1);
  const auto pc = per_class_accuracy(constant_classifier(in, 10, 7), bal);
  CHECK(pc[7] == 1.0);
  CHECK(pc[0] == 0.0);
}

TEST_CASE("untrained model on random labels scores near chance") {
  auto data = shapes(2000, 6, DatasetRole::Test);
  data.labels = random_labels(data.size(), 10, 77);
  const auto m = make_architecture("tinycnn", data.sample_shape(), 10, 3);
  const double ba = benign_accuracy(m, data);
  const double sd = std::sqrt(0.1 * 0.9 / 2000.0);
  CHECK(std::abs(ba - 0.1) <= 3.0 * sd);
}

TEST_CASE("opaque content patch replaces exactly its rectangle") {
  WatermarkSpec spec;
  spec.patch = Tensor({2, 3}, std::vector<double>{1, 0, 1, 0, 1, 0});
  spec.row = 1;
  spec.col = 2;
  const Tensor img = random_tensor({1, 6, 6}, 3, 0.0, 1.0);
  const Tensor out = apply_watermark(img, spec);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) {
      const bool in = r >= 1 && r < 3 && c >= 2 && c < 5;
      if (in)
        CHECK(out[r * 6 + c] == (*spec.patch)[(r - 1) * 3 + (c - 2)]);
      else
        CHECK(out[r * 6 + c] == img[r * 6 + c]);
    }
}

TEST_CASE("half-transparent patch blends arithmetically") {
  WatermarkSpec spec;
  spec.patch = Tensor({3, 3}, 1.0);
  spec.transparency = 0.5;
  spec.row = 0;
  spec.col = 0;
  const Tensor out = apply_watermark(Tensor({1, 8, 8}, 0.4), spec);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(out[r * 8 + c] - 0.7) <= 1e-12);
  CHECK(out[5 * 8 + 5] == 0.4);
}

TEST_CASE("default glyph sits in the bottom-right corner and is monochrome") {
  WatermarkSpec spec;
  Watermarker w(spec, {1, 16, 16});
  const auto& p = w.placement();
  // one pixel of margin to the bottom and right edges
  CHECK(p.row + p.h == 15);
  CHECK(p.col + p.w == 15);
  CHECK(p.w == 8);
  for (double v : w.pattern().values()) CHECK((v == 0.0 || v == 1.0));
  CHECK(test_glyph().shape() == Shape{5, 15});
}

TEST_CASE("patch outside the image is rejected") {
  WatermarkSpec spec;
  spec.patch = Tensor({4, 4}, 1.0);
  spec.row = 6;
  spec.col = 0;
  CHECK_THROWS_AS(apply_watermark(Tensor({1, 8, 8}, 0.0), spec), ArgumentError);
}

TEST_CASE("noise watermark is one fixed pattern, clamped to the unit range") {
  WatermarkSpec spec;
  spec.kind = WatermarkKind::Noise;
  spec.amplitude = 0.0;
  const Tensor img = random_tensor({1, 8, 8}, 8, 0.0, 1.0);
  CHECK(apply_watermark(img, spec) == img);

  spec.amplitude = 0.5;
  spec.seed = 9;
  Watermarker w(spec, {1, 8, 8});
  const Tensor a = random_tensor({1, 8, 8}, 1, 0.2, 0.8);
  const Tensor b = random_tensor({1, 8, 8}, 2, 0.2, 0.8);
  const Tensor wa = w.apply(a, 0), wb = w.apply(b, 17);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = wa[i] - a[i], db = wb[i] - b[i];
    if (wa[i] > 0 && wa[i] < 1 && wb[i] > 0 && wb[i] < 1) CHECK(da == doctest::Approx(db).epsilon(1e-12));
  }
  const Tensor white = w.apply(Tensor({1, 8, 8}, 1.0)), black = w.apply(Tensor({1, 8, 8}, 0.0));
  for (double v : white.values()) CHECK((v >= 0.0 && v <= 1.0));
  for (double v : black.values()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(Watermarker(spec, {1, 8, 8}).pattern() == w.pattern());
}

TEST_CASE("unrelated watermark cycles through its source") {
  WatermarkSpec spec;
  spec.kind = WatermarkKind::Unrelated;
  spec.source_count = 4;
  Watermarker w(spec, {1, 8, 8});
  const Tensor a = random_tensor({1, 8, 8}, 1, 0.0, 1.0);
  const Tensor b = random_tensor({1, 8, 8}, 2, 0.0, 1.0);
  CHECK(w.apply(a, 1) == w.apply(b, 5));
  CHECK_FALSE(w.apply(a, 1) == w.apply(a, 2));
}

TEST_CASE("watermarked trainset partitions the clean data") {
  const auto clean = shapes(1000, 3);
  WatermarkSpec spec;
  spec.target_label = 4;
  spec.seed = 21;
  const auto s = build_watermarked_trainset(clean, spec, 0.01);
  CHECK(s.wm_part.size() == 10);
  CHECK(s.clean_part.size() == 990);
  for (int l : s.wm_part.labels) CHECK(l == 4);
  std::set<std::size_t> chosen(s.chosen.begin(), s.chosen.end());
  CHECK(chosen.size() == 10);
  const auto again = build_watermarked_trainset(clean, spec, 0.01);
  CHECK(again.chosen == s.chosen);
  CHECK(again.wm_part.images == s.wm_part.images);
  // each wm image is the watermarked version of its chosen row
  for (std::size_t i = 0; i < s.chosen.size(); ++i) {
    const Tensor src = clean.images.slice_rows(s.chosen[i], s.chosen[i] + 1).reshaped(clean.sample_shape());
    const Tensor got = s.wm_part.images.slice_rows(i, i + 1).reshaped(clean.sample_shape());
    CHECK(got == apply_watermark(src, spec, i));
  }
  CHECK_THROWS_AS(build_watermarked_trainset(shapes(40, 3), spec, 0.01), ArgumentError);
  CHECK_THROWS_AS(build_watermarked_trainset(clean, spec, 1.0), ArgumentError);
}

TEST_CASE("watermark test set keeps original labels") {
  const auto test = shapes(100, 5, DatasetRole::Test);
  WatermarkSpec spec;
  const auto wm = make_watermark_testset(test, spec);
  CHECK(wm.labels == test.labels);
  CHECK_FALSE(wm.images == test.images);
}

TEST_CASE("split_indices is a seeded partition") {
  const auto s = split_indices(500, 0.8, 4);
  CHECK(s.first.size() == 400);
  CHECK(s.second.size() == 100);
  std::vector<std::size_t> all = s.first;
  all.insert(all.end(), s.second.begin(), s.second.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK(split_indices(500, 0.8, 4).first == s.first);
  CHECK_FALSE(split_indices(500, 0.8, 5).first == s.first);
  CHECK_THROWS_AS(split_indices(10, 1.5, 0), ArgumentError);
}

TEST_CASE("IDX files round-trip") {
  const auto dir = temp_dir("idx");
  Tensor img({3, 1, 4, 4});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  write_idx_images(dir / "x.idx", img);
  write_idx_labels(dir / "y.idx", {0, 7, 2});
  CHECK(read_idx_images(dir / "x.idx") == img);
  CHECK(read_idx_labels(dir / "y.idx") == std::vector<int>{0, 7, 2});
  CHECK_THROWS_AS(read_idx_images(dir / "missing.idx"), ConfigError);
}

TEST_CASE("image directories take labels from the file name prefix") {
  const auto dir = temp_dir("imgdir");
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 3; ++i)
      write_pgm(dir / (std::to_string(c) + "_img" + std::to_string(i) + ".pgm"), Tensor({1, 5, 5}, c * 0.5 + i * 0.1));
  write_pgm(dir / "nolabel.pgm", Tensor({1, 5, 5}, 0.2));
  const auto got = read_image_dir(dir);
  CHECK(got.images.shape() == Shape{7, 1, 5, 5});
  CHECK(std::count(got.labels.begin(), got.labels.end(), 1) == 3);
  CHECK(got.labels.back() == -1);
  CHECK(std::abs(got.images[0] - 0.0) < 1e-12);
}

TEST_CASE("shapes dataset is seed-deterministic with pixels in the unit range") {
  const auto a = shapes(300, 1), b = shapes(300, 1), c = shapes(300, 2);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(a.images == c.images);
  for (double v : a.images.values()) CHECK((v >= 0.0 && v <= 1.0));
  std::vector<int> counts(10, 0);
  for (int l : a.labels) ++counts[static_cast<std::size_t>(l)];
  for (int n : counts) CHECK(n > 0);
}

TEST_CASE("BA survives a checkpoint round-trip") {
  const auto test = shapes(200, 8, DatasetRole::Test);
  const auto m = make_architecture("tinycnn", test.sample_shape(), 10, 4);
  const auto dir = temp_dir("ba");
  save_checkpoint(m, dir / "m.wmck");
  CHECK(benign_accuracy(load_checkpoint(dir / "m.wmck").model, test) == benign_accuracy(m, test));
}
