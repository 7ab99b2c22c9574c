#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wmlab/tensor.hpp"

namespace wmlab {

enum class DatasetRole { OwnerTrain, AttackerHoldout, Test, Unlabeled };

std::string to_string(DatasetRole r);

/// Images (N,C,H,W) in [0,1] with one class label per image.
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  DatasetRole role = DatasetRole::OwnerTrain;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
  /// Rows by index; role and class count carried over.
  LabeledDataset subset(const std::vector<std::size_t>& rows) const;
  void validate() const;
};

/// Procedural shapes: K parametric shape classes with position, size,
/// intensity and background jitter. Fully determined by the seed.
struct ShapesConfig {
  std::size_t num_classes = 10;
  std::size_t image_size = 16;
  std::size_t samples = 1000;
  double noise = 0.05;
  std::uint64_t seed = 0;
};

LabeledDataset make_shapes_dataset(const ShapesConfig& cfg);

/// Unlabeled procedural textures (stripes, checkers, blobs): an unrelated
/// image domain for Unrelated-kind watermarks.
Tensor make_texture_images(std::size_t count, std::size_t channels, std::size_t image_size, std::uint64_t seed);

/// IDX raw binary: big-endian magic 0x0000 08 <ndims>, big-endian u32 dims,
/// uint8 payload. Images are (N,H,W) or (N,C,H,W); labels are (N).
Tensor read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const Tensor& images);
void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels);

/// Directory of binary PGM (P5, one channel) or PPM (P6, three channels)
/// images read in file-name order. A `<label>_` file-name prefix supplies the
/// class; otherwise the label is -1.
struct ImageDirContents {
  Tensor images;
  std::vector<int> labels;
};
ImageDirContents read_image_dir(const std::filesystem::path& dir);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// Disjoint seed-determined split: the first part takes round(fraction * N)
/// rows of a random permutation, the second takes the rest.
struct SplitIndices {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};
SplitIndices split_indices(std::size_t n, double first_fraction, std::uint64_t seed);

}  // namespace wmlab
