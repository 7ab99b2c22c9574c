#include "wmlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "wmlab/errors.hpp"

namespace wmlab {

std::string to_string(DatasetRole r) {
  switch (r) {
    case DatasetRole::OwnerTrain: return "owner-train";
    case DatasetRole::AttackerHoldout: return "attacker-holdout";
    case DatasetRole::Test: return "test";
    case DatasetRole::Unlabeled: return "unlabeled";
  }
  return "?";
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& rows) const {
  LabeledDataset out;
  out.images = images.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(r));
  out.role = role;
  out.num_classes = num_classes;
  return out;
}

void LabeledDataset::validate() const {
  if (labels.empty()) throw ArgumentError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size())
    throw ArgumentError("dataset images must be (N,C,H,W) with one label per image, got " +
                        shape_str(images.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw ArgumentError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
}

// ------------------------------------------------------------------ shapes

namespace {

bool shape_member(std::size_t cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return au < 0.8 && av < 0.8;
    case 1: {
      const double m = std::max(au, av);
      return m > 0.55 && m < 0.85;
    }
    case 2: return u * u + v * v < 0.8 * 0.8;
    case 3: {
      const double r = std::sqrt(u * u + v * v);
      return r > 0.5 && r < 0.85;
    }
    case 4: return av < 0.25 && au < 0.95;
    case 5: return au < 0.25 && av < 0.95;
    case 6: return (au < 0.22 && av < 0.9) || (av < 0.22 && au < 0.9);
    case 7: return au < 0.8 && av < 0.8 && (std::abs(u - v) < 0.3 || std::abs(u + v) < 0.3);
    case 8: return v > -0.8 && v < 0.7 && au < (v + 0.8) / 1.5 * 0.85;
    case 9: return (u - 0.5) * (u - 0.5) + v * v < 0.09 || (u + 0.5) * (u + 0.5) + v * v < 0.09;
    default: return false;
  }
}

}  // namespace

LabeledDataset make_shapes_dataset(const ShapesConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > 10) throw ConfigError("shapes dataset supports 2..10 classes");
  if (cfg.image_size < 8) throw ConfigError("shapes dataset needs image_size >= 8");
  if (cfg.samples == 0) throw ConfigError("shapes dataset needs samples > 0");
  const std::size_t s = cfg.image_size;
  LabeledDataset ds;
  ds.num_classes = cfg.num_classes;
  ds.images = Tensor({cfg.samples, 1, s, s});
  ds.labels.resize(cfg.samples);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double half = static_cast<double>(s) / 2.0;
  constexpr int kSuper = 3;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const auto cls = static_cast<std::size_t>(i % cfg.num_classes);
    ds.labels[i] = static_cast<int>(cls);
    const double cx = half + (unit(rng) - 0.5) * 0.3 * s;
    const double cy = half + (unit(rng) - 0.5) * 0.3 * s;
    const double radius = (0.22 + 0.14 * unit(rng)) * s;
    const double angle = (unit(rng) - 0.5) * 0.6;
    const double fg = 0.55 + 0.45 * unit(rng);
    const double bg = 0.25 * unit(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    double* img = ds.images.data() + i * s * s;
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / kSuper - cx;
            const double py = static_cast<double>(y) + (sy + 0.5) / kSuper - cy;
            const double u = (ca * px + sa * py) / radius;
            const double v = (-sa * px + ca * py) / radius;
            hits += shape_member(cls, u, v) ? 1 : 0;
          }
        const double cover = static_cast<double>(hits) / (kSuper * kSuper);
        const double val = bg + (fg - bg) * cover + cfg.noise * gauss(rng);
        img[y * s + x] = std::clamp(val, 0.0, 1.0);
      }
  }
  // Interleaved classes -> shuffle so any prefix is class-balanced in expectation.
  std::vector<std::size_t> perm(cfg.samples);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  return ds.subset(perm);
}

Tensor make_texture_images(std::size_t count, std::size_t channels, std::size_t image_size, std::uint64_t seed) {
  if (count == 0 || channels == 0 || image_size == 0) throw ArgumentError("texture images need positive sizes");
  const std::size_t s = image_size;
  Tensor out({count, channels, s, s});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    const int kind = static_cast<int>(unit(rng) * 3.0);
    const double freq = 0.4 + 1.2 * unit(rng);
    const double theta = unit(rng) * std::numbers::pi;
    const double phase = unit(rng) * 2 * std::numbers::pi;
    const double bx = unit(rng) * s, by = unit(rng) * s, br = (0.15 + 0.25 * unit(rng)) * s;
    for (std::size_t c = 0; c < channels; ++c) {
      const double gain = 0.5 + 0.5 * unit(rng);
      double* img = out.data() + (i * channels + c) * s * s;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double fx = static_cast<double>(x), fy = static_cast<double>(y);
          double v = 0.0;
          if (kind == 0) {
            v = 0.5 + 0.5 * std::sin(freq * (std::cos(theta) * fx + std::sin(theta) * fy) + phase);
          } else if (kind == 1) {
            const auto cell = static_cast<std::size_t>(2 + freq * 2);
            v = ((x / cell + y / cell) % 2) ? 0.9 : 0.1;
          } else {
            const double d = std::hypot(fx - bx, fy - by);
            v = std::exp(-(d * d) / (2 * br * br));
          }
          img[y * s + x] = std::clamp(gain * v, 0.0, 1.0);
        }
    }
  }
  return out;
}

// --------------------------------------------------------------------- IDX

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ConfigError("IDX file truncated in header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::pair<Shape, std::vector<unsigned char>> read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open IDX file " + path.string());
  const auto magic = read_be32(in);
  if ((magic >> 8) != 0x08) throw ConfigError("IDX file " + path.string() + " is not uint8 (magic " +
                                             std::to_string(magic) + ")");
  const std::size_t nd = magic & 0xff;
  if (nd == 0 || nd > 4) throw ConfigError("IDX file " + path.string() + " has unsupported rank");
  Shape dims(nd);
  for (auto& d : dims) {
    d = read_be32(in);
    if (d == 0) throw ConfigError("IDX file " + path.string() + " has a zero dimension");
  }
  std::vector<unsigned char> payload(shape_size(dims));
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw ConfigError("IDX file " + path.string() + " payload truncated");
  return {dims, payload};
}

}  // namespace

Tensor read_idx_images(const std::filesystem::path& path) {
  auto [dims, payload] = read_idx(path);
  if (dims.size() == 3) dims = {dims[0], 1, dims[1], dims[2]};
  if (dims.size() != 4) throw ConfigError("IDX image file must have 3 or 4 dimensions: " + path.string());
  std::vector<double> data(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) data[i] = payload[i] / 255.0;
  return Tensor(std::move(dims), std::move(data));
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  auto [dims, payload] = read_idx(path);
  if (dims.size() != 1) throw ConfigError("IDX label file must have 1 dimension: " + path.string());
  return std::vector<int>(payload.begin(), payload.end());
}

void write_idx_images(const std::filesystem::path& path, const Tensor& images) {
  if (images.rank() != 4) throw ArgumentError("write_idx_images expects (N,C,H,W)");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_be32(out, 0x0804);
  for (auto d : images.shape()) write_be32(out, static_cast<std::uint32_t>(d));
  for (double v : images.values())
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_be32(out, 0x0801);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int y : labels) {
    if (y < 0 || y > 255) throw ArgumentError("IDX labels must fit in uint8");
    out.put(static_cast<char>(y));
  }
}

// ------------------------------------------------------------- image dirs

namespace {

std::string next_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image " + path.string());
  const auto magic = next_token(in);
  std::size_t channels = magic == "P5" ? 1 : magic == "P6" ? 3 : 0;
  if (channels == 0) throw ConfigError(path.string() + ": only binary PGM (P5) / PPM (P6) are supported");
  const auto w = std::stoul(next_token(in));
  const auto h = std::stoul(next_token(in));
  const auto maxval = std::stoul(next_token(in));
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw ConfigError(path.string() + ": unsupported geometry");
  std::vector<unsigned char> raw(w * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ConfigError(path.string() + ": truncated pixels");
  Tensor t({channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        t[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] / static_cast<double>(maxval);
  return t;
}

}  // namespace

ImageDirContents read_image_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .pgm/.ppm images in " + dir.string());
  ImageDirContents out;
  std::vector<double> data;
  Shape sample;
  for (const auto& f : files) {
    auto img = read_pnm(f);
    if (sample.empty()) sample = img.shape();
    if (img.shape() != sample) throw ConfigError("image " + f.string() + " differs in size from its siblings");
    data.insert(data.end(), img.storage().begin(), img.storage().end());
    const auto stem = f.stem().string();
    const auto us = stem.find('_');
    int label = -1;
    if (us != std::string::npos && us > 0 &&
        std::all_of(stem.begin(), stem.begin() + static_cast<std::ptrdiff_t>(us), ::isdigit))
      label = std::stoi(stem.substr(0, us));
    out.labels.push_back(label);
  }
  out.images = Tensor({files.size(), sample[0], sample[1], sample[2]}, std::move(data));
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1) throw ArgumentError("write_pgm expects a (1,H,W) image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "P5\n" << image.dim(2) << ' ' << image.dim(1) << "\n255\n";
  for (double v : image.values())
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
}

SplitIndices split_indices(std::size_t n, double first_fraction, std::uint64_t seed) {
  if (first_fraction < 0.0 || first_fraction > 1.0) throw ArgumentError("split fraction must lie in [0,1]");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto k = static_cast<std::size_t>(std::llround(first_fraction * static_cast<double>(n)));
  SplitIndices s;
  s.first.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k));
  s.second.assign(perm.begin() + static_cast<std::ptrdiff_t>(k), perm.end());
  std::sort(s.first.begin(), s.first.end());
  std::sort(s.second.begin(), s.second.end());
  return s;
}

}  // namespace wmlab
