#include "wmlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"

namespace wmlab {
namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xff));
  }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw IntegrityError("checkpoint truncated");
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(std::to_integer<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return uint<std::uint8_t>(); }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'W', 'M', 'L', 'B'};

}  // namespace

std::vector<std::byte> encode_checkpoint(const ModelState& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(model.seed);
  w.u32(static_cast<std::uint32_t>(model.input_shape.size()));
  for (auto d : model.input_shape) w.u64(d);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& l : model.layers) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    for (auto v : {l.in, l.out, l.kernel, l.stride, l.padding, l.channels}) w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(model.params.count()));
  for (std::size_t i = 0; i < model.params.count(); ++i) {
    const auto& t = model.params[i];
    w.str(model.params.name(i));
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(model.bn_stats.size()));
  for (const auto& [idx, bs] : model.bn_stats) {
    w.u64(idx);
    w.f64(bs.momentum);
    w.f64(bs.eps);
    w.u64(bs.running_mean.size());
    for (double v : bs.running_mean) w.f64(v);
    for (double v : bs.running_var) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(model.channel_masks.size()));
  for (const auto& [idx, mask] : model.channel_masks) {
    w.u64(idx);
    w.u64(mask.size());
    w.bytes(mask.data(), mask.size());
  }
  return w.take();
}

ModelState decode_checkpoint(std::span<const std::byte> bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IntegrityError("not a wmlab checkpoint (bad magic)");
  for (int i = 0; i < 4; ++i) r.u8();
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  ModelState m;
  m.seed = r.u64();
  m.input_shape.resize(r.u32());
  for (auto& d : m.input_shape) d = r.u64();
  m.layers.resize(r.u32());
  for (auto& l : m.layers) {
    const auto kind = r.u32();
    if (kind > static_cast<std::uint32_t>(LayerKind::Flatten)) throw IntegrityError("unknown layer kind");
    l.kind = static_cast<LayerKind>(kind);
    l.in = r.u64(), l.out = r.u64(), l.kernel = r.u64();
    l.stride = r.u64(), l.padding = r.u64(), l.channels = r.u64();
  }
  const auto np = r.u32();
  for (std::uint32_t i = 0; i < np; ++i) {
    auto name = r.str();
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    const auto n = shape_size(shape);
    r.need(n * 8);
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    m.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const auto nb = r.u32();
  for (std::uint32_t i = 0; i < nb; ++i) {
    const auto idx = r.u64();
    BnStats bs;
    bs.momentum = r.f64();
    bs.eps = r.f64();
    const auto c = r.u64();
    r.need(c * 16);
    bs.running_mean.resize(c);
    bs.running_var.resize(c);
    for (auto& v : bs.running_mean) v = r.f64();
    for (auto& v : bs.running_var) v = r.f64();
    m.bn_stats[idx] = std::move(bs);
  }
  const auto nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    const auto idx = r.u64();
    const auto len = r.u64();
    r.need(len);
    std::vector<std::uint8_t> mask(len);
    for (auto& v : mask) v = r.u8();
    m.channel_masks[idx] = std::move(mask);
  }
  if (!r.done()) throw IntegrityError("trailing bytes after checkpoint body");
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint is inconsistent: ") + e.what());
  }
  return m;
}

nlohmann::json architecture_json(const ModelState& model) {
  auto arr = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json j{{"type", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::Dense: j["in"] = l.in, j["out"] = l.out; break;
      case LayerKind::Conv2d:
        j["in"] = l.in, j["out"] = l.out, j["kernel"] = l.kernel, j["stride"] = l.stride, j["padding"] = l.padding;
        break;
      case LayerKind::MaxPool: j["kernel"] = l.kernel, j["stride"] = l.stride; break;
      case LayerKind::BatchNorm: j["channels"] = l.channels; break;
      default: break;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".json");
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
  const auto body = encode_checkpoint(model);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    if (!out) throw ConfigError("short write on " + path.string());
  }
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < model.params.count(); ++i)
    params.push_back({{"name", model.params.name(i)}, {"shape", model.params[i].shape()}});
  nlohmann::json bn = nlohmann::json::array();
  for (const auto& [idx, bs] : model.bn_stats)
    bn.push_back({{"layer", idx}, {"channels", bs.running_mean.size()}, {"momentum", bs.momentum}, {"eps", bs.eps}});
  nlohmann::json masks = nlohmann::json::object();
  for (const auto& [idx, mask] : model.channel_masks) masks[std::to_string(idx)] = mask;
  nlohmann::json side{
      {"format", "wmlab-checkpoint"},
      {"version", kCheckpointVersion},
      {"sha256", sha256_hex(std::span<const std::byte>(body))},
      {"model_checksum", model_checksum(model)},
      {"seed", model.seed},
      {"input_shape", model.input_shape},
      {"architecture", architecture_json(model)},
      {"params", params},
      {"bn_stats", bn},
      {"channel_masks", masks},
      {"metadata", metadata},
  };
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw ConfigError("cannot write checkpoint sidecar for " + path.string());
  js << side.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, bool verify) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::span<const std::byte> body(reinterpret_cast<const std::byte*>(raw.data()), raw.size());
  LoadedCheckpoint lc;
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream js(side);
    try {
      lc.sidecar = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError("unreadable checkpoint sidecar: " + std::string(e.what()));
    }
  } else if (verify) {
    throw IntegrityError("checkpoint sidecar missing: " + side.string());
  }
  if (verify) {
    const auto expected = lc.sidecar.value("sha256", std::string{});
    const auto actual = sha256_hex(body);
    if (expected != actual)
      throw IntegrityError("checksum mismatch for " + path.string() + ": sidecar " + expected + ", file " + actual);
  }
  lc.model = decode_checkpoint(body);
  return lc;
}

}  // namespace wmlab
