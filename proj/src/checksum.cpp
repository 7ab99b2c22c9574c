#include "wmlab/checksum.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>
#include <memory>
#include <vector>

#include "wmlab/errors.hpp"
#include "wmlab/model.hpp"

namespace wmlab {
namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 init failed");
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(kDigits[md[i] >> 4]);
      out.push_back(kDigits[md[i] & 15]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const std::byte> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open " + path.string() + " for checksumming");
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

std::string sha256_doubles(std::span<const double> values) {
  return sha256_hex(std::as_bytes(values));
}

std::string model_checksum(const ModelState& model) {
  Sha256 h;
  for (std::size_t i = 0; i < model.params.count(); ++i) {
    const auto& name = model.params.name(i);
    h.update(name.data(), name.size());
    h.update(model.params[i].data(), model.params[i].size() * sizeof(double));
  }
  for (const auto& [idx, st] : model.bn_stats) {
    h.update(&idx, sizeof idx);
    h.update(st.running_mean.data(), st.running_mean.size() * sizeof(double));
    h.update(st.running_var.data(), st.running_var.size() * sizeof(double));
    h.update(&st.momentum, sizeof st.momentum);
    h.update(&st.eps, sizeof st.eps);
  }
  for (const auto& [idx, mask] : model.channel_masks) {
    h.update(&idx, sizeof idx);
    h.update(mask.data(), mask.size());
  }
  return h.hex();
}

}  // namespace wmlab
