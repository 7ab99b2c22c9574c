#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace wmlab {

struct ModelState;

std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_doubles(std::span<const double> values);

/// Digest over trainable params, BN statistics and channel masks.
std::string model_checksum(const ModelState& model);

}  // namespace wmlab
