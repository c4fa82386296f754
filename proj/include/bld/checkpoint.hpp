#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bld/nn.hpp"
#include "bld/tensor.hpp"

namespace bld {

/// Raised on malformed, truncated or mismatched checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Versioned model container:
///   "BLDCKPT\0" | u32 version | str type tag | str JSON header | u32 count | count x tensor
/// where str = u32 length + bytes and tensor = str name | u32 rank | i32 dims | f32 data (little endian).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string type;
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add_params(const nn::ParamSet& ps, const std::string& prefix);
  /// Rebuilds a ParamSet from tensors whose names start with prefix (prefix stripped).
  nn::ParamSet take_params(const std::string& prefix) const;
  std::vector<Tensor> tensors_with_prefix(const std::string& prefix) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
/// Loads and checks the type tag when expected_type is non-empty.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_type = {});

/// Hex SHA-256 of a byte buffer.
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_hex(const std::string& text);

}  // namespace bld
