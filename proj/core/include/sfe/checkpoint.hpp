#pragma once

// Binary tensor container:
//   "SFE1" | u32 little-endian header length | JSON header | payload
// The header is {"config": ..., "meta": ..., "tensors": {name: {dtype, shape,
// offset}}} with offsets relative to the payload start. Tensors are laid out
// in name order, so writing a loaded container reproduces the same bytes.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfe/autodiff.hpp"
#include "sfe/image_io.hpp"

namespace sfe::ckpt {

enum class DType { kFloat32, kFloat64 };

struct Tensor {
  DType dtype = DType::kFloat32;
  std::vector<std::int64_t> shape;  // one or two dimensions
  ad::Matrix value;                  // stored as rows x cols; 1-D tensors are a single row
};

struct Container {
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  void put(const std::string& name, const ad::Matrix& value, DType dtype);
  [[nodiscard]] const Tensor& at(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

io::Bytes serialize(const Container& c);
/// Throws IoError for a bad magic, truncated data or out-of-bounds offsets.
Container parse(std::span<const std::uint8_t> data);

void save(const Container& c, const std::filesystem::path& path);
Container load(const std::filesystem::path& path);

std::string to_string(DType d);

}  // namespace sfe::ckpt
