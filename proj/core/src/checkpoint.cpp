#include "sfe/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "sfe/errors.hpp"

namespace sfe::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'F', 'E', '1'};

std::size_t element_size(DType d) { return d == DType::kFloat32 ? 4 : 8; }

DType parse_dtype(const std::string& s) {
  if (s == "float32") return DType::kFloat32;
  if (s == "float64") return DType::kFloat64;
  throw IoError("unsupported tensor dtype '" + s + "'");
}

}  // namespace

std::string to_string(DType d) { return d == DType::kFloat32 ? "float32" : "float64"; }

void Container::put(const std::string& name, const ad::Matrix& value, DType dtype) {
  Tensor t;
  t.dtype = dtype;
  t.shape = {value.rows(), value.cols()};
  t.value = value;
  if (dtype == DType::kFloat32) t.value = value.cast<float>().cast<double>();
  tensors[name] = std::move(t);
}

const Tensor& Container::at(const std::string& name) const {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw IoError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

io::Bytes serialize(const Container& c) {
  nlohmann::json header;
  header["config"] = c.config;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    header["tensors"][name] = {{"dtype", to_string(t.dtype)}, {"shape", t.shape}, {"offset", offset}};
    offset += static_cast<std::uint64_t>(t.value.size()) * element_size(t.dtype);
  }
  const std::string text = header.dump();
  if (text.size() > 0xffffffffULL) throw IoError("checkpoint header too large");
  io::Bytes out;
  out.reserve(8 + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 4);
  const auto len = static_cast<std::uint32_t>(text.size());
  const auto* len_bytes = reinterpret_cast<const std::uint8_t*>(&len);
  out.insert(out.end(), len_bytes, len_bytes + 4);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : c.tensors) {
    const auto* src = t.value.data();
    if (t.dtype == DType::kFloat64) {
      const auto* bytes = reinterpret_cast<const std::uint8_t*>(src);
      out.insert(out.end(), bytes, bytes + t.value.size() * 8);
    } else {
      for (Eigen::Index i = 0; i < t.value.size(); ++i) {
        const auto f = static_cast<float>(src[i]);
        const auto* bytes = reinterpret_cast<const std::uint8_t*>(&f);
        out.insert(out.end(), bytes, bytes + 4);
      }
    }
  }
  return out;
}

Container parse(std::span<const std::uint8_t> data) {
  if (data.size() < 8 || std::memcmp(data.data(), kMagic, 4) != 0) throw IoError("not an SFE1 checkpoint");
  std::uint32_t len = 0;
  std::memcpy(&len, data.data() + 4, 4);
  if (8ULL + len > data.size()) throw IoError("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.begin() + 8, data.begin() + 8 + len);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = 8ULL + len;
  const std::size_t payload_size = data.size() - payload_start;
  Container c;
  try {
    c.config = header.value("config", nlohmann::json::object());
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& [name, desc] : header.at("tensors").items()) {
      Tensor t;
      t.dtype = parse_dtype(desc.at("dtype").get<std::string>());
      t.shape = desc.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = desc.at("offset").get<std::uint64_t>();
      if (t.shape.empty() || t.shape.size() > 2) throw IoError("tensor '" + name + "' must be 1-D or 2-D");
      std::int64_t count = 1;
      for (auto d : t.shape) {
        if (d < 0) throw IoError("tensor '" + name + "' has a negative dimension");
        count *= d;
      }
      const auto bytes = static_cast<std::uint64_t>(count) * element_size(t.dtype);
      if (offset > payload_size || bytes > payload_size - offset) {
        throw IoError("tensor '" + name + "' lies outside the payload");
      }
      const Eigen::Index rows = t.shape.size() == 2 ? t.shape[0] : 1;
      const Eigen::Index cols = t.shape.back();
      t.value.resize(rows, cols);
      const std::uint8_t* src = data.data() + payload_start + offset;
      if (t.dtype == DType::kFloat64) {
        std::memcpy(t.value.data(), src, bytes);
      } else {
        for (std::int64_t i = 0; i < count; ++i) {
          float f = 0.0F;
          std::memcpy(&f, src + i * 4, 4);
          t.value.data()[i] = f;
        }
      }
      c.tensors.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed checkpoint header: ") + e.what());
  }
  return c;
}

void save(const Container& c, const std::filesystem::path& path) { io::write_file(path, serialize(c)); }

Container load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

}  // namespace sfe::ckpt
