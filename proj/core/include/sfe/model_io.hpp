#pragma once

#include <filesystem>
#include <string>

#include "sfe/checkpoint.hpp"
#include "sfe/render.hpp"

namespace sfe {

/// Adds every generator parameter under "generator/<name>" and the config.
void store_generator(ckpt::Container& c, const render::Generator& gen, ckpt::DType dtype);
/// Rebuilds a generator from the embedded config and tensors. Missing tensors
/// or shape mismatches throw IoError.
render::Generator restore_generator(const ckpt::Container& c);

void save_generator(const render::Generator& gen, const std::filesystem::path& path,
                    ckpt::DType dtype = ckpt::DType::kFloat64);
render::Generator load_generator(const std::filesystem::path& path);

/// Copies container tensors "<prefix><name>" into the listed parameters.
void restore_params(const ckpt::Container& c, const nn::ParamList& params, const std::string& prefix);
void store_params(ckpt::Container& c, const nn::ParamList& params, const std::string& prefix, ckpt::DType dtype);

}  // namespace sfe
