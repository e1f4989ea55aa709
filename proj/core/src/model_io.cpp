#include "sfe/model_io.hpp"

#include "sfe/errors.hpp"

namespace sfe {

void store_params(ckpt::Container& c, const nn::ParamList& params, const std::string& prefix, ckpt::DType dtype) {
  for (const auto& [name, var] : params) c.put(prefix + name, var->value(), dtype);
}

void restore_params(const ckpt::Container& c, const nn::ParamList& params, const std::string& prefix) {
  for (const auto& [name, var] : params) {
    const auto& t = c.at(prefix + name);
    if (t.value.rows() != var->rows() || t.value.cols() != var->cols()) {
      throw IoError("tensor '" + prefix + name + "' has shape " + std::to_string(t.value.rows()) + "x" +
                    std::to_string(t.value.cols()) + ", expected " + std::to_string(var->rows()) + "x" +
                    std::to_string(var->cols()));
    }
    var->mutable_value() = t.value;
  }
}

void store_generator(ckpt::Container& c, const render::Generator& gen, ckpt::DType dtype) {
  c.config = to_json(gen.config());
  nn::ParamList params;
  const_cast<render::Generator&>(gen).collect(params);
  store_params(c, params, "generator/", dtype);
}

render::Generator restore_generator(const ckpt::Container& c) {
  TrainConfig config;
  try {
    config = config_from_json(c.config);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint config is invalid: ") + e.what());
  }
  render::Generator gen(config, 0);
  nn::ParamList params;
  gen.collect(params);
  restore_params(c, params, "generator/");
  return gen;
}

void save_generator(const render::Generator& gen, const std::filesystem::path& path, ckpt::DType dtype) {
  ckpt::Container c;
  c.meta["kind"] = "generator";
  store_generator(c, gen, dtype);
  ckpt::save(c, path);
}

render::Generator load_generator(const std::filesystem::path& path) { return restore_generator(ckpt::load(path)); }

}  // namespace sfe
