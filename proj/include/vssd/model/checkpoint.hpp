#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "vssd/core/nctd.hpp"
#include "vssd/model/vssd.hpp"

/// Checkpoint directory: manifest.json (config, parameter names, shapes,
/// dtype, file names, free-form metadata) plus one NCTD file per parameter.
namespace vssd::model {

namespace detail {

inline std::string param_file(std::size_t i) {
  std::string s = std::to_string(i);
  return "p" + std::string(5 - std::min<std::size_t>(5, s.size()), '0') + s + ".nctd";
}

}  // namespace detail

template <Real T>
void save_checkpoint(const std::filesystem::path& dir, const VssdModel<T>& model, const nlohmann::json& meta = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  std::size_t i = 0;
  for (const auto& p : model.params()) {
    const std::string file = detail::param_file(i++);
    nctd::write(dir / file, p.value);
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"dtype", dtype_name(dtype_of<T>())}, {"file", file}});
  }
  nlohmann::json manifest{{"format", "vssd-checkpoint"}, {"version", 1}, {"config", model.config()},
                          {"params", params}, {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw FormatError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw FormatError("checkpoint: missing manifest.json in " + dir.string());
  try {
    auto j = nlohmann::json::parse(f);
    if (j.value("format", "") != "vssd-checkpoint") throw FormatError("checkpoint: unrecognized manifest format");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
}

/// Rebuilds the model described by the manifest and loads every parameter.
/// Names and shapes must match exactly.
template <Real T>
VssdModel<T> load_checkpoint(const std::filesystem::path& dir, nlohmann::json* meta = nullptr) {
  const auto manifest = read_manifest(dir);
  Rng rng(0);
  VssdModel<T> model(manifest.at("config").get<ModelConfig>(), rng);
  const auto& entries = manifest.at("params");
  if (entries.size() != model.params().size()) {
    throw FormatError("checkpoint: " + std::to_string(entries.size()) + " tensors, model has " +
                      std::to_string(model.params().size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = model.params()[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != p.name) {
      throw FormatError("checkpoint: parameter " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                        "', expected '" + p.name + "'");
    }
    auto any = nctd::read_any(dir / e.at("file").get<std::string>());
    Tensor<T> t = std::visit([](auto&& x) { return x.template cast<T>(); }, any);
    if (t.shape() != p.value.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + p.name + ": " + to_string(t.shape()) + " vs " +
                        to_string(p.value.shape()));
    }
    p.value = std::move(t);
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  return model;
}

}  // namespace vssd::model
