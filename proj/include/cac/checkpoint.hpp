#pragma once

// Binary checkpoint: "CACKPT01", u64 header length, JSON header, then raw
// little-endian parameter values in header order, then (optionally) Adam
// first and second moments as float64 for every trainable parameter.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/config.hpp"
#include "cac/model.hpp"

namespace cac {

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'C', 'K', 'P', 'T', '0', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct Checkpoint {
  ExperimentConfig config;
  std::unique_ptr<CountingModel<T>> model;
  nlohmann::json trainer;  // iteration counter and sampler/dropout state
  long optimizer_steps = 0;
  std::vector<std::string> moment_names;
  std::vector<std::vector<double>> first_moments;
  std::vector<std::vector<double>> second_moments;
};

namespace detail {
template <class V>
void write_raw(std::ostream& os, const std::vector<V>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(V)));
}
template <class V>
void read_raw(std::istream& is, V* dst, size_t count, const std::string& what) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count * sizeof(V)));
  if (!is) throw CheckpointError("truncated checkpoint while reading " + what);
}
}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ExperimentConfig& config, const CountingModel<T>& model,
                     const nlohmann::json& trainer, const Adam<T>* optimizer = nullptr) {
  const auto params = model.parameters();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : params) tensors.push_back({{"name", p.name}, {"rows", p.tensor.rows()}, {"cols", p.tensor.cols()}});
  nlohmann::json header = {{"format", 1},
                           {"scalar_bytes", sizeof(T)},
                           {"config", to_json(config)},
                           {"prompt_bounds", model.prompts().bounds_json()},
                           {"trainer", trainer},
                           {"tensors", tensors}};
  if (optimizer) {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& p : optimizer->parameters()) names.push_back(p.name);
    header["optimizer"] = {{"steps", optimizer->steps()}, {"parameters", names}};
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  os.write(kCheckpointMagic, 8);
  const uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) os.write(reinterpret_cast<const char*>(p.tensor.data().data()), p.tensor.size() * sizeof(T));
  if (optimizer) {
    auto& opt = const_cast<Adam<T>&>(*optimizer);
    for (const auto& m : opt.first_moments()) detail::write_raw(os, m);
    for (const auto& v : opt.second_moments()) detail::write_raw(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated checkpoint header");
  const auto header = nlohmann::json::parse(text);
  if (header.at("scalar_bytes").get<size_t>() != sizeof(T)) throw CheckpointError("checkpoint scalar width mismatch");

  Checkpoint<T> ck;
  ck.config = experiment_config_from_json(header.at("config"));
  ck.trainer = header.value("trainer", nlohmann::json::object());
  const auto& bounds = header.at("prompt_bounds");
  if (parse_interval_mode(bounds.at("mode").get<std::string>()) != ck.config.model.prompt_mode)
    throw CheckpointError("checkpoint prompt mode does not match its config");
  ck.model = std::make_unique<CountingModel<T>>(FromBounds{}, ck.config.model, bounds.at("width_bounds").get<std::vector<double>>(),
                                                bounds.at("height_bounds").get<std::vector<double>>(), ck.config.seed);

  auto params = ck.model->parameters();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) throw CheckpointError("checkpoint does not match model architecture");
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != p.name || t.at("rows").get<int>() != p.tensor.rows() ||
        t.at("cols").get<int>() != p.tensor.cols())
      throw CheckpointError("checkpoint tensor '" + t.at("name").get<std::string>() + "' does not match '" + p.name + "'");
    detail::read_raw(is, p.tensor.data().data(), p.tensor.size(), p.name);
  }
  if (header.contains("optimizer")) {
    const auto& opt = header["optimizer"];
    ck.optimizer_steps = opt.at("steps").get<long>();
    ck.moment_names = opt.at("parameters").get<std::vector<std::string>>();
    std::map<std::string, size_t> sizes;
    for (const auto& p : params) sizes[p.name] = p.tensor.size();
    for (auto* store : {&ck.first_moments, &ck.second_moments})
      for (const auto& name : ck.moment_names) {
        std::vector<double> m(sizes.at(name));
        detail::read_raw(is, m.data(), m.size(), "optimizer state");
        store->push_back(std::move(m));
      }
  }
  return ck;
}

}  // namespace cac
