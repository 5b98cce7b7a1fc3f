#pragma once

// Experiment configuration: a single JSON document. Defaults follow the
// published training setup except where marked desk-scale.

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/datamodel.hpp"
#include "cac/model.hpp"
#include "cac/sal_loss.hpp"

namespace cac {

struct DataConfig {
  std::string train;  // annotation paths; unused splits stay empty
  std::string val;
  std::string test;
  std::optional<SyntheticConfig> synthetic;
  int synthetic_train = 10;
  int synthetic_val = 0;
  int synthetic_test = 0;
  int target_height = 384;
};

struct OptimConfig {
  double learning_rate = 1e-5;
  int batch_size = 1;
  int accumulate = 1;
  int iterations = 1000;
  int eval_every = 0;  // 0 disables periodic validation
};

struct ExperimentConfig {
  uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  LossWeights loss;
  bool size_supervision = true;
  OptimConfig optim;
  std::string output_dir;
};

// Keys whose defaults are reduced for CPU-scale runs rather than taken from
// the published full-scale setup.
inline std::vector<std::string> desk_scale_keys() {
  return {"model.backbone.channels",   "model.backbone.strides",   "model.backbone.frozen",
          "model.enhancer.heads",      "model.enhancer.hidden",    "model.correlation.dim",
          "model.correlation.heads",   "model.correlation.hidden", "model.heads.hidden"};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json data = {{"train", c.data.train},
                         {"val", c.data.val},
                         {"test", c.data.test},
                         {"synthetic_train", c.data.synthetic_train},
                         {"synthetic_val", c.data.synthetic_val},
                         {"synthetic_test", c.data.synthetic_test},
                         {"target_height", c.data.target_height}};
  if (c.data.synthetic) data["synthetic"] = to_json(*c.data.synthetic);
  return {{"seed", c.seed},
          {"data", data},
          {"model", to_json(c.model)},
          {"loss", to_json(c.loss)},
          {"size_supervision", c.size_supervision},
          {"optim",
           {{"learning_rate", c.optim.learning_rate},
            {"batch_size", c.optim.batch_size},
            {"accumulate", c.optim.accumulate},
            {"iterations", c.optim.iterations},
            {"eval_every", c.optim.eval_every}}},
          {"output_dir", c.output_dir}};
}

// The resolved config plus the list of desk-scale defaults, for run directories.
inline nlohmann::json config_echo(const ExperimentConfig& c) {
  auto j = to_json(c);
  j["desk_scale_defaults"] = desk_scale_keys();
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.train = d.value("train", c.data.train);
      c.data.val = d.value("val", c.data.val);
      c.data.test = d.value("test", c.data.test);
      if (d.contains("synthetic") && !d["synthetic"].is_null()) c.data.synthetic = synthetic_config_from_json(d["synthetic"]);
      c.data.synthetic_train = d.value("synthetic_train", c.data.synthetic_train);
      c.data.synthetic_val = d.value("synthetic_val", c.data.synthetic_val);
      c.data.synthetic_test = d.value("synthetic_test", c.data.synthetic_test);
      c.data.target_height = d.value("target_height", c.data.target_height);
    }
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("loss")) c.loss = loss_weights_from_json(j["loss"]);
    c.size_supervision = j.value("size_supervision", c.size_supervision);
    if (j.contains("optim")) {
      const auto& o = j["optim"];
      c.optim.learning_rate = o.value("learning_rate", c.optim.learning_rate);
      c.optim.batch_size = o.value("batch_size", c.optim.batch_size);
      c.optim.accumulate = o.value("accumulate", c.optim.accumulate);
      c.optim.iterations = o.value("iterations", c.optim.iterations);
      c.optim.eval_every = o.value("eval_every", c.optim.eval_every);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (c.data.target_height <= 0) throw ValidationError("config: target_height must be positive");
  if (c.optim.batch_size < 1 || c.optim.accumulate < 1) throw ValidationError("config: batch sizes must be >= 1");
  if (c.optim.iterations < 0) throw ValidationError("config: negative iteration budget");
  if (c.data.train.empty() && !c.data.synthetic) throw ValidationError("config: no training data (train path or synthetic)");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

}  // namespace cac
