// Command-line entry point: train, eval, predict and synth.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure or NaN abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cac/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_train(const std::string& config_path, const std::string& resume_path, const std::string& out_override) {
  auto make = [&]() {
    if (!resume_path.empty()) return cac::Trainer::resume(resume_path);
    auto cfg = cac::load_experiment_config(config_path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    return cac::Trainer(std::move(cfg));
  };
  cac::Trainer trainer = make();
  const int every = std::max(1, trainer.config().optim.iterations / 20);
  fs::path log_path;
  std::ofstream live;
  if (!trainer.config().output_dir.empty()) {
    fs::create_directories(trainer.config().output_dir);
    std::ofstream(fs::path(trainer.config().output_dir) / "config.json") << cac::config_echo(trainer.config()).dump(2) << "\n";
  }
  trainer.run(-1, [&](const cac::TrainLogEntry& e) {
    if (e.iteration % every == 0)
      std::cerr << "iter " << e.iteration << " loss " << e.total << " (cls " << e.cls << ", loc " << e.loc << ", size "
                << e.size << ")\n";
  });
  trainer.write_run_directory();
  const auto report = cac::evaluate(trainer.model(), trainer.train_split()).report;
  json summary = {{"iterations", trainer.iteration()}, {"seconds", trainer.seconds()}, {"train", cac::to_json(report)}};
  if (!trainer.val_log().empty()) summary["last_val_mae"] = trainer.val_log().back().mae;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& split, const std::string& dump_path) {
  auto ck = cac::load_checkpoint<cac::Scalar>(ckpt_path);
  cac::DatasetSplit data;
  if (split == "train" || split == "val" || split == "test") {
    data = cac::prepare_split(ck.config, cac::parse_split_name(split));
  } else {
    const auto raw = cac::load_annotations(split, cac::SplitName::kTest);
    data.name = raw.name;
    for (const auto& s : raw.samples)
      data.samples.push_back(
          cac::preprocess(s, ck.config.data.target_height, ck.config.model.backbone.coarsest_stride()));
  }
  const auto result = cac::evaluate(*ck.model, data, !dump_path.empty());
  if (!dump_path.empty()) {
    std::ofstream os(dump_path);
    if (!os) throw cac::IoError("cannot write " + dump_path);
    for (const auto& r : result.per_image) os << r.dump() << "\n";
  }
  std::cout << cac::to_json(result.report).dump(2) << "\n";
  return 0;
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw cac::IoError("cannot open " + p.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

// Exemplars: either [[x1,y1,x2,y2], ...] or {"exemplars": [...]}.
std::vector<cac::ExemplarBox> parse_exemplars(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw cac::ValidationError(std::string("exemplars: malformed JSON: ") + e.what());
  }
  const json& list = doc.is_object() ? doc.at("exemplars") : doc;
  std::vector<cac::ExemplarBox> out;
  for (const auto& b : list) {
    if (!b.is_array() || b.size() != 4) throw cac::ValidationError("exemplar must be [x1, y1, x2, y2]");
    out.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
  }
  if (out.empty()) throw cac::ValidationError("at least one exemplar is required");
  return out;
}

int run_predict(const std::string& ckpt_path, const std::string& image_path, const std::string& exemplars_arg,
                const std::string& out_dir) {
  auto ck = cac::load_checkpoint<cac::Scalar>(ckpt_path);
  cac::AnnotatedImage sample;
  sample.image = cac::load_image(image_path);
  sample.id = fs::path(image_path).stem().string();
  sample.file = image_path;
  sample.original_height = sample.image.height;
  sample.original_width = sample.image.width;
  sample.exemplars = parse_exemplars(fs::exists(exemplars_arg) ? read_text(exemplars_arg) : exemplars_arg);
  cac::validate_sample(sample);
  const auto r = cac::predict_and_render(*ck.model, sample, ck.config.data.target_height);
  fs::create_directories(out_dir);
  std::ofstream(fs::path(out_dir) / (sample.id + "_pred.json")) << r.predictions.dump(2) << "\n";
  cac::save_png(fs::path(out_dir) / (sample.id + "_overlay.png"), r.overlay);
  std::cout << r.predictions.dump(2) << "\n";
  return 0;
}

int run_synth(const std::string& config_path, const std::string& out_dir) {
  const auto cfg = cac::load_experiment_config(config_path);
  if (!cfg.data.synthetic) throw cac::ValidationError("config has no data.synthetic section");
  const int counts[3] = {cfg.data.synthetic_train, cfg.data.synthetic_val, cfg.data.synthetic_test};
  int first = 0;
  json summary = json::object();
  for (int k = 0; k < 3; ++k) {
    const auto name = static_cast<cac::SplitName>(k);
    auto split = cac::generate_synthetic(*cfg.data.synthetic, counts[k], name, first);
    first += counts[k];
    if (split.samples.empty()) continue;
    const fs::path dir = fs::path(out_dir) / cac::to_string(name);
    fs::create_directories(dir);
    for (auto& s : split.samples) {
      s.file = s.id + ".png";
      cac::save_png(dir / s.file, s.image);
    }
    cac::save_annotations(split, dir / "annotations.json");
    summary[cac::to_string(name)] = {{"images", split.samples.size()}, {"annotations", (dir / "annotations.json").string()}};
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-based class-agnostic counting"};
  app.require_subcommand(1);

  std::string config, resume, train_out, predict_out, synth_out, ckpt, split, dump, image, exemplars;
  auto* train = app.add_subcommand("train", "Train a model from a config");
  train->add_option("--config", config, "Experiment config (JSON)");
  train->add_option("--resume", resume, "Continue from a checkpoint");
  train->add_option("--out", train_out, "Override output directory");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--split", split, "train, val, test or an annotation file")->required();
  eval->add_option("--dump", dump, "Write per-image records (JSON lines)");

  auto* predict = app.add_subcommand("predict", "Predict and render one image");
  predict->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  predict->add_option("--image", image, "Input image")->required();
  predict->add_option("--exemplars", exemplars, "Exemplar boxes: JSON file or inline JSON")->required();
  predict->add_option("--out", predict_out, "Output directory")->default_val(".");

  auto* synth = app.add_subcommand("synth", "Write synthetic splits to disk");
  synth->add_option("--config", config, "Experiment config with data.synthetic")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      if (config.empty() == resume.empty()) throw cac::ValidationError("train needs exactly one of --config or --resume");
      return run_train(config, resume, train_out);
    }
    if (*eval) return run_eval(ckpt, split, dump);
    if (*predict) return run_predict(ckpt, image, exemplars, predict_out);
    if (*synth) return run_synth(config, synth_out);
  } catch (const cac::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const cac::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const cac::MetricError& e) {
    std::cerr << "metric error: " << e.what() << "\n";
    return 2;
  } catch (const cac::NumericalError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
