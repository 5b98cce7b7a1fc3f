#pragma once

// Training loop, evaluation and prediction rendering.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "cac/checkpoint.hpp"
#include "cac/config.hpp"
#include "cac/metrics.hpp"
#include "cac/model.hpp"
#include "cac/sal_loss.hpp"

namespace cac {

using Scalar = float;
using Model = CountingModel<Scalar>;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainLogEntry {
  int iteration = 0;
  std::string sample;
  double total = 0, cls = 0, loc = 0, size = 0;
  int matched = 0;
  int size_terms = 0;
  bool operator==(const TrainLogEntry&) const = default;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
  return {{"iteration", e.iteration}, {"sample", e.sample}, {"total", e.total}, {"cls", e.cls},
          {"loc", e.loc},             {"size", e.size},     {"matched", e.matched}, {"size_terms", e.size_terms}};
}

struct ValLogEntry {
  int iteration = 0;
  double mae = 0, rmse = 0;
};

// Resolves a split from annotation files or the synthetic stream and
// preprocesses it. Synthetic splits take consecutive, disjoint index ranges
// of one seeded stream (train, then val, then test).
inline DatasetSplit prepare_split(const ExperimentConfig& cfg, SplitName name) {
  const std::string& path = name == SplitName::kTrain ? cfg.data.train : name == SplitName::kVal ? cfg.data.val : cfg.data.test;
  DatasetSplit raw;
  if (!path.empty()) {
    raw = load_annotations(path, name);
  } else if (cfg.data.synthetic) {
    const int counts[3] = {cfg.data.synthetic_train, cfg.data.synthetic_val, cfg.data.synthetic_test};
    const int which = static_cast<int>(name);
    int first = 0;
    for (int i = 0; i < which; ++i) first += counts[i];
    raw = generate_synthetic(*cfg.data.synthetic, counts[which], name, first);
  } else {
    raw.name = name;
  }
  DatasetSplit out;
  out.name = name;
  for (const auto& s : raw.samples)
    out.samples.push_back(preprocess(s, cfg.data.target_height, cfg.model.backbone.coarsest_stride()));
  return out;
}

inline void exemplar_sizes(const DatasetSplit& split, std::vector<double>& widths, std::vector<double>& heights) {
  for (const auto& s : split.samples)
    for (const auto& b : s.exemplars) {
      widths.push_back(b.width());
      heights.push_back(b.height());
    }
}

template <class R>
std::string rng_state(const R& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

template <class R>
void set_rng_state(R& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
}

struct EvaluationResult {
  MetricsReport report;
  std::vector<nlohmann::json> per_image;
};

// Counts proposals above the threshold and scores localization over all
// proposals. Runs in eval mode without recording gradients.
inline EvaluationResult evaluate(Model& model, const DatasetSplit& split, bool dump_per_image = false) {
  if (split.samples.empty()) throw MetricError("evaluate: split '" + to_string(split.name) + "' is empty");
  const double threshold = model.config().heads.score_threshold;
  NoGradGuard guard;
  std::vector<CountRecord> counts;
  std::vector<LocalizationRecord> locs;
  EvaluationResult result;
  for (const auto& s : split.samples) {
    const auto fwd = model.forward(s, /*training=*/false);
    const auto proposals = to_proposals(fwd.proposals);
    const auto kept = infer_objects(proposals, threshold);
    counts.push_back({static_cast<int>(kept.size()), static_cast<int>(s.points.size())});
    LocalizationRecord rec;
    rec.ground_truth = s.points;
    for (const auto& p : proposals) rec.predictions.push_back({p.x, p.y, p.score});
    locs.push_back(std::move(rec));
    if (dump_per_image) {
      auto j = prediction_json(s.id, kept, 1.0 / s.scale);
      j["gt_count"] = s.points.size();
      j["predicted_count"] = kept.size();
      result.per_image.push_back(std::move(j));
    }
  }
  const auto errors = mae_rmse(counts);
  result.report.mae = errors.mae;
  result.report.rmse = errors.rmse;
  size_t gt_total = 0;
  for (const auto& r : locs) gt_total += r.ground_truth.size();
  result.report.nap = gt_total > 0 ? nap(locs, 0.5) : 0.0;
  result.report.n_images = static_cast<int>(split.samples.size());
  return result;
}

class Trainer {
 public:
  using LogCallback = std::function<void(const TrainLogEntry&)>;

  explicit Trainer(ExperimentConfig cfg) : config_(std::move(cfg)) {
    load_data();
    std::vector<double> widths, heights;
    exemplar_sizes(train_, widths, heights);
    if (widths.empty()) throw ValidationError("training split has no exemplars");
    model_ = std::make_unique<Model>(config_.model, widths, heights, config_.seed);
    optimizer_ = Adam<Scalar>(model_->parameters(true), AdamOptions{config_.optim.learning_rate});
    sampler_.seed(config_.seed + 1);
  }

  // Continues a run from a checkpoint written by save().
  static Trainer resume(const std::filesystem::path& path) {
    auto ck = load_checkpoint<Scalar>(path);
    Trainer t(std::move(ck.config), std::move(ck.model));
    t.optimizer_ = Adam<Scalar>(t.model_->parameters(true), AdamOptions{t.config_.optim.learning_rate});
    if (!ck.moment_names.empty()) {
      const auto& params = t.optimizer_.parameters();
      if (params.size() != ck.moment_names.size()) throw CheckpointError("optimizer state does not match model");
      for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != ck.moment_names[i]) throw CheckpointError("optimizer state order mismatch");
        t.optimizer_.first_moments()[i] = ck.first_moments[i];
        t.optimizer_.second_moments()[i] = ck.second_moments[i];
      }
      t.optimizer_.set_steps(ck.optimizer_steps);
    }
    t.restore_state(ck.trainer);
    return t;
  }

  // Trains until the configured iteration budget (or `until`, if smaller).
  void run(int until = -1, const LogCallback& on_log = {}) {
    const int budget = until < 0 ? config_.optim.iterations : std::min(until, config_.optim.iterations);
    const int per_step = config_.optim.batch_size * config_.optim.accumulate;
    LossWeights weights = config_.loss;
    if (!config_.size_supervision) weights.lambda_size = 0.0;
    const auto start = std::chrono::steady_clock::now();
    for (; iteration_ < budget; ++iteration_) {
      if (position_ >= order_.size()) reshuffle();
      const auto& sample = train_.samples[order_[position_++]];
      if (sample.points.empty()) throw ValidationError("training sample '" + sample.id + "' has no points");
      const auto fwd = model_->forward(sample, /*training=*/true);
      if (fwd.proposals.rows() < 4 * static_cast<int>(sample.points.size()) && !warned_population_) {
        std::cerr << "warning: " << fwd.proposals.rows() << " proposals for " << sample.points.size()
                  << " points in '" << sample.id << "' (fewer than 4x)\n";
        warned_population_ = true;
      }
      LossBreakdown b;
      auto loss = sal_loss(fwd.proposals, sample.points, fwd.exemplars, weights, &b);
      if (!b.finite()) dump_nan(sample, fwd, b);
      loss.backward();

      TrainLogEntry e{iteration_ + 1, sample.id, b.total, b.cls, b.loc, b.size,
                      static_cast<int>(b.match.assignment.size()), b.size_terms};
      log_.push_back(e);
      if (on_log) on_log(e);

      if ((iteration_ + 1) % per_step == 0) {
        optimizer_.step(1.0 / per_step);
        optimizer_.zero_grad();
      }
      if (config_.optim.eval_every > 0 && (iteration_ + 1) % config_.optim.eval_every == 0 && !val_.samples.empty())
        validate();
    }
    seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  nlohmann::json state() const {
    return {{"iteration", iteration_},
            {"position", position_},
            {"order", order_},
            {"epoch", epoch_},
            {"sampler", rng_state(sampler_)},
            {"dropout", rng_state(model_->dropout_rng())},
            {"best_val_mae", std::isfinite(best_val_mae_) ? nlohmann::json(best_val_mae_) : nlohmann::json()}};
  }

  void save(const std::filesystem::path& path) const {
    save_checkpoint(path, config_, *model_, state(), &optimizer_);
  }

  // Writes the config echo, loss log and final checkpoint into output_dir.
  void write_run_directory() const {
    if (config_.output_dir.empty()) return;
    std::filesystem::create_directories(config_.output_dir);
    const std::filesystem::path dir(config_.output_dir);
    std::ofstream(dir / "config.json") << config_echo(config_).dump(2) << "\n";
    std::ofstream log(dir / "train_log.jsonl");
    for (const auto& e : log_) log << to_json(e).dump() << "\n";
    std::ofstream val(dir / "val_log.jsonl");
    for (const auto& v : val_log_) val << nlohmann::json{{"iteration", v.iteration}, {"mae", v.mae}, {"rmse", v.rmse}}.dump() << "\n";
    save(dir / "last.ckpt");
  }

  Model& model() { return *model_; }
  const ExperimentConfig& config() const { return config_; }
  const DatasetSplit& train_split() const { return train_; }
  const DatasetSplit& val_split() const { return val_; }
  const std::vector<TrainLogEntry>& log() const { return log_; }
  const std::vector<ValLogEntry>& val_log() const { return val_log_; }
  int iteration() const { return iteration_; }
  double seconds() const { return seconds_; }

 private:
  Trainer(ExperimentConfig cfg, std::unique_ptr<Model> model) : config_(std::move(cfg)), model_(std::move(model)) {
    load_data();
  }

  void load_data() {
    train_ = prepare_split(config_, SplitName::kTrain);
    val_ = prepare_split(config_, SplitName::kVal);
    if (train_.samples.empty()) throw ValidationError("training split is empty");
    for (const auto& w : check_class_disjoint({&train_, &val_})) std::cerr << "warning: " << w << "\n";
  }

  void reshuffle() {
    order_.resize(train_.samples.size());
    std::iota(order_.begin(), order_.end(), size_t{0});
    std::shuffle(order_.begin(), order_.end(), sampler_);
    position_ = 0;
    ++epoch_;
  }

  void restore_state(const nlohmann::json& s) {
    if (s.empty()) return;
    iteration_ = s.at("iteration").get<int>();
    position_ = s.at("position").get<size_t>();
    order_ = s.at("order").get<std::vector<size_t>>();
    epoch_ = s.at("epoch").get<int>();
    set_rng_state(sampler_, s.at("sampler").get<std::string>());
    set_rng_state(model_->dropout_rng(), s.at("dropout").get<std::string>());
    const auto& best = s.at("best_val_mae");
    best_val_mae_ = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
  }

  void validate() {
    const auto r = evaluate(*model_, val_).report;
    val_log_.push_back({iteration_ + 1, r.mae, r.rmse});
    if (r.mae < best_val_mae_) {
      best_val_mae_ = r.mae;
      if (!config_.output_dir.empty()) {
        std::filesystem::create_directories(config_.output_dir);
        save(std::filesystem::path(config_.output_dir) / "best.ckpt");
      }
    }
  }

  [[noreturn]] void dump_nan(const AnnotatedImage& sample, const ForwardResult<Scalar>& fwd, const LossBreakdown& b) const {
    int bad = 0;
    for (auto v : fwd.proposals.data()) bad += !std::isfinite(v);
    nlohmann::json dump = {{"iteration", iteration_ + 1}, {"sample", sample.id},     {"total", b.total},
                           {"cls", b.cls},                {"loc", b.loc},           {"size", b.size},
                           {"nonfinite_proposal_values", bad}, {"points", sample.points.size()}};
    if (!config_.output_dir.empty()) {
      std::filesystem::create_directories(config_.output_dir);
      std::ofstream(std::filesystem::path(config_.output_dir) / "nan_dump.json") << dump.dump(2) << "\n";
    }
    throw NumericalError("non-finite loss at iteration " + std::to_string(iteration_ + 1) + ": " + dump.dump());
  }

  ExperimentConfig config_;
  DatasetSplit train_, val_;
  std::unique_ptr<Model> model_;
  Adam<Scalar> optimizer_;
  Rng sampler_;
  std::vector<size_t> order_;
  size_t position_ = 0;
  int epoch_ = 0;
  int iteration_ = 0;
  double best_val_mae_ = std::numeric_limits<double>::infinity();
  std::vector<TrainLogEntry> log_;
  std::vector<ValLogEntry> val_log_;
  double seconds_ = 0.0;
  bool warned_population_ = false;
};

struct Rendered {
  nlohmann::json predictions;
  cv::Mat overlay;  // BGR8 at original resolution
  int count = 0;
};

// Runs the model on an original-resolution sample and maps predictions back
// to original pixels. The overlay shows predicted boxes (center = point,
// extent = predicted size), exemplar boxes and the count.
inline Rendered predict_and_render(Model& model, const AnnotatedImage& original, int target_height) {
  const auto sample = preprocess(original, target_height, model.config().backbone.coarsest_stride());
  NoGradGuard guard;
  const auto fwd = model.forward(sample, false);
  const auto kept = infer_objects(to_proposals(fwd.proposals), model.config().heads.score_threshold);
  const double inv = 1.0 / sample.scale;
  Rendered r;
  r.count = static_cast<int>(kept.size());
  r.predictions = prediction_json(original.id, kept, inv);
  r.overlay = to_bgr8(original.image);
  for (const auto& p : kept) {
    const double w = p.width * inv, h = p.height * inv, x = p.x * inv, y = p.y * inv;
    cv::rectangle(r.overlay, cv::Point2d(x - w / 2, y - h / 2), cv::Point2d(x + w / 2, y + h / 2), cv::Scalar(0, 255, 0), 1);
    cv::circle(r.overlay, cv::Point2d(x, y), 1, cv::Scalar(255, 0, 255), cv::FILLED);
  }
  for (const auto& b : original.exemplars)
    cv::rectangle(r.overlay, cv::Point2d(b.x1, b.y1), cv::Point2d(b.x2, b.y2), cv::Scalar(0, 255, 255), 1);
  const std::string label = "count: " + std::to_string(r.count);
  const double font = std::max(0.35, original.image.height / 400.0);
  cv::putText(r.overlay, label, cv::Point(4, static_cast<int>(14 * font / 0.35)), cv::FONT_HERSHEY_SIMPLEX, font,
              cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
  return r;
}

}  // namespace cac
