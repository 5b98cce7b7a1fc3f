#pragma once

// End-to-end counting network: pyramid features, exemplar tokens with size
// prompts, collaborative enhancement, query correlation and localization heads.

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/backbone.hpp"
#include "cac/euqc.hpp"
#include "cac/hece.hpp"
#include "cac/saml.hpp"
#include "cac/size_prompt.hpp"

namespace cac {

struct ModelConfig {
  BackboneConfig backbone;
  AttentionStackConfig enhancer{1, 4, 128, 0.1, false};
  CorrelationConfig correlation;
  HeadConfig heads;
  int prompt_intervals = 20;
  IntervalMode prompt_mode = IntervalMode::kEquifrequent;
  int exemplars_used = 3;
  bool position_embedding = true;

  int token_dim() const { return backbone.output_channels(); }

  void validate() const {
    backbone.validate();
    enhancer.validate(token_dim());
    correlation.stack().validate(correlation.dim);
    heads.anchor_side();
    if (prompt_intervals < 1) throw ConfigError("prompt intervals must be positive");
    if (exemplars_used < 1 || exemplars_used > 3) throw ConfigError("exemplars_used must be 1, 2 or 3");
    if (token_dim() % 2 != 0) throw ConfigError("token dimension must be even");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"backbone", to_json(c.backbone)},
          {"enhancer", to_json(c.enhancer)},
          {"correlation", to_json(c.correlation)},
          {"heads", to_json(c.heads)},
          {"prompt_intervals", c.prompt_intervals},
          {"prompt_mode", to_string(c.prompt_mode)},
          {"exemplars_used", c.exemplars_used},
          {"position_embedding", c.position_embedding}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("backbone")) c.backbone = backbone_config_from_json(j["backbone"]);
  if (j.contains("enhancer")) c.enhancer = attention_config_from_json(j["enhancer"], c.enhancer);
  if (j.contains("correlation")) c.correlation = correlation_config_from_json(j["correlation"]);
  if (j.contains("heads")) c.heads = head_config_from_json(j["heads"]);
  c.prompt_intervals = j.value("prompt_intervals", c.prompt_intervals);
  if (j.contains("prompt_mode")) c.prompt_mode = parse_interval_mode(j["prompt_mode"].get<std::string>());
  c.exemplars_used = j.value("exemplars_used", c.exemplars_used);
  c.position_embedding = j.value("position_embedding", c.position_embedding);
  c.validate();
  return c;
}

template <class T>
struct ForwardResult {
  Tensor<T> proposals;  // N x 5 (x, y, score, w, h) in preprocessed pixels
  HeadOutputs<T> heads;
  AnchorGrid grid;
  Tensor<T> exemplar_tokens;
  Tensor<T> enhanced;
  Tensor<T> gate;
  std::vector<ExemplarBox> exemplars;  // the boxes actually used
};

// Tag selecting the constructor that restores saved interval bounds.
struct FromBounds {};

template <class T>
class CountingModel {
 public:
  // Fits the size-prompt intervals to the given training exemplar sizes.
  CountingModel(const ModelConfig& config, const std::vector<double>& train_widths,
                const std::vector<double>& train_heights, uint64_t seed)
      : config_(config), rng_(seed) {
    config.validate();
    build();
    prompts_ = SizePromptTable<T>(train_widths, train_heights, config.prompt_intervals, config.prompt_mode,
                                  config.token_dim(), rng_);
    dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  }

  // Restores interval bounds (weights are loaded afterwards).
  CountingModel(FromBounds, const ModelConfig& config, std::vector<double> width_bounds, std::vector<double> height_bounds,
                uint64_t seed)
      : config_(config), rng_(seed) {
    config.validate();
    build();
    prompts_ = SizePromptTable<T>(std::move(width_bounds), std::move(height_bounds), config.prompt_mode,
                                  config.token_dim(), rng_);
    dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  }

  ForwardResult<T> forward(const AnnotatedImage& sample, bool training) {
    const auto& img = sample.image;
    const auto input = image_tensor<T>(img);
    FeaturePyramid<T> pyramid;
    if (config_.backbone.frozen) {
      NoGradGuard guard;
      pyramid = backbone_(input, img.height, img.width);
    } else {
      pyramid = backbone_(input, img.height, img.width);
    }

    ForwardResult<T> out;
    const int used = std::min<int>(config_.exemplars_used, static_cast<int>(sample.exemplars.size()));
    if (used < 1) throw ConfigError("sample '" + sample.id + "' has no exemplars");
    out.exemplars.assign(sample.exemplars.begin(), sample.exemplars.begin() + used);

    std::vector<Tensor<T>> pooled;
    for (const auto& box : out.exemplars)
      for (int j = 0; j < pyramid.size(); ++j) pooled.push_back(roi_pool(pyramid.levels[j], box, pyramid.strides[j]));
    const auto aligned = aligner_(pooled);
    out.exemplar_tokens = assemble_tokens(aligned, prompts_.prompts(out.exemplars));
    out.enhanced = enhancer_(out.exemplar_tokens, training, dropout_rng_);

    const auto tokens = tokenize_query(pyramid.last(), config_.position_embedding);
    const auto correlated = correlator_(tokens, out.enhanced, training, dropout_rng_);
    out.gate = gate_(out.enhanced);
    const auto query = apply_channel_gate(correlated, out.gate);

    out.heads = heads_(query);
    const int stride = pyramid.strides.back();
    out.grid = make_anchor_grid(query.height, query.width, stride, config_.heads.anchors_per_cell);
    const T alpha = static_cast<T>(config_.heads.alpha > 0 ? config_.heads.alpha : stride);
    const T beta = static_cast<T>(config_.heads.beta > 0 ? config_.heads.beta : stride);
    out.proposals = decode(out.heads, out.grid, alpha, beta);
    return out;
  }

  // All learnable tensors, backbone first. trainable_only drops a frozen backbone.
  ParameterList<T> parameters(bool trainable_only = false) const {
    ParameterList<T> out;
    if (!(trainable_only && config_.backbone.frozen)) backbone_.collect(out, "backbone");
    aligner_.collect(out, "align");
    prompts_.collect(out, "prompt");
    enhancer_.collect(out, "enhancer");
    correlator_.collect(out, "correlator");
    gate_.collect(out, "gate");
    heads_.collect(out, "heads");
    return out;
  }

  const ModelConfig& config() const { return config_; }
  SizePromptTable<T>& prompts() { return prompts_; }
  const SizePromptTable<T>& prompts() const { return prompts_; }
  ChannelGate<T>& gate() { return gate_; }
  Rng& dropout_rng() { return dropout_rng_; }

 private:
  void build() {
    backbone_ = Backbone<T>(config_.backbone, rng_);
    aligner_ = ScaleAligner<T>(config_.backbone.channels, rng_);
    enhancer_ = ExemplarEnhancer<T>(config_.token_dim(), config_.enhancer, rng_);
    correlator_ = SpatialCorrelator<T>(config_.token_dim(), config_.token_dim(), config_.correlation, rng_);
    gate_ = ChannelGate<T>(config_.token_dim(), config_.correlation, rng_);
    heads_ = LocalizationHeads<T>(config_.correlation.dim, config_.heads, rng_);
  }

  ModelConfig config_;
  Rng rng_;
  Rng dropout_rng_;
  Backbone<T> backbone_;
  ScaleAligner<T> aligner_;
  SizePromptTable<T> prompts_;
  ExemplarEnhancer<T> enhancer_;
  SpatialCorrelator<T> correlator_;
  ChannelGate<T> gate_;
  LocalizationHeads<T> heads_;
};

}  // namespace cac
