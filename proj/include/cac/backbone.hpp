#pragma once

// Hierarchical feature extraction, exemplar ROI pooling and cross-scale
// alignment to the channel width of the last level.

#include <algorithm>
#include <array>
#include <optional>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/datamodel.hpp"
#include "cac/nn.hpp"

namespace cac {

struct BackboneConfig {
  std::vector<int> channels{32, 64, 128, 128};
  std::vector<int> strides{4, 8, 16, 16};
  bool frozen = false;
  bool use_bias = true;

  int levels() const { return static_cast<int>(channels.size()); }
  int coarsest_stride() const { return strides.back(); }
  int output_channels() const { return channels.back(); }

  void validate() const {
    if (channels.empty()) throw ConfigError("backbone: at least one level required");
    if (channels.size() != strides.size()) throw ConfigError("backbone: channels and strides differ in length");
    int previous = 1;
    for (size_t j = 0; j < strides.size(); ++j) {
      if (channels[j] <= 0) throw ConfigError("backbone: channel widths must be positive");
      if (strides[j] < previous || strides[j] % previous != 0)
        throw ConfigError("backbone: strides must be nondecreasing integer multiples");
      previous = strides[j];
    }
  }
};

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"channels", c.channels}, {"strides", c.strides}, {"frozen", c.frozen}, {"use_bias", c.use_bias}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.channels = j.value("channels", c.channels);
  c.strides = j.value("strides", c.strides);
  c.frozen = j.value("frozen", c.frozen);
  c.use_bias = j.value("use_bias", c.use_bias);
  c.validate();
  return c;
}

template <class T>
struct FeatureMap {
  Tensor<T> data;  // (height * width) x channels
  int height = 0;
  int width = 0;
  int channels() const { return data.cols(); }
};

template <class T>
struct FeaturePyramid {
  std::vector<FeatureMap<T>> levels;
  std::vector<int> strides;
  int size() const { return static_cast<int>(levels.size()); }
  const FeatureMap<T>& last() const { return levels.back(); }
};

template <class T>
Tensor<T> image_tensor(const Image& img) {
  std::vector<T> values(img.pixels.begin(), img.pixels.end());
  return Tensor<T>::from(img.height * img.width, 3, std::move(values));
}

// Projects an image-space box onto a stride-s grid: outward rounding, clamped
// to the grid, at least one cell. Returns {y0, y1, x0, x1} half-open.
inline std::array<int, 4> project_box(const ExemplarBox& box, int stride, int grid_h, int grid_w) {
  auto span = [stride](double lo, double hi, int extent) {
    int a = static_cast<int>(std::floor(lo / stride));
    int b = static_cast<int>(std::ceil(hi / stride));
    a = std::clamp(a, 0, extent - 1);
    b = std::clamp(b, 0, extent);
    if (b <= a) b = a + 1;
    return std::pair{a, b};
  };
  auto [y0, y1] = span(box.y1, box.y2, grid_h);
  auto [x0, x1] = span(box.x1, box.x2, grid_w);
  return {y0, y1, x0, x1};
}

// Mean of the level's features over the box's cells (1 x C).
template <class T>
Tensor<T> roi_pool(const FeatureMap<T>& level, const ExemplarBox& box, int stride) {
  const auto [y0, y1, x0, x1] = project_box(box, stride, level.height, level.width);
  return region_mean(level.data, level.width, y0, y1, x0, x1);
}

// Convolutional pyramid: one conv + ReLU per stage; stage j downsamples by
// strides[j] / strides[j - 1].
template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
    config.validate();
    int in = 3, previous = 1;
    for (int j = 0; j < config.levels(); ++j) {
      const int factor = config.strides[j] / previous;
      const int kernel = factor == 1 ? 3 : 2 * factor - 1;
      const int pad = factor == 1 ? 1 : factor - 1;
      stages_.emplace_back(in, config.channels[j], kernel, factor, pad, rng, config.use_bias);
      in = config.channels[j];
      previous = config.strides[j];
    }
  }

  FeaturePyramid<T> operator()(const Tensor<T>& image, int height, int width) const {
    const int coarsest = config_.coarsest_stride();
    if (height % coarsest != 0 || width % coarsest != 0)
      throw ConfigError("backbone: image " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by coarsest stride " + std::to_string(coarsest));
    if (image.cols() != 3 || image.rows() != height * width) throw ConfigError("backbone: expected (H*W) x 3 image");
    FeaturePyramid<T> pyramid;
    pyramid.strides = config_.strides;
    Tensor<T> x = image;
    int h = height, w = width;
    for (const auto& stage : stages_) {
      int oh = 0, ow = 0;
      x = relu(stage(x, h, w, oh, ow));
      h = oh;
      w = ow;
      pyramid.levels.push_back({x, h, w});
    }
    return pyramid;
  }

  const BackboneConfig& config() const { return config_; }
  std::vector<Conv2d<T>>& stages() { return stages_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (size_t j = 0; j < stages_.size(); ++j) stages_[j].collect(out, prefix + ".stage" + std::to_string(j));
  }

 private:
  BackboneConfig config_;
  std::vector<Conv2d<T>> stages_;
};

// Row r of the aligned matrix comes from exemplar r / levels at scale r % levels.
struct RowProvenance {
  int exemplar = 0;
  int scale = 0;
};

template <class T>
struct AlignedExemplarFeatures {
  Tensor<T> rows;  // (N_B * L) x C_L
  std::vector<RowProvenance> provenance;
};

// Per-scale affine maps to C_L for every scale whose width differs.
template <class T>
class ScaleAligner {
 public:
  ScaleAligner() = default;
  ScaleAligner(const std::vector<int>& channels, Rng& rng) : channels_(channels) {
    const int target = channels.back();
    for (int c : channels) {
      if (c == target)
        maps_.emplace_back();
      else
        maps_.emplace_back(Linear<T>(c, target, rng));
    }
  }

  int levels() const { return static_cast<int>(channels_.size()); }
  bool projects(int scale) const { return maps_.at(scale).has_value(); }
  Linear<T>& map(int scale) { return *maps_.at(scale); }

  Tensor<T> align_one(const Tensor<T>& pooled, int scale) const {
    if (scale < 0 || scale >= levels()) throw ConfigError("align_scales: unknown scale index " + std::to_string(scale));
    if (pooled.cols() != channels_[scale]) throw ConfigError("align_scales: width does not match scale");
    return maps_[scale] ? (*maps_[scale])(pooled) : pooled;
  }

  // pooled holds N_B * L rows in exemplar-major, scale-minor order.
  AlignedExemplarFeatures<T> operator()(const std::vector<Tensor<T>>& pooled) const {
    if (pooled.empty() || pooled.size() % channels_.size() != 0)
      throw ConfigError("align_scales: expected N_B * L pooled vectors");
    AlignedExemplarFeatures<T> out;
    std::vector<Tensor<T>> rows;
    for (size_t r = 0; r < pooled.size(); ++r) {
      const int scale = static_cast<int>(r % channels_.size());
      rows.push_back(align_one(pooled[r], scale));
      out.provenance.push_back({static_cast<int>(r / channels_.size()), scale});
    }
    out.rows = concat_rows(rows);
    return out;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (size_t j = 0; j < maps_.size(); ++j)
      if (maps_[j]) maps_[j]->collect(out, prefix + ".scale" + std::to_string(j));
  }

 private:
  std::vector<int> channels_;
  std::vector<std::optional<Linear<T>>> maps_;
};

}  // namespace cac
