#pragma once

// Query correlation between image tokens and the whole enhanced exemplar set:
// cross-attention (image queries, exemplar keys/values) followed by an
// exemplar-derived channel recalibration.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/backbone.hpp"
#include "cac/hece.hpp"

namespace cac {

struct CorrelationConfig {
  int dim = 128;  // C_t
  int layers = 2;
  int heads = 4;
  int hidden = 128;
  double dropout = 0.1;
  int gate_reduction = 4;

  AttentionStackConfig stack() const { return {layers, heads, hidden, dropout, false}; }
};

inline nlohmann::json to_json(const CorrelationConfig& c) {
  return {{"dim", c.dim},         {"layers", c.layers},   {"heads", c.heads},
          {"hidden", c.hidden},   {"dropout", c.dropout}, {"gate_reduction", c.gate_reduction}};
}

inline CorrelationConfig correlation_config_from_json(const nlohmann::json& j) {
  CorrelationConfig c;
  c.dim = j.value("dim", c.dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.gate_reduction = j.value("gate_reduction", c.gate_reduction);
  return c;
}

// 2-D sinusoidal embedding on an H x W grid, row-major. The first half of the
// channels encodes the row index, the second half the column index, each as
// interleaved sin/cos pairs with geometric frequencies.
template <class T>
Tensor<T> sinusoidal_position_embedding(int height, int width, int dim) {
  if (dim % 4 != 0) throw ConfigError("position embedding width must be divisible by 4");
  const int half = dim / 2;
  auto out = Tensor<T>::zeros(height * width, dim);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int r = y * width + x;
      for (int i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / half);
        out(r, 2 * i) = static_cast<T>(std::sin(y * freq));
        out(r, 2 * i + 1) = static_cast<T>(std::cos(y * freq));
        out(r, half + 2 * i) = static_cast<T>(std::sin(x * freq));
        out(r, half + 2 * i + 1) = static_cast<T>(std::cos(x * freq));
      }
    }
  return out;
}

template <class T>
struct ImageTokenSet {
  Tensor<T> tokens;  // N_q x d_q, row-major over the grid
  int height = 0;
  int width = 0;
};

// Flattens the map row-major and adds the position embedding.
template <class T>
ImageTokenSet<T> tokenize_query(const FeatureMap<T>& level, bool with_position = true) {
  ImageTokenSet<T> out{level.data, level.height, level.width};
  if (with_position)
    out.tokens = add(level.data, sinusoidal_position_embedding<T>(level.height, level.width, level.channels()));
  return out;
}

// Token rows are already in grid order, so folding only reattaches the extent.
template <class T>
FeatureMap<T> fold_tokens(const Tensor<T>& tokens, int height, int width) {
  if (tokens.rows() != height * width) throw ConfigError("fold_tokens: token count does not match grid");
  return {tokens, height, width};
}

// q' = MHA(LN(q), LN(x)) + q ; q = MLP(LN(q')) + q'. The exemplar side is read only.
template <class T>
class CrossAttentionLayer {
 public:
  CrossAttentionLayer() = default;
  CrossAttentionLayer(int dim, int exemplar_dim, const CorrelationConfig& cfg, Rng& rng)
      : norm_q_(dim),
        norm_kv_(exemplar_dim),
        norm_mlp_(dim),
        attn_(dim, exemplar_dim, dim, cfg.heads, rng),
        mlp_(dim, cfg.hidden, rng),
        drop_(T(cfg.dropout)) {}

  Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& exemplars, bool training, Rng& rng,
                       std::vector<Tensor<T>>* weights = nullptr) const {
    const auto mid = add(dropout(attn_(norm_q_(q), norm_kv_(exemplars), weights), drop_, training, rng), q);
    return add(dropout(mlp_(norm_mlp_(mid), drop_, training, rng), drop_, training, rng), mid);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    norm_q_.collect(out, prefix + ".norm_q");
    norm_kv_.collect(out, prefix + ".norm_kv");
    norm_mlp_.collect(out, prefix + ".norm_mlp");
    attn_.collect(out, prefix + ".attn");
    mlp_.collect(out, prefix + ".mlp");
  }

 private:
  LayerNorm<T> norm_q_, norm_kv_, norm_mlp_;
  MultiHeadAttention<T> attn_;
  FeedForward<T> mlp_;
  T drop_ = T(0);
};

template <class T>
class SpatialCorrelator {
 public:
  SpatialCorrelator() = default;
  SpatialCorrelator(int query_dim, int exemplar_dim, const CorrelationConfig& cfg, Rng& rng) {
    cfg.stack().validate(cfg.dim);
    if (query_dim != cfg.dim) input_ = Linear<T>(query_dim, cfg.dim, rng);
    for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back(cfg.dim, exemplar_dim, cfg, rng);
  }

  // Returns the H x W x C_t correlation map.
  FeatureMap<T> operator()(const ImageTokenSet<T>& query, const Tensor<T>& exemplars, bool training, Rng& rng,
                           std::vector<Tensor<T>>* weights = nullptr) const {
    Tensor<T> q = input_ ? (*input_)(query.tokens) : query.tokens;
    for (const auto& layer : layers_) q = layer(q, exemplars, training, rng, weights);
    return fold_tokens(q, query.height, query.width);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    if (input_) input_->collect(out, prefix + ".input");
    for (size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, prefix + ".layer" + std::to_string(l));
  }

 private:
  std::optional<Linear<T>> input_;
  std::vector<CrossAttentionLayer<T>> layers_;
};

// G_w = softmax(expand(relu(reduce(mean(x))))), with an extra projection to
// C_t when the exemplar width differs.
template <class T>
class ChannelGate {
 public:
  ChannelGate() = default;
  ChannelGate(int exemplar_dim, const CorrelationConfig& cfg, Rng& rng) {
    const int bottleneck = std::max(4, cfg.dim / std::max(1, cfg.gate_reduction));
    if (exemplar_dim != cfg.dim) project_ = Linear<T>(exemplar_dim, cfg.dim, rng);
    reduce_ = Linear<T>(cfg.dim, bottleneck, rng);
    expand_ = Linear<T>(bottleneck, cfg.dim, rng);
  }

  Tensor<T> operator()(const Tensor<T>& exemplars) const {
    auto pooled = mean_rows(exemplars);
    if (project_) pooled = (*project_)(pooled);
    return softmax_rows(expand_(relu(reduce_(pooled))));
  }

  Linear<T>& expand() { return expand_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    if (project_) project_->collect(out, prefix + ".project");
    reduce_.collect(out, prefix + ".reduce");
    expand_.collect(out, prefix + ".expand");
  }

 private:
  std::optional<Linear<T>> project_;
  Linear<T> reduce_, expand_;
};

// O'_q[h, w, c] = O_q[h, w, c] * G_w[c]
template <class T>
FeatureMap<T> apply_channel_gate(const FeatureMap<T>& map, const Tensor<T>& gate) {
  if (gate.cols() != map.channels()) throw ConfigError("channel gate width does not match correlation map");
  return {mul_row(map.data, gate), map.height, map.width};
}

}  // namespace cac
