#pragma once

// Exemplar token assembly and collaborative enhancement: a stack of pre-norm
// self-attention layers over all exemplar x scale tokens.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/backbone.hpp"
#include "cac/nn.hpp"

namespace cac {

struct AttentionStackConfig {
  int layers = 1;
  int heads = 4;
  int hidden = 128;
  double dropout = 0.1;
  bool final_norm = false;

  void validate(int token_dim) const {
    if (layers < 0) throw ConfigError("attention stack: negative layer count");
    if (heads <= 0 || token_dim % heads != 0)
      throw ConfigError("attention stack: token dimension " + std::to_string(token_dim) +
                        " not divisible by head count " + std::to_string(heads));
    if (hidden <= 0) throw ConfigError("attention stack: hidden width must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("attention stack: dropout must be in [0, 1)");
  }
};

inline nlohmann::json to_json(const AttentionStackConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads}, {"hidden", c.hidden}, {"dropout", c.dropout},
          {"final_norm", c.final_norm}};
}

inline AttentionStackConfig attention_config_from_json(const nlohmann::json& j, AttentionStackConfig c = {}) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.hidden = j.value("hidden", c.hidden);
  c.dropout = j.value("dropout", c.dropout);
  c.final_norm = j.value("final_norm", c.final_norm);
  return c;
}

// token (i, j) = aligned feature f_{i,j} + prompt of exemplar i. prompts has
// one row per exemplar.
template <class T>
Tensor<T> assemble_tokens(const AlignedExemplarFeatures<T>& aligned, const Tensor<T>& prompts) {
  if (prompts.cols() != aligned.rows.cols())
    throw ConfigError("assemble_tokens: prompt width " + std::to_string(prompts.cols()) + " != feature width " +
                      std::to_string(aligned.rows.cols()));
  std::vector<int> owner;
  for (const auto& p : aligned.provenance) {
    if (p.exemplar >= prompts.rows()) throw ConfigError("assemble_tokens: missing prompt for exemplar");
    owner.push_back(p.exemplar);
  }
  return add(aligned.rows, gather_rows(prompts, owner));
}

// softmax(Q K^T / sqrt(d)) V with d the key width. Optionally exposes the
// attention weights.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>* weights = nullptr) {
  if (q.cols() != k.cols()) throw ConfigError("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw ConfigError("attention: key/value count mismatch");
  auto w = softmax_rows(scale(matmul_nt(q, k), T(1) / std::sqrt(static_cast<T>(q.cols()))));
  if (weights) *weights = w;
  return matmul(w, v);
}

template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(int query_dim, int kv_dim, int model_dim, int heads, Rng& rng)
      : wq_(query_dim, model_dim, rng),
        wk_(kv_dim, model_dim, rng),
        wv_(kv_dim, model_dim, rng),
        wo_(model_dim, query_dim, rng),
        heads_(heads) {
    if (model_dim % heads != 0) throw ConfigError("multi-head attention: model width not divisible by heads");
  }

  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context, std::vector<Tensor<T>>* weights = nullptr) const {
    const auto q = wq_(queries), k = wk_(context), v = wv_(context);
    const int width = q.cols() / heads_;
    std::vector<Tensor<T>> outs;
    for (int h = 0; h < heads_; ++h) {
      Tensor<T> w;
      outs.push_back(attention(slice_cols(q, h * width, (h + 1) * width), slice_cols(k, h * width, (h + 1) * width),
                               slice_cols(v, h * width, (h + 1) * width), &w));
      if (weights) weights->push_back(w);
    }
    return wo_(heads_ == 1 ? outs[0] : concat_cols(outs));
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    wq_.collect(out, prefix + ".q");
    wk_.collect(out, prefix + ".k");
    wv_.collect(out, prefix + ".v");
    wo_.collect(out, prefix + ".out");
  }

 private:
  Linear<T> wq_, wk_, wv_, wo_;
  int heads_ = 1;
};

// z' = MHSA(LN(z)) + z ; z = MLP(LN(z')) + z'
template <class T>
class SelfAttentionLayer {
 public:
  SelfAttentionLayer() = default;
  SelfAttentionLayer(int dim, const AttentionStackConfig& cfg, Rng& rng)
      : norm1_(dim), norm2_(dim), attn_(dim, dim, dim, cfg.heads, rng), mlp_(dim, cfg.hidden, rng), drop_(T(cfg.dropout)) {}

  Tensor<T> operator()(const Tensor<T>& z, bool training, Rng& rng) const {
    const auto normed = norm1_(z);
    const auto mid = add(dropout(attn_(normed, normed), drop_, training, rng), z);
    return add(dropout(mlp_(norm2_(mid), drop_, training, rng), drop_, training, rng), mid);
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    norm1_.collect(out, prefix + ".norm1");
    norm2_.collect(out, prefix + ".norm2");
    attn_.collect(out, prefix + ".attn");
    mlp_.collect(out, prefix + ".mlp");
  }

 private:
  LayerNorm<T> norm1_, norm2_;
  MultiHeadAttention<T> attn_;
  FeedForward<T> mlp_;
  T drop_ = T(0);
};

// Collaborative enhancement over an N_e x d_e token set; output has the same
// shape. No positional encoding is applied, so the stack is equivariant to
// token order.
template <class T>
class ExemplarEnhancer {
 public:
  ExemplarEnhancer() = default;
  ExemplarEnhancer(int dim, const AttentionStackConfig& cfg, Rng& rng) : config_(cfg) {
    cfg.validate(dim);
    for (int l = 0; l < cfg.layers; ++l) layers_.emplace_back(dim, cfg, rng);
    if (cfg.final_norm) final_norm_ = LayerNorm<T>(dim);
  }

  Tensor<T> operator()(const Tensor<T>& tokens, bool training, Rng& rng) const {
    if (tokens.rows() < 1) throw ConfigError("enhance: empty token set");
    Tensor<T> z = tokens;
    for (const auto& layer : layers_) z = layer(z, training, rng);
    if (config_.final_norm) z = final_norm_(z);
    return z;
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    for (size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, prefix + ".layer" + std::to_string(l));
    if (config_.final_norm) final_norm_.collect(out, prefix + ".final_norm");
  }

 private:
  AttentionStackConfig config_;
  std::vector<SelfAttentionLayer<T>> layers_;
  LayerNorm<T> final_norm_;
};

}  // namespace cac
