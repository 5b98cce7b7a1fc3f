#pragma once

// Localization heads on the correlated query map, anchor-point decoding into
// scored, sized point proposals, and thresholded inference.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/backbone.hpp"
#include "cac/nn.hpp"

namespace cac {

struct HeadConfig {
  int anchors_per_cell = 4;  // must be a perfect square
  int hidden = 64;
  double alpha = 0.0;  // offset scale; 0 selects the stride
  double beta = 0.0;   // size scale; 0 selects the stride
  double score_threshold = 0.5;

  int anchor_side() const {
    const int side = static_cast<int>(std::lround(std::sqrt(anchors_per_cell)));
    if (side * side != anchors_per_cell || side < 1) throw ConfigError("anchors_per_cell must be a perfect square");
    return side;
  }
};

inline nlohmann::json to_json(const HeadConfig& c) {
  return {{"anchors_per_cell", c.anchors_per_cell}, {"hidden", c.hidden}, {"alpha", c.alpha},
          {"beta", c.beta}, {"score_threshold", c.score_threshold}};
}

inline HeadConfig head_config_from_json(const nlohmann::json& j) {
  HeadConfig c;
  c.anchors_per_cell = j.value("anchors_per_cell", c.anchors_per_cell);
  c.hidden = j.value("hidden", c.hidden);
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.score_threshold = j.value("score_threshold", c.score_threshold);
  c.anchor_side();
  return c;
}

struct AnchorGrid {
  int height = 0;
  int width = 0;
  int stride = 1;
  int per_cell = 1;
  std::vector<Point2> anchors;  // cell-major (row-major cells), anchor-minor

  int size() const { return static_cast<int>(anchors.size()); }
};

// Anchors on a side x side sub-grid of every s x s patch, at the centers of
// the sub-cells (s/4 and 3s/4 for four anchors).
inline AnchorGrid make_anchor_grid(int height, int width, int stride, int per_cell) {
  HeadConfig probe;
  probe.anchors_per_cell = per_cell;
  const int side = probe.anchor_side();
  AnchorGrid grid{height, width, stride, per_cell, {}};
  grid.anchors.reserve(static_cast<size_t>(height) * width * per_cell);
  for (int cy = 0; cy < height; ++cy)
    for (int cx = 0; cx < width; ++cx)
      for (int ay = 0; ay < side; ++ay)
        for (int ax = 0; ax < side; ++ax)
          grid.anchors.push_back({(cx + (ax + 0.5) / side) * stride, (cy + (ay + 0.5) / side) * stride});
  return grid;
}

template <class T>
struct HeadOutputs {
  Tensor<T> offsets;  // N_q x 2A, (dx, dy) per anchor
  Tensor<T> scores;   // N_q x A, in (0, 1)
  Tensor<T> sizes;    // N_q x 2A, (w, h) per anchor, positive
  int height = 0;
  int width = 0;
};

template <class T>
class HeadBranch {
 public:
  HeadBranch() = default;
  HeadBranch(int in, int hidden, int out, Rng& rng)
      : conv1_(in, hidden, 3, 1, 1, rng), conv2_(hidden, hidden, 3, 1, 1, rng), conv3_(hidden, out, 3, 1, 1, rng) {}

  Tensor<T> operator()(const FeatureMap<T>& x) const {
    int h = 0, w = 0;
    auto y = relu(conv1_(x.data, x.height, x.width, h, w));
    y = relu(conv2_(y, h, w, h, w));
    return conv3_(y, h, w, h, w);
  }

  Conv2d<T>& last() { return conv3_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    conv1_.collect(out, prefix + ".conv1");
    conv2_.collect(out, prefix + ".conv2");
    conv3_.collect(out, prefix + ".conv3");
  }

 private:
  Conv2d<T> conv1_, conv2_, conv3_;
};

// Offset, classification and size branches of identical architecture.
template <class T>
class LocalizationHeads {
 public:
  LocalizationHeads() = default;
  LocalizationHeads(int in, const HeadConfig& cfg, Rng& rng)
      : anchors_(cfg.anchors_per_cell),
        offset_(in, cfg.hidden, 2 * cfg.anchors_per_cell, rng),
        score_(in, cfg.hidden, cfg.anchors_per_cell, rng),
        size_(in, cfg.hidden, 2 * cfg.anchors_per_cell, rng) {
    cfg.anchor_side();
    // Start from a low positive rate and sizes near half a stride.
    for (auto& b : score_.last().bias().data()) b = T(-2);
    for (auto& b : size_.last().bias().data()) b = T(-0.4);
    for (auto& w : offset_.last().weight().data()) w *= T(0.1);
  }

  HeadOutputs<T> operator()(const FeatureMap<T>& query) const {
    return {offset_(query), sigmoid(score_(query)), softplus(size_(query)), query.height, query.width};
  }

  int anchors_per_cell() const { return anchors_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    offset_.collect(out, prefix + ".offset");
    score_.collect(out, prefix + ".score");
    size_.collect(out, prefix + ".size");
  }

 private:
  int anchors_ = 4;
  HeadBranch<T> offset_, score_, size_;
};

// Proposal columns of the decoded tensor.
enum ProposalColumn { kX = 0, kY = 1, kScore = 2, kWidth = 3, kHeight = 4 };

// x = anchor + alpha * d, size = beta * raw. Row n = cell * A + anchor;
// output is N x 5 (x, y, score, w, h). No clipping to the image.
template <class T>
Tensor<T> decode(const HeadOutputs<T>& heads, const AnchorGrid& grid, T alpha, T beta) {
  const int per_cell = grid.per_cell;
  if (heads.height != grid.height || heads.width != grid.width || heads.scores.cols() != per_cell)
    throw ConfigError("decode: anchor grid does not match head outputs");
  const int n = grid.size();
  auto out = detail::make_output<T>(n, 5, {&heads.offsets, &heads.scores, &heads.sizes});
  for (int i = 0; i < n; ++i) {
    const int cell = i / per_cell, a = i % per_cell;
    T* row = out->value.data() + static_cast<size_t>(i) * 5;
    row[kX] = static_cast<T>(grid.anchors[i].x) + alpha * heads.offsets(cell, 2 * a);
    row[kY] = static_cast<T>(grid.anchors[i].y) + alpha * heads.offsets(cell, 2 * a + 1);
    row[kScore] = heads.scores(cell, a);
    row[kWidth] = beta * heads.sizes(cell, 2 * a);
    row[kHeight] = beta * heads.sizes(cell, 2 * a + 1);
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, heads, n, per_cell, alpha, beta]() {
      T* go = heads.offsets.requires_grad() ? heads.offsets.node()->grad_data() : nullptr;
      T* gs = heads.scores.requires_grad() ? heads.scores.node()->grad_data() : nullptr;
      T* gz = heads.sizes.requires_grad() ? heads.sizes.node()->grad_data() : nullptr;
      const int oc = heads.offsets.cols(), sc = heads.scores.cols(), zc = heads.sizes.cols();
      for (int i = 0; i < n; ++i) {
        const int cell = i / per_cell, a = i % per_cell;
        const T* g = o->grad.data() + static_cast<size_t>(i) * 5;
        if (go) {
          go[cell * oc + 2 * a] += alpha * g[kX];
          go[cell * oc + 2 * a + 1] += alpha * g[kY];
        }
        if (gs) gs[cell * sc + a] += g[kScore];
        if (gz) {
          gz[cell * zc + 2 * a] += beta * g[kWidth];
          gz[cell * zc + 2 * a + 1] += beta * g[kHeight];
        }
      }
    };
  }
  return Tensor<T>(out);
}

struct Proposal {
  double x = 0, y = 0, score = 0, width = 0, height = 0;
  int index = 0;  // row in the undecoded set; cell = index / A, anchor = index % A
};

using ProposalSet = std::vector<Proposal>;

template <class T>
ProposalSet to_proposals(const Tensor<T>& decoded) {
  ProposalSet out(decoded.rows());
  for (int i = 0; i < decoded.rows(); ++i)
    out[i] = {double(decoded(i, kX)), double(decoded(i, kY)), double(decoded(i, kScore)), double(decoded(i, kWidth)),
              double(decoded(i, kHeight)), i};
  return out;
}

// Keeps proposals scoring strictly above the threshold; no suppression.
inline ProposalSet infer_objects(const ProposalSet& proposals, double threshold) {
  if (threshold < 0 || threshold > 1) throw ConfigError("score threshold must be in [0, 1]");
  ProposalSet kept;
  for (const auto& p : proposals)
    if (p.score > threshold || (threshold == 0.0 && p.score >= 0.0)) kept.push_back(p);
  return kept;
}

// {"image_id": str, "predictions": [[x, y, score, w, h], ...]}
inline nlohmann::json prediction_json(const std::string& image_id, const ProposalSet& proposals, double coord_scale = 1.0) {
  nlohmann::json preds = nlohmann::json::array();
  for (const auto& p : proposals)
    preds.push_back({p.x * coord_scale, p.y * coord_scale, p.score, p.width * coord_scale, p.height * coord_scale});
  return {{"image_id", image_id}, {"predictions", preds}};
}

}  // namespace cac
