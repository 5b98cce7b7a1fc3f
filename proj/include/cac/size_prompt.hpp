#pragma once

// Size-interval tables and their learnable width/height prompt embeddings.
//
// Bins are right-closed: with ascending cut points b_1 < ... < b_{T-1},
// bin 0 is (0, b_1], bin k is (b_k, b_{k+1}] and the last bin (b_{T-1}, inf).
// Under this convention every equal-frequency bin except the last holds
// exactly floor(N / T) of the fitted values when the values are distinct.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/datamodel.hpp"
#include "cac/nn.hpp"

namespace cac {

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class IntervalMode { kEquifrequent, kUniform };

inline std::string to_string(IntervalMode m) { return m == IntervalMode::kUniform ? "uniform" : "equifrequent"; }

inline IntervalMode parse_interval_mode(const std::string& s) {
  if (s == "equifrequent") return IntervalMode::kEquifrequent;
  if (s == "uniform") return IntervalMode::kUniform;
  throw ConfigError("unknown prompt mode: " + s);
}

// Equal-frequency cut points: with sizes sorted as w_1..w_N (1-indexed) the
// k-th cut is w_{k * floor(N / T)} for k = 1..T-1.
inline std::vector<double> fit_intervals(const std::vector<double>& values, int intervals) {
  std::vector<double> sizes = values;
  if (sizes.empty()) throw FitError("fit_intervals: no sizes");
  if (intervals < 1) throw FitError("fit_intervals: interval count must be positive");
  if (static_cast<size_t>(intervals) > sizes.size())
    throw FitError("fit_intervals: " + std::to_string(intervals) + " intervals for " + std::to_string(sizes.size()) +
                   " sizes");
  std::sort(sizes.begin(), sizes.end());
  const size_t per_bin = sizes.size() / static_cast<size_t>(intervals);
  std::vector<double> bounds;
  for (int k = 1; k < intervals; ++k) bounds.push_back(sizes[k * per_bin - 1]);
  return bounds;
}

// Equal-width cut points over [min, max].
inline std::vector<double> fit_uniform_intervals(const std::vector<double>& sizes, int intervals) {
  if (sizes.empty()) throw FitError("fit_uniform_intervals: no sizes");
  if (intervals < 1) throw FitError("fit_uniform_intervals: interval count must be positive");
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  std::vector<double> bounds;
  for (int k = 1; k < intervals; ++k) bounds.push_back(*lo + (*hi - *lo) * k / intervals);
  return bounds;
}

// Zero-based bin of value: the number of cut points strictly below it.
inline int bin_index(double value, const std::vector<double>& bounds) {
  return static_cast<int>(std::lower_bound(bounds.begin(), bounds.end(), value) - bounds.begin());
}

struct SizeBins {
  int width = 0;
  int height = 0;
};

template <class T>
class SizePromptTable {
 public:
  SizePromptTable() = default;

  // Fits width and height cut points independently and draws 2T embeddings of
  // dimension prompt_dim / 2 from N(0, init_std^2).
  SizePromptTable(const std::vector<double>& widths, const std::vector<double>& heights, int intervals,
                  IntervalMode mode, int prompt_dim, Rng& rng, double init_std = 0.02)
      : mode_(mode), intervals_(intervals) {
    if (prompt_dim <= 0 || prompt_dim % 2 != 0) throw ConfigError("size prompt dimension must be even");
    const auto fit = mode == IntervalMode::kUniform ? fit_uniform_intervals : fit_intervals;
    width_bounds_ = fit(widths, intervals);
    height_bounds_ = fit(heights, intervals);
    init_embeddings(prompt_dim, rng, init_std);
  }

  // Restores a table from serialized bounds (embeddings are loaded separately).
  SizePromptTable(std::vector<double> width_bounds, std::vector<double> height_bounds, IntervalMode mode,
                  int prompt_dim, Rng& rng)
      : mode_(mode),
        intervals_(static_cast<int>(width_bounds.size()) + 1),
        width_bounds_(std::move(width_bounds)),
        height_bounds_(std::move(height_bounds)) {
    if (height_bounds_.size() != width_bounds_.size()) throw ConfigError("size prompt: bound count mismatch");
    if (prompt_dim <= 0 || prompt_dim % 2 != 0) throw ConfigError("size prompt dimension must be even");
    init_embeddings(prompt_dim, rng, 0.02);
  }

  SizeBins lookup(double width, double height) const {
    return {bin_index(width, width_bounds_), bin_index(height, height_bounds_)};
  }

  // One prompt row [E^w_a, E^h_b] per box (N_B x prompt_dim).
  Tensor<T> prompts(const std::vector<ExemplarBox>& boxes) const {
    std::vector<int> a, b;
    for (const auto& box : boxes) {
      const auto bins = lookup(box.width(), box.height());
      a.push_back(bins.width);
      b.push_back(bins.height);
    }
    return concat_cols<T>({gather_rows(width_embeddings_, a), gather_rows(height_embeddings_, b)});
  }

  int intervals() const { return intervals_; }
  int prompt_dim() const { return width_embeddings_.cols() * 2; }
  IntervalMode mode() const { return mode_; }
  const std::vector<double>& width_bounds() const { return width_bounds_; }
  const std::vector<double>& height_bounds() const { return height_bounds_; }
  Tensor<T>& width_embeddings() { return width_embeddings_; }
  Tensor<T>& height_embeddings() { return height_embeddings_; }

  nlohmann::json bounds_json() const {
    return {{"mode", to_string(mode_)}, {"width_bounds", width_bounds_}, {"height_bounds", height_bounds_}};
  }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".width", width_embeddings_});
    out.push_back({prefix + ".height", height_embeddings_});
  }

 private:
  void init_embeddings(int prompt_dim, Rng& rng, double init_std) {
    width_embeddings_ = make_parameter<T>(intervals_, prompt_dim / 2);
    height_embeddings_ = make_parameter<T>(intervals_, prompt_dim / 2);
    fill_normal(width_embeddings_, init_std, rng);
    fill_normal(height_embeddings_, init_std, rng);
  }

  IntervalMode mode_ = IntervalMode::kEquifrequent;
  int intervals_ = 1;
  std::vector<double> width_bounds_;
  std::vector<double> height_bounds_;
  Tensor<T> width_embeddings_;
  Tensor<T> height_embeddings_;
};

}  // namespace cac
