#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cac/tensor.hpp"

namespace cac {

// Deterministic generator used for initialization, sampling and dropout.
using Rng = std::mt19937_64;

template <class T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

template <class T>
Tensor<T> make_parameter(int rows, int cols) {
  return Tensor<T>::zeros(rows, cols, /*requires_grad=*/true);
}

template <class T>
void fill_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
void fill_uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng, bool bias = true)
      : weight_(make_parameter<T>(in, out)), bias_(Tensor<T>::zeros(1, out, bias)), has_bias_(bias) {
    fill_uniform(weight_, std::sqrt(6.0 / (in + out)), rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  int in_features() const { return weight_.rows(); }
  int out_features() const { return weight_.cols(); }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    if (has_bias_) out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  bool has_bias_ = true;
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, bool bias = true)
      : weight_(make_parameter<T>(kernel * kernel * in, out)),
        bias_(Tensor<T>::zeros(1, out, bias)),
        kernel_(kernel),
        stride_(stride),
        pad_(pad),
        has_bias_(bias) {
    fill_normal(weight_, std::sqrt(2.0 / (kernel * kernel * in)), rng);
  }

  // Returns the output map and writes its spatial extent.
  Tensor<T> operator()(const Tensor<T>& x, int height, int width, int& out_height, int& out_width) const {
    ConvGeometry geo{height, width, kernel_, stride_, pad_};
    out_height = geo.out_height();
    out_width = geo.out_width();
    return conv2d(x, weight_, bias_, geo);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int stride() const { return stride_; }

  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    if (has_bias_) out.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  int kernel_ = 3;
  int stride_ = 1;
  int pad_ = 1;
  bool has_bias_ = true;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim) : gain_(make_parameter<T>(1, dim)), shift_(make_parameter<T>(1, dim)) {
    for (auto& v : gain_.data()) v = T(1);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain_, shift_); }
  void collect(ParameterList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain_});
    out.push_back({prefix + ".shift", shift_});
  }

 private:
  Tensor<T> gain_;
  Tensor<T> shift_;
};

// Two-layer perceptron with ReLU and dropout after the hidden layer.
template <class T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(int dim, int hidden, Rng& rng) : fc1_(dim, hidden, rng), fc2_(hidden, dim, rng) {}
  Tensor<T> operator()(const Tensor<T>& x, T drop, bool training, Rng& rng) const {
    return fc2_(dropout(relu(fc1_(x)), drop, training, rng));
  }
  void collect(ParameterList<T>& out, const std::string& prefix) const {
    fc1_.collect(out, prefix + ".fc1");
    fc2_.collect(out, prefix + ".fc2");
  }

 private:
  Linear<T> fc1_;
  Linear<T> fc2_;
};

struct AdamOptions {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParameterList<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.size(), 0.0);
      second_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  // Applies one update using accumulated gradients scaled by grad_scale.
  void step(double grad_scale = 1.0) {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      auto value = t.data();
      auto grad = t.grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (size_t k = 0; k < value.size(); ++k) {
        const double g = static_cast<double>(grad[k]) * grad_scale;
        m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * g;
        v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * g * g;
        const double update = options_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.epsilon);
        value[k] = static_cast<T>(static_cast<double>(value[k]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const ParameterList<T>& parameters() const { return params_; }
  long steps() const { return steps_; }
  std::vector<std::vector<double>>& first_moments() { return first_; }
  std::vector<std::vector<double>>& second_moments() { return second_; }
  void set_steps(long s) { steps_ = s; }

 private:
  ParameterList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  long steps_ = 0;
};

}  // namespace cac
