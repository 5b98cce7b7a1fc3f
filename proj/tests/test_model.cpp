#include <gtest/gtest.h>

#include <set>

#include "cac/model.hpp"
#include "oracles.hpp"

namespace {

cac::AnnotatedImage sample_with_boxes(int h, int w, int boxes) {
  cac::AnnotatedImage s;
  s.id = "probe";
  s.image = cac::Image(h, w);
  std::mt19937 rng(3);
  for (auto& v : s.image.pixels) v = std::uniform_real_distribution<float>(0, 1)(rng);
  for (int k = 0; k < boxes; ++k) {
    const double x = w * (0.1 + 0.25 * k), y = h * (0.1 + 0.2 * k), side = std::max(4, w / 16);
    s.exemplars.push_back({x, y, x + side + 2 * k, y + side});
    s.points.push_back(s.exemplars.back().center());
  }
  return s;
}

std::vector<double> sizes() { return {8, 9, 10, 11, 12, 13, 14, 15, 16, 18, 20, 22, 24, 26, 28, 30, 32, 34, 36, 40}; }

TEST(CountingModel, ProposalContractOnFullSizeImage) {
  cac::ModelConfig cfg;
  cac::CountingModel<float> model(cfg, sizes(), sizes(), 1);
  for (int nb = 1; nb <= 3; ++nb) {
    const auto out = model.forward(sample_with_boxes(384, 512, nb), false);
    EXPECT_EQ(out.proposals.rows(), 4 * 24 * 32);
    EXPECT_EQ(out.exemplar_tokens.rows(), nb * 4);
    EXPECT_EQ(out.exemplar_tokens.cols(), 128);
    for (int i = 0; i < out.proposals.rows(); ++i) {
      EXPECT_GT(out.proposals(i, cac::kScore), 0.0f);
      EXPECT_LT(out.proposals(i, cac::kScore), 1.0f);
      EXPECT_GT(out.proposals(i, cac::kWidth), 0.0f);
      EXPECT_GT(out.proposals(i, cac::kHeight), 0.0f);
    }
  }
}

TEST(CountingModel, UsesAtMostConfiguredExemplars) {
  cac::ModelConfig cfg;
  cfg.exemplars_used = 1;
  cac::CountingModel<float> model(cfg, sizes(), sizes(), 2);
  const auto out = model.forward(sample_with_boxes(128, 192, 3), false);
  EXPECT_EQ(out.exemplars.size(), 1u);
  EXPECT_EQ(out.exemplar_tokens.rows(), 4);
}

TEST(CountingModel, EvalForwardIsDeterministic) {
  cac::CountingModel<float> model(cac::ModelConfig{}, sizes(), sizes(), 3);
  const auto s = sample_with_boxes(128, 128, 2);
  const auto a = model.forward(s, false), b = model.forward(s, false);
  EXPECT_EQ(oracle::max_abs_diff(a.proposals, b.proposals), 0.0);
}

TEST(CountingModel, SameSeedSameWeights) {
  cac::CountingModel<float> a(cac::ModelConfig{}, sizes(), sizes(), 4), b(cac::ModelConfig{}, sizes(), sizes(), 4);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(oracle::max_abs_diff(pa[i].tensor, pb[i].tensor), 0.0) << pa[i].name;
}

TEST(CountingModel, ParameterNamesUnique) {
  cac::CountingModel<float> model(cac::ModelConfig{}, sizes(), sizes(), 5);
  std::set<std::string> names;
  for (const auto& p : model.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(CountingModel, FrozenBackboneReceivesNoGradient) {
  cac::ModelConfig cfg;
  cfg.backbone.frozen = true;
  cac::CountingModel<float> model(cfg, sizes(), sizes(), 6);
  const auto out = model.forward(sample_with_boxes(64, 64, 1), true);
  cac::sum_all(out.proposals).backward();
  size_t trainable = model.parameters(true).size(), all = model.parameters().size();
  EXPECT_EQ(all - trainable, 4u * 2u);  // four stages, weight + bias
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("backbone", 0) == 0) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    }
  }
  bool head_grad = false;
  for (const auto& p : model.parameters(true)) head_grad |= p.tensor.has_grad();
  EXPECT_TRUE(head_grad);
}

TEST(CountingModel, EndToEndGradientCheckInDouble) {
  cac::ModelConfig cfg;
  cfg.backbone.channels = {4, 8, 8, 8};
  cfg.enhancer = {1, 2, 8, 0.0, false};
  cfg.correlation.dim = 8;
  cfg.correlation.heads = 2;
  cfg.correlation.hidden = 8;
  cfg.correlation.layers = 1;
  cfg.correlation.dropout = 0.0;
  cfg.heads.hidden = 4;
  cac::CountingModel<double> model(cfg, sizes(), sizes(), 7);
  const auto s = sample_with_boxes(32, 32, 1);
  // Two entries of every parameter tensor: analytic gradient of
  // sum(score + 0.1 x) against central differences.
  auto params = model.parameters();
  auto forward_sum = [&]() {
    cac::NoGradGuard guard;
    const auto out = model.forward(s, false);
    double acc = 0;
    for (int i = 0; i < out.proposals.rows(); ++i) acc += out.proposals(i, cac::kScore) + 0.1 * out.proposals(i, cac::kX);
    return acc;
  };
  const auto out = model.forward(s, false);
  std::vector<double> coeffs(out.proposals.size(), 0.0);
  for (int i = 0; i < out.proposals.rows(); ++i) {
    coeffs[i * 5 + cac::kScore] = 1.0;
    coeffs[i * 5 + cac::kX] = 0.1;
  }
  cac::weighted_sum(out.proposals, coeffs).backward();
  int checked = 0;
  for (auto& p : params) {
    if (p.tensor.size() == 0 || !p.tensor.has_grad()) continue;
    for (size_t idx : {size_t{0}, p.tensor.size() / 2}) {
      const double keep = p.tensor.data()[idx];
      p.tensor.data()[idx] = keep + 1e-6;
      const double up = forward_sum();
      p.tensor.data()[idx] = keep - 1e-6;
      const double down = forward_sum();
      p.tensor.data()[idx] = keep;
      EXPECT_LT(oracle::relative_error(p.tensor.grad()[idx], (up - down) / 2e-6), 1e-4) << p.name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 40);
}

TEST(ModelConfig, JsonRoundTripAndValidation) {
  cac::ModelConfig cfg;
  cfg.prompt_mode = cac::IntervalMode::kUniform;
  cfg.exemplars_used = 2;
  EXPECT_EQ(cac::to_json(cac::model_config_from_json(cac::to_json(cfg))), cac::to_json(cfg));
  auto j = cac::to_json(cfg);
  j["exemplars_used"] = 4;
  EXPECT_THROW(cac::model_config_from_json(j), cac::ConfigError);
}

}  // namespace
