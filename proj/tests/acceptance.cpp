// Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cac/trainer.hpp"
#include "instances.hpp"
#include "oracles.hpp"

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

std::vector<int> shuffled(int n, std::mt19937_64& rng) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// 1. Hungarian cost equals the enumeration minimum.
Outcome matching_oracle() {
  std::mt19937_64 rng(101);
  std::vector<instances::Matching> cases;
  for (int t = 0; t < 200; ++t) cases.push_back(instances::random_matching(rng, 6, 8));
  const auto t0 = Clock::now();
  double worst = 0.0;
  bool injective = true;
  for (const auto& inst : cases) {
    const int m = static_cast<int>(inst.gt.size()), n = static_cast<int>(inst.proposals.size());
    const auto r = cac::hungarian_match(inst.gt, inst.proposals, 5e-2);
    const auto bf = oracle::brute_force_assignment(cac::match_cost_matrix(inst.gt, inst.proposals, 5e-2), m, n);
    worst = std::max(worst, std::abs(r.cost - (m == 0 ? 0.0 : bf.cost)));
    std::set<int> cols(r.assignment.begin(), r.assignment.end());
    injective &= static_cast<int>(cols.size()) == m;
  }
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-9 && injective && elapsed < 5.0,
          fmt("200 instances, max |cost - brute force| = %.2e, injective %s, %.3f s", worst, injective ? "yes" : "no",
              elapsed)};
}

// 2. Analytic loss gradient against central differences, matching held fixed.
Outcome loss_gradient() {
  std::mt19937_64 rng(102);
  const cac::LossWeights w;
  double worst = 0.0;
  size_t entries = 0;
  for (int t = 0; t < 50; ++t) {
    const auto p = instances::random_loss(rng);
    std::vector<double> grad(p.values.size(), 0.0);
    const auto b = cac::total_loss({p.values}, p.gt, p.exemplars, w, grad);
    const auto numeric = oracle::numeric_gradient(
        [&](const std::vector<double>& x) { return cac::total_loss({x}, p.gt, p.exemplars, w, {}, &b.match).total; },
        p.values, 1e-6);
    for (size_t i = 0; i < grad.size(); ++i) {
      const double scale = std::max({std::abs(grad[i]), std::abs(numeric[i]), 1e-8});
      worst = std::max(worst, std::abs(grad[i] - numeric[i]) / scale);
      ++entries;
    }
  }
  return {worst <= 1e-4, fmt("50 instances, %zu entries, worst relative error %.2e", entries, worst)};
}

// 3. Hand-valued loss terms.
Outcome hand_losses() {
  const double ce = cac::classification_loss(std::vector<double>{0.5, 0.5}, {1, 0}, 0.5);
  const double loc = cac::location_loss(cac::MatchResult{{0}, 0}, {{0, 0}}, {std::vector<double>{3, 4, 0.5, 1, 1}});
  const double size = cac::size_loss({{0, 0}}, {std::vector<double>{0, 0, 0.5, 30, 20}}, {{0, 0, 32, 16}});
  const double e1 = std::abs(ce - 0.75 * std::log(2.0)), e2 = std::abs(loc - 25.0), e3 = std::abs(size - 6.0);
  return {std::max({e1, e2, e3}) <= 1e-9,
          fmt("classification %.12f (err %.1e), location %.12f (err %.1e), size %.12f (err %.1e)", ce, e1, loc, e2, size,
              e3)};
}

// 4. Softmax normalisation, enhancer equivariance, correlator invariance.
Outcome attention_invariants() {
  const cac::ModelConfig cfg;
  const int dim = cfg.token_dim();
  cac::Rng init(104);
  cac::ExemplarEnhancer<float> enhancer(dim, cfg.enhancer, init);
  cac::SpatialCorrelator<float> correlator(dim, dim, cfg.correlation, init);
  std::mt19937_64 rng(204);
  double softmax_err = 0.0, equiv_err = 0.0, inv_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int nb = 1 + t % 3, n = nb * 4;
    const auto tokens = oracle::random_tensor<float>(n, dim, rng);
    const auto perm = shuffled(n, rng);

    const auto a = oracle::permute_rows(enhancer(tokens, false, init), perm);
    const auto b = enhancer(oracle::permute_rows(tokens, perm), false, init);
    equiv_err = std::max(equiv_err, oracle::max_abs_diff(a, b));

    cac::FeatureMap<float> level{oracle::random_tensor<float>(16 * 16, dim, rng), 16, 16};
    const auto query = cac::tokenize_query(level, cfg.position_embedding);
    std::vector<cac::Tensor<float>> weights;
    const auto c = correlator(query, tokens, false, init, &weights);
    const auto d = correlator(query, oracle::permute_rows(tokens, perm), false, init);
    inv_err = std::max(inv_err, oracle::max_abs_diff(c.data, d.data));

    const auto q = oracle::random_tensor<float>(32, dim / cfg.enhancer.heads, rng, 3.0);
    const auto k = oracle::random_tensor<float>(n, dim / cfg.enhancer.heads, rng, 3.0);
    cac::Tensor<float> direct;
    cac::attention(q, k, oracle::random_tensor<float>(n, 8, rng), &direct);
    weights.push_back(direct);
    for (const auto& w : weights)
      for (int r = 0; r < w.rows(); ++r) {
        double s = 0.0;
        for (int col = 0; col < w.cols(); ++col) s += w(r, col);
        softmax_err = std::max(softmax_err, std::abs(s - 1.0));
      }
  }
  return {softmax_err <= 1e-6 && equiv_err <= 1e-5 && inv_err <= 1e-5,
          fmt("50 trials each at width %d: max |row sum - 1| %.2e, enhancer equivariance %.2e, correlator invariance "
              "%.2e",
              dim, softmax_err, equiv_err, inv_err)};
}

// 5. Channel gate is a distribution.
Outcome channel_gate() {
  const cac::ModelConfig cfg;
  cac::Rng init(105);
  cac::ChannelGate<float> gate(cfg.token_dim(), cfg.correlation, init);
  std::mt19937_64 rng(205);
  double min_value = 1.0, sum_err = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto g = gate(oracle::random_tensor<float>((1 + t % 3) * 4, cfg.token_dim(), rng, 1.0 + t % 5));
    double s = 0.0;
    for (float v : g.data()) {
      min_value = std::min(min_value, static_cast<double>(v));
      s += v;
    }
    sum_err = std::max(sum_err, std::abs(s - 1.0));
  }
  return {min_value >= 0.0 && sum_err <= 1e-6,
          fmt("100 exemplar sets: min weight %.3e, max |sum - 1| %.2e", min_value, sum_err)};
}

// 6. Equal-frequency bins.
Outcome equifrequent_bins() {
  std::mt19937_64 rng(106);
  std::set<double> unique;
  std::uniform_real_distribution<double> u(2.0, 400.0);
  while (unique.size() < 1000) unique.insert(u(rng));
  std::vector<double> sizes(unique.begin(), unique.end());
  std::shuffle(sizes.begin(), sizes.end(), rng);
  const auto bounds = cac::fit_intervals(sizes, 20);
  // Population by direct comparison with the cuts, independent of bin_index.
  std::vector<int> counts(bounds.size() + 1, 0);
  for (double v : sizes) {
    size_t k = 0;
    while (k < bounds.size() && v > bounds[k]) ++k;
    ++counts[k];
  }
  bool equal = bounds.size() == 19;
  int lo = 1000, hi = 0;
  for (size_t k = 0; k + 1 < counts.size(); ++k) {
    equal &= counts[k] == 50;
    lo = std::min(lo, counts[k]);
    hi = std::max(hi, counts[k]);
  }
  const auto primes = cac::fit_intervals({2, 3, 5, 7, 11, 13, 17, 19}, 4);
  const bool primes_ok = primes == std::vector<double>{3, 7, 13};
  return {equal && primes_ok, fmt("T=20 over 1000 sizes: non-final bins hold %d..%d, final %d; primes/T=4 -> [%g,%g,%g]",
                                  lo, hi, counts.back(), primes.size() > 0 ? primes[0] : -1.0,
                                  primes.size() > 1 ? primes[1] : -1.0, primes.size() > 2 ? primes[2] : -1.0)};
}

// 7. Full forward pass on a 384 x 512 synthetic image.
Outcome shape_contract() {
  cac::SyntheticConfig syn;
  syn.height = 384;
  syn.width = 512;
  syn.blob_size = {16, 40};
  syn.seed = 107;
  const auto sample = cac::generate_synthetic_sample(syn, 0);
  std::vector<double> w, h;
  for (int i = 0; i < 20; ++i) w.push_back(12 + 2 * i), h.push_back(10 + 2 * i);
  const cac::ModelConfig cfg;
  cac::CountingModel<float> model(cfg, w, h, 7);
  bool ok = true;
  std::ostringstream detail;
  for (int nb = 1; nb <= 3; ++nb) {
    cac::AnnotatedImage s = sample;
    s.exemplars.resize(nb);
    const auto out = model.forward(s, false);
    const int hq = 384 / out.grid.stride, wq = 512 / out.grid.stride;
    const int expected = cfg.heads.anchors_per_cell * hq * wq;
    bool ranges = true;
    for (int i = 0; i < out.proposals.rows(); ++i) {
      const float sc = out.proposals(i, cac::kScore);
      ranges &= sc > 0.0f && sc < 1.0f && out.proposals(i, cac::kWidth) > 0.0f && out.proposals(i, cac::kHeight) > 0.0f;
    }
    ok &= out.proposals.rows() == expected && ranges;
    detail << (nb > 1 ? "; " : "") << "N_B=" << nb << ": " << out.proposals.rows() << "/" << expected
           << " proposals, ranges " << (ranges ? "ok" : "violated");
  }
  return {ok, detail.str()};
}

// Desk-scale training protocol shared by the overfit and determinism checks.
cac::ExperimentConfig overfit_config() {
  cac::ExperimentConfig cfg;
  cfg.seed = 0;
  cfg.data.synthetic = cac::SyntheticConfig{};
  cfg.data.synthetic->seed = 7;
  cfg.data.synthetic_train = 10;
  cfg.data.target_height = 128;
  cfg.optim.learning_rate = 1e-3;
  cfg.optim.iterations = 1000;
  return cfg;
}

struct OverfitRun {
  std::vector<cac::TrainLogEntry> log;
  cac::MetricsReport report;
  double seconds = 0.0;
};

OverfitRun run_overfit() {
  cac::Trainer t(overfit_config());
  t.run();
  return {t.log(), cac::evaluate(t.model(), t.train_split()).report, t.seconds()};
}

// 8. Overfit ten synthetic images.
Outcome overfit(const OverfitRun& r) {
  const auto cfg = overfit_config();
  return {r.report.mae <= 1.0 && r.report.rmse <= 2.0 && r.report.nap >= 0.9 && cfg.optim.iterations <= 2000 &&
              r.seconds <= 900.0,
          fmt("%d iterations, train MAE %.3f, RMSE %.3f, nAP %.3f, %.1f s wall clock (single core)",
              cfg.optim.iterations, r.report.mae, r.report.rmse, r.report.nap, r.seconds)};
}

// 9. Ablation directions on a held-out split, median over three seeds.
Outcome ablation() {
  auto base = [](uint64_t seed) {
    cac::ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.data.synthetic = cac::SyntheticConfig{};
    cfg.data.synthetic->seed = 7;
    cfg.data.synthetic_train = 40;
    cfg.data.synthetic_test = 50;
    cfg.data.target_height = 128;
    cfg.optim.learning_rate = 1e-3;
    cfg.optim.iterations = 1500;
    return cfg;
  };
  auto held_out = [](const cac::ExperimentConfig& cfg) {
    cac::Trainer t(cfg);
    t.run();
    return cac::evaluate(t.model(), cac::prepare_split(cfg, cac::SplitName::kTest)).report;
  };
  std::vector<double> on_rmse, off_rmse, equi_mae, uni_mae;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = base(seed);
    const auto on = held_out(cfg);
    on_rmse.push_back(on.rmse);
    equi_mae.push_back(on.mae);
    cfg.size_supervision = false;
    off_rmse.push_back(held_out(cfg).rmse);
    cfg = base(seed);
    cfg.model.prompt_mode = cac::IntervalMode::kUniform;
    uni_mae.push_back(held_out(cfg).mae);
    std::cout << fmt("  seed %llu: size-on RMSE %.3f, size-off RMSE %.3f, equifrequent MAE %.3f, uniform MAE %.3f\n",
                     static_cast<unsigned long long>(seed), on_rmse.back(), off_rmse.back(), equi_mae.back(),
                     uni_mae.back())
              << std::flush;
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double a = median(on_rmse), b = median(off_rmse), c = median(equi_mae), d = median(uni_mae);
  return {a <= b && c <= d,
          fmt("median RMSE size-on %.3f vs off %.3f; median MAE equifrequent %.3f vs uniform %.3f", a, b, c, d)};
}

// 10. Metric hand cases and MAE <= RMSE.
Outcome metrics_suite() {
  bool ok = true;
  const auto zero = cac::mae_rmse({{0, 0}});
  const auto one = cac::mae_rmse({{1, 2}, {3, 2}});
  ok &= zero.mae == 0.0 && zero.rmse == 0.0 && one.mae == 1.0 && one.rmse == 1.0;
  const double hit = cac::nap({cac::LocalizationRecord{{{0, 4, 0.9}}, {{0, 0}}, {10}}});
  const double miss = cac::nap({cac::LocalizationRecord{{{0, 6, 0.9}}, {{0, 0}}, {10}}});
  // A duplicate ranked above the second true match: precision 1, 1/2, 2/3 over 2 points.
  const double dup =
      cac::nap({cac::LocalizationRecord{{{0, 1, 0.9}, {0, 2, 0.8}, {50, 50, 0.7}}, {{0, 0}, {50, 50}}, {10, 10}}});
  ok &= hit == 1.0 && miss == 0.0 && std::abs(dup - 5.0 / 6.0) <= 1e-15;
  std::mt19937_64 rng(110);
  std::uniform_int_distribution<int> count(0, 200), len(1, 40);
  int violations = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<cac::CountRecord> r(len(rng));
    for (auto& x : r) x = {count(rng), count(rng)};
    const auto e = cac::mae_rmse(r);
    violations += e.mae > e.rmse + 1e-12;
  }
  ok &= violations == 0;
  return {ok, fmt("(0,0) -> %g/%g, (1,1) -> %g/%g; nAP hit %g, miss %g, duplicate %.6f; %d/1000 sets with MAE > RMSE",
                  zero.mae, zero.rmse, one.mae, one.rmse, hit, miss, dup, violations)};
}

// 11. Two seeded runs produce identical loss logs.
Outcome determinism(const OverfitRun& first) {
  const auto second = run_overfit();
  size_t differing = 0;
  for (size_t i = 0; i < std::min(first.log.size(), second.log.size()); ++i) differing += !(first.log[i] == second.log[i]);
  const bool same = first.log.size() == second.log.size() && differing == 0;
  return {same, fmt("%zu vs %zu log entries, %zu differ", first.log.size(), second.log.size(), differing)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << o.detail
              << fmt(" (%.1f s)", seconds_since(t0)) << std::endl;
  };
  report(1, "matching oracle", matching_oracle);
  report(2, "loss gradient check", loss_gradient);
  report(3, "hand-valued losses", hand_losses);
  report(4, "attention invariants", attention_invariants);
  report(5, "channel gate distribution", channel_gate);
  report(6, "equifrequent binning", equifrequent_bins);
  report(7, "shape contract", shape_contract);
  OverfitRun first;
  report(8, "overfit experiment", [&] {
    first = run_overfit();
    return overfit(first);
  });
  report(9, "ablation directions", ablation);
  report(10, "metrics suite", metrics_suite);
  report(11, "determinism", [&] { return determinism(first); });
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : fmt("%d CRITERIA FAILED", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
