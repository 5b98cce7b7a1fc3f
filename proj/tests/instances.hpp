#pragma once

// Random problem generators shared by the unit and acceptance suites.

#include <random>
#include <vector>

#include "cac/sal_loss.hpp"

namespace instances {

struct Matching {
  std::vector<cac::Point2> gt;
  cac::ProposalSet proposals;
};

// M ground-truth points and N >= M proposals on a 64 x 64 canvas.
inline Matching random_matching(std::mt19937_64& rng, int max_m = 6, int max_n = 8) {
  std::uniform_int_distribution<int> nd(1, max_n);
  const int n = nd(rng);
  const int m = std::uniform_int_distribution<int>(0, std::min(n, max_m))(rng);
  std::uniform_real_distribution<double> pos(0, 64), score(0, 1);
  Matching out;
  for (int i = 0; i < m; ++i) out.gt.push_back({pos(rng), pos(rng)});
  for (int j = 0; j < n; ++j) out.proposals.push_back({pos(rng), pos(rng), score(rng), 8, 8, j});
  return out;
}

struct LossProblem {
  std::vector<double> values;  // N x 5
  std::vector<cac::Point2> gt;
  std::vector<cac::ExemplarBox> exemplars;
};

// A small loss instance whose terms are smooth at the evaluation point:
// scores inside (0.05, 0.95) and predicted sizes at least 0.5 px away from
// the exemplar sizes, so central differences stay on one side of every kink.
inline LossProblem random_loss(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nd(2, 7);
  const int n = nd(rng);
  const int m = std::uniform_int_distribution<int>(1, std::min(n, 4))(rng);
  std::uniform_real_distribution<double> pos(0, 48), score(0.05, 0.95), side(6, 20), sign(0, 1), gap(0.5, 4);
  LossProblem p;
  for (int i = 0; i < m; ++i) p.gt.push_back({pos(rng), pos(rng)});
  const int boxes = std::uniform_int_distribution<int>(1, std::min(m, 3))(rng);
  for (int k = 0; k < boxes; ++k) {
    const double w = side(rng), h = side(rng);
    p.exemplars.push_back({p.gt[k].x - w / 2, p.gt[k].y - h / 2, p.gt[k].x + w / 2, p.gt[k].y + h / 2});
  }
  for (int j = 0; j < n; ++j) {
    const auto& box = p.exemplars[j % boxes];
    auto away = [&](double target) { return target + (sign(rng) < 0.5 ? -1 : 1) * gap(rng); };
    p.values.insert(p.values.end(), {pos(rng), pos(rng), score(rng), away(box.width()), away(box.height())});
  }
  return p;
}

}  // namespace instances
