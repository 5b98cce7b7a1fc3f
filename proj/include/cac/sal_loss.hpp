#pragma once

// Scale-aware localization loss: one-to-one Hungarian matching of ground
// truth points to proposals, then classification, location and exemplar-size
// terms. Gradients are analytic, with the matching held fixed.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cac/datamodel.hpp"
#include "cac/saml.hpp"

namespace cac {

class MatchingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double gamma = 0.5;
  double lambda_loc = 2e-4;
  double lambda_size = 5e-5;
  double eta = 5e-2;
  double log_clamp = 1e-7;
};

inline nlohmann::json to_json(const LossWeights& w) {
  return {{"gamma", w.gamma}, {"lambda_loc", w.lambda_loc}, {"lambda_size", w.lambda_size}, {"eta", w.eta},
          {"log_clamp", w.log_clamp}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.gamma = j.value("gamma", w.gamma);
  w.lambda_loc = j.value("lambda_loc", w.lambda_loc);
  w.lambda_size = j.value("lambda_size", w.lambda_size);
  w.eta = j.value("eta", w.eta);
  w.log_clamp = j.value("log_clamp", w.log_clamp);
  return w;
}

// D(G, P) = -score + eta * |G - P|
inline double match_cost(const Point2& gt, const Proposal& p, double eta) {
  return -p.score + eta * std::hypot(gt.x - p.x, gt.y - p.y);
}

struct MatchResult {
  std::vector<int> assignment;  // ground-truth index -> proposal index
  double cost = 0.0;
};

// Minimum-cost assignment of every row to a distinct column of a rows x cols
// cost matrix (rows <= cols), by shortest augmenting paths with potentials.
// Among optimal assignments the lexicographically smallest one is returned
// (row 0 gets the lowest feasible column, then row 1, and so on).
inline std::vector<int> solve_assignment(const std::vector<double>& cost, int rows, int cols) {
  if (rows > cols)
    throw MatchingError("assignment infeasible: " + std::to_string(rows) + " ground-truth points but only " +
                        std::to_string(cols) + " proposals");
  if (rows == 0) return {};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-indexed; row 0 / column 0 are sentinels.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> owner(cols + 1, 0), way(cols + 1, 0);
  std::vector<double> minv(cols + 1);
  std::vector<char> used(cols + 1);
  for (int i = 1; i <= rows; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = owner[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (owner[j] != 0) assignment[owner[j] - 1] = j - 1;

  // Tie-break. With the optimal potentials, an assignment is optimal iff it
  // uses only tight edges and covers every column with v < 0. Unmatched
  // columns behave as if held by zero-cost dummy rows, which are tight to
  // every column with v = 0. Moving row i to column j is then feasible iff
  // an alternating cycle through (i, j) returns to i's current column.
  double scale = 1.0;
  for (double c : cost) scale = std::max(scale, std::abs(c));
  const double tol = 1e-9 * scale;
  auto tight = [&](int r, int c) { return cost[static_cast<size_t>(r) * cols + c] - u[r + 1] - v[c + 1] <= tol; };
  auto slack_free = [&](int c) { return v[c + 1] >= -tol; };
  std::vector<int> holder(cols, -1);  // -1: dummy
  for (int r = 0; r < rows; ++r) holder[assignment[r]] = r;
  std::vector<char> fixed_col(cols, 0);
  std::vector<int> from_row(rows), from_col(cols);
  for (int i = 0; i < rows; ++i) {
    const int old = assignment[i];
    for (int j = 0; j < old; ++j) {
      if (fixed_col[j] || !tight(i, j)) continue;
      // Search from the holder of j for a path that ends by taking `old`.
      // from_row[r]: the column r gives up; from_col[c]: the row taking c.
      // Dummy rows share one node, entered from column dummy_from.
      std::vector<char> seen_row(rows, 0), seen_col(cols, 0);
      bool dummy_seen = false, found = false;
      int dummy_from = -1;
      std::vector<int> queue;  // row index, or -1 for the dummy node
      seen_row[i] = 1;
      auto enter = [&](int c, int taker) {
        seen_col[c] = 1;
        from_col[c] = taker;
        const int h = holder[c];
        if (h < 0) {
          if (!dummy_seen) {
            dummy_seen = true;
            dummy_from = c;
            queue.push_back(-1);
          }
        } else if (!seen_row[h]) {
          seen_row[h] = 1;
          from_row[h] = c;
          queue.push_back(h);
        }
      };
      enter(j, i);
      for (size_t q = 0; q < queue.size() && !found; ++q) {
        const int r = queue[q];
        for (int c = 0; c < cols && !found; ++c) {
          if (fixed_col[c] || seen_col[c]) continue;
          if (r >= 0 ? (c == assignment[r] || !tight(r, c)) : (!slack_free(c) || holder[c] < 0)) continue;
          if (c == old) {
            from_col[c] = r;
            found = true;
          } else {
            enter(c, r);
          }
        }
      }
      if (!found) continue;
      // Walk back from `old`, reassigning real rows along the cycle.
      for (int c = old; from_col[c] != i;) {
        const int r = from_col[c];
        if (r >= 0) {
          const int prev = from_row[r];
          assignment[r] = c;
          holder[c] = r;
          c = prev;
        } else {
          holder[c] = -1;
          c = dummy_from;
        }
      }
      assignment[i] = j;
      holder[j] = i;
      break;
    }
    fixed_col[assignment[i]] = 1;
  }
  return assignment;
}

inline std::vector<double> match_cost_matrix(const std::vector<Point2>& gt, const ProposalSet& proposals, double eta) {
  const size_t n = proposals.size();
  std::vector<double> cost(gt.size() * n);
  for (size_t i = 0; i < gt.size(); ++i)
    for (size_t j = 0; j < n; ++j) cost[i * n + j] = match_cost(gt[i], proposals[j], eta);
  return cost;
}

inline MatchResult hungarian_match(const std::vector<Point2>& gt, const ProposalSet& proposals, double eta) {
  if (eta < 0) throw MatchingError("eta must be nonnegative");
  const int m = static_cast<int>(gt.size()), n = static_cast<int>(proposals.size());
  const auto cost = match_cost_matrix(gt, proposals, eta);
  MatchResult r;
  r.assignment = solve_assignment(cost, m, n);
  for (int i = 0; i < m; ++i) r.cost += cost[static_cast<size_t>(i) * n + r.assignment[i]];
  return r;
}

// Exemplar k stands for the ground-truth point nearest its box center within
// max(w, h) / 2; the proposal matched to that point carries its size term.
struct ExemplarAssociation {
  int gt = -1;
  int proposal = -1;
  bool present() const { return proposal >= 0; }
};

inline std::vector<ExemplarAssociation> associate_exemplars(const std::vector<ExemplarBox>& exemplars,
                                                            const std::vector<Point2>& gt, const MatchResult& match) {
  std::vector<ExemplarAssociation> out;
  for (const auto& box : exemplars) {
    const Point2 c = box.center();
    const double radius = std::max(box.width(), box.height()) / 2.0;
    ExemplarAssociation a;
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < gt.size(); ++i) {
      const double d = std::hypot(gt[i].x - c.x, gt[i].y - c.y);
      if (d <= radius && d < best) {
        best = d;
        a.gt = static_cast<int>(i);
      }
    }
    if (a.gt >= 0 && a.gt < static_cast<int>(match.assignment.size())) a.proposal = match.assignment[a.gt];
    out.push_back(a);
  }
  return out;
}

// Dense N x 5 proposal values and a matching gradient buffer.
struct ProposalView {
  std::span<const double> values;
  int rows() const { return static_cast<int>(values.size() / 5); }
  double at(int i, int c) const { return values[static_cast<size_t>(i) * 5 + c]; }
};

// -(1/N) sum[ m_j log s_j + gamma (1 - m_j) log(1 - s_j) ], scores clamped to [eps, 1 - eps].
inline double classification_loss(std::span<const double> scores, const std::vector<char>& matched, double gamma,
                                  double eps = 1e-7, std::span<double> grad = {}) {
  const double n = static_cast<double>(scores.size());
  if (scores.empty()) return 0.0;
  double sum = 0.0;
  for (size_t j = 0; j < scores.size(); ++j) {
    const double s = std::clamp(scores[j], eps, 1.0 - eps);
    const bool clamped = scores[j] < eps || scores[j] > 1.0 - eps;
    if (matched[j]) {
      sum += std::log(s);
      if (!grad.empty() && !clamped) grad[j] += -1.0 / (n * s);
    } else {
      sum += gamma * std::log(1.0 - s);
      if (!grad.empty() && !clamped) grad[j] += gamma / (n * (1.0 - s));
    }
  }
  return -sum / n;
}

// (1/M) sum over matched pairs of (dx^2 + dy^2). grad is N x 5.
inline double location_loss(const MatchResult& match, const std::vector<Point2>& gt, const ProposalView& p,
                            std::span<double> grad = {}) {
  const size_t m = match.assignment.size();
  if (m == 0) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const int j = match.assignment[i];
    const double dx = p.at(j, kX) - gt[i].x, dy = p.at(j, kY) - gt[i].y;
    sum += dx * dx + dy * dy;
    if (!grad.empty()) {
      grad[static_cast<size_t>(j) * 5 + kX] += 2.0 * dx / m;
      grad[static_cast<size_t>(j) * 5 + kY] += 2.0 * dy / m;
    }
  }
  return sum / m;
}

// Mean L1 width/height error over present associations; zero if none.
inline double size_loss(const std::vector<ExemplarAssociation>& assoc, const ProposalView& p,
                        const std::vector<ExemplarBox>& exemplars, std::span<double> grad = {}) {
  int present = 0;
  for (const auto& a : assoc) present += a.present();
  if (present == 0) return 0.0;
  auto sign = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  double sum = 0.0;
  for (size_t k = 0; k < assoc.size(); ++k) {
    if (!assoc[k].present()) continue;
    const int j = assoc[k].proposal;
    const double dw = p.at(j, kWidth) - exemplars[k].width(), dh = p.at(j, kHeight) - exemplars[k].height();
    sum += std::abs(dw) + std::abs(dh);
    if (!grad.empty()) {
      grad[static_cast<size_t>(j) * 5 + kWidth] += sign(dw) / present;
      grad[static_cast<size_t>(j) * 5 + kHeight] += sign(dh) / present;
    }
  }
  return sum / present;
}

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double loc = 0.0;
  double size = 0.0;
  double lambda_loc = 0.0;
  double lambda_size = 0.0;
  double gamma = 0.0;
  MatchResult match;
  int size_terms = 0;  // exemplars that found an associated proposal

  bool finite() const { return std::isfinite(total) && std::isfinite(cls) && std::isfinite(loc) && std::isfinite(size); }
};

inline LossBreakdown combine_losses(double cls, double loc, double size, const LossWeights& w) {
  LossBreakdown b;
  b.cls = cls;
  b.loc = loc;
  b.size = size;
  b.gamma = w.gamma;
  b.lambda_loc = w.lambda_loc;
  b.lambda_size = w.lambda_size;
  b.total = cls + w.lambda_loc * loc + w.lambda_size * size;
  return b;
}

// Matches, evaluates all terms and, when grad is non-empty, accumulates
// d(total)/d(values) into the N x 5 buffer.
inline LossBreakdown total_loss(const ProposalView& p, const std::vector<Point2>& gt,
                                const std::vector<ExemplarBox>& exemplars, const LossWeights& w,
                                std::span<double> grad = {}, const MatchResult* fixed_match = nullptr) {
  const int n = p.rows();
  ProposalSet proposals(n);
  for (int i = 0; i < n; ++i)
    proposals[i] = {p.at(i, kX), p.at(i, kY), p.at(i, kScore), p.at(i, kWidth), p.at(i, kHeight), i};
  const MatchResult match = fixed_match ? *fixed_match : hungarian_match(gt, proposals, w.eta);

  std::vector<char> matched(n, 0);
  for (int j : match.assignment) matched[j] = 1;
  std::vector<double> scores(n), score_grad(grad.empty() ? 0 : n, 0.0);
  for (int i = 0; i < n; ++i) scores[i] = p.at(i, kScore);
  const double cls = classification_loss(scores, matched, w.gamma, w.log_clamp, score_grad);

  std::vector<double> loc_grad(grad.empty() ? 0 : grad.size(), 0.0), size_grad(grad.empty() ? 0 : grad.size(), 0.0);
  const double loc = location_loss(match, gt, p, loc_grad);
  // With the size weight at zero the term is switched off rather than
  // computed and discarded, so logs report it as exactly 0.
  const auto assoc = associate_exemplars(exemplars, gt, match);
  const double size = w.lambda_size == 0.0 ? 0.0 : size_loss(assoc, p, exemplars, size_grad);

  LossBreakdown b = combine_losses(cls, loc, size, w);
  b.match = match;
  for (const auto& a : assoc) b.size_terms += a.present();
  if (!grad.empty()) {
    for (int i = 0; i < n; ++i) grad[static_cast<size_t>(i) * 5 + kScore] += score_grad[i];
    for (size_t k = 0; k < grad.size(); ++k) grad[k] += w.lambda_loc * loc_grad[k] + w.lambda_size * size_grad[k];
  }
  return b;
}

// Autograd bridge: scalar loss node over the decoded N x 5 proposals.
template <class T>
Tensor<T> sal_loss(const Tensor<T>& decoded, const std::vector<Point2>& gt, const std::vector<ExemplarBox>& exemplars,
                   const LossWeights& w, LossBreakdown* breakdown = nullptr) {
  if (decoded.cols() != 5) throw ConfigError("sal_loss: expected N x 5 proposals");
  std::vector<double> values(decoded.data().begin(), decoded.data().end());
  std::vector<double> grad(values.size(), 0.0);
  const LossBreakdown b = total_loss(ProposalView{values}, gt, exemplars, w, grad);
  if (breakdown) *breakdown = b;
  auto out = detail::make_output<T>(1, 1, {&decoded});
  out->value[0] = static_cast<T>(b.total);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    out->backward = [o, decoded, grad = std::move(grad)]() {
      T* g = decoded.node()->grad_data();
      for (size_t i = 0; i < grad.size(); ++i) g[i] += static_cast<T>(grad[i]) * o->grad[0];
    };
  }
  return Tensor<T>(out);
}

}  // namespace cac
