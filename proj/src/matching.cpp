#include "pmt/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pmt {

namespace {

void check_cost(const Mat<double>& cost) {
  if (cost.cols() > cost.rows())
    throw std::invalid_argument("hungarian_match: " + std::to_string(cost.cols()) +
                                " segments exceed " + std::to_string(cost.rows()) + " queries");
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost(i, j)))
        throw std::invalid_argument("hungarian_match: non-finite cost at (" + std::to_string(i) +
                                    ", " + std::to_string(j) + ")");
}

/// Shortest augmenting path with potentials; rows of `a` are the segments
/// (n), columns the queries (m), n <= m. Returns per-segment query choice.
std::vector<int> solve_transposed(const Mat<double>& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_of(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) row_of[p[j] - 1] = j - 1;
  return row_of;
}

double solve_cost(const Mat<double>& cost_qg, const std::vector<char>& query_used,
                  Index first_seg) {
  const Index g = cost_qg.cols() - first_seg;
  if (g == 0) return 0.0;
  std::vector<Index> free_q;
  for (Index i = 0; i < cost_qg.rows(); ++i)
    if (!query_used[static_cast<std::size_t>(i)]) free_q.push_back(i);
  Mat<double> sub(g, static_cast<Index>(free_q.size()));
  for (Index j = 0; j < g; ++j)
    for (std::size_t k = 0; k < free_q.size(); ++k)
      sub(j, static_cast<Index>(k)) = cost_qg(free_q[k], first_seg + j);
  auto pick = solve_transposed(sub);
  double total = 0.0;
  for (Index j = 0; j < g; ++j) total += sub(j, pick[static_cast<std::size_t>(j)]);
  return total;
}

}  // namespace

double assignment_cost(const Mat<double>& cost) {
  check_cost(cost);
  std::vector<char> none(static_cast<std::size_t>(cost.rows()), 0);
  return solve_cost(cost, none, 0);
}

MatchResult hungarian_match(const Mat<double>& cost) {
  check_cost(cost);
  const Index q = cost.rows(), g = cost.cols();
  MatchResult res;
  if (g == 0) return res;

  // Fix segments in order; for each, keep the lowest query index that still
  // admits an optimal completion of the remaining segments.
  std::vector<char> used(static_cast<std::size_t>(q), 0);
  for (Index j = 0; j < g; ++j) {
    double target = solve_cost(cost, used, j);
    Index best = -1;
    double best_gap = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < q; ++i) {
      if (used[static_cast<std::size_t>(i)]) continue;
      used[static_cast<std::size_t>(i)] = 1;
      double rest = solve_cost(cost, used, j + 1);
      used[static_cast<std::size_t>(i)] = 0;
      double gap = std::abs(cost(i, j) + rest - target);
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    used[static_cast<std::size_t>(best)] = 1;
    res.pairs.emplace_back(best, j);
    res.total_cost += cost(best, j);
  }
  return res;
}

MatchResult video_match(const Mat<double>& cost, const std::vector<std::int64_t>& gt_track_ids,
                        std::map<std::int64_t, Index>& persistent) {
  check_cost(cost);
  const Index q = cost.rows(), g = cost.cols();
  if (static_cast<Index>(gt_track_ids.size()) != g)
    throw std::invalid_argument("video_match: track id count does not match cost columns");

  MatchResult res;
  std::vector<char> query_taken(static_cast<std::size_t>(q), 0);
  for (const auto& [tid, qi] : persistent) {
    (void)tid;
    if (qi >= 0 && qi < q) query_taken[static_cast<std::size_t>(qi)] = 1;
  }

  std::vector<Index> new_segments;
  for (Index j = 0; j < g; ++j) {
    auto it = persistent.find(gt_track_ids[static_cast<std::size_t>(j)]);
    if (it != persistent.end()) {
      res.pairs.emplace_back(it->second, j);
      res.total_cost += cost(it->second, j);
    } else {
      new_segments.push_back(j);
    }
  }

  if (!new_segments.empty()) {
    std::vector<Index> free_q;
    for (Index i = 0; i < q; ++i)
      if (!query_taken[static_cast<std::size_t>(i)]) free_q.push_back(i);
    if (static_cast<Index>(free_q.size()) < static_cast<Index>(new_segments.size()))
      throw std::invalid_argument("video_match: no free query for a new object (" +
                                  std::to_string(new_segments.size()) + " new, " +
                                  std::to_string(free_q.size()) + " free)");
    Mat<double> sub(static_cast<Index>(free_q.size()), static_cast<Index>(new_segments.size()));
    for (std::size_t i = 0; i < free_q.size(); ++i)
      for (std::size_t j = 0; j < new_segments.size(); ++j)
        sub(static_cast<Index>(i), static_cast<Index>(j)) =
            cost(free_q[i], new_segments[j]);
    MatchResult inner = hungarian_match(sub);
    for (const auto& [qi, ji] : inner.pairs) {
      Index real_q = free_q[static_cast<std::size_t>(qi)];
      Index real_j = new_segments[static_cast<std::size_t>(ji)];
      res.pairs.emplace_back(real_q, real_j);
      res.total_cost += cost(real_q, real_j);
      persistent[gt_track_ids[static_cast<std::size_t>(real_j)]] = real_q;
    }
  }

  std::sort(res.pairs.begin(), res.pairs.end(),
            [](const auto& a, const auto& b) { return a.second < b.second; });
  return res;
}

}  // namespace pmt
