#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <vector>

#include "sqparts/core.hpp"

namespace sqparts {

// Symmetric squared-distance chamfer: 0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2).
inline double chamfer_distance(const PointMatrix& a, const PointMatrix& b) {
  require(a.rows() > 0 && b.rows() > 0, "chamfer needs non-empty sets");
  const long na = a.rows(), nb = b.rows();
  double ab = 0.0, ba = 0.0;
  std::vector<double> min_b(nb, std::numeric_limits<double>::infinity());
  for (long i = 0; i < na; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (long j = 0; j < nb; ++j) {
      const double d2 = (a.row(i) - b.row(j)).squaredNorm();
      best = std::min(best, d2);
      min_b[j] = std::min(min_b[j], d2);
    }
    ab += best;
  }
  for (long j = 0; j < nb; ++j) ba += min_b[j];
  return 0.5 * (ab / na + ba / nb);
}

namespace detail {

// Minimum-cost assignment via shortest augmenting paths with potentials,
// O(rows^2 * cols), rows <= cols. Returns col index per row.
inline double hungarian(const MatrixXd& cost, std::vector<int>& col_of_row) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  require(n >= 1 && n <= m, "assignment needs rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  col_of_row.assign(n, -1);
  double total = 0.0;
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    col_of_row[p[j] - 1] = j - 1;
    total += cost(p[j] - 1, j - 1);
  }
  return total;
}

inline MatrixXd pairwise_distances(const PointMatrix& a, const PointMatrix& b) {
  MatrixXd c(a.rows(), b.rows());
  for (long i = 0; i < a.rows(); ++i)
    for (long j = 0; j < b.rows(); ++j) c(i, j) = (a.row(i) - b.row(j)).norm();
  return c;
}

}  // namespace detail

// Exact earth mover's distance between equal-size sets with uniform weights
// and Euclidean ground metric: mean matched distance under the optimal
// permutation. Cubic in n; keep n modest.
inline double emd_exact(const PointMatrix& a, const PointMatrix& b) {
  require(a.rows() == b.rows() && a.rows() > 0, "emd needs equal non-empty sets");
  const MatrixXd cost = detail::pairwise_distances(a, b);
  std::vector<int> assign;
  const double total = detail::hungarian(cost, assign);
  return total / static_cast<double>(a.rows());
}

// Entropic approximation: log-domain Sinkhorn with an epsilon ladder from
// 0.2 down to 0.005 of the median pairwise distance, then the transport plan
// is rounded to a permutation (greedy by plan mass, completed by cheapest
// remaining cost) and polished with pair-swap passes. Upper-bounds the exact
// value.
inline double emd_approx(const PointMatrix& a, const PointMatrix& b) {
  require(a.rows() == b.rows() && a.rows() > 0, "emd needs equal non-empty sets");
  const int n = static_cast<int>(a.rows());
  const MatrixXd cost = detail::pairwise_distances(a, b);
  std::vector<double> flat(cost.data(), cost.data() + cost.size());
  std::nth_element(flat.begin(), flat.begin() + flat.size() / 2, flat.end());
  const double med = std::max(flat[flat.size() / 2], 1e-12);
  VectorXd f = VectorXd::Zero(n), g = VectorXd::Zero(n);
  const double log_w = -std::log(static_cast<double>(n));
  for (double eps = 0.2 * med; eps >= 0.005 * med * 0.999; eps *= 0.5) {
    for (int it = 0; it < 60; ++it) {
      for (int i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, (g[j] - cost(i, j)) / eps);
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += std::exp((g[j] - cost(i, j)) / eps - mx);
        f[i] = -eps * (mx + std::log(s) + log_w);
      }
      for (int j = 0; j < n; ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) mx = std::max(mx, (f[i] - cost(i, j)) / eps);
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += std::exp((f[i] - cost(i, j)) / eps - mx);
        g[j] = -eps * (mx + std::log(s) + log_w);
      }
    }
  }
  const double eps_final = 0.005 * med;
  // greedy rounding by descending plan log-mass
  struct Cell {
    double score;
    int i, j;
  };
  std::vector<Cell> cells;
  cells.reserve(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cells.push_back({(f[i] + g[j] - cost(i, j)) / eps_final, i, j});
  std::sort(cells.begin(), cells.end(), [](const Cell& x, const Cell& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.i != y.i ? x.i < y.i : x.j < y.j;
  });
  std::vector<int> match(n, -1);
  std::vector<char> col_used(n, 0);
  int placed = 0;
  for (const Cell& c : cells) {
    if (placed == n) break;
    if (match[c.i] >= 0 || col_used[c.j]) continue;
    match[c.i] = c.j;
    col_used[c.j] = 1;
    ++placed;
  }
  for (int i = 0; i < n && placed < n; ++i) {
    if (match[i] >= 0) continue;
    int best = -1;
    for (int j = 0; j < n; ++j)
      if (!col_used[j] && (best < 0 || cost(i, j) < cost(i, best))) best = j;
    match[i] = best;
    col_used[best] = 1;
    ++placed;
  }
  // pair-swap polish until stable
  for (int pass = 0; pass < 64; ++pass) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const double cur = cost(i, match[i]) + cost(j, match[j]);
        const double alt = cost(i, match[j]) + cost(j, match[i]);
        if (alt < cur - 1e-15) {
          std::swap(match[i], match[j]);
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += cost(i, match[i]);
  return total / n;
}

// Exact up to 512 points, entropic beyond.
inline double emd(const PointMatrix& a, const PointMatrix& b) {
  require(a.rows() == b.rows() && a.rows() > 0, "emd needs equal non-empty sets");
  return a.rows() <= 512 ? emd_exact(a, b) : emd_approx(a, b);
}

namespace detail {

struct Contingency {
  std::vector<int> labels_a, labels_b;    // distinct values in first-seen order
  MatrixXd counts;                        // |A| x |B|
  std::vector<double> count_a, count_b;
  int n = 0;
};

inline Contingency contingency(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size() && !a.empty(), "label vectors must match and be non-empty");
  Contingency c;
  std::map<int, int> ia, ib;
  for (int v : a)
    if (ia.emplace(v, static_cast<int>(ia.size())).second) c.labels_a.push_back(v);
  for (int v : b)
    if (ib.emplace(v, static_cast<int>(ib.size())).second) c.labels_b.push_back(v);
  c.counts = MatrixXd::Zero(static_cast<int>(ia.size()), static_cast<int>(ib.size()));
  for (size_t k = 0; k < a.size(); ++k) c.counts(ia[a[k]], ib[b[k]]) += 1.0;
  c.count_a.resize(ia.size());
  c.count_b.resize(ib.size());
  for (int i = 0; i < c.counts.rows(); ++i) c.count_a[i] = c.counts.row(i).sum();
  for (int j = 0; j < c.counts.cols(); ++j) c.count_b[j] = c.counts.col(j).sum();
  c.n = static_cast<int>(a.size());
  return c;
}

}  // namespace detail

// Mean IoU over ground-truth segments under the IoU-maximizing one-to-one
// matching; ground-truth segments left unmatched score zero.
inline double mean_iou(const std::vector<int>& truth, const std::vector<int>& pred) {
  const detail::Contingency c = detail::contingency(truth, pred);
  const int ra = static_cast<int>(c.labels_a.size());
  const int rb = static_cast<int>(c.labels_b.size());
  MatrixXd iou = MatrixXd::Zero(ra, rb);
  for (int i = 0; i < ra; ++i)
    for (int j = 0; j < rb; ++j) {
      const double inter = c.counts(i, j);
      const double uni = c.count_a[i] + c.count_b[j] - inter;
      iou(i, j) = uni > 0 ? inter / uni : 0.0;
    }
  const int side = std::max(ra, rb);
  MatrixXd cost = MatrixXd::Zero(side, side);
  cost.topLeftCorner(ra, rb) = -iou;
  std::vector<int> assign;
  detail::hungarian(cost, assign);
  double total = 0.0;
  for (int i = 0; i < ra; ++i)
    if (assign[i] < rb) total += iou(i, assign[i]);
  return total / ra;
}

// Mutual information normalized by the mean of the two label entropies
// (natural log). Two trivial single-cluster partitions are identical: 1.
inline double normalized_mutual_info(const std::vector<int>& a, const std::vector<int>& b) {
  const detail::Contingency c = detail::contingency(a, b);
  const double n = static_cast<double>(c.n);
  double mi = 0.0, ha = 0.0, hb = 0.0;
  for (int i = 0; i < c.counts.rows(); ++i)
    for (int j = 0; j < c.counts.cols(); ++j) {
      const double pij = c.counts(i, j) / n;
      if (pij <= 0) continue;
      mi += pij * std::log(pij * n * n / (c.count_a[i] * c.count_b[j]));
    }
  for (double v : c.count_a) ha -= (v / n) * std::log(v / n);
  for (double v : c.count_b) hb -= (v / n) * std::log(v / n);
  const double denom = 0.5 * (ha + hb);
  if (denom <= 0) return 1.0;
  return mi / denom;
}

// Davies-Bouldin: scatter is the mean distance to the cluster centroid;
// separation floor 1e-12 guards coincident centroids.
inline double davies_bouldin(const PointMatrix& points, const std::vector<int>& labels) {
  require(static_cast<size_t>(points.rows()) == labels.size(), "points/labels size mismatch");
  std::map<int, std::vector<long>> groups;
  for (long i = 0; i < points.rows(); ++i) groups[labels[i]].push_back(i);
  const int k = static_cast<int>(groups.size());
  require(k >= 2, "davies-bouldin needs at least two clusters");
  MatrixXd centroids(k, 3);
  std::vector<double> sigma(k, 0.0);
  int g = 0;
  for (const auto& [label, idx] : groups) {
    Eigen::RowVector3d c = Eigen::RowVector3d::Zero();
    for (long i : idx) c += points.row(i);
    c /= static_cast<double>(idx.size());
    centroids.row(g) = c;
    for (long i : idx) sigma[g] += (points.row(i) - c).norm();
    sigma[g] /= static_cast<double>(idx.size());
    ++g;
  }
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    double worst = 0.0;
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      const double sep = std::max((centroids.row(i) - centroids.row(j)).norm(), 1e-12);
      worst = std::max(worst, (sigma[i] + sigma[j]) / sep);
    }
    sum += worst;
  }
  return sum / k;
}

}  // namespace sqparts
