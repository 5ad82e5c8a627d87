#pragma once

#include <vector>

#include "sqparts/core.hpp"

namespace sqparts {

// Area-weighted uniform sampling of an axis-aligned box surface.
inline PointMatrix sample_box_surface(const Eigen::Vector3d& half, const Eigen::Vector3d& center,
                                      int count, Rng& rng) {
  require(count >= 1, "sample count must be positive");
  require(half.minCoeff() > 0, "box half extents must be positive");
  // face order: +x, -x, +y, -y, +z, -z
  const double ax = half.y() * half.z(), ay = half.x() * half.z(), az = half.x() * half.y();
  const std::array<double, 6> areas = {ax, ax, ay, ay, az, az};
  std::array<double, 6> cum{};
  double total = 0.0;
  for (int f = 0; f < 6; ++f) {
    total += areas[f];
    cum[f] = total;
  }
  PointMatrix out(count, 3);
  for (int i = 0; i < count; ++i) {
    const double u = rng.uniform() * total;
    int f = 0;
    while (f < 5 && u > cum[f]) ++f;
    const double s = rng.uniform() * 2.0 - 1.0;
    const double t = rng.uniform() * 2.0 - 1.0;
    Eigen::Vector3d p;
    switch (f) {
      case 0: p = {half.x(), s * half.y(), t * half.z()}; break;
      case 1: p = {-half.x(), s * half.y(), t * half.z()}; break;
      case 2: p = {s * half.x(), half.y(), t * half.z()}; break;
      case 3: p = {s * half.x(), -half.y(), t * half.z()}; break;
      case 4: p = {s * half.x(), t * half.y(), half.z()}; break;
      default: p = {s * half.x(), t * half.y(), -half.z()}; break;
    }
    out.row(i) = (p + center).transpose();
  }
  return out;
}

struct SyntheticShape {
  PointMatrix points;
  std::vector<int> gt_instance;
  std::vector<int> gt_semantic;
};

// Union of axis-aligned boxes sampled area-proportionally; each box is an
// instance, semantic class given per box.
inline SyntheticShape make_boxes(const std::vector<Eigen::Vector3d>& halves,
                                 const std::vector<Eigen::Vector3d>& centers,
                                 const std::vector<int>& semantic, int count,
                                 std::uint64_t seed) {
  require(halves.size() == centers.size() && halves.size() == semantic.size() && !halves.empty(),
          "box spec size mismatch");
  require(count >= static_cast<int>(halves.size()), "too few samples for the box count");
  Rng rng(seed);
  const int k = static_cast<int>(halves.size());
  std::vector<double> area(k);
  double total = 0.0;
  for (int b = 0; b < k; ++b) {
    const auto& h = halves[b];
    area[b] = 8.0 * (h.y() * h.z() + h.x() * h.z() + h.x() * h.y());
    total += area[b];
  }
  std::vector<int> counts(k, 0);
  int assigned = 0;
  for (int b = 0; b + 1 < k; ++b) {
    counts[b] = static_cast<int>(std::floor(count * area[b] / total));
    assigned += counts[b];
  }
  counts[k - 1] = count - assigned;
  SyntheticShape shape;
  shape.points.resize(count, 3);
  shape.gt_instance.resize(count);
  shape.gt_semantic.resize(count);
  int row = 0;
  for (int b = 0; b < k; ++b) {
    const PointMatrix pts = sample_box_surface(halves[b], centers[b], counts[b], rng);
    shape.points.middleRows(row, counts[b]) = pts;
    for (int i = 0; i < counts[b]; ++i) {
      shape.gt_instance[row + i] = b;
      shape.gt_semantic[row + i] = semantic[b];
    }
    row += counts[b];
  }
  return shape;
}

// Four-legged table: one slab on four identical legs. Instances 0..4,
// semantics {0: top, 1: leg}. Lives in [-0.5, 0.5] x [-0.35, 0.35] x [0, 0.63].
inline SyntheticShape make_table(int count, std::uint64_t seed) {
  std::vector<Eigen::Vector3d> halves, centers;
  std::vector<int> semantic;
  halves.emplace_back(0.5, 0.35, 0.04);
  centers.emplace_back(0.0, 0.0, 0.59);
  semantic.push_back(0);
  for (double sx : {-1.0, 1.0})
    for (double sy : {-1.0, 1.0}) {
      halves.emplace_back(0.035, 0.035, 0.275);
      centers.emplace_back(sx * 0.4, sy * 0.25, 0.275);
      semantic.push_back(1);
    }
  return make_boxes(halves, centers, semantic, count, seed);
}

// Two separated cuboids; the smallest shape that exercises multi-instance
// segmentation.
inline SyntheticShape make_two_boxes(int count, std::uint64_t seed) {
  return make_boxes({{0.2, 0.12, 0.1}, {0.15, 0.15, 0.15}},
                    {{-0.3, 0.0, 0.0}, {0.35, 0.05, 0.0}}, {0, 1}, count, seed);
}

}  // namespace sqparts
