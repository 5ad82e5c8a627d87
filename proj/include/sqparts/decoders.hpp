#pragma once

#include <vector>

#include "sqparts/core.hpp"
#include "sqparts/dsq.hpp"
#include "sqparts/sparse_ops.hpp"

namespace sqparts {

// Cascade unfreezing: boxes first, then live shape exponents, then tapering
// and bending. Fractions of the step budget are 20% / 20% / 60%.
enum class UnfreezeStage { CuboidLike = 0, Superquadric = 1, Deformable = 2 };

inline UnfreezeStage unfreeze_schedule(int step, int total_steps) {
  require(total_steps > 0, "total_steps must be positive");
  require(step >= 0 && step < total_steps, "step outside schedule");
  const double frac = static_cast<double>(step) / total_steps;
  if (frac < 0.2) return UnfreezeStage::CuboidLike;
  if (frac < 0.4) return UnfreezeStage::Superquadric;
  return UnfreezeStage::Deformable;
}

// All heads are bias-free linear maps; pre-squash outputs are exactly linear
// in the features. The rotation head's identity bias is the fixed +1 on the
// quaternion w inside the normalization, not a learnable term.
struct DecoderWeights {
  MatrixXd w_size;    // 3 x D
  MatrixXd w_shape;   // 2 x D
  MatrixXd w_taper;   // 2 x D
  MatrixXd w_bend;    // 2 x D, rows (curvature, plane angle)
  MatrixXd w_trans;   // 3 x D, translation residual
  MatrixXd w_rot;     // 4 x D
  MatrixXd w_mirror;  // 4 x D, plane selection logits

  static DecoderWeights init(int d, Rng& rng, double scale = 0.01) {
    DecoderWeights w;
    auto mk = [&](int rows) {
      MatrixXd m(rows, d);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) m(i, j) = scale * rng.normal();
      return m;
    };
    w.w_size = mk(3);
    w.w_shape = mk(2);
    w.w_taper = mk(2);
    w.w_bend = mk(2);
    w.w_trans = mk(3);
    w.w_rot = mk(4);
    w.w_mirror = mk(4);
    return w;
  }
};

// Identity on [-0.9, 0.9], tanh saturation beyond, C1 at the joins, range
// (-1, 1). Normalized clouds keep coordinates inside the identity region, so
// an exact membership spike reproduces its point's coordinates.
constexpr double kClampKnee = 0.9;

inline double soft_clamp(double v) {
  const double c = kClampKnee, span = 1.0 - c;
  if (v > c) return c + span * std::tanh((v - c) / span);
  if (v < -c) return -c - span * std::tanh((-v - c) / span);
  return v;
}

inline double soft_clamp_grad(double v) {
  const double c = kClampKnee, span = 1.0 - c;
  if (v > c || v < -c) {
    const double th = std::tanh((std::abs(v) - c) / span);
    return 1.0 - th * th;
  }
  return 1.0;
}

struct GeoDecode {
  MatrixXd raw;                  // 9 x K pre-squash head outputs
  std::vector<DsqParams> parts;  // geometry filled, pose left at defaults
};

// Geometry head raw layout matches the squash table: [a0 a1 a2 e0 e1 k0 k1 b alpha].
inline GeoDecode decode_geometry(const MatrixXd& features, const DecoderWeights& w,
                                 UnfreezeStage stage) {
  const int k = static_cast<int>(features.cols());
  GeoDecode out;
  out.raw.resize(9, k);
  out.raw.topRows(3) = w.w_size * features;
  out.raw.middleRows(3, 2) = w.w_shape * features;
  out.raw.middleRows(5, 2) = w.w_taper * features;
  out.raw.bottomRows(2) = w.w_bend * features;
  out.parts.resize(k);
  for (int c = 0; c < k; ++c) {
    DsqParams& p = out.parts[c];
    for (int j = 0; j < 3; ++j) p.a[j] = box_squash(out.raw(j, c), kSquashLo[j], kSquashHi[j]);
    if (stage == UnfreezeStage::CuboidLike) {
      p.eps = {0.2, 0.2};
    } else {
      p.eps = {box_squash(out.raw(3, c), kSquashLo[3], kSquashHi[3]),
               box_squash(out.raw(4, c), kSquashLo[4], kSquashHi[4])};
    }
    if (stage == UnfreezeStage::Deformable) {
      p.k = {box_squash(out.raw(5, c), kSquashLo[5], kSquashHi[5]),
             box_squash(out.raw(6, c), kSquashLo[6], kSquashHi[6])};
      p.b = box_squash(out.raw(7, c), kSquashLo[7], kSquashHi[7]);
      p.alpha = box_squash(out.raw(8, c), kSquashLo[8], kSquashHi[8]);
    } else {
      p.k = {0.0, 0.0};
      p.b = 0.0;  // below the bend guard: exact identity
      p.alpha = 0.0;
    }
  }
  return out;
}

// Accumulates head-weight and feature gradients from per-part parameter
// adjoints (rows 0..8 of a 16 x K adjoint matrix). Pinned components
// contribute exactly zero, so frozen stages leave their heads untouched.
inline void decode_geometry_backward(const MatrixXd& features, const DecoderWeights& w,
                                     UnfreezeStage stage, const GeoDecode& cache,
                                     const MatrixXd& d_theta, DecoderWeights& dw,
                                     MatrixXd& d_features) {
  const int k = static_cast<int>(features.cols());
  MatrixXd d_raw = MatrixXd::Zero(9, k);
  const int live = stage == UnfreezeStage::CuboidLike      ? 3
                   : stage == UnfreezeStage::Superquadric ? 5
                                                          : 9;
  for (int c = 0; c < k; ++c)
    for (int j = 0; j < live; ++j)
      d_raw(j, c) = d_theta(j, c) * box_squash_grad(cache.raw(j, c), kSquashLo[j], kSquashHi[j]);
  dw.w_size += d_raw.topRows(3) * features.transpose();
  dw.w_shape += d_raw.middleRows(3, 2) * features.transpose();
  dw.w_taper += d_raw.middleRows(5, 2) * features.transpose();
  dw.w_bend += d_raw.bottomRows(2) * features.transpose();
  d_features += w.w_size.transpose() * d_raw.topRows(3) +
                w.w_shape.transpose() * d_raw.middleRows(3, 2) +
                w.w_taper.transpose() * d_raw.middleRows(5, 2) +
                w.w_bend.transpose() * d_raw.bottomRows(2);
}

struct PoseDecode {
  MatrixXd bias;    // 3 x M, membership-weighted point centroid
  MatrixXd raw_t;   // 3 x M, pre-clamp
  MatrixXd t;       // 3 x M
  MatrixXd raw_q;   // 4 x M, pre-normalize (identity offset applied)
  MatrixXd r_pre;   // 4 x M, unit quaternions before mirroring
  MatrixXd r;       // 4 x M, after mirroring
  MatrixXd logits;  // 4 x M mirror logits
  MatrixXd soft;    // 4 x M relaxed plane probabilities
  std::vector<MirrorPlane> plane;
};

// Translation anchors each primitive at its membership-weighted centroid plus
// a learned residual; rotation is the identity-biased normalized head output,
// conjugated by the selected mirror plane. During fitting the plane is a
// straight-through Gumbel draw; extraction freezes the argmax.
inline PoseDecode decode_pose(const MatrixXd& f_pos, const MatrixXd& w_ins,
                              const PointMatrix& cloud, const DecoderWeights& w,
                              double temperature, Rng& rng, bool deterministic = false) {
  const int m = static_cast<int>(f_pos.cols());
  require(w_ins.cols() == m, "membership/feature column mismatch");
  require(w_ins.rows() == cloud.rows(), "membership/cloud row mismatch");
  PoseDecode out;
  out.bias = cloud.transpose() * w_ins;
  out.raw_t = out.bias + w.w_trans * f_pos;
  out.t = out.raw_t.unaryExpr([](double v) { return soft_clamp(v); });
  out.raw_q = w.w_rot * f_pos;
  out.raw_q.row(0).array() += 1.0;
  out.r_pre.resize(4, m);
  for (int c = 0; c < m; ++c) {
    const double n = out.raw_q.col(c).norm();
    if (!(n > 1e-12)) throw std::runtime_error("degenerate rotation raw");
    out.r_pre.col(c) = out.raw_q.col(c) / n;
  }
  out.logits = w.w_mirror * f_pos;
  out.soft.resize(4, m);
  out.plane.resize(m);
  out.r.resize(4, m);
  for (int c = 0; c < m; ++c) {
    int choice;
    if (deterministic) {
      out.logits.col(c).maxCoeff(&choice);
      out.soft.col(c) = softmax(out.logits.col(c), temperature);
    } else {
      const GumbelSample g = gumbel_onehot(out.logits.col(c), temperature, rng);
      choice = g.index;
      out.soft.col(c) = g.soft;
    }
    out.plane[c] = static_cast<MirrorPlane>(choice);
    const std::array<double, 4> q = {out.r_pre(0, c), out.r_pre(1, c), out.r_pre(2, c),
                                     out.r_pre(3, c)};
    const auto qm = mirror_rotation(q, out.plane[c]);
    out.r.col(c) << qm[0], qm[1], qm[2], qm[3];
  }
  return out;
}

// Pose adjoint. d_theta carries rows 9..11 (translation) and 12..15
// (rotation) per column. The mirror path is straight-through: the hard choice
// backs onto the relaxed probabilities. d_w_ins collects the centroid-bias
// contribution; d_f_pos the head contributions. mirror_st=false drops the
// straight-through path (used when the plane is frozen to its argmax, where
// the true gradient of the selection is zero almost everywhere).
inline void decode_pose_backward(const MatrixXd& f_pos, const PointMatrix& cloud,
                                 const DecoderWeights& w, const PoseDecode& cache,
                                 const MatrixXd& d_theta, double temperature,
                                 DecoderWeights& dw, MatrixXd& d_f_pos, MatrixXd& d_w_ins,
                                 bool mirror_st = true) {
  const int m = static_cast<int>(f_pos.cols());
  MatrixXd d_pre_t(3, m), d_raw_q(4, m);
  MatrixXd d_logits = MatrixXd::Zero(4, m);
  for (int c = 0; c < m; ++c) {
    for (int j = 0; j < 3; ++j)
      d_pre_t(j, c) = d_theta(9 + j, c) * soft_clamp_grad(cache.raw_t(j, c));
    const Eigen::Vector4d dr = d_theta.block<4, 1>(12, c);
    const std::array<double, 4> rp = {cache.r_pre(0, c), cache.r_pre(1, c), cache.r_pre(2, c),
                                      cache.r_pre(3, c)};
    if (mirror_st) {
      // straight-through: d(choice weight) for each candidate plane
      Eigen::Vector4d d_soft;
      for (int p = 0; p < kMirrorChoices; ++p) {
        const auto qm = mirror_rotation(rp, static_cast<MirrorPlane>(p));
        d_soft[p] = dr[0] * qm[0] + dr[1] * qm[1] + dr[2] * qm[2] + dr[3] * qm[3];
      }
      d_logits.col(c) = softmax_backward(cache.soft.col(c), d_soft, temperature);
    }
    // mirror matrices are diagonal sign flips, so the adjoint is the same flip
    const auto dm = mirror_rotation({dr[0], dr[1], dr[2], dr[3]}, cache.plane[c]);
    const Eigen::Vector4d d_rpre(dm[0], dm[1], dm[2], dm[3]);
    const double n = cache.raw_q.col(c).norm();
    const Eigen::Vector4d rpre = cache.r_pre.col(c);
    d_raw_q.col(c) = (d_rpre - rpre * rpre.dot(d_rpre)) / n;
  }
  dw.w_trans += d_pre_t * f_pos.transpose();
  dw.w_rot += d_raw_q * f_pos.transpose();
  dw.w_mirror += d_logits * f_pos.transpose();
  d_f_pos += w.w_trans.transpose() * d_pre_t + w.w_rot.transpose() * d_raw_q +
             w.w_mirror.transpose() * d_logits;
  d_w_ins += cloud * d_pre_t;
}

inline std::vector<DsqParams> assemble_abstraction(const GeoDecode& geo, const PoseDecode& pose) {
  const int m = static_cast<int>(geo.parts.size());
  require(pose.t.cols() == m, "geometry/pose size mismatch");
  std::vector<DsqParams> out(m);
  for (int c = 0; c < m; ++c) {
    out[c] = geo.parts[c];
    out[c].t = {pose.t(0, c), pose.t(1, c), pose.t(2, c)};
    out[c].r = {pose.r(0, c), pose.r(1, c), pose.r(2, c), pose.r(3, c)};
  }
  return out;
}

}  // namespace sqparts
