#pragma once

#include <cmath>
#include <vector>

#include "sqparts/core.hpp"
#include "sqparts/decoders.hpp"
#include "sqparts/dsq.hpp"

namespace sqparts {

struct LossConfig {
  double lambda_hd = 1.0;
  double lambda_wd = 0.3;
  double lambda_compact = 0.1;
  double lambda_align = 0.01;
  double delta_wd = 0.05;      // distance gate for the anti-collapse term
  double delta_c = 0.01;       // compactness smoothing
  double hd_cutoff_frac = 0.1; // boundary refinement switched off afterwards
};

struct EffectiveLambdas {
  double hd = 0.0, wd = 0.0, compact = 0.0, align = 0.0;
};

// Stage-dependent weights: the cuboid stage doubles the anti-collapse weight
// and triples compactness; the boundary term is active only for the first
// tenth of the budget.
inline EffectiveLambdas effective_lambdas(const LossConfig& cfg, int step, int total_steps) {
  const UnfreezeStage stage = unfreeze_schedule(step, total_steps);
  EffectiveLambdas lam;
  const bool cuboid = stage == UnfreezeStage::CuboidLike;
  lam.wd = cfg.lambda_wd * (cuboid ? 2.0 : 1.0);
  lam.compact = cfg.lambda_compact * (cuboid ? 3.0 : 1.0);
  const int cutoff = static_cast<int>(std::ceil(cfg.hd_cutoff_frac * total_steps));
  lam.hd = step < cutoff ? cfg.lambda_hd : 0.0;
  lam.align = cfg.lambda_align;
  return lam;
}

struct LossBreakdown {
  double recon = 0.0, hd = 0.0, wd = 0.0, compact = 0.0, align = 0.0;
  double total = 0.0;
  EffectiveLambdas lam;
};

// Nearest-neighbor structure between one abstraction's samples (M primitives,
// I samples each, flattened row blocks) and the cloud. Distances are
// Euclidean; argmins keep the lowest index on ties.
struct DistanceField {
  int m = 0, i = 0, n = 0;
  MatrixXd pp;             // M x N   point-to-primitive distance
  Eigen::MatrixXi pp_arg;  // M x N   winning sample within the primitive
  VectorXd nn;             // N       point-to-abstraction distance
  Eigen::VectorXi nn_arg;  // N       winning primitive
  VectorXd cov;            // M*I     sample-to-cloud distance
  Eigen::VectorXi cov_arg; // M*I     winning cloud point
};

inline void compute_distance_field(const PointMatrix& samples, int m, int i_count,
                                   const PointMatrix& cloud, DistanceField& f) {
  const int n = static_cast<int>(cloud.rows());
  require(samples.rows() == static_cast<long>(m) * i_count, "sample layout mismatch");
  require(n > 0 && m > 0 && i_count > 0, "empty distance field inputs");
  f.m = m;
  f.i = i_count;
  f.n = n;
  f.pp.resize(m, n);
  f.pp_arg.resize(m, n);
  f.nn.resize(n);
  f.nn_arg.resize(n);
  f.cov.setConstant(static_cast<long>(m) * i_count, std::numeric_limits<double>::infinity());
  f.cov_arg.setZero(static_cast<long>(m) * i_count);
  for (int mm = 0; mm < m; ++mm) {
    const double* sp = samples.data() + static_cast<long>(mm) * i_count * 3;
    double* covp = f.cov.data() + static_cast<long>(mm) * i_count;
    int* cova = f.cov_arg.data() + static_cast<long>(mm) * i_count;
    for (int nn = 0; nn < n; ++nn) {
      const double x0 = cloud(nn, 0), x1 = cloud(nn, 1), x2 = cloud(nn, 2);
      double best = std::numeric_limits<double>::infinity();
      int bi = 0;
      for (int ii = 0; ii < i_count; ++ii) {
        const double d0 = sp[3 * ii] - x0;
        const double d1 = sp[3 * ii + 1] - x1;
        const double d2 = sp[3 * ii + 2] - x2;
        const double dd = d0 * d0 + d1 * d1 + d2 * d2;
        if (dd < best) {
          best = dd;
          bi = ii;
        }
        if (dd < covp[ii]) {
          covp[ii] = dd;
          cova[ii] = nn;
        }
      }
      f.pp(mm, nn) = best;
      f.pp_arg(mm, nn) = bi;
    }
  }
  f.pp = f.pp.cwiseSqrt();
  f.cov = f.cov.cwiseSqrt();
  for (int nn = 0; nn < n; ++nn) {
    int bm = 0;
    f.nn[nn] = f.pp.col(nn).minCoeff(&bm);
    f.nn_arg[nn] = bm;
  }
}

// --- single-primitive helpers ------------------------------------------------

inline double point_to_primitive(const Eigen::Vector3d& x, const SampledPrimitive& prim,
                                 int* arg = nullptr) {
  require(prim.points.rows() > 0, "primitive has no samples");
  double best = std::numeric_limits<double>::infinity();
  int bi = 0;
  for (int i = 0; i < prim.points.rows(); ++i) {
    const double d = (prim.points.row(i).transpose() - x).squaredNorm();
    if (d < best) {
      best = d;
      bi = i;
    }
  }
  if (arg) *arg = bi;
  return std::sqrt(best);
}

inline double coverage(const SampledPrimitive& prim, const PointMatrix& cloud) {
  require(prim.points.rows() > 0, "primitive has no samples");
  require(cloud.rows() > 0, "empty cloud");
  double sum = 0.0;
  for (int i = 0; i < prim.points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int n = 0; n < cloud.rows(); ++n) {
      const double d = (cloud.row(n) - prim.points.row(i)).squaredNorm();
      best = std::min(best, d);
    }
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(prim.points.rows());
}

inline PointMatrix flatten_samples(const std::vector<SampledPrimitive>& prims) {
  require(!prims.empty(), "no primitives");
  const int i_count = static_cast<int>(prims[0].points.rows());
  PointMatrix out(static_cast<long>(prims.size()) * i_count, 3);
  for (size_t m = 0; m < prims.size(); ++m) {
    require(prims[m].points.rows() == i_count, "uneven sample counts");
    out.middleRows(static_cast<long>(m) * i_count, i_count) = prims[m].points;
  }
  return out;
}

// --- field-based loss values ---------------------------------------------------

// Two-sided worst case: the worst point-to-abstraction distance vs the worst
// primitive-to-cloud distance.
inline double hausdorff_value(const DistanceField& f) {
  double t1 = f.nn.maxCoeff();
  double t2 = 0.0;
  for (int m = 0; m < f.m; ++m) t2 = std::max(t2, f.pp.row(m).minCoeff());
  return std::max(t1, t2);
}

// Average point-to-abstraction distance plus average sample-to-cloud
// distance, both halved.
inline double recon_value(const DistanceField& f) {
  return 0.5 * f.nn.mean() + 0.5 * f.cov.mean();
}

inline double gated(double d, double delta) { return d > delta ? d : 0.0; }

inline double anti_collapse_value(const MatrixXd& p_ins, const DistanceField& fi,
                                  const DistanceField& fs, double delta) {
  require(p_ins.rows() == fi.m && p_ins.cols() == fi.n, "membership/field mismatch");
  double sum = 0.0;
  for (int m = 0; m < fi.m; ++m)
    for (int n = 0; n < fi.n; ++n)
      sum += p_ins(m, n) * 0.5 * (gated(fi.pp(m, n), delta) + gated(fs.pp(m, n), delta));
  return sum / fi.n;
}

inline double compactness_loss(const MatrixXd& p_ins, double delta_c) {
  require(p_ins.rows() > 0 && p_ins.cols() > 0, "empty memberships");
  const int m = static_cast<int>(p_ins.rows());
  double acc = 0.0;
  for (int mm = 0; mm < m; ++mm) acc += std::sqrt(p_ins.row(mm).mean() + delta_c);
  acc /= m;
  return acc * acc;
}

inline double alignment_loss(const MatrixXd& p_sem, const MatrixXd& p_pseudo) {
  require(p_sem.rows() == p_pseudo.rows() && p_sem.cols() == p_pseudo.cols(),
          "pseudo target shape mismatch");
  return (p_sem - p_pseudo).squaredNorm() / static_cast<double>(p_sem.size());
}

inline LossBreakdown total_loss_from_fields(const DistanceField& fi, const DistanceField& fs,
                                            const MatrixXd& p_ins, const MatrixXd& p_sem,
                                            const MatrixXd& p_pseudo, const LossConfig& cfg,
                                            const EffectiveLambdas& lam) {
  LossBreakdown bd;
  bd.lam = lam;
  bd.recon = 0.5 * recon_value(fi) + 0.5 * recon_value(fs);
  bd.hd = 0.5 * hausdorff_value(fi) + 0.5 * hausdorff_value(fs);
  bd.wd = anti_collapse_value(p_ins, fi, fs, cfg.delta_wd);
  bd.compact = compactness_loss(p_ins, cfg.delta_c);
  bd.align = alignment_loss(p_sem, p_pseudo);
  bd.total = bd.recon + lam.hd * bd.hd + lam.wd * bd.wd + lam.compact * bd.compact +
             lam.align * bd.align;
  return bd;
}

// --- abstraction-level entry points (tests and callers outside the fit loop) ---

inline double hausdorff_loss(const std::vector<SampledPrimitive>& ins,
                             const std::vector<SampledPrimitive>& sem,
                             const PointMatrix& cloud) {
  DistanceField fi, fs;
  compute_distance_field(flatten_samples(ins), static_cast<int>(ins.size()),
                         static_cast<int>(ins[0].points.rows()), cloud, fi);
  compute_distance_field(flatten_samples(sem), static_cast<int>(sem.size()),
                         static_cast<int>(sem[0].points.rows()), cloud, fs);
  return 0.5 * hausdorff_value(fi) + 0.5 * hausdorff_value(fs);
}

inline double recon_loss(const std::vector<SampledPrimitive>& ins,
                         const std::vector<SampledPrimitive>& sem, const PointMatrix& cloud) {
  DistanceField fi, fs;
  compute_distance_field(flatten_samples(ins), static_cast<int>(ins.size()),
                         static_cast<int>(ins[0].points.rows()), cloud, fi);
  compute_distance_field(flatten_samples(sem), static_cast<int>(sem.size()),
                         static_cast<int>(sem[0].points.rows()), cloud, fs);
  return 0.5 * recon_value(fi) + 0.5 * recon_value(fs);
}

inline double anti_collapse_loss(const MatrixXd& p_ins, const std::vector<SampledPrimitive>& ins,
                                 const std::vector<SampledPrimitive>& sem,
                                 const PointMatrix& cloud, double delta) {
  DistanceField fi, fs;
  compute_distance_field(flatten_samples(ins), static_cast<int>(ins.size()),
                         static_cast<int>(ins[0].points.rows()), cloud, fi);
  compute_distance_field(flatten_samples(sem), static_cast<int>(sem.size()),
                         static_cast<int>(sem[0].points.rows()), cloud, fs);
  return anti_collapse_value(p_ins, fi, fs, delta);
}

inline LossBreakdown total_loss(const std::vector<SampledPrimitive>& ins,
                                const std::vector<SampledPrimitive>& sem,
                                const MatrixXd& p_ins, const MatrixXd& p_sem,
                                const MatrixXd& p_pseudo, const PointMatrix& cloud,
                                const LossConfig& cfg, int step, int total_steps) {
  DistanceField fi, fs;
  compute_distance_field(flatten_samples(ins), static_cast<int>(ins.size()),
                         static_cast<int>(ins[0].points.rows()), cloud, fi);
  compute_distance_field(flatten_samples(sem), static_cast<int>(sem.size()),
                         static_cast<int>(sem[0].points.rows()), cloud, fs);
  return total_loss_from_fields(fi, fs, p_ins, p_sem, p_pseudo, cfg,
                                effective_lambdas(cfg, step, total_steps));
}

// --- adjoints -----------------------------------------------------------------

// Scatters d(total)/d(sample) for one abstraction's recon term.
inline void recon_backward(const DistanceField& f, const PointMatrix& samples,
                           const PointMatrix& cloud, double weight, PointMatrix& d_samples) {
  const double cp = weight * 0.5 / f.n;
  for (int n = 0; n < f.n; ++n) {
    const double d = f.nn[n];
    if (d < 1e-18) continue;
    const int m = f.nn_arg[n];
    const long row = static_cast<long>(m) * f.i + f.pp_arg(m, n);
    d_samples.row(row) += cp * (samples.row(row) - cloud.row(n)) / d;
  }
  const double cc = weight * 0.5 / (static_cast<double>(f.m) * f.i);
  for (long idx = 0; idx < f.cov.size(); ++idx) {
    const double d = f.cov[idx];
    if (d < 1e-18) continue;
    d_samples.row(idx) += cc * (samples.row(idx) - cloud.row(f.cov_arg[idx])) / d;
  }
}

// Subgradient of the two-sided worst case: exactly one sample moves.
inline void hausdorff_backward(const DistanceField& f, const PointMatrix& samples,
                               const PointMatrix& cloud, double weight, PointMatrix& d_samples) {
  double t1 = -1.0;
  int n1 = 0;
  for (int n = 0; n < f.n; ++n)
    if (f.nn[n] > t1) {
      t1 = f.nn[n];
      n1 = n;
    }
  double t2 = -1.0;
  int m2 = 0, n2 = 0;
  for (int m = 0; m < f.m; ++m) {
    int nb = 0;
    const double v = f.pp.row(m).minCoeff(&nb);
    if (v > t2) {
      t2 = v;
      m2 = m;
      n2 = nb;
    }
  }
  int mw, nw;
  double dw;
  if (t1 >= t2) {
    mw = f.nn_arg[n1];
    nw = n1;
    dw = t1;
  } else {
    mw = m2;
    nw = n2;
    dw = t2;
  }
  if (dw < 1e-18) return;
  const long row = static_cast<long>(mw) * f.i + f.pp_arg(mw, nw);
  d_samples.row(row) += weight * (samples.row(row) - cloud.row(nw)) / dw;
}

// Anti-collapse adjoint: the gate indicator is a constant per evaluation.
inline void anti_collapse_backward(const MatrixXd& p_ins, const DistanceField& fi,
                                   const DistanceField& fs, const PointMatrix& samples_ins,
                                   const PointMatrix& samples_sem, const PointMatrix& cloud,
                                   double delta, double weight, PointMatrix& d_samples_ins,
                                   PointMatrix& d_samples_sem, MatrixXd& d_p_ins) {
  const double inv_n = 1.0 / fi.n;
  for (int m = 0; m < fi.m; ++m) {
    for (int n = 0; n < fi.n; ++n) {
      const double di = fi.pp(m, n), ds = fs.pp(m, n);
      const bool gi = di > delta, gs = ds > delta;
      d_p_ins(m, n) += weight * 0.5 * ((gi ? di : 0.0) + (gs ? ds : 0.0)) * inv_n;
      const double coef = weight * p_ins(m, n) * 0.5 * inv_n;
      if (gi) {
        const long row = static_cast<long>(m) * fi.i + fi.pp_arg(m, n);
        d_samples_ins.row(row) += coef * (samples_ins.row(row) - cloud.row(n)) / di;
      }
      if (gs) {
        const long row = static_cast<long>(m) * fs.i + fs.pp_arg(m, n);
        d_samples_sem.row(row) += coef * (samples_sem.row(row) - cloud.row(n)) / ds;
      }
    }
  }
}

inline void compactness_backward(const MatrixXd& p_ins, double delta_c, double weight,
                                 MatrixXd& d_p_ins) {
  const int m = static_cast<int>(p_ins.rows());
  const int n = static_cast<int>(p_ins.cols());
  VectorXd s(m);
  for (int mm = 0; mm < m; ++mm) s[mm] = std::sqrt(p_ins.row(mm).mean() + delta_c);
  const double a = s.mean();
  for (int mm = 0; mm < m; ++mm) {
    const double g = weight * a / (m * s[mm] * n);
    d_p_ins.row(mm).array() += g;
  }
}

inline void alignment_backward(const MatrixXd& p_sem, const MatrixXd& p_pseudo, double weight,
                               MatrixXd& d_p_sem) {
  d_p_sem += weight * 2.0 * (p_sem - p_pseudo) / static_cast<double>(p_sem.size());
}

}  // namespace sqparts
