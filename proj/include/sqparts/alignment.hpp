#pragma once

#include <vector>

#include "sqparts/core.hpp"
#include "sqparts/sparse_ops.hpp"

namespace sqparts {

constexpr double kTauFloor = 1e-4;

struct TauResult {
  double tau = kTauFloor;
  double mse = 0.0;    // pre-floor value
  MatrixXd f_hat;      // column-normalized semantic features
  VectorXd norms;      // column norms after the zero-column perturbation
  MatrixXd gram;       // f_hat^T f_hat
  MatrixXd perturbed;  // input after the zero-column guard
};

// Semantic-feature redundancy temperature: mean squared deviation of the
// normalized Gram matrix from identity, floored. Decorrelated semantics give
// a small tau and therefore sharp instance-to-semantic attention. This value
// stays differentiable; it is not detached.
inline TauResult adaptive_tau(const MatrixXd& f_geo_s, double floor = kTauFloor) {
  const int s = static_cast<int>(f_geo_s.cols());
  require(s > 0, "adaptive_tau on empty features");
  TauResult out;
  out.perturbed = f_geo_s;
  for (int c = 0; c < s; ++c)
    if (out.perturbed.col(c).norm() < 1e-12) out.perturbed.col(c).array() += 1e-12;
  out.norms.resize(s);
  out.f_hat.resize(f_geo_s.rows(), s);
  for (int c = 0; c < s; ++c) {
    out.norms[c] = out.perturbed.col(c).norm();
    out.f_hat.col(c) = out.perturbed.col(c) / out.norms[c];
  }
  out.gram = out.f_hat.transpose() * out.f_hat;
  out.mse = (out.gram - MatrixXd::Identity(s, s)).squaredNorm() / (s * s);
  out.tau = std::max(out.mse, floor);
  return out;
}

// Adjoint of adaptive_tau into the raw semantic features. Zero when the floor
// is active.
inline void adaptive_tau_backward(const TauResult& cache, double d_tau, MatrixXd& d_f_geo_s) {
  if (cache.tau > cache.mse || d_tau == 0.0) return;  // floored: constant
  const int s = static_cast<int>(cache.gram.rows());
  const MatrixXd d_gram =
      (2.0 / (s * s)) * (cache.gram - MatrixXd::Identity(s, s)) * d_tau;
  const MatrixXd d_fhat = 2.0 * cache.f_hat * d_gram;  // d_gram is symmetric
  for (int c = 0; c < s; ++c) {
    const VectorXd fh = cache.f_hat.col(c);
    const VectorXd dc = d_fhat.col(c);
    d_f_geo_s.col(c) += (dc - fh * fh.dot(dc)) / cache.norms[c];
  }
}

struct AlignResult {
  MatrixXd logits;    // S x M scaled similarities
  MatrixXd w_a;       // S x M column-stochastic attention
  MatrixXd f_geo_is;  // D x M aligned geometry features
};

// Instance-to-semantic attention: scaled dot-product similarities between
// semantic and per-instance geometry features, softmax per instance column,
// then semantic features blended back onto instance slots.
inline AlignResult align(const MatrixXd& f_geo_s, const MatrixXd& f_geo_i, double tau) {
  require(tau > 0.0, "tau must be positive");
  require(f_geo_s.rows() == f_geo_i.rows(), "feature dim mismatch");
  const double scale = 1.0 / (tau * std::sqrt(static_cast<double>(f_geo_s.rows())));
  AlignResult out;
  out.logits = (f_geo_s.transpose() * f_geo_i) * scale;
  out.w_a = softmax_columns(out.logits);
  out.f_geo_is = f_geo_s * out.w_a;
  return out;
}

// Adjoint of align; d_tau accumulates the temperature path.
inline void align_backward(const MatrixXd& f_geo_s, const MatrixXd& f_geo_i, double tau,
                           const AlignResult& cache, const MatrixXd& d_f_geo_is,
                           MatrixXd& d_f_geo_s, MatrixXd& d_f_geo_i, double& d_tau) {
  const double scale = 1.0 / (tau * std::sqrt(static_cast<double>(f_geo_s.rows())));
  d_f_geo_s += d_f_geo_is * cache.w_a.transpose();
  const MatrixXd d_w_a = f_geo_s.transpose() * d_f_geo_is;
  MatrixXd d_logits(d_w_a.rows(), d_w_a.cols());
  for (int c = 0; c < d_w_a.cols(); ++c)
    d_logits.col(c) = softmax_backward(cache.w_a.col(c), d_w_a.col(c));
  d_tau += -(d_logits.array() * cache.logits.array()).sum() / tau;
  const MatrixXd d_sim = d_logits * scale;
  d_f_geo_s += f_geo_i * d_sim.transpose();
  d_f_geo_i += f_geo_s * d_sim;
}

// Hardened attention, first index on ties: instance slot -> semantic slot.
inline std::vector<int> repeat_assignment(const MatrixXd& w_a) {
  std::vector<int> map(w_a.cols());
  for (int c = 0; c < w_a.cols(); ++c) {
    int idx = 0;
    w_a.col(c).maxCoeff(&idx);
    map[c] = idx;
  }
  return map;
}

struct PseudoSemantic {
  MatrixXd w_hard;    // S x M one-hot columns
  MatrixXd p_pseudo;  // S x N, treated as a constant target
};

// Pseudo semantic memberships: hardened attention routed through the
// instance memberships. Non-differentiated by construction.
inline PseudoSemantic pseudo_semantic(const MatrixXd& w_a, const MatrixXd& p_ins) {
  require(w_a.cols() == p_ins.rows(), "attention/membership shape mismatch");
  PseudoSemantic out;
  out.w_hard = MatrixXd::Zero(w_a.rows(), w_a.cols());
  const auto map = repeat_assignment(w_a);
  for (int c = 0; c < w_a.cols(); ++c) out.w_hard(map[c], c) = 1.0;
  out.p_pseudo = out.w_hard * p_ins;
  return out;
}

}  // namespace sqparts
