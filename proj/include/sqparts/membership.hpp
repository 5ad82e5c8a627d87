#pragma once

#include <vector>

#include "sqparts/core.hpp"
#include "sqparts/decoders.hpp"
#include "sqparts/sparse_ops.hpp"

namespace sqparts {

enum class Backend { Direct = 0, PointwiseMlp = 1 };

struct MlpLayer {
  MatrixXd w;
  MatrixXd b;  // column vector
};

// Small pointwise MLP, tanh between layers, linear output.
struct Mlp {
  std::vector<MlpLayer> layers;

  static Mlp init(const std::vector<int>& widths, Rng& rng, double out_scale) {
    Mlp mlp;
    for (size_t l = 0; l + 1 < widths.size(); ++l) {
      MlpLayer layer;
      const double scale =
          (l + 2 == widths.size() ? out_scale : 1.0) / std::sqrt(static_cast<double>(widths[l]));
      layer.w.resize(widths[l + 1], widths[l]);
      for (int i = 0; i < layer.w.rows(); ++i)
        for (int j = 0; j < layer.w.cols(); ++j) layer.w(i, j) = scale * rng.normal();
      layer.b = MatrixXd::Zero(widths[l + 1], 1);
      mlp.layers.push_back(std::move(layer));
    }
    return mlp;
  }
};

struct MlpCache {
  std::vector<MatrixXd> pre;   // pre-activation per layer
  std::vector<MatrixXd> post;  // post-activation per layer (last = linear output)
};

inline MatrixXd mlp_forward(const Mlp& mlp, const MatrixXd& input, MlpCache& cache) {
  cache.pre.clear();
  cache.post.clear();
  MatrixXd h = input;
  for (size_t l = 0; l < mlp.layers.size(); ++l) {
    MatrixXd z = mlp.layers[l].w * h;
    z.colwise() += VectorXd(mlp.layers[l].b.col(0));
    cache.pre.push_back(z);
    if (l + 1 < mlp.layers.size()) z = z.array().tanh();
    cache.post.push_back(z);
    h = z;
  }
  return h;
}

// Returns the input adjoint; accumulates weight adjoints into `grad`.
inline MatrixXd mlp_backward(const Mlp& mlp, const MatrixXd& input, const MlpCache& cache,
                             const MatrixXd& d_out, Mlp& grad) {
  const int last = static_cast<int>(mlp.layers.size()) - 1;
  MatrixXd d = d_out;  // adjoint of post-activation at the current layer
  for (int l = last; l >= 0; --l) {
    if (l != last) d = (d.array() * (1.0 - cache.post[l].array().square())).matrix();
    const MatrixXd& in = (l == 0) ? input : cache.post[l - 1];
    grad.layers[l].w += d * in.transpose();
    grad.layers[l].b.col(0) += d.rowwise().sum();
    d = mlp.layers[l].w.transpose() * d;
  }
  return d;
}

constexpr int kFourierPairs = 8;  // 16 fixed random Fourier features

// Pointwise backend: a shared trunk maps coordinates plus fixed Fourier
// features to both feature channels; two independent heads map the channels
// to membership logits.
struct BackendMlp {
  MatrixXd fourier;  // kFourierPairs x 3, fixed projection, not trained
  Mlp trunk;         // 19 -> 64 -> 64 -> 2D
  Mlp head_ins;      // D -> 32 -> 32 -> M
  Mlp head_sem;      // D -> 32 -> 32 -> S

  static BackendMlp init(int d, int m, int s, Rng& rng) {
    BackendMlp b;
    b.fourier.resize(kFourierPairs, 3);
    for (int i = 0; i < kFourierPairs; ++i)
      for (int j = 0; j < 3; ++j) b.fourier(i, j) = 4.0 * rng.normal();
    b.trunk = Mlp::init({3 + 2 * kFourierPairs, 64, 64, 2 * d}, rng, 0.1);
    b.head_ins = Mlp::init({d, 32, 32, m}, rng, 0.01);
    b.head_sem = Mlp::init({d, 32, 32, s}, rng, 0.01);
    return b;
  }

  MatrixXd lift(const PointMatrix& cloud) const {
    const int n = static_cast<int>(cloud.rows());
    MatrixXd input(3 + 2 * kFourierPairs, n);
    input.topRows(3) = cloud.transpose();
    const MatrixXd proj = fourier * cloud.transpose();
    input.middleRows(3, kFourierPairs) = proj.array().sin();
    input.bottomRows(kFourierPairs) = proj.array().cos();
    return input;
  }
};

// Free parameters of one fit. The direct backend optimizes the per-point
// features and membership logits themselves; the pointwise backend derives
// them from coordinates each step and optimizes the network weights instead.
// f/j are always materialized so downstream modules never branch.
struct FitState {
  int n = 0, m = 0, s = 0, d = 0;
  Backend backend = Backend::Direct;
  MatrixXd f_ins;  // D x N
  MatrixXd f_sem;  // D x N
  MatrixXd j_ins;  // M x N
  MatrixXd j_sem;  // S x N
  DecoderWeights decoder;
  BackendMlp mlp;  // PointwiseMlp only
};

struct MembershipSet {
  MatrixXd w_ins;  // N x M, sparsemax over points per instance
  MatrixXd w_sem;  // N x S
  MatrixXd p_ins;  // M x N, softmax over instances per point
  MatrixXd p_sem;  // S x N
};

inline MembershipSet build_memberships(const FitState& state) {
  require(state.j_ins.rows() == state.m && state.j_ins.cols() == state.n, "j_ins shape");
  require(state.j_sem.rows() == state.s && state.j_sem.cols() == state.n, "j_sem shape");
  MembershipSet ms;
  ms.w_ins = sparsemax_columns(state.j_ins.transpose());
  ms.w_sem = sparsemax_columns(state.j_sem.transpose());
  ms.p_ins = softmax_columns(state.j_ins);
  ms.p_sem = softmax_columns(state.j_sem);
  return ms;
}

// Adjoint of build_memberships into the logit matrices.
inline void memberships_backward(const MembershipSet& ms, const MatrixXd& d_w_ins,
                                 const MatrixXd& d_w_sem, const MatrixXd& d_p_ins,
                                 const MatrixXd& d_p_sem, MatrixXd& d_j_ins, MatrixXd& d_j_sem) {
  for (int c = 0; c < ms.w_ins.cols(); ++c)
    d_j_ins.row(c) += sparsemax_backward(ms.w_ins.col(c), d_w_ins.col(c)).transpose();
  for (int c = 0; c < ms.w_sem.cols(); ++c)
    d_j_sem.row(c) += sparsemax_backward(ms.w_sem.col(c), d_w_sem.col(c)).transpose();
  for (int c = 0; c < ms.p_ins.cols(); ++c)
    d_j_ins.col(c) += softmax_backward(ms.p_ins.col(c), d_p_ins.col(c));
  for (int c = 0; c < ms.p_sem.cols(); ++c)
    d_j_sem.col(c) += softmax_backward(ms.p_sem.col(c), d_p_sem.col(c));
}

struct AggregateFeatures {
  MatrixXd f_pos;    // D x M, pose features from instance channel
  MatrixXd f_geo_i;  // D x M, per-instance geometry features from semantic channel
  MatrixXd f_geo_s;  // D x S, per-semantic geometry features
};

inline AggregateFeatures aggregate_features(const FitState& state, const MembershipSet& ms) {
  AggregateFeatures agg;
  agg.f_pos = state.f_ins * ms.w_ins;
  agg.f_geo_i = state.f_sem * ms.w_ins;
  agg.f_geo_s = state.f_sem * ms.w_sem;
  return agg;
}

inline void aggregate_backward(const FitState& state, const MembershipSet& ms,
                               const MatrixXd& d_f_pos, const MatrixXd& d_f_geo_i,
                               const MatrixXd& d_f_geo_s, MatrixXd& d_f_ins, MatrixXd& d_f_sem,
                               MatrixXd& d_w_ins, MatrixXd& d_w_sem) {
  d_f_ins += d_f_pos * ms.w_ins.transpose();
  d_w_ins += state.f_ins.transpose() * d_f_pos;
  d_f_sem += d_f_geo_i * ms.w_ins.transpose();
  d_w_ins += state.f_sem.transpose() * d_f_geo_i;
  d_f_sem += d_f_geo_s * ms.w_sem.transpose();
  d_w_sem += state.f_sem.transpose() * d_f_geo_s;
}

}  // namespace sqparts
