#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "sqparts/core.hpp"

namespace sqparts {

// Numerically shifted softmax with optional temperature.
inline VectorXd softmax(const VectorXd& z, double temperature = 1.0) {
  require(z.size() > 0, "softmax on empty vector");
  require(temperature > 0.0, "temperature must be positive");
  VectorXd s = (z.array() - z.maxCoeff()) / temperature;
  s = s.array().exp();
  return s / s.sum();
}

// Euclidean projection of z onto the probability simplex (sorting form):
// out = max(z - tau, 0) with tau = (sum of the k largest entries - 1)/k for
// the largest feasible k.
inline VectorXd sparsemax(const VectorXd& z) {
  const int n = static_cast<int>(z.size());
  require(n > 0, "sparsemax on empty vector");
  std::vector<double> sorted(z.data(), z.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double cumsum = 0.0;
  double tau = 0.0;
  int k = 0;
  for (int j = 0; j < n; ++j) {
    cumsum += sorted[j];
    if (1.0 + (j + 1) * sorted[j] > cumsum) {
      k = j + 1;
      tau = (cumsum - 1.0) / k;
    } else {
      break;
    }
  }
  return (z.array() - tau).cwiseMax(0.0);
}

// Jacobian-vector product of softmax at output p: p .* (v - <p, v>).
inline VectorXd softmax_backward(const VectorXd& p, const VectorXd& v, double temperature = 1.0) {
  const double dot = p.dot(v);
  return (p.array() * (v.array() - dot)).matrix() / temperature;
}

// Jacobian-vector product of sparsemax at output w: centered v on the support
// set, zero elsewhere.
inline VectorXd sparsemax_backward(const VectorXd& w, const VectorXd& v) {
  double sum = 0.0;
  int support = 0;
  for (int i = 0; i < w.size(); ++i) {
    if (w[i] > 0.0) {
      sum += v[i];
      ++support;
    }
  }
  VectorXd out = VectorXd::Zero(w.size());
  if (support == 0) return out;
  const double mean = sum / support;
  for (int i = 0; i < w.size(); ++i)
    if (w[i] > 0.0) out[i] = v[i] - mean;
  return out;
}

// Column-wise wrappers; exactness against per-column application is part of
// the contract.
inline MatrixXd softmax_columns(const MatrixXd& z, double temperature = 1.0) {
  MatrixXd out(z.rows(), z.cols());
  for (int c = 0; c < z.cols(); ++c) out.col(c) = softmax(z.col(c), temperature);
  return out;
}

inline MatrixXd sparsemax_columns(const MatrixXd& z) {
  MatrixXd out(z.rows(), z.cols());
  for (int c = 0; c < z.cols(); ++c) out.col(c) = sparsemax(z.col(c));
  return out;
}

struct GumbelSample {
  int index = 0;        // hard argmax choice
  VectorXd soft;        // relaxed probabilities, backward path
};

// Straight-through Gumbel-Softmax draw: the forward value is the hard argmax
// one-hot (first index on ties), the soft probabilities back the gradient.
inline GumbelSample gumbel_onehot(const VectorXd& logits, double temperature, Rng& rng) {
  require(logits.size() > 0, "gumbel on empty logits");
  require(temperature > 0.0, "temperature must be positive");
  VectorXd noisy(logits.size());
  for (int i = 0; i < logits.size(); ++i) {
    double u = rng.uniform();
    u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
    noisy[i] = logits[i] - std::log(-std::log(u));
  }
  GumbelSample out;
  out.soft = softmax(noisy, temperature);
  noisy.maxCoeff(&out.index);
  return out;
}

}  // namespace sqparts
