#pragma once

#include <array>
#include <cmath>

namespace sqparts {

// Forward-mode scalar with a fixed number of tangent slots. Sixteen slots
// cover one primitive's constrained parameter vector, so a single evaluation
// of the geometry chain yields the full per-sample Jacobian.
template <int N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: implicit constant lift

  static Dual seeded(double value, int slot) {
    Dual x(value);
    x.d[slot] = 1.0;
    return x;
  }
};

template <int N>
inline Dual<N> operator-(const Dual<N>& a) {
  Dual<N> r(-a.v);
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}

template <int N>
inline Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v + b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}

template <int N>
inline Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v - b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}

template <int N>
inline Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
  Dual<N> r(a.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}

template <int N>
inline Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
  const double inv = 1.0 / b.v;
  Dual<N> r(a.v * inv);
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
  return r;
}

template <int N>
inline Dual<N> operator+(const Dual<N>& a, double b) { return a + Dual<N>(b); }
template <int N>
inline Dual<N> operator+(double a, const Dual<N>& b) { return Dual<N>(a) + b; }
template <int N>
inline Dual<N> operator-(const Dual<N>& a, double b) { return a - Dual<N>(b); }
template <int N>
inline Dual<N> operator-(double a, const Dual<N>& b) { return Dual<N>(a) - b; }
template <int N>
inline Dual<N> operator*(const Dual<N>& a, double b) {
  Dual<N> r(a.v * b);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b;
  return r;
}
template <int N>
inline Dual<N> operator*(double a, const Dual<N>& b) { return b * a; }
template <int N>
inline Dual<N> operator/(const Dual<N>& a, double b) { return a * (1.0 / b); }
template <int N>
inline Dual<N> operator/(double a, const Dual<N>& b) { return Dual<N>(a) / b; }

template <int N>
inline Dual<N> sin(const Dual<N>& a) {
  const double c = std::cos(a.v);
  Dual<N> r(std::sin(a.v));
  for (int i = 0; i < N; ++i) r.d[i] = c * a.d[i];
  return r;
}

template <int N>
inline Dual<N> cos(const Dual<N>& a) {
  const double s = -std::sin(a.v);
  Dual<N> r(std::cos(a.v));
  for (int i = 0; i < N; ++i) r.d[i] = s * a.d[i];
  return r;
}

template <int N>
inline Dual<N> sqrt(const Dual<N>& a) {
  const double s = std::sqrt(a.v);
  const double g = 0.5 / s;
  Dual<N> r(s);
  for (int i = 0; i < N; ++i) r.d[i] = g * a.d[i];
  return r;
}

template <int N>
inline Dual<N> exp(const Dual<N>& a) {
  const double e = std::exp(a.v);
  Dual<N> r(e);
  for (int i = 0; i < N; ++i) r.d[i] = e * a.d[i];
  return r;
}

template <int N>
inline Dual<N> log(const Dual<N>& a) {
  const double g = 1.0 / a.v;
  Dual<N> r(std::log(a.v));
  for (int i = 0; i < N; ++i) r.d[i] = g * a.d[i];
  return r;
}

// Pass-through helpers so the geometry chain compiles for plain doubles too.
inline double value_of(double x) { return x; }
template <int N>
inline double value_of(const Dual<N>& x) { return x.v; }

using std::cos;
using std::exp;
using std::log;
using std::sin;
using std::sqrt;

// Signed power sign(x)|x|^e with both-argument derivatives:
//   d/dx = e |x|^(e-1),  d/de = sign(x)|x|^e ln|x|.
// Undefined slope at x = 0 for e < 1; callers keep samples off the kinks.
inline double spow(double x, double e) {
  if (x == 0.0) return 0.0;
  const double ax = std::abs(x);
  return (x < 0.0 ? -1.0 : 1.0) * std::pow(ax, e);
}

template <int N>
inline Dual<N> spow(const Dual<N>& x, const Dual<N>& e) {
  const double ax = std::abs(x.v);
  if (ax == 0.0) return Dual<N>(0.0);
  const double sgn = x.v < 0.0 ? -1.0 : 1.0;
  const double p = std::pow(ax, e.v);
  const double dpdx = e.v * std::pow(ax, e.v - 1.0);  // symmetric in sign(x)
  const double lnax = std::log(ax);
  Dual<N> r(sgn * p);
  for (int i = 0; i < N; ++i) r.d[i] = dpdx * x.d[i] + sgn * p * lnax * e.d[i];
  return r;
}

template <int N>
inline Dual<N> spow(const Dual<N>& x, double e) {
  return spow(x, Dual<N>(e));
}

}  // namespace sqparts
