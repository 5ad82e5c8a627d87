#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <ostream>
#include <vector>

#include "sqparts/core.hpp"
#include "sqparts/dual.hpp"

namespace sqparts {

// Constrained primitive parameters, 16 values:
//   size a (3), shape eps (2), taper k (2), bend curvature b, bend plane
//   angle alpha, translation t (3), rotation quaternion r (w,x,y,z).
// b == 0 encodes "bend off" (the deform guard makes it an exact identity);
// a live bend stays within [0.01, 0.75].
struct DsqParams {
  std::array<double, 3> a{0.42, 0.42, 0.42};
  std::array<double, 2> eps{0.6, 0.6};
  std::array<double, 2> k{0.0, 0.0};
  double b = 0.0;
  double alpha = 0.0;
  std::array<double, 3> t{0.0, 0.0, 0.0};
  std::array<double, 4> r{1.0, 0.0, 0.0, 0.0};

  void validate() const;
};

enum class MirrorPlane { None = 0, XY = 1, XZ = 2, YZ = 3 };
constexpr int kMirrorChoices = 4;

constexpr double kBendGuard = 1e-6;
constexpr int kParamCount = 16;

// Box bounds for the squashable entries, indexed by the raw-vector layout
// [a0 a1 a2 e0 e1 k0 k1 b alpha t0 t1 t2]; the quaternion has no box.
constexpr std::array<double, 12> kSquashLo = {
    0.02, 0.02, 0.02, 0.2, 0.2, -0.9, -0.9, 0.01, -kPi / 2, -1.0, -1.0, -1.0};
constexpr std::array<double, 12> kSquashHi = {
    0.82, 0.82, 0.82, 1.0, 1.0, 0.9, 0.9, 0.75, kPi / 2, 1.0, 1.0, 1.0};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double box_squash(double x, double lo, double hi) {
  return lo + (hi - lo) * sigmoid(x);
}

// d(box_squash)/dx.
inline double box_squash_grad(double x, double lo, double hi) {
  const double s = sigmoid(x);
  return (hi - lo) * s * (1.0 - s);
}

inline void DsqParams::validate() const {
  auto in = [](double v, double lo, double hi) { return v >= lo - 1e-12 && v <= hi + 1e-12; };
  for (double v : a) require(std::isfinite(v) && in(v, 0.02, 0.82), "size out of range");
  for (double v : eps) require(in(v, 0.2, 1.0), "shape exponent out of range");
  for (double v : k) require(in(v, -0.9, 0.9), "taper out of range");
  require(b == 0.0 || in(b, 0.01, 0.75), "bend curvature out of range");
  require(in(alpha, -kPi / 2, kPi / 2), "bend angle out of range");
  for (double v : t) require(std::isfinite(v) && in(v, -1.0, 1.0), "translation out of range");
  const double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
  require(std::abs(n - 1.0) <= 1e-9, "rotation not unit");
}

// Smooth per-coordinate squash of an unconstrained 16-vector into the
// constrained box; the quaternion block is shifted by +1 on w and normalized,
// so an all-zero raw vector maps to box midpoints and the identity rotation.
inline DsqParams squash_params(const std::array<double, 16>& raw) {
  for (double v : raw)
    if (!std::isfinite(v)) throw std::runtime_error("non-finite raw parameter");
  DsqParams p;
  auto sq = [&](int i) { return box_squash(raw[i], kSquashLo[i], kSquashHi[i]); };
  p.a = {sq(0), sq(1), sq(2)};
  p.eps = {sq(3), sq(4)};
  p.k = {sq(5), sq(6)};
  p.b = sq(7);
  p.alpha = sq(8);
  p.t = {sq(9), sq(10), sq(11)};
  double q[4] = {raw[12] + 1.0, raw[13], raw[14], raw[15]};
  const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (!(n > 1e-12)) throw std::runtime_error("degenerate rotation raw");
  p.r = {q[0] / n, q[1] / n, q[2] / n, q[3] / n};
  return p;
}

// Conjugating a rotation by a coordinate-plane reflection flips the sign of
// the two vector components orthogonal to the plane normal; w is preserved.
inline std::array<double, 4> mirror_rotation(const std::array<double, 4>& q, MirrorPlane plane) {
  switch (plane) {
    case MirrorPlane::None: return q;
    case MirrorPlane::XY: return {q[0], -q[1], -q[2], q[3]};
    case MirrorPlane::XZ: return {q[0], -q[1], q[2], -q[3]};
    case MirrorPlane::YZ: return {q[0], q[1], -q[2], -q[3]};
  }
  return q;
}

// --- scalar-generic geometry chain -----------------------------------------

template <typename T>
struct ParamsT {
  std::array<T, 3> a;
  std::array<T, 2> eps;
  std::array<T, 2> k;
  T b;
  T alpha;
  std::array<T, 3> t;
  std::array<T, 4> r;
};

inline ParamsT<double> as_values(const DsqParams& p) {
  return {p.a, p.eps, p.k, p.b, p.alpha, p.t, p.r};
}

// Seeds one tangent slot per constrained parameter, layout
// [a0 a1 a2 e0 e1 k0 k1 b alpha t0 t1 t2 rw rx ry rz].
inline ParamsT<Dual<16>> seed_params(const DsqParams& p) {
  ParamsT<Dual<16>> s;
  for (int i = 0; i < 3; ++i) s.a[i] = Dual<16>::seeded(p.a[i], i);
  for (int i = 0; i < 2; ++i) s.eps[i] = Dual<16>::seeded(p.eps[i], 3 + i);
  for (int i = 0; i < 2; ++i) s.k[i] = Dual<16>::seeded(p.k[i], 5 + i);
  s.b = Dual<16>::seeded(p.b, 7);
  s.alpha = Dual<16>::seeded(p.alpha, 8);
  for (int i = 0; i < 3; ++i) s.t[i] = Dual<16>::seeded(p.t[i], 9 + i);
  for (int i = 0; i < 4; ++i) s.r[i] = Dual<16>::seeded(p.r[i], 12 + i);
  return s;
}

// Canonical superellipsoid surface point at angles (eta, omega), signed-power
// convention throughout.
template <typename T>
inline std::array<T, 3> se_point_t(const std::array<T, 3>& a, const std::array<T, 2>& eps,
                                   double eta, double omega) {
  const double ce = std::cos(eta), se = std::sin(eta);
  const double co = std::cos(omega), so = std::sin(omega);
  const T ce1 = spow(T(ce), eps[0]);
  const T se1 = spow(T(se), eps[0]);
  const T co2 = spow(T(co), eps[1]);
  const T so2 = spow(T(so), eps[1]);
  return {a[0] * ce1 * co2, a[1] * ce1 * so2, a[2] * se1};
}

template <typename T>
inline void taper_t(std::array<T, 3>& p, const std::array<T, 2>& k, const T& a3) {
  const T zr = p[2] / a3;
  p[0] = (k[0] * zr + 1.0) * p[0];
  p[1] = (k[1] * zr + 1.0) * p[1];
}

// Circular bend in the plane at angle alpha from x; curvature below the guard
// is an exact identity so frozen bends cost nothing and stay continuous.
template <typename T>
inline void bend_t(std::array<T, 3>& p, const T& b, const T& alpha) {
  if (value_of(b) < kBendGuard) return;
  const T ca = cos(alpha), sa = sin(alpha);
  const T rproj = ca * p[0] + sa * p[1];
  const T gamma = p[2] * b;
  const T w = 1.0 / b - rproj;
  const T half = sin(gamma * 0.5);
  const T delta = w * (2.0 * half * half);  // w * (1 - cos(gamma))
  p[0] = p[0] + delta * ca;
  p[1] = p[1] + delta * sa;
  p[2] = sin(gamma) * w;
}

template <typename T>
inline void rotate_t(std::array<T, 3>& p, const std::array<T, 4>& q) {
  // v' = v + w*(2 qv x v) + qv x (2 qv x v); exact for unit q.
  const T tx = 2.0 * (q[2] * p[2] - q[3] * p[1]);
  const T ty = 2.0 * (q[3] * p[0] - q[1] * p[2]);
  const T tz = 2.0 * (q[1] * p[1] - q[2] * p[0]);
  const T x = p[0] + q[0] * tx + (q[2] * tz - q[3] * ty);
  const T y = p[1] + q[0] * ty + (q[3] * tx - q[1] * tz);
  const T z = p[2] + q[0] * tz + (q[1] * ty - q[2] * tx);
  p = {x, y, z};
}

// Full deformation chain: taper, then bend, then rigid pose.
template <typename T>
inline std::array<T, 3> deform_t(std::array<T, 3> p, const ParamsT<T>& th) {
  taper_t(p, th.k, th.a[2]);
  bend_t(p, th.b, th.alpha);
  rotate_t(p, th.r);
  p[0] = p[0] + th.t[0];
  p[1] = p[1] + th.t[1];
  p[2] = p[2] + th.t[2];
  return p;
}

template <typename T>
inline std::array<T, 3> surface_point_t(const ParamsT<T>& th, double eta, double omega) {
  return deform_t(se_point_t(th.a, th.eps, eta, omega), th);
}

// --- checked public entry points --------------------------------------------

inline std::array<double, 3> superellipsoid_point(const std::array<double, 3>& a,
                                                  const std::array<double, 2>& eps,
                                                  double eta, double omega) {
  require(eps[0] >= 0.2 && eps[0] <= 1.0 && eps[1] >= 0.2 && eps[1] <= 1.0,
          "shape exponent out of range");
  require(eta >= -kPi / 2 - 1e-9 && eta <= kPi / 2 + 1e-9, "eta out of range");
  require(omega >= -kPi - 1e-9 && omega <= kPi + 1e-9, "omega out of range");
  return se_point_t<double>(a, eps, eta, omega);
}

inline std::array<double, 3> deform_and_pose(const std::array<double, 3>& p,
                                             const DsqParams& theta) {
  theta.validate();
  return deform_t<double>(p, as_values(theta));
}

// Inside-outside value of the undeformed superellipsoid; 1 on the surface.
inline double implicit_value(const std::array<double, 3>& a, const std::array<double, 2>& eps,
                             const std::array<double, 3>& p) {
  const double u = std::pow(std::abs(p[0] / a[0]), 2.0 / eps[1]) +
                   std::pow(std::abs(p[1] / a[1]), 2.0 / eps[1]);
  return std::pow(u, eps[1] / eps[0]) + std::pow(std::abs(p[2] / a[2]), 2.0 / eps[0]);
}

// --- surface mesh and sampling ----------------------------------------------

constexpr int kGridEta = 32;
constexpr int kGridOmega = 32;

struct SurfaceMesh {
  PointMatrix vertices;                       // deformed positions
  std::vector<std::array<int, 3>> faces;      // omega-wrapped grid triangles
  std::vector<std::array<std::array<double, 2>, 3>> face_params;  // unwrapped (eta, omega)
};

namespace detail {

struct GridTopology {
  std::vector<std::array<double, 2>> params;  // per-vertex (eta, omega)
  std::vector<std::array<int, 3>> faces;
  std::vector<std::array<std::array<double, 2>, 3>> face_params;
};

// Nodes sit half a cell off the closed-form kinks (eta = 0, +-pi/2; omega = 0,
// +-pi/2, pi), so no vertex ever evaluates a signed power at zero.
inline const GridTopology& grid_topology() {
  static const GridTopology topo = [] {
    GridTopology t;
    t.params.resize(kGridEta * kGridOmega);
    for (int i = 0; i < kGridEta; ++i) {
      const double eta = -kPi / 2 + (i + 0.5) * kPi / kGridEta;
      for (int j = 0; j < kGridOmega; ++j) {
        const double omega = -kPi + (j + 0.5) * 2.0 * kPi / kGridOmega;
        t.params[i * kGridOmega + j] = {eta, omega};
      }
    }
    for (int i = 0; i + 1 < kGridEta; ++i) {
      for (int j = 0; j < kGridOmega; ++j) {
        const int jn = (j + 1) % kGridOmega;
        const int v00 = i * kGridOmega + j;
        const int v10 = (i + 1) * kGridOmega + j;
        const int v11 = (i + 1) * kGridOmega + jn;
        const int v01 = i * kGridOmega + jn;
        t.faces.push_back({v00, v10, v11});
        t.faces.push_back({v00, v11, v01});
      }
    }
    t.face_params.resize(t.faces.size());
    for (size_t f = 0; f < t.faces.size(); ++f) {
      const auto base = t.params[t.faces[f][0]];
      for (int c = 0; c < 3; ++c) {
        auto pc = t.params[t.faces[f][c]];
        // unwrap omega across the seam so in-face interpolation stays local
        while (pc[1] - base[1] > kPi) pc[1] -= 2.0 * kPi;
        while (pc[1] - base[1] < -kPi) pc[1] += 2.0 * kPi;
        t.face_params[f][c] = pc;
      }
    }
    return t;
  }();
  return topo;
}

}  // namespace detail

inline SurfaceMesh build_surface_mesh(const DsqParams& theta) {
  const auto& topo = detail::grid_topology();
  SurfaceMesh mesh;
  mesh.faces = topo.faces;
  mesh.face_params = topo.face_params;
  mesh.vertices.resize(static_cast<int>(topo.params.size()), 3);
  const auto th = as_values(theta);
  for (size_t i = 0; i < topo.params.size(); ++i) {
    const auto p = surface_point_t(th, topo.params[i][0], topo.params[i][1]);
    mesh.vertices.row(static_cast<int>(i)) << p[0], p[1], p[2];
  }
  return mesh;
}

struct SampledPrimitive {
  PointMatrix points;
  int source = -1;  // primitive index within its abstraction, -1 if free-standing
};

namespace detail {

struct SampleDraw {
  int face;
  double u, v;  // barycentric weights for corners 1 and 2
};

// Area-weighted triangle selection over the deformed mesh plus uniform
// barycentric draws; zero-area triangles are removed from the distribution.
// Consumes exactly three uniforms per sample, in sample order.
inline std::vector<SampleDraw> draw_samples(const SurfaceMesh& mesh, int count, Rng& rng) {
  const int F = static_cast<int>(mesh.faces.size());
  std::vector<double> cum;
  std::vector<int> face_of;
  cum.reserve(F);
  face_of.reserve(F);
  double total = 0.0;
  for (int f = 0; f < F; ++f) {
    const auto& tri = mesh.faces[f];
    const Eigen::Vector3d e1 = mesh.vertices.row(tri[1]) - mesh.vertices.row(tri[0]);
    const Eigen::Vector3d e2 = mesh.vertices.row(tri[2]) - mesh.vertices.row(tri[0]);
    const double area = 0.5 * e1.cross(e2).norm();
    if (area > 1e-18) {
      total += area;
      cum.push_back(total);
      face_of.push_back(f);
    }
  }
  if (total <= 0.0) throw std::runtime_error("degenerate surface mesh: zero total area");
  std::vector<SampleDraw> draws(count);
  for (int s = 0; s < count; ++s) {
    const double target = rng.uniform() * total;
    const auto it = std::lower_bound(cum.begin(), cum.end(), target);
    const int idx = static_cast<int>(std::min<size_t>(it - cum.begin(), cum.size() - 1));
    double r1 = rng.uniform();
    double r2 = rng.uniform();
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    draws[s] = {face_of[idx], r1, r2};
  }
  return draws;
}

inline std::array<double, 2> draw_angles(const SurfaceMesh& mesh, const SampleDraw& d) {
  const auto& fp = mesh.face_params[d.face];
  const double w0 = 1.0 - d.u - d.v;
  return {w0 * fp[0][0] + d.u * fp[1][0] + d.v * fp[2][0],
          w0 * fp[0][1] + d.u * fp[1][1] + d.v * fp[2][1]};
}

}  // namespace detail

// Draws `count` surface points. Selection and barycentric coordinates are
// non-differentiated constants per draw; the point itself is the parametric
// chain evaluated at the interpolated angles, so samples lie exactly on the
// deformed surface.
inline SampledPrimitive sample_surface(const DsqParams& theta, int count, Rng& rng) {
  require(count >= 4, "sample count must be at least 4");
  theta.validate();
  const SurfaceMesh mesh = build_surface_mesh(theta);
  const auto draws = detail::draw_samples(mesh, count, rng);
  SampledPrimitive out;
  out.points.resize(count, 3);
  const auto th = as_values(theta);
  for (int s = 0; s < count; ++s) {
    const auto ang = detail::draw_angles(mesh, draws[s]);
    const auto p = surface_point_t(th, ang[0], ang[1]);
    out.points.row(s) << p[0], p[1], p[2];
  }
  return out;
}

using SampleJacobian = Eigen::Matrix<double, 3, 16>;

// Same draws and values as sample_surface (identical RNG consumption), plus
// the per-sample Jacobian with respect to the 16 constrained parameters.
inline SampledPrimitive sample_surface_with_jac(const DsqParams& theta, int count, Rng& rng,
                                                std::vector<SampleJacobian>& jac) {
  require(count >= 4, "sample count must be at least 4");
  const SurfaceMesh mesh = build_surface_mesh(theta);
  const auto draws = detail::draw_samples(mesh, count, rng);
  SampledPrimitive out;
  out.points.resize(count, 3);
  jac.assign(count, SampleJacobian::Zero());
  const auto th = seed_params(theta);
  for (int s = 0; s < count; ++s) {
    const auto ang = detail::draw_angles(mesh, draws[s]);
    const auto p = surface_point_t(th, ang[0], ang[1]);
    for (int c = 0; c < 3; ++c) {
      out.points(s, c) = p[c].v;
      for (int j = 0; j < 16; ++j) jac[s](c, j) = p[c].d[j];
    }
  }
  return out;
}

// OBJ export: one named object per kept primitive, faces 1-indexed with a
// running vertex offset. Coordinates are written at full precision so a
// re-read plus re-build reproduces them exactly.
inline void write_primitives_obj(std::ostream& os, const std::vector<DsqParams>& prims,
                                 const std::vector<bool>& keep) {
  require(keep.size() == prims.size(), "mask size mismatch");
  long offset = 0;
  char buf[128];
  for (size_t m = 0; m < prims.size(); ++m) {
    if (!keep[m]) continue;
    const SurfaceMesh mesh = build_surface_mesh(prims[m]);
    os << "o primitive_" << m << "\n";
    for (int i = 0; i < mesh.vertices.rows(); ++i) {
      std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", mesh.vertices(i, 0),
                    mesh.vertices(i, 1), mesh.vertices(i, 2));
      os << buf;
    }
    for (const auto& f : mesh.faces)
      os << "f " << f[0] + 1 + offset << " " << f[1] + 1 + offset << " " << f[2] + 1 + offset
         << "\n";
    offset += mesh.vertices.rows();
  }
}

}  // namespace sqparts
