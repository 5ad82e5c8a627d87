#include <cmath>

#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include "sqparts/sparse_ops.hpp"

using namespace sqparts;

TEST_CASE("sparsemax closed-form examples", "[sparse]") {
  VectorXd z(2);
  z << 2.0, 0.0;  // gap above one: exact one-hot
  VectorXd w = sparsemax(z);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 0.0);

  VectorXd z3(3);
  z3 << 1.2, 0.9, 0.1;
  VectorXd w3 = sparsemax(z3);
  CHECK(w3[0] == Catch::Approx(0.65).margin(1e-12));
  CHECK(w3[1] == Catch::Approx(0.35).margin(1e-12));
  CHECK(w3[2] == 0.0);
}

TEST_CASE("sparsemax is shift invariant and lives on the simplex", "[sparse]") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 + static_cast<int>(rng.below(15));
    VectorXd z(c);
    for (int i = 0; i < c; ++i) z[i] = rng.normal() * 2.0;
    const VectorXd w = sparsemax(z);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(w.sum() == Catch::Approx(1.0).margin(1e-12));
    const VectorXd shifted = sparsemax((z.array() + 3.71).matrix());
    CHECK((w - shifted).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sparsemax equals the bisection projection oracle", "[sparse]") {
  Rng rng(17);
  for (int c : {2, 6, 16, 200}) {
    for (int trial = 0; trial < 50; ++trial) {
      VectorXd z(c);
      for (int i = 0; i < c; ++i) z[i] = rng.normal() * 3.0;
      const VectorXd w = sparsemax(z);
      const VectorXd ref = oracles::simplex_project_bisect(z);
      CHECK((w - ref).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("sparsemax output is the closest simplex point", "[sparse]") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    VectorXd z(5);
    for (int i = 0; i < 5; ++i) z[i] = rng.normal() * 2.0;
    const VectorXd w = sparsemax(z);
    // random simplex point via normalized exponentials
    VectorXd p(5);
    for (int i = 0; i < 5; ++i) p[i] = -std::log(std::max(rng.uniform(), 1e-12));
    p /= p.sum();
    CHECK((w - z).squaredNorm() <= (p - z).squaredNorm() + 1e-12);
  }
}

TEST_CASE("scaling logits sharpens the sparsemax support", "[sparse]") {
  VectorXd z(3);
  z << 1.2, 0.9, 0.1;
  CHECK((sparsemax(0.1 * z).array() > 0.0).count() == 3);
  CHECK((sparsemax(z).array() > 0.0).count() == 2);
  CHECK((sparsemax(5.0 * z).array() > 0.0).count() == 1);
  CHECK(sparsemax(5.0 * z)[0] == 1.0);
}

TEST_CASE("softmax closed form, temperature, and overflow safety", "[sparse]") {
  VectorXd z(2);
  z << std::log(2.0), 0.0;
  const VectorXd p = softmax(z);
  CHECK(p[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
  CHECK(p[1] == Catch::Approx(1.0 / 3.0).margin(1e-12));

  VectorXd zt(3);
  zt << 0.4, -0.2, 1.1;
  const VectorXd warm = softmax(zt, 2.5);
  const VectorXd scaled = softmax((zt / 2.5).eval());
  CHECK((warm - scaled).cwiseAbs().maxCoeff() < 1e-12);

  VectorXd big(2);
  big << 1000.0, 999.0;
  const VectorXd pb = softmax(big);
  CHECK(pb.allFinite());
  VectorXd small(2);
  small << 1.0, 0.0;
  CHECK((pb - softmax(small)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("softmax backward matches finite differences", "[sparse]") {
  Rng rng(31);
  for (double temp : {1.0, 0.7}) {
    VectorXd z(6), v(6);
    for (int i = 0; i < 6; ++i) {
      z[i] = rng.normal();
      v[i] = rng.normal();
    }
    const VectorXd g = softmax_backward(softmax(z, temp), v, temp);
    for (int i = 0; i < 6; ++i) {
      const double h = 1e-6;
      VectorXd zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      const double fd = (softmax(zp, temp).dot(v) - softmax(zm, temp).dot(v)) / (2 * h);
      CHECK(g[i] == Catch::Approx(fd).margin(1e-7));
    }
  }
}

TEST_CASE("sparsemax backward matches finite differences off the support boundary",
          "[sparse]") {
  VectorXd z(3), v(3);
  z << 1.2, 0.9, 0.1;  // support {0, 1} with wide margins
  v << 0.7, -0.4, 0.9;
  const VectorXd g = sparsemax_backward(sparsemax(z), v);
  for (int i = 0; i < 3; ++i) {
    const double h = 1e-6;
    VectorXd zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (sparsemax(zp).dot(v) - sparsemax(zm).dot(v)) / (2 * h);
    CHECK(g[i] == Catch::Approx(fd).margin(1e-8));
  }
}

TEST_CASE("column wrappers apply per column", "[sparse]") {
  MatrixXd z(3, 2);
  z << 1.2, 0.0, 0.9, 0.0, 0.1, 5.0;
  const MatrixXd ws = sparsemax_columns(z);
  CHECK(ws(0, 0) == Catch::Approx(0.65).margin(1e-12));
  CHECK(ws(2, 1) == 1.0);
  const MatrixXd ps = softmax_columns(z);
  CHECK(ps.colwise().sum().isApproxToConstant(1.0, 1e-12));
}

TEST_CASE("gumbel draws are deterministic per seed and follow the logits", "[sparse]") {
  VectorXd peaked(4);
  peaked << 10.0, 0.0, 0.0, 0.0;
  Rng rng(1);
  int hits = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    const GumbelSample g = gumbel_onehot(peaked, 0.5, rng);
    REQUIRE(g.index >= 0);
    REQUIRE(g.index < 4);
    CHECK(g.soft.sum() == Catch::Approx(1.0).margin(1e-9));
    hits += g.index == 0 ? 1 : 0;
  }
  CHECK(static_cast<double>(hits) / trials > 0.99);

  VectorXd flat = VectorXd::Zero(4);
  Rng rng2(2);
  std::array<int, 4> counts{};
  for (int i = 0; i < trials; ++i) ++counts[gumbel_onehot(flat, 1.0, rng2).index];
  const double sigma = std::sqrt(0.25 * 0.75 / trials);
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(trials) - 0.25) < 3.5 * sigma);

  Rng ra(9), rb(9);
  for (int i = 0; i < 20; ++i) {
    const GumbelSample ga = gumbel_onehot(flat, 1.0, ra);
    const GumbelSample gb = gumbel_onehot(flat, 1.0, rb);
    CHECK(ga.index == gb.index);
    CHECK((ga.soft - gb.soft).cwiseAbs().maxCoeff() == 0.0);
  }

  CHECK_THROWS_AS(gumbel_onehot(flat, 0.0, ra), std::invalid_argument);
}
