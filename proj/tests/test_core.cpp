#include <cmath>
#include <set>
#include <stdexcept>

#include "catch_amalgamated.hpp"
#include "sqparts/core.hpp"
#include "sqparts/dual.hpp"

using namespace sqparts;

TEST_CASE("rng streams are deterministic and seed-sensitive", "[core]") {
  Rng a(42), b(42), c(43);
  bool same = true, differ = false;
  for (int i = 0; i < 64; ++i) {
    const std::uint64_t va = a.next_u64();
    same = same && va == b.next_u64();
    differ = differ || va != c.next_u64();
  }
  CHECK(same);
  CHECK(differ);
}

TEST_CASE("uniform stays in [0,1) and fills the range", "[core]") {
  Rng rng(7);
  double lo = 1.0, hi = 0.0, mean = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    mean += u;
  }
  mean /= n;
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
  CHECK(std::abs(mean - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST_CASE("normal draws match the first two moments", "[core]") {
  Rng rng(11);
  const int n = 20000;
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    REQUIRE(std::isfinite(x));
    mean += x;
    sq += x * x;
  }
  mean /= n;
  sq /= n;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(static_cast<double>(n)));
  CHECK(std::abs(sq - 1.0) < 5.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("below stays inside its bound and hits every residue", "[core]") {
  Rng rng(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t v = rng.below(7);
    REQUIRE(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("derived seeds differ from the base seed and from each other", "[core]") {
  const std::uint64_t base = 123456789;
  std::set<std::uint64_t> all;
  all.insert(base);
  for (std::uint64_t i = 0; i < 100; ++i) {
    const std::uint64_t s = derive_seed(base, i);
    CHECK(s != base);
    all.insert(s);
  }
  CHECK(all.size() == 101);  // no collisions among the first hundred streams
}

TEST_CASE("all_finite flags nan and inf", "[core]") {
  MatrixXd m = MatrixXd::Zero(3, 3);
  CHECK(all_finite(m));
  m(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(all_finite(m));
  m(1, 2) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(all_finite(m));
}

TEST_CASE("require throws invalid_argument carrying the message", "[core]") {
  CHECK_NOTHROW(require(true, "fine"));
  CHECK_THROWS_MATCHES(require(false, "broken precondition"), std::invalid_argument,
                       Catch::Matchers::Message("broken precondition"));
}

TEST_CASE("dual arithmetic propagates first derivatives exactly", "[core]") {
  // f(x, y) = sin(x) * exp(y) + sqrt(x) / y at (x, y) = (0.7, 1.3)
  const double x = 0.7, y = 1.3;
  Dual<2> dx = Dual<2>::seeded(x, 0);
  Dual<2> dy = Dual<2>::seeded(y, 1);
  Dual<2> f = sin(dx) * exp(dy) + sqrt(dx) / dy;
  const double fx = std::cos(x) * std::exp(y) + 0.5 / (std::sqrt(x) * y);
  const double fy = std::sin(x) * std::exp(y) - std::sqrt(x) / (y * y);
  CHECK(f.v == Catch::Approx(std::sin(x) * std::exp(y) + std::sqrt(x) / y).epsilon(1e-14));
  CHECK(f.d[0] == Catch::Approx(fx).epsilon(1e-12));
  CHECK(f.d[1] == Catch::Approx(fy).epsilon(1e-12));
}

TEST_CASE("signed power keeps sign and matches closed-form derivative", "[core]") {
  CHECK(spow(-0.5, 0.4) == Catch::Approx(-std::pow(0.5, 0.4)).epsilon(1e-14));
  CHECK(spow(0.0, 0.7) == 0.0);
  CHECK(spow(0.25, 0.5) == Catch::Approx(0.5).epsilon(1e-14));

  // d/dx spow(x, e) = e * |x|^(e-1) for x != 0
  for (double x : {0.3, -0.3, 0.9, -0.05}) {
    const double e = 0.6;
    Dual<1> d = spow(Dual<1>::seeded(x, 0), e);
    CHECK(d.d[0] == Catch::Approx(e * std::pow(std::abs(x), e - 1.0)).epsilon(1e-12));
  }

  // exponent derivative: d/de spow(x, e) = spow(x, e) * log|x| for x > 0
  {
    const double x = 0.4, e = 0.8;
    Dual<1> de = spow(Dual<1>(x), Dual<1>::seeded(e, 0));
    CHECK(de.d[0] == Catch::Approx(std::pow(x, e) * std::log(x)).epsilon(1e-12));
  }
}
