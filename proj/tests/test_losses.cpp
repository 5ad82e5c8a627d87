#include <cmath>

#include "catch_amalgamated.hpp"
#include "sqparts/losses.hpp"

using namespace sqparts;

namespace {

PointMatrix random_points(int n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  PointMatrix p(n, 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p(i, c) = scale * rng.uniform(-0.5, 0.5);
  return p;
}

}  // namespace

TEST_CASE("stage-dependent weights follow the schedule", "[losses]") {
  LossConfig cfg;  // lambdas (1, 0.3, 0.1, 0.01), cutoff first tenth
  const int total = 500;
  for (int step : {0, 30, 49}) {
    const EffectiveLambdas lam = effective_lambdas(cfg, step, total);
    CHECK(lam.wd == 0.6);       // doubled while cuboid-like
    CHECK(lam.compact == Catch::Approx(0.3).margin(1e-15));
    CHECK(lam.hd == 1.0);
    CHECK(lam.align == 0.01);
  }
  for (int step : {50, 99}) {  // boundary term off from ceil(0.1 * 500)
    const EffectiveLambdas lam = effective_lambdas(cfg, step, total);
    CHECK(lam.hd == 0.0);
    CHECK(lam.wd == 0.6);  // still cuboid-like until 20%
  }
  for (int step : {100, 199, 200, 499}) {  // later stages: plain weights
    const EffectiveLambdas lam = effective_lambdas(cfg, step, total);
    CHECK(lam.wd == 0.3);
    CHECK(lam.compact == 0.1);
    CHECK(lam.hd == 0.0);
  }
}

TEST_CASE("distance field records mins and argmins", "[losses]") {
  // one primitive, two samples; two cloud points
  PointMatrix samples(2, 3);
  samples << 0.0, 0.0, 0.0,
             1.0, 0.0, 0.0;
  PointMatrix cloud(2, 3);
  cloud << 0.1, 0.0, 0.0,
           0.8, 0.0, 0.0;
  DistanceField f;
  compute_distance_field(samples, 1, 2, cloud, f);
  CHECK(f.pp(0, 0) == Catch::Approx(0.1).margin(1e-12));
  CHECK(f.pp(0, 1) == Catch::Approx(0.2).margin(1e-12));
  CHECK(f.pp_arg(0, 0) == 0);
  CHECK(f.pp_arg(0, 1) == 1);
  CHECK(f.nn[0] == Catch::Approx(0.1).margin(1e-12));
  CHECK(f.nn_arg[0] == 0);
  CHECK(f.cov[0] == Catch::Approx(0.1).margin(1e-12));
  CHECK(f.cov_arg[0] == 0);
  CHECK(f.cov[1] == Catch::Approx(0.2).margin(1e-12));
  CHECK(f.cov_arg[1] == 1);
}

TEST_CASE("tied distances resolve to the lowest index", "[losses]") {
  PointMatrix samples(2, 3);
  samples << 1.0, 0.0, 0.0,
             -1.0, 0.0, 0.0;  // equidistant from the origin
  PointMatrix cloud(1, 3);
  cloud.setZero();
  DistanceField f;
  compute_distance_field(samples, 1, 2, cloud, f);
  CHECK(f.pp_arg(0, 0) == 0);
  CHECK(f.nn_arg[0] == 0);
}

TEST_CASE("reconstruction value on singletons is the plain distance", "[losses]") {
  PointMatrix samples(1, 3), cloud(1, 3);
  samples << 0.37, 0.0, 0.0;
  cloud.setZero();
  DistanceField f;
  compute_distance_field(samples, 1, 1, cloud, f);
  CHECK(recon_value(f) == Catch::Approx(0.37).margin(1e-12));
}

TEST_CASE("reconstruction scales linearly with the scene", "[losses]") {
  const PointMatrix samples = random_points(12, 1);
  const PointMatrix cloud = random_points(9, 2);
  DistanceField f, f2;
  compute_distance_field(samples, 3, 4, cloud, f);
  compute_distance_field((samples * 2.0).eval(), 3, 4, (cloud * 2.0).eval(), f2);
  CHECK(recon_value(f2) == Catch::Approx(2.0 * recon_value(f)).epsilon(1e-12));
  CHECK(hausdorff_value(f2) == Catch::Approx(2.0 * hausdorff_value(f)).epsilon(1e-12));
}

TEST_CASE("samples coinciding with the cloud zero the distance terms", "[losses]") {
  const PointMatrix cloud = random_points(8, 3);
  DistanceField f;
  compute_distance_field(cloud, 1, 8, cloud, f);
  CHECK(recon_value(f) < 1e-6);
  CHECK(hausdorff_value(f) < 1e-6);
  MatrixXd p_ins = MatrixXd::Constant(1, 8, 1.0);
  CHECK(anti_collapse_value(p_ins, f, f, 0.05) < 1e-6);
}

TEST_CASE("hausdorff is the worst of the two directions", "[losses]") {
  PointMatrix samples(1, 3), cloud(2, 3);
  samples.setZero();
  cloud << 0.0, 0.0, 0.0,
           1.0, 0.0, 0.0;
  DistanceField f;
  compute_distance_field(samples, 1, 1, cloud, f);
  CHECK(hausdorff_value(f) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("compactness closed forms", "[losses]") {
  for (int m : {2, 4, 16}) {
    const MatrixXd uniform = MatrixXd::Constant(m, 10, 1.0 / m);
    CHECK(compactness_loss(uniform, 0.01) ==
          Catch::Approx(1.0 / m + 0.01).margin(1e-12));
  }

  MatrixXd concentrated(2, 1);
  concentrated << 1.0, 0.0;
  const double expected = std::pow(0.5 * (std::sqrt(1.01) + std::sqrt(0.01)), 2);
  CHECK(compactness_loss(concentrated, 0.01) == Catch::Approx(expected).margin(1e-12));

  // square-root averaging is Schur-concave: uniform mass maximizes the loss
  const MatrixXd uniform2 = MatrixXd::Constant(2, 1, 0.5);
  CHECK(compactness_loss(uniform2, 0.01) > compactness_loss(concentrated, 0.01));
}

TEST_CASE("anti-collapse gates small distances to zero", "[losses]") {
  PointMatrix samples(2, 3), cloud(1, 3);
  cloud.setZero();
  samples << 0.03, 0.0, 0.0,   // below the gate
             0.2, 0.0, 0.0;    // above it
  DistanceField f;
  compute_distance_field(samples, 2, 1, cloud, f);

  MatrixXd below = MatrixXd::Zero(2, 1);
  below(0, 0) = 1.0;  // all mass on the gated-out primitive
  CHECK(anti_collapse_value(below, f, f, 0.05) == 0.0);

  MatrixXd above = MatrixXd::Zero(2, 1);
  above(1, 0) = 1.0;
  CHECK(anti_collapse_value(above, f, f, 0.05) == Catch::Approx(0.2).margin(1e-12));

  MatrixXd half = MatrixXd::Constant(2, 1, 0.5);
  CHECK(anti_collapse_value(half, f, f, 0.05) == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("alignment loss is the mean squared entry gap", "[losses]") {
  MatrixXd p_sem(2, 1), pseudo(2, 1);
  p_sem << 1.0, 0.0;
  pseudo << 0.0, 1.0;
  CHECK(alignment_loss(p_sem, pseudo) == Catch::Approx(1.0).margin(1e-12));
  CHECK(alignment_loss(p_sem, p_sem) == 0.0);

  // swapping rows of both operands together changes nothing
  MatrixXd a(2, 3), b(2, 3);
  a << 0.3, 0.7, 0.5, 0.7, 0.3, 0.5;
  b << 0.6, 0.1, 0.4, 0.4, 0.9, 0.6;
  MatrixXd ar = a.colwise().reverse().eval();
  MatrixXd br = b.colwise().reverse().eval();
  CHECK(alignment_loss(a, b) == Catch::Approx(alignment_loss(ar, br)).margin(1e-15));
}

TEST_CASE("total loss composes its parts with the effective weights", "[losses]") {
  const PointMatrix samples_i = random_points(12, 4);
  const PointMatrix samples_s = random_points(12, 5);
  const PointMatrix cloud = random_points(10, 6);
  DistanceField fi, fs;
  compute_distance_field(samples_i, 3, 4, cloud, fi);
  compute_distance_field(samples_s, 3, 4, cloud, fs);
  Rng rng(7);
  MatrixXd logits_i(3, 10), logits_s(2, 10);
  for (int j = 0; j < 10; ++j) {
    for (int i = 0; i < 3; ++i) logits_i(i, j) = rng.normal();
    for (int i = 0; i < 2; ++i) logits_s(i, j) = rng.normal();
  }
  const MatrixXd p_ins = softmax_columns(logits_i);
  const MatrixXd p_sem = softmax_columns(logits_s);
  const MatrixXd p_pseudo = softmax_columns((logits_s * 0.5).eval());

  LossConfig cfg;
  const EffectiveLambdas lam = effective_lambdas(cfg, 10, 500);  // cuboid stage, hd active
  const LossBreakdown bd = total_loss_from_fields(fi, fs, p_ins, p_sem, p_pseudo, cfg, lam);

  CHECK(bd.recon ==
        Catch::Approx(0.5 * recon_value(fi) + 0.5 * recon_value(fs)).margin(1e-14));
  CHECK(bd.hd ==
        Catch::Approx(0.5 * hausdorff_value(fi) + 0.5 * hausdorff_value(fs)).margin(1e-14));
  CHECK(bd.wd == Catch::Approx(anti_collapse_value(p_ins, fi, fs, cfg.delta_wd)).margin(1e-14));
  CHECK(bd.compact == Catch::Approx(compactness_loss(p_ins, cfg.delta_c)).margin(1e-14));
  CHECK(bd.align == Catch::Approx(alignment_loss(p_sem, p_pseudo)).margin(1e-14));
  CHECK(bd.total ==
        Catch::Approx(bd.recon + 1.0 * bd.hd + 0.6 * bd.wd + 0.3 * bd.compact + 0.01 * bd.align)
            .margin(1e-12));

  // an anti-collapse value of one contributes exactly its doubled weight here
  CHECK(lam.wd * 1.0 == 0.6);

  // past the cutoff the boundary term stops contributing no matter its value
  const EffectiveLambdas late = effective_lambdas(cfg, 499, 500);
  const LossBreakdown bd2 = total_loss_from_fields(fi, fs, p_ins, p_sem, p_pseudo, cfg, late);
  CHECK(bd2.hd > 0.0);
  CHECK(bd2.total == Catch::Approx(bd2.recon + 0.3 * bd2.wd + 0.1 * bd2.compact +
                                   0.01 * bd2.align).margin(1e-12));
}

TEST_CASE("reconstruction adjoint matches finite differences", "[losses]") {
  const int m = 2, i_count = 3, n = 5;
  PointMatrix samples = random_points(m * i_count, 8);
  const PointMatrix cloud = random_points(n, 9);
  const double weight = 0.7;

  auto value = [&](const PointMatrix& s) {
    DistanceField f;
    compute_distance_field(s, m, i_count, cloud, f);
    return weight * recon_value(f);
  };
  DistanceField f;
  compute_distance_field(samples, m, i_count, cloud, f);
  PointMatrix grad = PointMatrix::Zero(m * i_count, 3);
  recon_backward(f, samples, cloud, weight, grad);

  const double h = 1e-6;
  for (long r = 0; r < samples.rows(); ++r)
    for (int c = 0; c < 3; ++c) {
      PointMatrix sp = samples, sm = samples;
      sp(r, c) += h;
      sm(r, c) -= h;
      CHECK(grad(r, c) == Catch::Approx((value(sp) - value(sm)) / (2 * h)).margin(1e-7));
    }
}

TEST_CASE("hausdorff adjoint moves exactly one sample", "[losses]") {
  const int m = 2, i_count = 3, n = 5;
  PointMatrix samples = random_points(m * i_count, 10);
  const PointMatrix cloud = random_points(n, 11);
  const double weight = 0.9;

  DistanceField f;
  compute_distance_field(samples, m, i_count, cloud, f);
  PointMatrix grad = PointMatrix::Zero(m * i_count, 3);
  hausdorff_backward(f, samples, cloud, weight, grad);

  int moved = 0;
  for (long r = 0; r < grad.rows(); ++r) moved += grad.row(r).cwiseAbs().maxCoeff() > 0 ? 1 : 0;
  CHECK(moved == 1);

  auto value = [&](const PointMatrix& s) {
    DistanceField ff;
    compute_distance_field(s, m, i_count, cloud, ff);
    return weight * hausdorff_value(ff);
  };
  const double h = 1e-6;
  for (long r = 0; r < samples.rows(); ++r)
    for (int c = 0; c < 3; ++c) {
      PointMatrix sp = samples, sm = samples;
      sp(r, c) += h;
      sm(r, c) -= h;
      CHECK(grad(r, c) == Catch::Approx((value(sp) - value(sm)) / (2 * h)).margin(1e-7));
    }
}

TEST_CASE("anti-collapse adjoint matches finite differences", "[losses]") {
  const int m = 2, i_count = 3, n = 4;
  PointMatrix samples_i = random_points(m * i_count, 12);
  PointMatrix samples_s = random_points(m * i_count, 13);
  const PointMatrix cloud = random_points(n, 14);
  Rng rng(15);
  MatrixXd p_ins(m, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < m; ++i) p_ins(i, j) = rng.uniform();
  const double delta = 0.05, weight = 0.6;

  auto value = [&](const PointMatrix& si, const PointMatrix& ss, const MatrixXd& p) {
    DistanceField fi, fs;
    compute_distance_field(si, m, i_count, cloud, fi);
    compute_distance_field(ss, m, i_count, cloud, fs);
    return weight * anti_collapse_value(p, fi, fs, delta);
  };

  DistanceField fi, fs;
  compute_distance_field(samples_i, m, i_count, cloud, fi);
  compute_distance_field(samples_s, m, i_count, cloud, fs);
  PointMatrix gi = PointMatrix::Zero(m * i_count, 3), gs = PointMatrix::Zero(m * i_count, 3);
  MatrixXd gp = MatrixXd::Zero(m, n);
  anti_collapse_backward(p_ins, fi, fs, samples_i, samples_s, cloud, delta, weight, gi, gs, gp);

  const double h = 1e-6;
  for (long r = 0; r < samples_i.rows(); ++r)
    for (int c = 0; c < 3; ++c) {
      PointMatrix sp = samples_i, sm = samples_i;
      sp(r, c) += h;
      sm(r, c) -= h;
      const double fd = (value(sp, samples_s, p_ins) - value(sm, samples_s, p_ins)) / (2 * h);
      CHECK(gi(r, c) == Catch::Approx(fd).margin(1e-7));
    }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      MatrixXd pp = p_ins, pm = p_ins;
      pp(i, j) += h;
      pm(i, j) -= h;
      const double fd = (value(samples_i, samples_s, pp) - value(samples_i, samples_s, pm)) /
                        (2 * h);
      CHECK(gp(i, j) == Catch::Approx(fd).margin(1e-7));
    }
}

TEST_CASE("compactness and alignment adjoints match finite differences", "[losses]") {
  Rng rng(16);
  const int m = 3, n = 6, s = 2;
  MatrixXd p_ins(m, n), p_sem(s, n), pseudo(s, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < m; ++i) p_ins(i, j) = rng.uniform();
    for (int i = 0; i < s; ++i) {
      p_sem(i, j) = rng.uniform();
      pseudo(i, j) = rng.uniform();
    }
  }
  MatrixXd gc = MatrixXd::Zero(m, n), ga = MatrixXd::Zero(s, n);
  compactness_backward(p_ins, 0.01, 0.4, gc);
  alignment_backward(p_sem, pseudo, 0.8, ga);

  const double h = 1e-6;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      MatrixXd pp = p_ins, pm = p_ins;
      pp(i, j) += h;
      pm(i, j) -= h;
      const double fd =
          0.4 * (compactness_loss(pp, 0.01) - compactness_loss(pm, 0.01)) / (2 * h);
      CHECK(gc(i, j) == Catch::Approx(fd).margin(1e-8));
    }
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < n; ++j) {
      MatrixXd pp = p_sem, pm = p_sem;
      pp(i, j) += h;
      pm(i, j) -= h;
      const double fd = 0.8 * (alignment_loss(pp, pseudo) - alignment_loss(pm, pseudo)) / (2 * h);
      CHECK(ga(i, j) == Catch::Approx(fd).margin(1e-8));
    }
}
