#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <unsupported/Eigen/MatrixFunctions>

#include "pertkit/core.hpp"
#include "pertkit/rng.hpp"
#include "test_util.hpp"

using namespace pertkit::core;
using pertkit::Rng;
using testutil::fd_jacobian;
using testutil::mat_rel_err;
using testutil::rel_err;

namespace {

// a fixed 2-d polynomial embedding used in several tests
SmoothMap poly2() {
  return explicit_map(
      2,
      [](const Vec& x) {
        Vec y(2);
        y[0] = 0.4 * x[0] + 0.05 * x[1] * x[1] + 0.02 * x[0] * x[0] * x[0];
        y[1] = 0.5 * x[1] - 0.03 * x[0] * x[1];
        return y;
      },
      [](const Vec& x) {
        Mat j(2, 2);
        j(0, 0) = 0.4 + 0.06 * x[0] * x[0];
        j(0, 1) = 0.1 * x[1];
        j(1, 0) = -0.03 * x[1];
        j(1, 1) = 0.5 - 0.03 * x[0];
        return j;
      });
}

}  // namespace

TEST_CASE("compose: identity and inverse cases") {
  SmoothMap f = poly2();
  SmoothMap idf = compose(identity(2), f);
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    Vec x = rng.annulus_point(2, 0.0, 1.0);
    CHECK((idf(x) - f(x)).norm() == doctest::Approx(0.0).epsilon(1e-15));
  }

  Mat a(2, 2);
  a << 0.3, 0.1, -0.2, 0.5;
  SmoothMap al = linear(a);
  SmoothMap round = compose(al, al.inverse());
  Vec x(2);
  x << 0.4, -0.7;
  CHECK((round(x) - x).norm() < 1e-14);
  CHECK((round.jacobian(x) - Mat::Identity(2, 2)).norm() < 1e-14);
}

TEST_CASE("compose: jacobian matches finite differences") {
  SmoothMap f = poly2();
  Mat rot(2, 2);
  rot << std::cos(0.6), -std::sin(0.6), std::sin(0.6), std::cos(0.6);
  SmoothMap g = compose(linear(Mat(0.7 * rot)), f);
  Rng rng(5);
  for (int i = 0; i < 25; ++i) {
    Vec x = rng.annulus_point(2, 0.1, 0.9);
    CHECK(mat_rel_err(g.jacobian(x), fd_jacobian(g, x)) < 1e-6);
  }
}

TEST_CASE("chain rule on random composites of depth <= 5") {
  Rng rng(77);
  for (int trial = 0; trial < 12; ++trial) {
    SmoothMap g = poly2();
    int depth = 1 + trial % 5;
    for (int k = 0; k < depth; ++k) {
      Mat a(2, 2);
      a << 0.5 + 0.1 * rng.uniform(), 0.1 * rng.uniform(), -0.1 * rng.uniform(),
          0.5 + 0.1 * rng.uniform();
      g = (k % 2 == 0) ? compose(linear(a), g) : compose(g, linear(a));
    }
    for (int i = 0; i < 5; ++i) {
      Vec x = rng.annulus_point(2, 0.1, 0.8);
      CHECK(mat_rel_err(g.jacobian(x), fd_jacobian(g, x)) < 1e-5);
    }
  }
}

TEST_CASE("orbit_jacobian: conformal and linear determinants") {
  ConformalLinear a(2, 0.6, {1.0});
  SmoothMap am = linear(a);
  Vec x(2);
  x << 0.8, 0.0;
  auto orbit = orbit_jacobian(am, x, 12);
  for (int n = 0; n <= 12; ++n) {
    CHECK(rel_err(std::exp(orbit[n].log_abs_det), std::pow(0.36, n)) < 1e-12);
    CHECK(rel_err(orbit[n].jac.determinant(), std::pow(0.36, n)) < 1e-10);
  }

  Mat b(2, 2);
  b << 0.5, 0.2, 0.0, 0.3;
  auto orbit_b = orbit_jacobian(linear(b), x, 10);
  for (int n = 0; n <= 10; ++n)
    CHECK(rel_err(std::exp(orbit_b[n].log_abs_det), std::pow(0.15, n)) < 1e-12);
}

TEST_CASE("orbit_jacobian: nonlinear contraction vs FD of the n-fold composition") {
  SmoothMap f = poly2();
  Vec x(2);
  x << 0.6, 0.4;
  auto orbit = orbit_jacobian(f, x, 20);
  for (int n : {1, 3, 7, 20}) {
    Mat fd = fd_jacobian(iterate_map(f, n), x, 1e-6);
    CHECK(rel_err(std::exp(orbit[n].log_abs_det), std::abs(fd.determinant())) < 1e-5);
  }
}

TEST_CASE("c1_distance basics") {
  SmoothMap f = poly2();
  auto grid = grid_ball(2, 9, 1.0);
  CHECK(c1_distance(f, f, grid) == 0.0);

  Mat a = 0.5 * Mat::Identity(2, 2);
  Mat b(2, 2);
  b << 0.4, 0.1, 0.0, 0.55;
  CHECK(rel_err(c1_distance(linear(a), linear(b), grid), op_norm(a - b)) < 1e-12);
  CHECK_THROWS(c1_distance(f, f, {}));
}

TEST_CASE("c1_distance: grid refinement stabilizes") {
  // Lipschitz-Jacobian test map whose distance to the identity peaks on a
  // radial plateau, so the coarse grid already certifies the sup.
  auto m = [](double s) { return 1.0 + 0.2 * smoothstep((s - 0.1) / 0.3) * smoothstep((0.9 - s) / 0.3); };
  auto dm = [m](double s) { return testutil::fd_deriv(m, s); };
  SmoothMap f = radial_map(Vec::Zero(2), m, dm);
  SmoothMap g = identity(2);
  double coarse = c1_distance(f, g, grid_ball(2, 16, 1.0));
  double fine = c1_distance(f, g, grid_ball(2, 256, 1.0));
  CHECK(fine >= coarse);
  CHECK((fine - coarse) / fine < 0.01);
}

TEST_CASE("glue_interpolate: trivial and region-wise equality") {
  BumpProfile prof(2.0);
  ConformalLinear c0(2, 0.5, {0.2}), c1(2, 0.5, {0.35}), c2(2, 0.5, {0.5});
  SmoothMap m0 = linear(c0), m1 = linear(c1), m2 = linear(c2);

  SmoothMap same = glue_interpolate({m0, m0}, {Shell(0.2, 0.4)}, prof);
  Rng rng(3);
  for (int i = 0; i < 30; ++i) {
    Vec x = rng.annulus_point(2, 0.05, 1.0);
    CHECK((same(x) - m0(x)).norm() < 1e-15);
  }

  SmoothMap psi = glue_interpolate({m0, m1, m2}, {Shell(0.1, 0.2), Shell(0.3, 0.6)}, prof);
  for (int i = 0; i < 20; ++i) {
    Vec in = rng.annulus_point(2, 0.01, 0.1);
    Vec mid = rng.annulus_point(2, 0.2, 0.3);
    Vec out = rng.annulus_point(2, 0.6, 1.0);
    CHECK((psi(in) - m0(in)).norm() < 1e-12);
    CHECK((psi(mid) - m1(mid)).norm() < 1e-12);
    CHECK((psi(out) - m2(out)).norm() < 1e-12);
  }
}

TEST_CASE("glue_interpolate: C1 bound (1 + 2*lambda/(lambda-1)) * xi") {
  // lambda = 2 -> constant 5
  double lambda = 2.0;
  BumpProfile prof(lambda);
  double eps0 = 0.05;
  double xi = eps0 / (1.0 + 2.0 * lambda / (lambda - 1.0));
  ConformalLinear f0(2, 0.5, {0.0});
  // rotate by an angle so that ||f1 - f0|| = xi exactly: for conformal maps
  // with equal ratio r and angle gap t, ||f1-f0|| = 2 r sin(t/2).
  double t = 2.0 * std::asin(xi / (2.0 * 0.5));
  ConformalLinear f1(2, 0.5, {t});
  CHECK(rel_err(op_norm(f1.matrix() - f0.matrix()), xi) < 1e-12);

  Shell s(0.25, 0.5);
  SmoothMap psi = glue_interpolate({linear(f0), linear(f1)}, {s}, prof);
  double measured = c1_distance(psi, linear(f0), grid_annulus(2, 160, 0.2, 0.6));
  CHECK(measured < eps0);
  CHECK_THROWS(glue_interpolate({linear(f0), linear(f1)}, {Shell(0.3, 0.5)}, prof));
}

TEST_CASE("flow_time_one: zero field and exponential field") {
  VectorField zero{2, [](const Vec& x) { return Vec(Vec::Zero(x.size())); },
                   [](const Vec& x) { return Mat(Mat::Zero(x.size(), x.size())); }};
  SmoothMap id1 = flow_time_one(zero, 1e-2);
  Vec x(2);
  x << 0.3, -0.2;
  CHECK((id1(x) - x).norm() < 1e-14);

  // X = ln(alpha) x d/dx on the line: time-one map is x -> alpha x
  double alpha = 0.37;
  VectorField xfield{1, [alpha](const Vec& p) { return Vec(std::log(alpha) * p); },
                     [alpha](const Vec&) {
                       Mat m(1, 1);
                       m << std::log(alpha);
                       return m;
                     }};
  SmoothMap fl = flow_time_one(xfield, 1e-3);
  Vec p(1);
  p << 0.8;
  CHECK(std::abs(fl(p)[0] - alpha * 0.8) < 1e-10);
  CHECK(std::abs(fl.jacobian(p)(0, 0) - alpha) < 1e-10);
}

TEST_CASE("flow error scales as O(step^4) against the matrix exponential") {
  Mat a(2, 2);
  a << -0.3, 1.1, -1.0, -0.2;
  VectorField lf{2, [a](const Vec& x) { return Vec(a * x); }, [a](const Vec&) { return a; }};
  Mat expa = a.exp();
  Vec x(2);
  x << 0.7, -0.4;
  Vec want = expa * x;

  double prev_err = -1.0;
  for (double step : {1e-1, 1e-2, 1e-3}) {
    double err = (flow_time_one(lf, step)(x) - want).norm();
    if (prev_err > 0) {
      double gain = prev_err / std::max(err, 1e-17);
      CHECK(gain > 2e3);  // one decade in step -> ~1e4 in error
    }
    prev_err = err;
  }
  CHECK_THROWS(flow_time_one(lf, 0.0));
}

TEST_CASE("conformal conjugation preserves C1 distance") {
  SmoothMap f = poly2();
  SmoothMap g = linear(Mat(0.45 * Mat::Identity(2, 2)));
  ConformalLinear c(2, 0.8, {0.9});
  SmoothMap cm = linear(c), cinv = cm.inverse();

  auto grid = grid_annulus(2, 40, 0.2, 0.9);
  std::vector<Vec> mapped;
  for (const Vec& p : grid) mapped.push_back(cm(p));

  double base = c1_distance(f, g, grid);
  double conj = c1_distance(compose(cm, compose(f, cinv)), compose(cm, compose(g, cinv)), mapped);
  CHECK(rel_err(conj, base) < 1e-10);
}

TEST_CASE("inverse displacement bound for near-identity maps") {
  // h = radial expansion bump: ||Dh - Id|| <= 1/2 => ||Dh^{-1} - Id|| <= 2 ||Dh - Id||
  for (double amp : {0.02, 0.08, 0.18}) {
    auto m = [amp](double s) { return 1.0 + amp * smoothstep(2.0 - s) * smoothstep(s); };
    auto dm = [amp](double s) {
      return amp * (-smoothstep_deriv(2.0 - s) * smoothstep(s) +
                    smoothstep(2.0 - s) * smoothstep_deriv(s));
    };
    SmoothMap h = radial_map(Vec::Zero(2), m, dm);
    SmoothMap hinv = h.inverse();
    auto grid = grid_ball(2, 41, 2.5);
    double fwd = c1_to_identity(h, grid);
    REQUIRE(fwd <= 0.5 + 1e-9);
    std::vector<Vec> igrid;
    for (const Vec& p : grid) igrid.push_back(h(p));
    double bwd = c1_to_identity(hinv, igrid);
    CHECK(bwd <= 2.0 * fwd + 1e-9);
  }
}

TEST_CASE("radial map: exact jacobian and inverse round trip") {
  auto m = [](double s) { return 0.8 + 0.2 * smoothstep(s - 0.5); };
  auto dm = [](double s) { return 0.2 * smoothstep_deriv(s - 0.5); };
  Vec c(2);
  c << 0.1, -0.2;
  SmoothMap r = radial_map(c, m, dm);
  SmoothMap rinv = r.inverse();
  Rng rng(9);
  for (int i = 0; i < 30; ++i) {
    Vec x = c + rng.annulus_point(2, 0.0, 2.0);
    CHECK(mat_rel_err(r.jacobian(x), fd_jacobian(r, x)) < 1e-6);
    CHECK((rinv(r(x)) - x).norm() < 1e-12);
    CHECK((r.jacobian(x) * rinv.jacobian(r(x)) - Mat::Identity(2, 2)).norm() < 1e-11);
  }
}

TEST_CASE("bump profile bound |rho'| <= 2/(lambda-1)") {
  for (double lambda : {1.5, 2.0, 4.0}) {
    BumpProfile prof(lambda);
    double bound = 2.0 / (lambda - 1.0);
    for (int i = 0; i <= 20000; ++i) {
      double t = i * (lambda + 1.0) / 20000.0;
      CHECK(std::abs(prof.drho(t)) <= bound + 1e-12);
    }
    CHECK(prof.rho(1.0) == 0.0);
    CHECK(prof.rho(lambda) == 1.0);
  }
  CHECK_THROWS(BumpProfile(1.0));
}

TEST_CASE("product and skew nodes have exact jacobians") {
  SmoothMap fe = linear(Mat(0.6 * Mat::Identity(1, 1)));
  ConformalLinear cf(2, 0.4, {0.3});
  SmoothMap prod = product_map(fe, linear(cf));
  Rng rng(21);
  for (int i = 0; i < 10; ++i) {
    Vec x = rng.annulus_point(3, 0.2, 1.0);
    CHECK(mat_rel_err(prod.jacobian(x), fd_jacobian(prod, x)) < 1e-6);
  }

  auto m = [](double s) { return 1.0 + 0.1 * smoothstep(1.5 - s) * smoothstep(s - 0.2); };
  auto dm = [](double s) {
    return 0.1 * (-smoothstep_deriv(1.5 - s) * smoothstep(s - 0.2) +
                  smoothstep(1.5 - s) * smoothstep_deriv(s - 0.2));
  };
  SmoothMap psi = radial_map(Vec::Zero(2), m, dm);
  Vec u0(1);
  u0 << 0.3;
  SmoothMap skew = skew_bump(u0, 0.1, 0.2, psi, 1, 2);
  SmoothMap skinv = skew.inverse();
  for (int i = 0; i < 20; ++i) {
    Vec x = rng.annulus_point(3, 0.1, 1.2);
    CHECK(mat_rel_err(skew.jacobian(x), fd_jacobian(skew, x)) < 1e-6);
    CHECK((skinv(skew(x)) - x).norm() < 1e-11);
  }
}
