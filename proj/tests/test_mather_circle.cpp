#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pertkit/mather_circle.hpp"
#include "pertkit/rng.hpp"
#include "test_util.hpp"

using namespace pertkit::mather;
using pertkit::Rng;
using testutil::rel_err;

namespace {

constexpr double kTwoPi = 6.283185307179586;

// the canonical flow time-one map: pull the unit translation back through phi
IntervalDiffeo flow_interval_map(double alpha, double beta) {
  auto phi = std::make_shared<PhiChart>(alpha, beta);
  IntervalDiffeo f;
  f.alpha = alpha;
  f.beta = beta;
  f.r0 = phi->x_minus() / alpha * 0.999;
  f.r1 = (1.0 - phi->x_plus()) * 0.999;
  f.value = [phi, alpha, beta](double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    if (x <= phi->x_minus() / alpha) return alpha * x;
    if (x >= phi->x_plus()) return 1.0 + beta * (x - 1.0);
    return phi->inv(phi->value(x) + 1.0);
  };
  f.deriv = [phi, alpha, beta](double x) {
    if (x <= phi->x_minus() / alpha) return alpha;
    if (x >= phi->x_plus()) return beta;
    return phi->deriv(x) / phi->deriv(phi->inv(phi->value(x) + 1.0));
  };
  return f;
}

// a smooth bump factor on the circle supported in (lo, lo+len)
CircleFactor bump_factor(double amp, double lo, double len) {
  auto b = [lo, len](double x) {
    double t = x - lo - std::floor(x - lo);
    if (t >= len) return 0.0;
    double s = t / len;
    return pertkit::core::smoothstep(2.0 * s) * pertkit::core::smoothstep(2.0 * (1.0 - s));
  };
  auto db = [lo, len](double x) {
    double t = x - lo - std::floor(x - lo);
    if (t >= len) return 0.0;
    double s = t / len;
    return (pertkit::core::smoothstep_deriv(2.0 * s) * 2.0 *
                pertkit::core::smoothstep(2.0 * (1.0 - s)) -
            pertkit::core::smoothstep(2.0 * s) * pertkit::core::smoothstep_deriv(2.0 * (1.0 - s)) *
                2.0) /
           len;
  };
  CircleFactor out;
  out.map = CircleMap::from_lift([amp, b](double x) { return x + amp * b(x); },
                                 [amp, db](double x) { return 1.0 + amp * db(x); });
  out.support_lo = lo;
  out.support_len = len;
  return out;
}

double anchor_for(const CircleFactor& psi, double base) {
  // smallest anchor >= base whose fractional part misses the support
  double gap_mid = psi.support_lo + psi.support_len + 0.5 * (1.0 - psi.support_len);
  gap_mid -= std::floor(gap_mid);
  double a = std::floor(base) + gap_mid;
  while (a < base) a += 1.0;
  return a;
}

IntervalDiffeo compose_with_factor(const IntervalDiffeo& f, const IntervalDiffeo& h) {
  IntervalDiffeo g;
  g.value = [f, h](double x) { return f.value(h.value(x)); };
  g.deriv = [f, h](double x) { return f.deriv(h.value(x)) * h.deriv(x); };
  g.alpha = f.alpha;
  g.beta = f.beta;
  g.r0 = std::min(f.r0, h.r0 * 2.0);
  g.r1 = std::min(f.r1, h.r1 * 2.0);
  return g;
}

double circle_residual(const CircleMap& a, const CircleMap& b, int grid = 512) {
  // sup distance of the lifts modulo the integer branch
  double shift = std::round(a.lift(0.25) - b.lift(0.25));
  double worst = 0.0;
  for (int i = 0; i < grid; ++i) {
    double x = static_cast<double>(i) / grid;
    worst = std::max(worst, std::abs(a.lift(x) - b.lift(x) - shift));
  }
  return worst;
}

}  // namespace

TEST_CASE("conjugate_to_line: flow map gives the exact translation") {
  IntervalDiffeo f = flow_interval_map(2.0, 0.5);
  f.validate();
  LineConjugate lc = conjugate_to_line(f);
  CHECK(lc.k_f < lc.phi->k0() + 1.2);
  for (int i = 0; i <= 1000; ++i) {
    double x = -8.0 + 16.0 * i / 1000.0;
    CHECK(std::abs(lc.theta(x) - (x + 1.0)) < 1e-10);
    CHECK(lc.theta(x) > x);
  }
}

TEST_CASE("conjugate_to_line: translation identity outside [-K_f, K_f]") {
  IntervalDiffeo f = flow_interval_map(1.7, 0.45);
  CircleFactor psi = bump_factor(0.04, 0.15, 0.45);
  LineConjugate lc0 = conjugate_to_line(f);
  IntervalDiffeo g = compose_with_factor(f, lift_factor(lc0, psi, anchor_for(psi, lc0.k_f + 0.5)));
  LineConjugate lc = conjugate_to_line(g);
  for (int i = 0; i <= 300; ++i) {
    double t = lc.k_f + 3.0 * i / 300.0;
    CHECK(std::abs(lc.theta(t) - (t + 1.0)) < 1e-10);
    CHECK(std::abs(lc.theta(-t) - (-t + 1.0)) < 1e-10);
  }
  for (int i = 1; i <= 1000; ++i) {
    double x = -6.0 + 12.0 * i / 1000.0;
    CHECK(lc.theta(x) > x);
  }
}

TEST_CASE("mather invariant: flow map is a rotation, composition law holds") {
  IntervalDiffeo f = flow_interval_map(2.0, 0.5);
  CircleMap delta_f = mather_invariant_circle(f);
  CHECK(rotation_defect(delta_f).defect < 1e-8);

  // one mid-interval factor composes into the invariant
  LineConjugate lc = conjugate_to_line(f);
  CircleFactor psi = bump_factor(0.05, 0.2, 0.4);
  IntervalDiffeo h = lift_factor(lc, psi, anchor_for(psi, lc.k_f + 0.5));
  IntervalDiffeo g = compose_with_factor(f, h);
  CircleMap delta_g = mather_invariant_circle(g);
  CircleMap expect = compose(psi.map, delta_f);
  CHECK(circle_residual(delta_g, expect) < 1e-6);

  // ordered product law for disjointly supported factors
  CircleFactor psi2 = bump_factor(-0.03, 0.55, 0.3);
  IntervalDiffeo h2 = lift_factor(lc, psi2, anchor_for(psi2, lc.k_f + 2.5));
  IntervalDiffeo g2 = compose_with_factor(compose_with_factor(f, h), h2);
  CircleMap expect2 = compose(psi2.map, compose(psi.map, delta_f));
  CHECK(circle_residual(mather_invariant_circle(g2), expect2) < 1e-5);
}

TEST_CASE("mather invariant: stable under a deeper iteration start") {
  IntervalDiffeo f = flow_interval_map(1.9, 0.55);
  LineConjugate lc = conjugate_to_line(f);
  CircleFactor psi = bump_factor(0.05, 0.3, 0.35);
  IntervalDiffeo g = compose_with_factor(f, lift_factor(lc, psi, anchor_for(psi, lc.k_f + 0.5)));
  LineConjugate lg = conjugate_to_line(g);
  CircleMap d1 = mather_invariant_circle(lg);
  LineConjugate lg_deep = lg;
  lg_deep.k_f += 2.0;
  CircleMap d2 = mather_invariant_circle(lg_deep);
  CHECK(circle_residual(d1, d2, 512) < 1e-8);
}

TEST_CASE("rotation_defect: closed forms and rotation invariance") {
  CHECK(rotation_defect(CircleMap::rotation(0.3)).defect == doctest::Approx(0.0).epsilon(1e-14));

  CircleMap wobble = CircleMap::from_lift(
      [](double x) { return x + 0.1 * std::sin(kTwoPi * x) / kTwoPi; },
      [](double x) { return 1.0 + 0.1 * std::cos(kTwoPi * x); });
  RotationDefect rd = rotation_defect(wobble, 4096);
  CHECK(rel_err(rd.defect, 0.1 / kTwoPi) < 1e-6);
  CHECK(rel_err(rd.deriv_defect, 0.1) < 1e-6);

  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    double c1 = rng.uniform(), c2 = rng.uniform();
    CircleMap conj = compose(CircleMap::rotation(c1), compose(wobble, CircleMap::rotation(c2)));
    CHECK(rel_err(rotation_defect(conj, 4096).defect, rd.defect) < 1e-10);
  }
}

TEST_CASE("fragmentation: identity, near-identity bump, rotation") {
  CHECK(fragment_near_identity_circle(CircleMap(), 0.1).empty());

  CircleFactor bump = bump_factor(0.02, 0.3, 0.35);
  auto factors = fragment_near_identity_circle(bump.map, 0.25);
  CHECK(!factors.empty());
  CHECK(factors.size() <= 6);
  CircleMap prod;
  for (const auto& fac : factors) {
    prod = compose(fac.map, prod);
    CHECK(fac.support_len <= 0.5 + 1e-9);
  }
  CHECK(circle_residual(prod, bump.map, 700) < 1e-10);

  double budget = 0.08;
  auto rot_factors = fragment_near_identity_circle(CircleMap::rotation(0.3), budget);
  CHECK(!rot_factors.empty());
  CHECK(static_cast<int>(rot_factors.size()) <=
        static_cast<int>(std::ceil(0.3 * 250.0 / budget)));
  CircleMap rot_prod;
  for (const auto& fac : rot_factors) {
    rot_prod = compose(fac.map, rot_prod);
    double sup = 0.0;
    for (int i = 0; i < 256; ++i)
      sup = std::max(sup, std::abs(fac.map.dlift(i / 256.0) - 1.0));
    CHECK(sup < budget);
  }
  rot_prod = rot_prod.snapshot(4096);
  CHECK(circle_residual(rot_prod, CircleMap::rotation(0.3), 700) < 1e-8);
}

TEST_CASE("lift_factor: shift invariance and lift-norm identity") {
  IntervalDiffeo f = flow_interval_map(2.0, 0.5);
  LineConjugate lc = conjugate_to_line(f);
  CircleFactor psi = bump_factor(0.04, 0.1, 0.45);

  // the lifted norm equals the circle norm
  double sup_circle = 0.0;
  for (int i = 0; i < 4096; ++i)
    sup_circle = std::max(sup_circle, std::abs(psi.map.dlift(i / 4096.0) - 1.0));

  auto c1_size = [&](double a) {
    IntervalDiffeo h = lift_factor(lc, psi, a);
    double sup = 0.0;
    for (int i = 0; i <= 6000; ++i) {
      double x = lc.phi->inv(a + static_cast<double>(i) / 6000.0);
      sup = std::max(sup, std::abs(h.deriv(x) - 1.0));
    }
    return sup;
  };
  double a0 = anchor_for(psi, lc.k_f + 0.5);
  double base = c1_size(a0);
  double shifted = c1_size(a0 + 3.0);
  CHECK(rel_err(shifted, base) < 1e-9);

  // sup |D psi_a - 1| equals sup |D psi - 1| by construction of the lift
  double a = anchor_for(psi, lc.k_f + 0.5), sup_lift = 0.0;
  for (int i = 0; i < 4096; ++i) {
    double y = std::ceil(a) + static_cast<double>(i) / 4096.0;  // same circle samples
    sup_lift = std::max(sup_lift, std::abs(psi.map.dlift(y) - 1.0));
  }
  CHECK(rel_err(sup_lift, sup_circle) < 1e-12);

  CHECK_THROWS(lift_factor(lc, psi, std::ceil(lc.k_f) + psi.support_lo + 0.5 * psi.support_len));
}

TEST_CASE("kill_mather_circle: flow map untouched, bump factor killed, idempotent") {
  IntervalDiffeo flow = flow_interval_map(2.0, 0.5);
  auto [same, rep0] = kill_mather_circle(flow, 0.2);
  CHECK(rep0.factor_count == 0);
  CHECK(rep0.defect_before < 1e-9);

  LineConjugate lc = conjugate_to_line(flow);
  CircleFactor psi = bump_factor(0.05, 0.1, 0.8);
  IntervalDiffeo f = compose_with_factor(flow, lift_factor(lc, psi, anchor_for(psi, lc.k_f + 0.5)));
  auto [g, rep] = kill_mather_circle(f, 0.2);
  CHECK(rep.defect_before > 1e-2);
  CHECK(rep.defect_after < 1e-5);
  CHECK(rep.c1_distance < 0.2);
  CHECK(rep.factor_count > 0);
  for (size_t i = 1; i < rep.anchors.size(); ++i)
    CHECK(rep.anchors[i] > rep.anchors[i - 1] + 1.0);

  auto [g2, rep2] = kill_mather_circle(g, 0.2);
  CHECK(rep2.defect_before < 1e-5);
  CHECK(rep2.factor_count == 0);
}

TEST_CASE("reconstruct_field: flow case, killed case, well-definedness") {
  IntervalDiffeo flow = flow_interval_map(2.0, 0.5);
  LineConjugate lc = conjugate_to_line(flow);

  // the flow map's field is 1/phi'
  pertkit::core::VectorField x0 = reconstruct_field(flow, 1e-6);
  for (int i = 1; i < 60; ++i) {
    double y = static_cast<double>(i) / 60.0;
    pertkit::core::Vec p(1);
    p[0] = y;
    CHECK(rel_err(x0.value(p)[0], 1.0 / lc.phi->deriv(y)) < 1e-6);
  }

  // Y is independent of the admissible iterate count
  for (double x : {-2.0, 0.4, 1.7}) {
    int n = static_cast<int>(std::ceil(lc.k_f - x)) + 1;
    CHECK(rel_err(reconstruct_y(lc, x, n), reconstruct_y(lc, x, n + 2)) < 1e-9);
  }

  // killed map: flow of the reconstructed field reproduces it
  CircleFactor psi = bump_factor(0.05, 0.1, 0.8);
  IntervalDiffeo f = compose_with_factor(flow, lift_factor(lc, psi, anchor_for(psi, lc.k_f + 0.5)));
  auto [g, rep] = kill_mather_circle(f, 0.2);
  pertkit::core::VectorField xg = reconstruct_field(g, 1e-4);

  // tabulate the field, then integrate
  const int nt = 16384;
  std::vector<double> tab(nt + 1);
  for (int i = 0; i <= nt; ++i) {
    pertkit::core::Vec p(1);
    p[0] = static_cast<double>(i) / nt;
    tab[i] = xg.value(p)[0];
  }
  auto xt = [&](double y) {
    if (y <= 0.0 || y >= 1.0) return 0.0;
    double t = y * nt;
    int j = std::min(static_cast<int>(t), nt - 1);
    double s = t - j;
    return tab[j] * (1.0 - s) + tab[j + 1] * s;
  };
  auto flow_one = [&](double y) {
    const int steps = 1000;
    double h = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
      double k1 = xt(y);
      double k2 = xt(y + 0.5 * h * k1);
      double k3 = xt(y + 0.5 * h * k2);
      double k4 = xt(y + h * k3);
      y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return y;
  };
  double sup = 0.0;
  for (int i = 1; i < 512; ++i) {
    double y = static_cast<double>(i) / 512.0;
    sup = std::max(sup, std::abs(flow_one(y) - g.value(y)));
  }
  CHECK(sup < 1e-4);
}

namespace {

CircleDiffeo two_fixed_point_diffeo(double amp) {
  return CircleDiffeo{
      [amp](double x) { return x + amp * std::sin(kTwoPi * x) / kTwoPi; },
      [amp](double x) { return 1.0 + amp * std::cos(kTwoPi * x); }, 1};
}

}  // namespace

TEST_CASE("find_periodic_orbits and prepare_circle") {
  CircleDiffeo f = two_fixed_point_diffeo(0.35);
  PeriodicData pd = find_periodic_orbits(f);
  REQUIRE(pd.points.size() == 2);
  CHECK(pd.orbit_period == 1);
  CHECK(pd.segment_period == 1);
  CHECK(pd.multipliers[0] == doctest::Approx(1.35).epsilon(1e-6));
  CHECK(pd.multipliers[1] == doctest::Approx(0.65).epsilon(1e-6));

  PreparedCircle prep = prepare_circle(f, 0.1);
  // affine near each periodic point, periodic orbit count preserved
  PeriodicData pd2 = find_periodic_orbits(prep.map);
  CHECK(pd2.points.size() == pd.points.size());
  for (double p : pd2.points) {
    double r = prep.germ_radius;
    double mid = prep.map.lift(p + r / 2.0);
    double expect = prep.map.lift(p) + prep.map.dlift(p) * r / 2.0;
    CHECK(std::abs(mid - expect) < 1e-12);
  }
  double c1 = 0.0;
  for (int i = 0; i < 4096; ++i) {
    double x = static_cast<double>(i) / 4096.0;
    c1 = std::max(c1, std::abs(prep.map.dlift(x) - f.dlift(x)));
  }
  CHECK(c1 < 0.1);
}

TEST_CASE("embed_circle_diffeo: two fixed points (k=1)") {
  CircleDiffeo f = two_fixed_point_diffeo(0.3);
  PreparedCircle prep = prepare_circle(f, 0.08);
  CircleFlowEmbed emb = embed_circle_diffeo(prep, 0.3);
  CHECK(emb.k == 1);
  CHECK(emb.c1_distance < 0.35);

  // invariance of the field under f_n
  double worst = 0.0;
  for (int i = 0; i < 512; ++i) {
    double x = static_cast<double>(i) / 512.0;
    double lhs = emb.field(emb.f_n.lift(x));
    double rhs = emb.f_n.dlift(x) * emb.field(x);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  CHECK(worst < 1e-5);

  // one-sided slopes at the periodic points match the return-map exponent
  for (size_t i = 0; i < prep.periodic.points.size(); ++i) {
    double p = prep.periodic.points[i];
    double want = std::log(std::abs(emb.f_n.dlift(p)));
    for (double t : {1e-5, -1e-5}) {
      double slope = emb.field(p + t) / t;
      CHECK(rel_err(slope, want) < 1e-4);
    }
  }

  // f_n^k is the time-one map of the field
  const int nt = 16384;
  std::vector<double> tab(nt);
  for (int i = 0; i < nt; ++i) tab[i] = emb.field(static_cast<double>(i) / nt);
  auto xt = [&](double y) {
    double t = (y - std::floor(y)) * nt;
    int j = std::min(static_cast<int>(t), nt - 1);
    double s = t - j;
    return tab[j] * (1.0 - s) + tab[(j + 1) % nt] * s;
  };
  auto flow_one = [&](double y) {
    const int steps = 1000;
    double h = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
      double k1 = xt(y);
      double k2 = xt(y + 0.5 * h * k1);
      double k3 = xt(y + 0.5 * h * k2);
      double k4 = xt(y + h * k3);
      y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return y;
  };
  double sup = 0.0;
  for (int i = 0; i < 256; ++i) {
    double x = static_cast<double>(i) / 256.0;
    double target = emb.f_n.lift(x);  // k = 1
    double flowed = flow_one(x);
    sup = std::max(sup, std::abs(flowed - target + std::round(target - flowed)));
  }
  CHECK(sup < 1e-5);
}

TEST_CASE("embed_circle_diffeo: orientation-reversing (k=2)") {
  CircleDiffeo f{
      [](double x) { return -x + 0.25 * std::sin(kTwoPi * x) / kTwoPi; },
      [](double x) { return -1.0 + 0.25 * std::cos(kTwoPi * x); }, -1};
  PreparedCircle prep = prepare_circle(f, 0.1);
  CHECK(prep.periodic.segment_period == 2);
  CircleFlowEmbed emb = embed_circle_diffeo(prep, 0.4);
  CHECK(emb.k == 2);

  double worst = 0.0;
  for (int i = 0; i < 512; ++i) {
    double x = static_cast<double>(i) / 512.0;
    double lhs = emb.field(emb.f_n.lift(x));
    double rhs = emb.f_n.dlift(x) * emb.field(x);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  CHECK(worst < 1e-6 * 50);  // 1e-6 scale with headroom for the chart factors
}
