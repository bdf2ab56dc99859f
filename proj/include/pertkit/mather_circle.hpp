#pragma once

// Mather invariants of interval diffeomorphisms: the line conjugacy, the
// circle-valued invariant, its vanishing by composition with lifted circle
// factors, reconstruction of the invariant vector field, and the gluing of
// these constructions around the circle.

#include <functional>
#include <memory>
#include <vector>

#include "pertkit/core.hpp"

namespace pertkit::mather {

// ---------------------------------------------------------------------------
// circle maps (degree-1 lifts)

class CircleMap {
 public:
  CircleMap();  // identity
  static CircleMap rotation(double c);
  static CircleMap from_lift(std::function<double(double)> lift,
                             std::function<double(double)> dlift);
  // monotone cubic interpolation of lift values at i/n, i = 0..n-1
  // (F(1) = F(0) + 1 is implied)
  static CircleMap from_grid(std::vector<double> lift_values);

  double lift(double x) const;
  double dlift(double x) const;
  double displacement(double x) const { return lift(x) - x; }  // periodic
  CircleMap inverse() const;
  CircleMap snapshot(int n = 2048) const;  // grid-backed copy

  struct Impl;
  std::shared_ptr<const Impl> impl;
};

CircleMap compose(const CircleMap& a, const CircleMap& b);  // a after b

struct RotationDefect {
  double defect = 0;        // min over c of sup |Delta(x) - x - c|
  double offset = 0;        // the minimizing c
  double deriv_defect = 0;  // sup |Delta' - 1|
};
RotationDefect rotation_defect(const CircleMap& delta, int grid = 2048);

// ---------------------------------------------------------------------------
// interval diffeomorphisms in D_{alpha,beta}

// Orientation-preserving diffeo of [0,1], fixed points exactly {0,1},
// f(x) = alpha x on [0, r0] and f(x) = 1 + beta (x-1) on [1-r1, 1].
struct IntervalDiffeo {
  std::function<double(double)> value;
  std::function<double(double)> deriv;
  double alpha = 2.0;  // germ ratio at 0, > 1
  double beta = 0.5;   // germ ratio at 1, in (0,1)
  double r0 = 0.1, r1 = 0.1;

  double operator()(double x) const { return value(x); }
  core::SmoothMap as_map() const;  // dim-1 SmoothMap view

  // grid sanity: fixed points only at the ends, f(x) > x inside, germs exact
  void validate(int grid = 4096) const;
};

// The chart phi: (0,1) -> R with phi = ln(x)/ln(alpha) below x_minus and
// phi = ln(1-x)/ln(beta) above x_plus; smooth monotone blend between.
class PhiChart {
 public:
  PhiChart(double alpha, double beta, double k0 = 3.0);
  double value(double x) const;
  double deriv(double x) const;
  double inv(double y) const;
  double k0() const { return k0_; }
  double x_minus() const { return xm_; }
  double x_plus() const { return xp_; }

 private:
  double alpha_, beta_, k0_, xm_, xp_;
  double la_, lb_;
};

// theta_f = phi o f o phi^{-1}, with the certified translation radius K_f
struct LineConjugate {
  std::shared_ptr<const PhiChart> phi;
  IntervalDiffeo f;
  double k_f = 0.0;

  double theta(double x) const;
  double dtheta(double x) const;
};

LineConjugate conjugate_to_line(const IntervalDiffeo& f);

// The invariant Delta: transport from the repelling end to the contracting
// end read through the two affine identifications.  Exact analytic
// derivative via the orbit chain rule.
CircleMap mather_invariant_circle(const IntervalDiffeo& f);
CircleMap mather_invariant_circle(const LineConjugate& lc);

// ---------------------------------------------------------------------------
// fragmentation and killing

struct CircleFactor {
  CircleMap map;
  double support_lo = 0;   // support inside [lo, lo+len] mod 1
  double support_len = 0;  // <= 1/2
};

// Restricted fragmentation: psi = g_k o ... o g_1 with every factor
// supported in an arc of length <= 1/2 and C1-close to the identity.
// Handles maps C1-close to the identity (isotopy slicing + cumulative
// partition-of-unity weights) and rotations (split into small rotations);
// throws when the C1 size is out of reach.
std::vector<CircleFactor> fragment_near_identity_circle(const CircleMap& psi, double budget);

// Theta_a(psi): the lift of psi to (a, a+1) conjugated back through phi;
// requires frac(a) off the support of psi.
IntervalDiffeo lift_factor(const LineConjugate& lc, const CircleFactor& psi, double a);

struct KillReport {
  double defect_before = 0;
  double defect_after = 0;
  double c1_distance = 0;
  int factor_count = 0;
  std::vector<double> anchors;  // the a_i
};

// Compose f with lifted factors so the invariant becomes a rotation.
std::pair<IntervalDiffeo, KillReport> kill_mather_circle(const IntervalDiffeo& f, double eps);

// Y(x) = (D theta^n(x))^{-1} at an explicit n with theta^n(x) >= K_f
double reconstruct_y(const LineConjugate& lc, double x, int n);

// The invariant field X with flow_time_one(X) = g, valid when the invariant
// of g is a rotation (defect below tol).  The field carries values only (the
// construction is C^1), so flows of it propagate points, not Jacobians.
core::VectorField reconstruct_field(const IntervalDiffeo& g, double defect_tol = 1e-5);

// ---------------------------------------------------------------------------
// circle gluing

// degree +1 or -1 circle diffeo via its lift: F(x+1) = F(x) + degree
struct CircleDiffeo {
  std::function<double(double)> lift;
  std::function<double(double)> dlift;
  int degree = 1;

  double circ(double x) const;
  CircleDiffeo inverse() const;
};

struct PeriodicData {
  std::vector<double> points;  // periodic points in [0,1), sorted
  int orbit_period = 1;        // common period q of the periodic points
  int segment_period = 1;      // common period k of the complementary segments
  std::vector<double> multipliers;  // (f^q)'(p) per point
};

PeriodicData find_periodic_orbits(const CircleDiffeo& f, int max_period = 8);

struct PreparedCircle {
  CircleDiffeo map;
  PeriodicData periodic;
  double germ_radius = 0;  // map is affine on [p - r, p + r] for each p
};

// Patch the diffeo to be affine near every periodic point (the dense class
// the gluing construction starts from); c1 change below eps.
PreparedCircle prepare_circle(const CircleDiffeo& f, double eps);

struct CircleFlowEmbed {
  CircleDiffeo f_n;                     // the adjusted diffeo
  std::function<double(double)> field;  // X_n on S^1 (lift coordinates)
  int k = 1;                            // f_n^k is the time-one map of X_n
  std::vector<double> rep_segments;     // left endpoints of the representatives
  double c1_distance = 0;               // measured distance f_n vs f
};

CircleFlowEmbed embed_circle_diffeo(const PreparedCircle& f, double eps);

}  // namespace pertkit::mather
