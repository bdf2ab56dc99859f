#pragma once

// Smooth-map algebra: composable C^1 embeddings of regions of R^d with
// exact Jacobians propagated by the chain rule.  Maps are immutable
// expression terms; every operation here is pure and re-entrant.

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace pertkit::core {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// operator norm (largest singular value)
double op_norm(const Mat& m);

// ---------------------------------------------------------------------------
// expression nodes

class MapExpr {
 public:
  virtual ~MapExpr() = default;
  virtual int dim() const = 0;
  virtual Vec value(const Vec& x) const = 0;
  virtual Mat jacobian(const Vec& x) const = 0;
  // Closed-form (or monotone-radial) inverse; throws std::logic_error when
  // the node has none.
  virtual std::shared_ptr<const MapExpr> inverse() const;
};

using ExprPtr = std::shared_ptr<const MapExpr>;

// Value-semantic handle over an immutable expression term.
class SmoothMap {
 public:
  SmoothMap() = default;
  explicit SmoothMap(ExprPtr e) : expr_(std::move(e)) {}

  int dim() const { return expr_->dim(); }
  Vec operator()(const Vec& x) const { return expr_->value(x); }
  Mat jacobian(const Vec& x) const { return expr_->jacobian(x); }
  SmoothMap inverse() const { return SmoothMap(expr_->inverse()); }
  const ExprPtr& expr() const { return expr_; }

  Vec iterate(const Vec& x, int n) const;

 private:
  ExprPtr expr_;
};

// ---------------------------------------------------------------------------
// smooth step / bump profiles

// C^2 monotone step: 0 for s<=0, 1 for s>=1, max slope 15/8.
double smoothstep(double s);
double smoothstep_deriv(double s);

// C^infinity monotone step built from exp(-1/s); same boundary behaviour.
double smoothstep_inf(double s);
double smoothstep_inf_deriv(double s);

// rho: [0,inf) -> [0,1], 0 on [0,1], 1 on [lambda,inf), |rho'| <= 2/(lambda-1).
struct BumpProfile {
  double lambda = 2.0;
  explicit BumpProfile(double lam) : lambda(lam) {
    if (!(lam > 1.0)) throw std::invalid_argument("BumpProfile: lambda must be > 1");
  }
  double rho(double t) const { return smoothstep((t - 1.0) / (lambda - 1.0)); }
  double drho(double t) const { return smoothstep_deriv((t - 1.0) / (lambda - 1.0)) / (lambda - 1.0); }
};

// ---------------------------------------------------------------------------
// spherical shells

// S(r1,r2) = B(0,r2) \ B(0,r1); "inside" means ||x|| <= r1, "outside"
// ||x|| >= r2, and S.precedes(T) means S's outer radius <= T's inner radius.
struct Shell {
  double r1 = 0, r2 = 0;
  Shell() = default;
  Shell(double inner, double outer) : r1(inner), r2(outer) {
    if (!(0 < r1 && r1 < r2)) throw std::invalid_argument("Shell: need 0 < r1 < r2");
  }
  double modulus() const { return std::log(r2 / r1); }
  bool inside(const Vec& x) const { return x.norm() <= r1; }
  bool outside(const Vec& x) const { return x.norm() >= r2; }
  bool contains_radius(double s) const { return r1 < s && s < r2; }
  bool precedes(const Shell& other) const { return r2 <= other.r1; }
};

// ---------------------------------------------------------------------------
// conformal linear maps (rotation composed with homothety)

// angles empty: ratio * Identity (any dim).  Otherwise dim = 2*angles.size()
// and the matrix is ratio * blockdiag(R(angle_i)).
struct ConformalLinear {
  int dim = 1;
  double ratio = 1.0;
  std::vector<double> angles;

  ConformalLinear(int d, double r, std::vector<double> a = {});
  Mat matrix() const;
  double norm() const { return ratio; }
  double det() const;  // ratio^dim (orientation preserving)
  ConformalLinear power(int n) const;
  ConformalLinear inverse_conf() const { return power(-1); }
};

// ---------------------------------------------------------------------------
// map factories

SmoothMap identity(int d);
SmoothMap linear(const Mat& a);
SmoothMap linear(const ConformalLinear& a);
SmoothMap affine(const Mat& a, const Vec& b);
SmoothMap compose(const SmoothMap& f, const SmoothMap& g);          // f after g
SmoothMap iterate_map(const SmoothMap& f, int n);                   // f^n (n >= 0)
SmoothMap explicit_map(int d, std::function<Vec(const Vec&)> val,
                       std::function<Mat(const Vec&)> jac);
SmoothMap product_map(const SmoothMap& on_e, const SmoothMap& on_f);  // (u,v)->(fE u, fF v)

// x -> c + m(||x-c||) (x - c), with m given analytically.  Invertible when
// s*m(s) is strictly increasing (checked on demand by the inverse node).
SmoothMap radial_map(const Vec& center, std::function<double(double)> m,
                     std::function<double(double)> dm);

// f0 inside the shell (about `center`), f1 outside, bump-interpolated in
// between: x -> f0(x) + rho(||x-c||/r1)(f1(x)-f0(x)) with rho from `profile`
// stretched so the transition happens exactly across [shell.r1, shell.r2].
SmoothMap bump_blend(const SmoothMap& f0, const SmoothMap& f1, const Vec& center,
                     const Shell& shell);

// cap(u,v) skew: (u,v) -> (u, cap(u) psi(v) + (1-cap(u)) v), where cap = 1 on
// B_E(u0, r_in) and 0 outside B_E(u0, r_out).  When `e_transform` is given
// the cap is evaluated at T u instead of u (a pulled-back bump).
SmoothMap skew_bump(const Vec& u0, double r_in, double r_out, const SmoothMap& psi,
                    int dim_e, int dim_f);
SmoothMap skew_bump(const Vec& u0, double r_in, double r_out, const SmoothMap& psi,
                    int dim_e, int dim_f, const Mat& e_transform);

// f0 where the HEAD-coordinate norm is inside the shell, f1 outside it,
// blended across (the E-capped variant of bump_blend for product splittings).
SmoothMap head_norm_blend(const SmoothMap& f0, const SmoothMap& f1, int head_dims,
                          const Shell& shell);

// Numerical inverse for near-identity embeddings (Newton from y), with the
// exact Jacobian inverse at the located preimage.  Used inside constructions
// whose factors are certified C^1-close to the identity.
SmoothMap newton_inverse(const SmoothMap& f);

// Lemma-style shell interpolation: maps f_0..f_s and nested shells
// S^1 < ... < S^s; result equals f_0 inside S^1, f_i between S^i and S^{i+1},
// f_s outside S^s.  Shells must all have modulus >= log(profile.lambda).
SmoothMap glue_interpolate(const std::vector<SmoothMap>& maps,
                           const std::vector<Shell>& shells,
                           const BumpProfile& profile);

// ---------------------------------------------------------------------------
// vector fields and flows

struct VectorField {
  int dim = 0;
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> deriv;  // may be empty; flows then refuse jacobians
};

// Classical RK4 integration of the field together with its variational
// equation; `step` is the nominal time step (the count is ceil(time/step)).
SmoothMap flow_map(const VectorField& x, double time, double step);
SmoothMap flow_time_one(const VectorField& x, double step);

// ---------------------------------------------------------------------------
// C^1 metrics and orbit data

// max over the grid of ||Df - Dg|| (operator norm); a grid-certified lower
// bound for the sup distance.
double c1_distance(const SmoothMap& f, const SmoothMap& g, const std::vector<Vec>& grid);

// max over the grid of ||Df - Id||
double c1_to_identity(const SmoothMap& f, const std::vector<Vec>& grid);

struct OrbitStep {
  Vec point;             // f^k(x)
  Mat jac;               // D(f^k)(x)
  double log_abs_det;    // sum of log|det Df| along the orbit (exact chain rule)
};

// entries k = 0..n; throws if the orbit leaves B(0, domain_radius)
std::vector<OrbitStep> orbit_jacobian(const SmoothMap& f, const Vec& x, int n,
                                      double domain_radius = 1e9);

// log|Jac f^k(x)| for k = 0..n (cheaper: no matrices kept)
std::vector<double> log_det_trace(const SmoothMap& f, const Vec& x, int n,
                                  double domain_radius = 1e9);

// ---------------------------------------------------------------------------
// grids

std::vector<Vec> grid_box(int dim, int per_axis, double half_side, const Vec& center);
std::vector<Vec> grid_ball(int dim, int per_axis, double radius);      // centered at 0
std::vector<Vec> grid_annulus(int dim, int per_axis, double r1, double r2);

}  // namespace pertkit::core
