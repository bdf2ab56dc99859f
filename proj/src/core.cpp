#include "pertkit/core.hpp"

#include <cmath>

namespace pertkit::core {

double op_norm(const Mat& m) {
  if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
  Eigen::JacobiSVD<Mat> svd(m);
  return svd.singularValues()(0);
}

ExprPtr MapExpr::inverse() const {
  throw std::logic_error("map expression has no closed-form inverse");
}

Vec SmoothMap::iterate(const Vec& x, int n) const {
  Vec y = x;
  for (int i = 0; i < n; ++i) y = expr_->value(y);
  return y;
}

// ---------------------------------------------------------------------------
// smooth steps

double smoothstep(double s) {
  if (s <= 0) return 0.0;
  if (s >= 1) return 1.0;
  return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
}

double smoothstep_deriv(double s) {
  if (s <= 0 || s >= 1) return 0.0;
  return 30.0 * s * s * (1.0 - s) * (1.0 - s);
}

namespace {
inline double expq(double s) { return s > 0 ? std::exp(-1.0 / s) : 0.0; }
inline double expq_deriv(double s) { return s > 0 ? std::exp(-1.0 / s) / (s * s) : 0.0; }
}  // namespace

double smoothstep_inf(double s) {
  if (s <= 0) return 0.0;
  if (s >= 1) return 1.0;
  double a = expq(s), b = expq(1.0 - s);
  return a / (a + b);
}

double smoothstep_inf_deriv(double s) {
  if (s <= 0 || s >= 1) return 0.0;
  double a = expq(s), b = expq(1.0 - s);
  double da = expq_deriv(s), db = -expq_deriv(1.0 - s);
  double sum = a + b;
  return (da * sum - a * (da + db)) / (sum * sum);
}

// ---------------------------------------------------------------------------
// conformal linear maps

ConformalLinear::ConformalLinear(int d, double r, std::vector<double> a)
    : dim(d), ratio(r), angles(std::move(a)) {
  if (d <= 0 || r <= 0) throw std::invalid_argument("ConformalLinear: bad dim/ratio");
  if (!angles.empty() && d != 2 * static_cast<int>(angles.size()))
    throw std::invalid_argument("ConformalLinear: dim must equal 2 * #angles");
}

Mat ConformalLinear::matrix() const {
  Mat m = Mat::Zero(dim, dim);
  if (angles.empty()) {
    m = ratio * Mat::Identity(dim, dim);
  } else {
    for (size_t b = 0; b < angles.size(); ++b) {
      double c = std::cos(angles[b]), s = std::sin(angles[b]);
      int i = static_cast<int>(2 * b);
      m(i, i) = ratio * c;
      m(i, i + 1) = -ratio * s;
      m(i + 1, i) = ratio * s;
      m(i + 1, i + 1) = ratio * c;
    }
  }
  return m;
}

double ConformalLinear::det() const { return std::pow(ratio, dim); }

ConformalLinear ConformalLinear::power(int n) const {
  std::vector<double> a(angles.size());
  for (size_t i = 0; i < angles.size(); ++i) a[i] = angles[i] * n;
  return ConformalLinear(dim, std::pow(ratio, n), std::move(a));
}

// ---------------------------------------------------------------------------
// nodes

namespace {

class IdentityNode final : public MapExpr {
 public:
  explicit IdentityNode(int d) : d_(d) {}
  int dim() const override { return d_; }
  Vec value(const Vec& x) const override { return x; }
  Mat jacobian(const Vec& x) const override {
    (void)x;
    return Mat::Identity(d_, d_);
  }
  ExprPtr inverse() const override { return std::make_shared<IdentityNode>(d_); }

 private:
  int d_;
};

class AffineNode final : public MapExpr {
 public:
  AffineNode(Mat a, Vec b) : a_(std::move(a)), b_(std::move(b)) {}
  int dim() const override { return static_cast<int>(a_.rows()); }
  Vec value(const Vec& x) const override { return a_ * x + b_; }
  Mat jacobian(const Vec&) const override { return a_; }
  ExprPtr inverse() const override {
    Eigen::FullPivLU<Mat> lu(a_);
    if (!lu.isInvertible()) throw std::logic_error("affine map is singular");
    Mat ai = lu.inverse();
    return std::make_shared<AffineNode>(ai, Vec(-ai * b_));
  }

 private:
  Mat a_;
  Vec b_;
};

class CompositionNode final : public MapExpr {
 public:
  CompositionNode(ExprPtr f, ExprPtr g) : f_(std::move(f)), g_(std::move(g)) {
    if (f_->dim() != g_->dim()) throw std::invalid_argument("compose: dimension mismatch");
  }
  int dim() const override { return f_->dim(); }
  Vec value(const Vec& x) const override { return f_->value(g_->value(x)); }
  Mat jacobian(const Vec& x) const override {
    Vec gx = g_->value(x);
    return f_->jacobian(gx) * g_->jacobian(x);
  }
  ExprPtr inverse() const override {
    return std::make_shared<CompositionNode>(g_->inverse(), f_->inverse());
  }

 private:
  ExprPtr f_, g_;
};

class ExplicitNode final : public MapExpr {
 public:
  ExplicitNode(int d, std::function<Vec(const Vec&)> v, std::function<Mat(const Vec&)> j)
      : d_(d), val_(std::move(v)), jac_(std::move(j)) {}
  int dim() const override { return d_; }
  Vec value(const Vec& x) const override { return val_(x); }
  Mat jacobian(const Vec& x) const override { return jac_(x); }

 private:
  int d_;
  std::function<Vec(const Vec&)> val_;
  std::function<Mat(const Vec&)> jac_;
};

class ProductNode final : public MapExpr {
 public:
  ProductNode(ExprPtr fe, ExprPtr ff) : fe_(std::move(fe)), ff_(std::move(ff)) {}
  int dim() const override { return fe_->dim() + ff_->dim(); }
  Vec value(const Vec& x) const override {
    int de = fe_->dim(), df = ff_->dim();
    Vec out(de + df);
    out.head(de) = fe_->value(x.head(de));
    out.tail(df) = ff_->value(x.tail(df));
    return out;
  }
  Mat jacobian(const Vec& x) const override {
    int de = fe_->dim(), df = ff_->dim();
    Mat j = Mat::Zero(de + df, de + df);
    j.topLeftCorner(de, de) = fe_->jacobian(x.head(de));
    j.bottomRightCorner(df, df) = ff_->jacobian(x.tail(df));
    return j;
  }
  ExprPtr inverse() const override {
    return std::make_shared<ProductNode>(fe_->inverse(), ff_->inverse());
  }

 private:
  ExprPtr fe_, ff_;
};

class RadialNode final : public MapExpr {
 public:
  RadialNode(Vec c, std::function<double(double)> m, std::function<double(double)> dm)
      : c_(std::move(c)), m_(std::move(m)), dm_(std::move(dm)) {}
  int dim() const override { return static_cast<int>(c_.size()); }
  Vec value(const Vec& x) const override {
    Vec r = x - c_;
    double s = r.norm();
    return c_ + m_(s) * r;
  }
  Mat jacobian(const Vec& x) const override {
    int d = dim();
    Vec r = x - c_;
    double s = r.norm();
    if (s < 1e-15) return m_(0.0) * Mat::Identity(d, d);
    return m_(s) * Mat::Identity(d, d) + (dm_(s) / s) * (r * r.transpose());
  }
  ExprPtr inverse() const override;

 private:
  friend class RadialInverseNode;
  Vec c_;
  std::function<double(double)> m_, dm_;
};

// Inverse of a radial map with strictly increasing radial part s -> s m(s):
// solve the scalar equation, then invert the exact Jacobian.
class RadialInverseNode final : public MapExpr {
 public:
  explicit RadialInverseNode(std::shared_ptr<const RadialNode> fwd) : fwd_(std::move(fwd)) {}
  int dim() const override { return fwd_->dim(); }
  Vec value(const Vec& y) const override {
    Vec r = y - fwd_->c_;
    double t = r.norm();
    if (t < 1e-300) return fwd_->c_;
    double s = solve_radius(t);
    return fwd_->c_ + (s / t) * r;
  }
  Mat jacobian(const Vec& y) const override {
    Vec x = value(y);
    Mat j = fwd_->jacobian(x);
    return j.inverse();
  }
  ExprPtr inverse() const override { return fwd_; }

 private:
  double solve_radius(double t) const {
    auto g = [&](double s) { return s * fwd_->m_(s); };
    double lo = 0.0, hi = std::max(t / std::max(fwd_->m_(0.0), 1e-8), t) * 2.0 + 1.0;
    while (g(hi) < t) hi *= 2.0;
    double s = std::min(t, hi);
    for (int it = 0; it < 200; ++it) {
      double val = g(s) - t;
      if (std::abs(val) < 1e-15 * (1.0 + t)) break;
      if (val > 0) hi = s; else lo = s;
      double der = fwd_->m_(s) + s * fwd_->dm_(s);
      double step = der > 1e-12 ? val / der : 0.0;
      double ns = s - step;
      if (!(ns > lo && ns < hi)) ns = 0.5 * (lo + hi);
      s = ns;
    }
    return s;
  }

  std::shared_ptr<const RadialNode> fwd_;
};

ExprPtr RadialNode::inverse() const {
  auto self = std::make_shared<RadialNode>(c_, m_, dm_);
  return std::make_shared<RadialInverseNode>(self);
}

// f0 inside the shell, f1 outside, blended across it.  The radius is taken
// from the leading head_dims coordinates when head_dims > 0 (about c's head),
// else the full norm about c.
class BumpBlendNode final : public MapExpr {
 public:
  BumpBlendNode(ExprPtr f0, ExprPtr f1, Vec c, Shell shell, int head_dims = 0)
      : f0_(std::move(f0)), f1_(std::move(f1)), c_(std::move(c)), shell_(shell),
        head_(head_dims) {
    if (f0_->dim() != f1_->dim()) throw std::invalid_argument("bump_blend: dimension mismatch");
  }
  int dim() const override { return f0_->dim(); }

  double rho_of(double s) const {
    return smoothstep((s - shell_.r1) / (shell_.r2 - shell_.r1));
  }
  double drho_of(double s) const {
    return smoothstep_deriv((s - shell_.r1) / (shell_.r2 - shell_.r1)) / (shell_.r2 - shell_.r1);
  }

  Vec radial_part(const Vec& x) const {
    Vec r = x - c_;
    if (head_ > 0) {
      Vec h = Vec::Zero(x.size());
      h.head(head_) = r.head(head_);
      return h;
    }
    return r;
  }

  Vec value(const Vec& x) const override {
    double s = radial_part(x).norm();
    if (s <= shell_.r1) return f0_->value(x);
    if (s >= shell_.r2) return f1_->value(x);
    double r = rho_of(s);
    return f0_->value(x) + r * (f1_->value(x) - f0_->value(x));
  }
  Mat jacobian(const Vec& x) const override {
    Vec rad = radial_part(x);
    double s = rad.norm();
    if (s <= shell_.r1) return f0_->jacobian(x);
    if (s >= shell_.r2) return f1_->jacobian(x);
    double r = rho_of(s), dr = drho_of(s);
    Vec diff = f1_->value(x) - f0_->value(x);
    Vec grad_s = rad / s;
    return f0_->jacobian(x) + r * (f1_->jacobian(x) - f0_->jacobian(x)) +
           diff * (dr * grad_s).transpose();
  }

 private:
  ExprPtr f0_, f1_;
  Vec c_;
  Shell shell_;
  int head_;
};

// (u,v) -> (u, cap(T u) psi(v) + (1 - cap(T u)) v)
class SkewBumpNode final : public MapExpr {
 public:
  SkewBumpNode(Vec u0, double rin, double rout, ExprPtr psi, int de, int df, Mat t)
      : u0_(std::move(u0)), rin_(rin), rout_(rout), psi_(std::move(psi)), de_(de), df_(df),
        t_(std::move(t)) {
    if (psi_->dim() != df) throw std::invalid_argument("skew_bump: psi dim mismatch");
    if (!(0 < rin && rin < rout)) throw std::invalid_argument("skew_bump: bad radii");
  }
  int dim() const override { return de_ + df_; }

  double cap(double s) const { return 1.0 - smoothstep((s - rin_) / (rout_ - rin_)); }
  double dcap(double s) const {
    return -smoothstep_deriv((s - rin_) / (rout_ - rin_)) / (rout_ - rin_);
  }

  Vec value(const Vec& x) const override {
    Vec u = x.head(de_), v = x.tail(df_);
    double s = (t_ * u - u0_).norm();
    Vec out(de_ + df_);
    out.head(de_) = u;
    if (s >= rout_) {
      out.tail(df_) = v;
    } else {
      double c = cap(s);
      out.tail(df_) = c * psi_->value(v) + (1.0 - c) * v;
    }
    return out;
  }
  Mat jacobian(const Vec& x) const override {
    Vec u = x.head(de_), v = x.tail(df_);
    Vec w = t_ * u - u0_;
    double s = w.norm();
    Mat j = Mat::Identity(de_ + df_, de_ + df_);
    if (s >= rout_) return j;
    double c = cap(s);
    Mat dpsi = psi_->jacobian(v);
    j.bottomRightCorner(df_, df_) = c * dpsi + (1.0 - c) * Mat::Identity(df_, df_);
    if (s > 1e-15) {
      Vec dc_du = dcap(s) * (t_.transpose() * w) / s;
      Vec dv = psi_->value(v) - v;
      j.bottomLeftCorner(df_, de_) = dv * dc_du.transpose();
    }
    return j;
  }
  ExprPtr inverse() const override;

 private:
  Vec u0_;
  double rin_, rout_;
  ExprPtr psi_;
  int de_, df_;
  Mat t_;
};

// Newton inverse for a near-identity embedding; exact Jacobian at the
// located preimage.
class NewtonInverseNode final : public MapExpr {
 public:
  explicit NewtonInverseNode(ExprPtr f) : f_(std::move(f)) {}
  int dim() const override { return f_->dim(); }
  Vec value(const Vec& y) const override {
    Vec x = y;
    for (int it = 0; it < 100; ++it) {
      Vec r = f_->value(x) - y;
      if (r.norm() < 1e-14 * (1.0 + y.norm())) return x;
      Mat j = f_->jacobian(x);
      x -= j.partialPivLu().solve(r);
    }
    Vec r = f_->value(x) - y;
    if (r.norm() > 1e-8 * (1.0 + y.norm()))
      throw std::runtime_error("newton_inverse: iteration failed to converge");
    return x;
  }
  Mat jacobian(const Vec& y) const override {
    Vec x = value(y);
    return f_->jacobian(x).inverse();
  }
  ExprPtr inverse() const override { return f_; }

 private:
  ExprPtr f_;
};

ExprPtr SkewBumpNode::inverse() const {
  auto self = std::make_shared<SkewBumpNode>(u0_, rin_, rout_, psi_, de_, df_, t_);
  return std::make_shared<NewtonInverseNode>(self);
}

// RK4 flow with the variational equation integrated alongside.
class FlowNode final : public MapExpr {
 public:
  FlowNode(VectorField x, double time, double step) : x_(std::move(x)), time_(time) {
    if (!(step > 0)) throw std::invalid_argument("flow: step must be positive");
    steps_ = std::max(1, static_cast<int>(std::ceil(std::abs(time) / step)));
    h_ = time / steps_;
  }
  int dim() const override { return x_.dim; }

  Vec value(const Vec& x0) const override {
    Vec x = x0;
    for (int i = 0; i < steps_; ++i) x = rk4_point(x);
    return x;
  }

  Mat jacobian(const Vec& x0) const override {
    if (!x_.deriv) throw std::logic_error("flow jacobian requires the field derivative");
    int d = x_.dim;
    Vec x = x0;
    Mat j = Mat::Identity(d, d);
    for (int i = 0; i < steps_; ++i) {
      // stage points
      Vec k1 = x_.value(x);
      Vec k2 = x_.value(x + 0.5 * h_ * k1);
      Vec k3 = x_.value(x + 0.5 * h_ * k2);
      Vec k4 = x_.value(x + h_ * k3);
      Mat a1 = x_.deriv(x);
      Mat a2 = x_.deriv(x + 0.5 * h_ * k1);
      Mat a3 = x_.deriv(x + 0.5 * h_ * k2);
      Mat a4 = x_.deriv(x + h_ * k3);
      Mat m1 = a1 * j;
      Mat m2 = a2 * (j + 0.5 * h_ * m1);
      Mat m3 = a3 * (j + 0.5 * h_ * m2);
      Mat m4 = a4 * (j + h_ * m3);
      j += (h_ / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4);
      x += (h_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return j;
  }

  ExprPtr inverse() const override {
    return std::make_shared<FlowNode>(x_, -time_, std::abs(h_));
  }

 private:
  Vec rk4_point(const Vec& x) const {
    Vec k1 = x_.value(x);
    Vec k2 = x_.value(x + 0.5 * h_ * k1);
    Vec k3 = x_.value(x + 0.5 * h_ * k2);
    Vec k4 = x_.value(x + h_ * k3);
    return x + (h_ / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  VectorField x_;
  double time_, h_;
  int steps_;
};

}  // namespace

// ---------------------------------------------------------------------------
// factories

SmoothMap identity(int d) { return SmoothMap(std::make_shared<IdentityNode>(d)); }

SmoothMap linear(const Mat& a) {
  return SmoothMap(std::make_shared<AffineNode>(a, Vec(Vec::Zero(a.rows()))));
}

SmoothMap linear(const ConformalLinear& a) { return linear(a.matrix()); }

SmoothMap affine(const Mat& a, const Vec& b) {
  return SmoothMap(std::make_shared<AffineNode>(a, b));
}

SmoothMap compose(const SmoothMap& f, const SmoothMap& g) {
  return SmoothMap(std::make_shared<CompositionNode>(f.expr(), g.expr()));
}

SmoothMap iterate_map(const SmoothMap& f, int n) {
  if (n < 0) throw std::invalid_argument("iterate_map: n must be >= 0");
  SmoothMap out = identity(f.dim());
  for (int i = 0; i < n; ++i) out = compose(f, out);
  return out;
}

SmoothMap explicit_map(int d, std::function<Vec(const Vec&)> val,
                       std::function<Mat(const Vec&)> jac) {
  return SmoothMap(std::make_shared<ExplicitNode>(d, std::move(val), std::move(jac)));
}

SmoothMap product_map(const SmoothMap& on_e, const SmoothMap& on_f) {
  return SmoothMap(std::make_shared<ProductNode>(on_e.expr(), on_f.expr()));
}

SmoothMap radial_map(const Vec& center, std::function<double(double)> m,
                     std::function<double(double)> dm) {
  return SmoothMap(std::make_shared<RadialNode>(center, std::move(m), std::move(dm)));
}

SmoothMap bump_blend(const SmoothMap& f0, const SmoothMap& f1, const Vec& center,
                     const Shell& shell) {
  return SmoothMap(std::make_shared<BumpBlendNode>(f0.expr(), f1.expr(), center, shell));
}

SmoothMap head_norm_blend(const SmoothMap& f0, const SmoothMap& f1, int head_dims,
                          const Shell& shell) {
  return SmoothMap(std::make_shared<BumpBlendNode>(f0.expr(), f1.expr(),
                                                   Vec(Vec::Zero(f0.dim())), shell, head_dims));
}

SmoothMap skew_bump(const Vec& u0, double r_in, double r_out, const SmoothMap& psi,
                    int dim_e, int dim_f) {
  return skew_bump(u0, r_in, r_out, psi, dim_e, dim_f, Mat(Mat::Identity(dim_e, dim_e)));
}

SmoothMap skew_bump(const Vec& u0, double r_in, double r_out, const SmoothMap& psi,
                    int dim_e, int dim_f, const Mat& e_transform) {
  return SmoothMap(
      std::make_shared<SkewBumpNode>(u0, r_in, r_out, psi.expr(), dim_e, dim_f, e_transform));
}

SmoothMap newton_inverse(const SmoothMap& f) {
  return SmoothMap(std::make_shared<NewtonInverseNode>(f.expr()));
}

SmoothMap glue_interpolate(const std::vector<SmoothMap>& maps, const std::vector<Shell>& shells,
                           const BumpProfile& profile) {
  if (maps.size() != shells.size() + 1)
    throw std::invalid_argument("glue_interpolate: need one more map than shells");
  if (shells.empty()) return maps[0];
  double mu0 = std::log(profile.lambda);
  for (size_t i = 0; i < shells.size(); ++i) {
    if (shells[i].modulus() < mu0 - 1e-12)
      throw std::invalid_argument("glue_interpolate: shell modulus below log(lambda)");
    if (i + 1 < shells.size() && !shells[i].precedes(shells[i + 1]))
      throw std::invalid_argument("glue_interpolate: shells are not nested");
  }
  Vec origin = Vec::Zero(maps[0].dim());
  SmoothMap out = maps[0];
  for (size_t i = 0; i < shells.size(); ++i)
    out = bump_blend(out, maps[i + 1], origin, shells[i]);
  return out;
}

SmoothMap flow_map(const VectorField& x, double time, double step) {
  return SmoothMap(std::make_shared<FlowNode>(x, time, step));
}

SmoothMap flow_time_one(const VectorField& x, double step) { return flow_map(x, 1.0, step); }

// ---------------------------------------------------------------------------
// metrics, orbits, grids

double c1_distance(const SmoothMap& f, const SmoothMap& g, const std::vector<Vec>& grid) {
  if (grid.empty()) throw std::invalid_argument("c1_distance: empty grid");
  double worst = 0.0;
  for (const Vec& x : grid) worst = std::max(worst, op_norm(f.jacobian(x) - g.jacobian(x)));
  return worst;
}

double c1_to_identity(const SmoothMap& f, const std::vector<Vec>& grid) {
  return c1_distance(f, identity(f.dim()), grid);
}

std::vector<OrbitStep> orbit_jacobian(const SmoothMap& f, const Vec& x, int n,
                                      double domain_radius) {
  std::vector<OrbitStep> out;
  out.reserve(n + 1);
  int d = f.dim();
  OrbitStep cur{x, Mat::Identity(d, d), 0.0};
  out.push_back(cur);
  for (int k = 0; k < n; ++k) {
    Mat df = f.jacobian(cur.point);
    double det = df.determinant();
    if (det == 0.0) throw std::runtime_error("orbit_jacobian: singular Jacobian on orbit");
    cur.log_abs_det += std::log(std::abs(det));
    cur.jac = df * cur.jac;
    cur.point = f(cur.point);
    if (cur.point.norm() > domain_radius)
      throw std::runtime_error("orbit_jacobian: orbit left the domain");
    out.push_back(cur);
  }
  return out;
}

std::vector<double> log_det_trace(const SmoothMap& f, const Vec& x, int n,
                                  double domain_radius) {
  std::vector<double> out;
  out.reserve(n + 1);
  Vec p = x;
  double acc = 0.0;
  out.push_back(acc);
  for (int k = 0; k < n; ++k) {
    double det = f.jacobian(p).determinant();
    if (det == 0.0) throw std::runtime_error("log_det_trace: singular Jacobian on orbit");
    acc += std::log(std::abs(det));
    p = f(p);
    if (p.norm() > domain_radius) throw std::runtime_error("log_det_trace: orbit left the domain");
    out.push_back(acc);
  }
  return out;
}

std::vector<Vec> grid_box(int dim, int per_axis, double half_side, const Vec& center) {
  std::vector<Vec> pts;
  std::vector<int> idx(dim, 0);
  const int n = std::max(2, per_axis);
  while (true) {
    Vec p(dim);
    for (int i = 0; i < dim; ++i)
      p[i] = center[i] - half_side + 2.0 * half_side * idx[i] / (n - 1);
    pts.push_back(p);
    int i = 0;
    for (; i < dim; ++i) {
      if (++idx[i] < n) break;
      idx[i] = 0;
    }
    if (i == dim) break;
  }
  return pts;
}

std::vector<Vec> grid_ball(int dim, int per_axis, double radius) {
  std::vector<Vec> pts;
  for (Vec& p : grid_box(dim, per_axis, radius, Vec::Zero(dim)))
    if (p.norm() <= radius) pts.push_back(std::move(p));
  return pts;
}

std::vector<Vec> grid_annulus(int dim, int per_axis, double r1, double r2) {
  std::vector<Vec> pts;
  for (Vec& p : grid_box(dim, per_axis, r2, Vec::Zero(dim))) {
    double s = p.norm();
    if (s >= r1 && s <= r2) pts.push_back(std::move(p));
  }
  return pts;
}

}  // namespace pertkit::core
