#include "pertkit/mather_circle.hpp"

#include <algorithm>
#include <cmath>

namespace pertkit::mather {

namespace {

double frac(double x) { return x - std::floor(x); }

// monotone scalar solve for increasing g with derivative dg
double solve_increasing(const std::function<double(double)>& g,
                        const std::function<double(double)>& dg, double y, double lo,
                        double hi) {
  while (g(lo) > y) {
    hi = lo;
    lo -= 1.0;
  }
  while (g(hi) < y) {
    lo = hi;
    hi += 1.0;
  }
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 80; ++it) {
    double v = g(x) - y;
    if (std::abs(v) < 1e-14 * (1.0 + std::abs(y)) || hi - lo < 1e-16 * (1.0 + std::abs(x))) break;
    if (v > 0) hi = x; else lo = x;
    double d = dg(x);
    double nx = d > 1e-14 ? x - v / d : 0.5 * (lo + hi);
    x = (nx > lo && nx < hi) ? nx : 0.5 * (lo + hi);
  }
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// circle maps

struct CircleMap::Impl {
  virtual ~Impl() = default;
  virtual double lift(double x) const = 0;
  virtual double dlift(double x) const = 0;
};

namespace {

struct FunctionalCircle final : CircleMap::Impl {
  std::function<double(double)> f, df;
  double lift(double x) const override { return f(x); }
  double dlift(double x) const override { return df(x); }
};

// monotone cubic (harmonic-mean tangents) interpolation of the lift
struct GridCircle final : CircleMap::Impl {
  std::vector<double> v;  // values at i/n, i = 0..n-1
  std::vector<double> m;  // tangents
  int n = 0;

  explicit GridCircle(std::vector<double> values) : v(std::move(values)) {
    n = static_cast<int>(v.size());
    if (n < 8) throw std::invalid_argument("CircleMap grid too small");
    double h = 1.0 / n;
    std::vector<double> d(n);
    for (int i = 0; i < n; ++i) {
      double next = (i + 1 < n) ? v[i + 1] : v[0] + 1.0;
      d[i] = (next - v[i]) / h;
      if (!(d[i] > 0))
        throw std::invalid_argument("CircleMap grid: lift values are not increasing at node " +
                                    std::to_string(i) + "/" + std::to_string(n) +
                                    " (v=" + std::to_string(v[i]) + ", next=" + std::to_string(next) + ")");
    }
    m.resize(n);
    for (int i = 0; i < n; ++i) {
      double dm = d[(i - 1 + n) % n], dp = d[i];
      m[i] = 2.0 * dm * dp / (dm + dp);
    }
  }

  double lift(double x) const override {
    double base = std::floor(x);
    double t = x - base;
    int j = std::min(static_cast<int>(t * n), n - 1);
    double h = 1.0 / n;
    double s = (t - j * h) / h;
    double vj = v[j], vj1 = (j + 1 < n) ? v[j + 1] : v[0] + 1.0;
    double mj = m[j], mj1 = m[(j + 1) % n];
    double s2 = s * s, s3 = s2 * s;
    double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s, h01 = -2 * s3 + 3 * s2,
           h11 = s3 - s2;
    return base + vj * h00 + h * mj * h10 + vj1 * h01 + h * mj1 * h11;
  }

  double dlift(double x) const override {
    double t = frac(x);
    int j = std::min(static_cast<int>(t * n), n - 1);
    double h = 1.0 / n;
    double s = (t - j * h) / h;
    double vj = v[j], vj1 = (j + 1 < n) ? v[j + 1] : v[0] + 1.0;
    double mj = m[j], mj1 = m[(j + 1) % n];
    double s2 = s * s;
    double d00 = 6 * s2 - 6 * s, d10 = 3 * s2 - 4 * s + 1, d01 = -6 * s2 + 6 * s,
           d11 = 3 * s2 - 2 * s;
    return (vj * d00 + h * mj * d10 + vj1 * d01 + h * mj1 * d11) / h;
  }
};

// grid values plus derivative values sampled from the analytic formula at
// the nodes (periodic cubic interpolation in between)
struct SampledCircle final : CircleMap::Impl {
  GridCircle grid;
  std::vector<double> dv;
  int n = 0;
  SampledCircle(std::vector<double> values, std::vector<double> derivs)
      : grid(std::move(values)), dv(std::move(derivs)), n(static_cast<int>(dv.size())) {}
  double lift(double x) const override { return grid.lift(x); }
  double dlift(double x) const override {
    double t = (x - std::floor(x)) * n;
    int j = static_cast<int>(t);
    if (j >= n) j = n - 1;
    double s = t - j;
    double p0 = dv[(j - 1 + n) % n], p1 = dv[j], p2 = dv[(j + 1) % n], p3 = dv[(j + 2) % n];
    // Catmull-Rom
    return p1 + 0.5 * s * (p2 - p0 + s * (2 * p0 - 5 * p1 + 4 * p2 - p3 +
                                          s * (3 * (p1 - p2) + p3 - p0)));
  }
};

struct InverseCircle final : CircleMap::Impl {
  std::shared_ptr<const CircleMap::Impl> fwd;
  double lift(double y) const override {
    auto g = [&](double x) { return fwd->lift(x); };
    auto dg = [&](double x) { return fwd->dlift(x); };
    return solve_increasing(g, dg, y, y - 2.0, y + 2.0);
  }
  double dlift(double y) const override { return 1.0 / fwd->dlift(lift(y)); }
};

struct ComposeCircle final : CircleMap::Impl {
  std::shared_ptr<const CircleMap::Impl> a, b;  // a after b
  double lift(double x) const override { return a->lift(b->lift(x)); }
  double dlift(double x) const override { return a->dlift(b->lift(x)) * b->dlift(x); }
};

}  // namespace

CircleMap::CircleMap() {
  auto fi = std::make_shared<FunctionalCircle>();
  fi->f = [](double x) { return x; };
  fi->df = [](double) { return 1.0; };
  impl = fi;
}

CircleMap CircleMap::rotation(double c) {
  auto fi = std::make_shared<FunctionalCircle>();
  fi->f = [c](double x) { return x + c; };
  fi->df = [](double) { return 1.0; };
  CircleMap out;
  out.impl = fi;
  return out;
}

CircleMap CircleMap::from_lift(std::function<double(double)> lift,
                               std::function<double(double)> dlift) {
  auto fi = std::make_shared<FunctionalCircle>();
  fi->f = std::move(lift);
  fi->df = std::move(dlift);
  CircleMap out;
  out.impl = fi;
  return out;
}

CircleMap CircleMap::from_grid(std::vector<double> lift_values) {
  CircleMap out;
  out.impl = std::make_shared<GridCircle>(std::move(lift_values));
  return out;
}

double CircleMap::lift(double x) const { return impl->lift(x); }
double CircleMap::dlift(double x) const { return impl->dlift(x); }

CircleMap CircleMap::inverse() const {
  auto inv = std::make_shared<InverseCircle>();
  inv->fwd = impl;
  CircleMap out;
  out.impl = inv;
  return out;
}

CircleMap CircleMap::snapshot(int n) const {
  std::vector<double> vals(n), ders(n);
  for (int i = 0; i < n; ++i) {
    double x = static_cast<double>(i) / n;
    vals[i] = impl->lift(x);
    ders[i] = impl->dlift(x);
  }
  CircleMap out;
  out.impl = std::make_shared<SampledCircle>(std::move(vals), std::move(ders));
  return out;
}

CircleMap compose(const CircleMap& a, const CircleMap& b) {
  auto c = std::make_shared<ComposeCircle>();
  c->a = a.impl;
  c->b = b.impl;
  CircleMap out;
  out.impl = c;
  return out;
}

RotationDefect rotation_defect(const CircleMap& delta, int grid) {
  double umin = 1e300, umax = -1e300, dd = 0.0;
  int imin = 0, imax = 0;
  std::vector<double> u(grid);
  for (int i = 0; i < grid; ++i) {
    double x = static_cast<double>(i) / grid;
    u[i] = delta.displacement(x);
    if (u[i] < umin) { umin = u[i]; imin = i; }
    if (u[i] > umax) { umax = u[i]; imax = i; }
    dd = std::max(dd, std::abs(delta.dlift(x) - 1.0));
  }
  // parabolic refinement of both extremes (the displacement is smooth)
  auto refine = [&](int i0, double v0) {
    double h = 1.0 / grid;
    double vm = u[(i0 - 1 + grid) % grid], vp = u[(i0 + 1) % grid];
    double denom = vm - 2.0 * v0 + vp;
    if (std::abs(denom) < 1e-300) return v0;
    double t = 0.5 * (vm - vp) / denom;  // vertex offset in cells
    if (std::abs(t) > 1.0) return v0;
    (void)h;
    return v0 - 0.25 * (vm - vp) * t;
  };
  umin = refine(imin, umin);
  umax = refine(imax, umax);
  RotationDefect out;
  out.offset = 0.5 * (umin + umax);
  out.defect = 0.5 * (umax - umin);
  out.deriv_defect = dd;
  return out;
}

// ---------------------------------------------------------------------------
// interval diffeos and the phi chart

core::SmoothMap IntervalDiffeo::as_map() const {
  auto v = value;
  auto d = deriv;
  return core::explicit_map(
      1,
      [v](const core::Vec& x) {
        core::Vec y(1);
        y[0] = v(x[0]);
        return y;
      },
      [d](const core::Vec& x) {
        core::Mat j(1, 1);
        j(0, 0) = d(x[0]);
        return j;
      });
}

void IntervalDiffeo::validate(int grid) const {
  if (!(alpha > 1.0) || !(beta > 0.0 && beta < 1.0))
    throw std::invalid_argument("IntervalDiffeo: need alpha > 1 and beta in (0,1)");
  for (int i = 1; i < grid; ++i) {
    double x = static_cast<double>(i) / grid;
    if (!(value(x) > x)) throw std::invalid_argument("IntervalDiffeo: f(x) <= x inside (0,1)");
  }
  for (double x : {r0 / 3.0, r0 * 0.9}) {
    if (std::abs(value(x) - alpha * x) > 1e-12)
      throw std::invalid_argument("IntervalDiffeo: alpha germ violated");
  }
  for (double x : {1.0 - r1 / 3.0, 1.0 - r1 * 0.9}) {
    if (std::abs(value(x) - 1.0 - beta * (x - 1.0)) > 1e-12)
      throw std::invalid_argument("IntervalDiffeo: beta germ violated");
  }
}

PhiChart::PhiChart(double alpha, double beta, double k0)
    : alpha_(alpha), beta_(beta), k0_(k0), la_(std::log(alpha)), lb_(std::log(beta)) {
  if (!(alpha > 1.0) || !(beta > 0.0 && beta < 1.0))
    throw std::invalid_argument("PhiChart: bad germ ratios");
  xm_ = std::pow(alpha, -k0);
  xp_ = 1.0 - std::pow(beta, k0);
  while (xm_ >= xp_ * 0.98) {  // widen the chart when the germs crowd each other
    k0_ += 1.0;
    xm_ = std::pow(alpha, -k0_);
    xp_ = 1.0 - std::pow(beta, k0_);
  }
  // guaranteed monotone when the two log charts are ordered on [xm, xp]
  double lo_plus = std::log(1.0 - xm_) / lb_;
  double hi_minus = std::log(xp_) / la_;
  if (!(lo_plus > hi_minus))
    throw std::invalid_argument("PhiChart: transition charts are not ordered");
}

double PhiChart::value(double x) const {
  if (x <= xm_) return std::log(x) / la_;
  if (x >= xp_) return std::log(1.0 - x) / lb_;
  double t = (x - xm_) / (xp_ - xm_);
  double w = core::smoothstep_inf(t);
  return (1.0 - w) * (std::log(x) / la_) + w * (std::log(1.0 - x) / lb_);
}

double PhiChart::deriv(double x) const {
  if (x <= xm_) return 1.0 / (x * la_);
  if (x >= xp_) return -1.0 / ((1.0 - x) * lb_);
  double t = (x - xm_) / (xp_ - xm_);
  double w = core::smoothstep_inf(t);
  double dw = core::smoothstep_inf_deriv(t) / (xp_ - xm_);
  double pm = std::log(x) / la_, pp = std::log(1.0 - x) / lb_;
  double dm = 1.0 / (x * la_), dp = -1.0 / ((1.0 - x) * lb_);
  return (1.0 - w) * dm + w * dp + dw * (pp - pm);
}

double PhiChart::inv(double y) const {
  if (y <= -k0_) return std::exp(y * la_);
  if (y >= k0_) return 1.0 - std::exp(y * lb_);
  auto g = [this](double x) { return value(x); };
  auto dg = [this](double x) { return deriv(x); };
  // bracket inside [xm, xp]
  double lo = xm_, hi = xp_;
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 80; ++it) {
    double v = g(x) - y;
    if (std::abs(v) < 1e-14 * (1.0 + std::abs(y)) || hi - lo < 1e-16 * (1.0 + std::abs(x))) break;
    if (v > 0) hi = x; else lo = x;
    double d = dg(x);
    double nx = x - v / d;
    x = (nx > lo && nx < hi) ? nx : 0.5 * (lo + hi);
  }
  return x;
}

double LineConjugate::theta(double x) const {
  if (std::abs(x) >= k_f) return x + 1.0;  // certified translation region
  return phi->value(f.value(phi->inv(x)));
}

double LineConjugate::dtheta(double x) const {
  if (std::abs(x) >= k_f) return 1.0;
  double y = phi->inv(x);
  double fy = f.value(y);
  return phi->deriv(fy) * f.deriv(y) / phi->deriv(y);
}

LineConjugate conjugate_to_line(const IntervalDiffeo& f) {
  LineConjugate lc;
  lc.phi = std::make_shared<PhiChart>(f.alpha, f.beta);
  lc.f = f;
  const PhiChart& phi = *lc.phi;
  double left = -phi.value(std::min(f.r0 * 0.999, phi.x_minus() / f.alpha));
  double right = phi.value(std::max(phi.x_plus(), 1.0 - f.r1 * 0.999));
  lc.k_f = std::max({phi.k0(), left, right}) + 0.01;
  // grid certification of the translation identity, against the cancellation
  // floor of the endpoint charts
  double la = std::log(f.alpha), lb = -std::log(f.beta);
  for (int i = 0; i <= 300; ++i) {
    double t = lc.k_f + 3.0 * i / 300.0;
    double floor_p = 1e-10 + 4e-16 * std::exp(lb * (t + 1.0)) / lb;
    double floor_m = 1e-10 + 4e-16 * std::exp(la * 0.0) / la;  // the 0-side chart is safe
    double raw_p = phi.value(f.value(phi.inv(t)));
    double raw_m = phi.value(f.value(phi.inv(-t)));
    if (std::abs(raw_m - (-t + 1.0)) > floor_m || std::abs(raw_p - (t + 1.0)) > floor_p)
      throw std::runtime_error("conjugate_to_line: translation identity failed on the grid");
  }
  return lc;
}

// ---------------------------------------------------------------------------
// the Mather invariant

CircleMap mather_invariant_circle(const LineConjugate& lc) {
  const double kf = lc.k_f;
  const int start = static_cast<int>(std::ceil(kf)) + 1;

  // fixed iterate count: enough to push every start point past +kf
  int n_star = 0;
  for (int i = 0; i <= 64; ++i) {
    double x = static_cast<double>(i) / 64.0 - start;
    double y = x;
    int n = 0;
    while (y < kf) {
      y = lc.theta(y);
      if (++n > 100000) throw std::runtime_error("mather_invariant: iteration cap");
    }
    n_star = std::max(n_star, n);
  }
  n_star += 2;

  auto lc_copy = lc;
  auto lift = [lc_copy, start, n_star](double c) {
    double y = c - start;
    for (int i = 0; i < n_star; ++i) y = lc_copy.theta(y);
    return y - (n_star - start);  // normalize so the flow case is the identity
  };
  auto dlift = [lc_copy, start, n_star](double c) {
    double y = c - start;
    double d = 1.0;
    for (int i = 0; i < n_star; ++i) {
      d *= lc_copy.dtheta(y);
      y = lc_copy.theta(y);
    }
    return d;
  };
  return CircleMap::from_lift(lift, dlift).snapshot(2048);
}

CircleMap mather_invariant_circle(const IntervalDiffeo& f) {
  return mather_invariant_circle(conjugate_to_line(f));
}

// ---------------------------------------------------------------------------
// fragmentation

namespace {

// partition of unity by three arcs of length 0.4
struct ArcPartition {
  static constexpr int kArcs = 3;
  double chi(int q, double x) const {
    double c = q / 3.0;
    double t = std::abs(x - c - std::round(x - c));  // circle distance
    return core::smoothstep((0.2 - t) / 0.12);
  }
  double weight(int q, double x) const {  // cumulative normalized W_q
    double sum = 0, part = 0;
    for (int i = 0; i < kArcs; ++i) {
      double ci = chi(i, x);
      sum += ci;
      if (i <= q) part += ci;
    }
    return part / sum;
  }
  double dweight(int q, double x) const {  // centered difference, C^1 data
    double h = 1e-6;
    return (weight(q, x + h) - weight(q, x - h)) / (2.0 * h);
  }
};

CircleMap shift_slice(const CircleMap& psi0, double t0, double t1) {
  // psi_{t1} o psi_{t0}^{-1} for the straight isotopy psi_t = Id + t u
  auto u = [psi0](double x) { return psi0.displacement(x); };
  auto du = [psi0](double x) { return psi0.dlift(x) - 1.0; };
  auto lift = [u, du, t0, t1](double x) {
    auto g = [&](double z) { return z + t0 * u(z); };
    auto dg = [&](double z) { return 1.0 + t0 * du(z); };
    double z = solve_increasing(g, dg, x, x - 1.0, x + 1.0);
    return z + t1 * u(z);
  };
  auto dlift = [u, du, t0, t1](double x) {
    auto g = [&](double z) { return z + t0 * u(z); };
    auto dg = [&](double z) { return 1.0 + t0 * du(z); };
    double z = solve_increasing(g, dg, x, x - 1.0, x + 1.0);
    return (1.0 + t1 * du(z)) / (1.0 + t0 * du(z));
  };
  return CircleMap::from_lift(lift, dlift).snapshot(8192);
}

// fragment a map with a fixed-sign-free displacement into 3 arc factors
void arc_factors(const CircleMap& slice, std::vector<CircleFactor>* out) {
  ArcPartition pou;
  auto v = [slice](double x) { return slice.displacement(x); };
  auto dv = [slice](double x) { return slice.dlift(x) - 1.0; };
  double vmax = 0.0;
  for (int i = 0; i < 512; ++i) vmax = std::max(vmax, std::abs(v(i / 512.0)));

  CircleMap prev;  // F_{-1} = Id
  for (int q = 0; q < ArcPartition::kArcs; ++q) {
    auto lift = [v, pou, q](double x) { return x + pou.weight(q, x) * v(x); };
    auto dlift = [v, dv, pou, q](double x) {
      return 1.0 + pou.dweight(q, x) * v(x) + pou.weight(q, x) * dv(x);
    };
    CircleMap fq = CircleMap::from_lift(lift, dlift).snapshot(8192);
    CircleFactor factor;
    factor.map = compose(fq, prev.inverse()).snapshot(8192);
    factor.support_lo = frac(q / 3.0 - 0.2 - vmax - 1e-3);
    factor.support_len = 0.4 + 2.0 * (vmax + 1e-3);
    out->push_back(std::move(factor));
    prev = fq;
  }
}

}  // namespace

std::vector<CircleFactor> fragment_near_identity_circle(const CircleMap& psi, double budget) {
  if (!(budget > 0)) throw std::invalid_argument("fragment: budget must be positive");
  std::vector<CircleFactor> out;

  RotationDefect rd = rotation_defect(psi, 4096);
  if (rd.defect < 1e-14 && std::abs(rd.offset) < 1e-14) return out;  // identity

  // prefer a rotation correction that leaves a fixed point: if the
  // displacement vanishes somewhere there is nothing to rotate away
  double c = rd.offset;
  double min_abs_u = 1e300, c_at_min = 0.0;
  for (int i = 0; i < 4096; ++i) {
    double uu = psi.displacement(static_cast<double>(i) / 4096.0);
    if (std::abs(uu) < min_abs_u) {
      min_abs_u = std::abs(uu);
      c_at_min = uu;
    }
  }
  if (min_abs_u < 1e-10) c = c_at_min;
  CircleMap psi0 = compose(CircleMap::rotation(-c), psi).snapshot(4096);
  double sup_u = 0, sup_du = 0;
  for (int i = 0; i < 4096; ++i) {
    double x = i / 4096.0;
    sup_u = std::max(sup_u, std::abs(psi0.displacement(x)));
    sup_du = std::max(sup_du, std::abs(psi0.dlift(x) - 1.0));
  }
  if (sup_du > 0.9)
    throw std::runtime_error("fragment: derivative defect too large for the restricted algorithm");

  // measured partition-of-unity slope
  ArcPartition pou;
  double s_pou = 0.0;
  for (int q = 0; q < ArcPartition::kArcs; ++q)
    for (int i = 0; i < 2048; ++i)
      s_pou = std::max(s_pou, std::abs(pou.dweight(q, i / 2048.0)));

  // fast path: no rotation part and the support already fits in an arc of
  // length <= 1/2: plain isotopy slices, no partition of unity needed
  if (std::abs(c) < 1e-13 && sup_u > 1e-15) {
    const int n = 8192;
    int best_len = 0, best_end = 0, run = 0;
    for (int i = 0; i < 2 * n; ++i) {
      double x = static_cast<double>(i % n) / n;
      bool idp = std::abs(psi0.displacement(x)) < 1e-12 &&
                 std::abs(psi0.dlift(x) - 1.0) < 1e-10;
      run = idp ? run + 1 : 0;
      if (run > best_len) { best_len = run; best_end = i; }
    }
    double gap = static_cast<double>(std::min(best_len, n)) / n;
    if (1.0 - gap <= 0.5 - 4.0 / n) {
      double lo = frac(static_cast<double>((best_end + 1) % n) / n - 2.0 / n);
      double len = 1.0 - gap + 4.0 / n;
      int slices = std::max(1, static_cast<int>(std::ceil(sup_du / (0.9 * budget))));
      if (slices <= 4000) {
        for (int j = 0; j < slices; ++j) {
          CircleFactor factor;
          factor.map = shift_slice(psi0, static_cast<double>(j) / slices,
                                   static_cast<double>(j + 1) / slices);
          factor.support_lo = frac(lo - sup_u - 1e-3);
          factor.support_len = std::min(len + 2.0 * (sup_u + 1e-3), 0.5);
          out.push_back(std::move(factor));
        }
        return out;
      }
    }
  }

  // isotopy slices so each arc factor stays within the budget
  if (sup_u > 1e-15) {
    double per_slice = 0.6 * budget / (sup_du + s_pou * sup_u + 1e-12);
    int slices = std::max(1, static_cast<int>(std::ceil(1.0 / per_slice)));
    if (slices > 4000) throw std::runtime_error("fragment: budget unreachable at factor cap");
    for (int j = 0; j < slices; ++j) {
      CircleMap slice =
          shift_slice(psi0, static_cast<double>(j) / slices, static_cast<double>(j + 1) / slices);
      arc_factors(slice, &out);
    }
  }

  // rotation part: split into small rotations and arc-fragment each
  if (std::abs(c) > 1e-14) {
    double delta = 0.6 * budget / s_pou;
    int rot_slices = std::max(1, static_cast<int>(std::ceil(std::abs(c) / delta)));
    if (rot_slices > 4000) throw std::runtime_error("fragment: budget unreachable (rotation)");
    double step = c / rot_slices;
    for (int j = 0; j < rot_slices; ++j) {
      CircleMap rot = CircleMap::rotation(step);
      arc_factors(rot, &out);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// lifts and killing

IntervalDiffeo lift_factor(const LineConjugate& lc, const CircleFactor& psi, double a) {
  double abar = frac(a);
  // support must avoid the anchor point
  double lo = psi.support_lo, len = psi.support_len;
  double rel = frac(abar - lo);
  if (rel < len)
    throw std::invalid_argument("lift_factor: anchor meets the factor support");

  auto phi = lc.phi;
  auto map = psi.map;
  double x_lo = phi->inv(a), x_hi = phi->inv(a + 1.0);

  IntervalDiffeo h;
  h.alpha = 1.0;  // identity germs: the factor is supported away from {0,1}
  h.beta = 0.5;   // unused for factors
  h.r0 = x_lo / 2.0;
  h.r1 = (1.0 - x_hi) / 2.0;
  h.value = [phi, map, a, x_lo, x_hi](double x) {
    if (x <= x_lo || x >= x_hi) return x;
    double y = phi->value(x);
    double z = y + map.displacement(y);  // the (a, a+1) branch of the lift
    return phi->inv(z);
  };
  h.deriv = [phi, map, a, x_lo, x_hi](double x) {
    if (x <= x_lo || x >= x_hi) return 1.0;
    double y = phi->value(x);
    double z = y + map.displacement(y);
    return map.dlift(y) * phi->deriv(x) / phi->deriv(phi->inv(z));
  };
  return h;
}

std::pair<IntervalDiffeo, KillReport> kill_mather_circle(const IntervalDiffeo& f, double eps) {
  KillReport report;
  LineConjugate lc = conjugate_to_line(f);
  CircleMap delta = mather_invariant_circle(lc);
  RotationDefect before = rotation_defect(delta, 4096);
  report.defect_before = before.defect;
  if (before.defect < 1e-9) {
    report.defect_after = before.defect;
    return {f, report};  // already the time-one map of a field
  }

  // target product: P = R_c o Delta^{-1}, so that the killed invariant is the
  // rotation by c
  CircleMap p = compose(CircleMap::rotation(before.offset), delta.inverse()).snapshot(4096);

  double inner = 0.9 * eps;
  for (int attempt = 0; attempt < 7; ++attempt, inner *= 0.5) {
    std::vector<CircleFactor> factors;
    try {
      factors = fragment_near_identity_circle(p, inner);
    } catch (const std::runtime_error&) {
      continue;
    }
    int ell = static_cast<int>(factors.size());
    // anchors: spaced a little over 1, fractional parts off the supports
    std::vector<double> anchors(ell);
    std::vector<IntervalDiffeo> lifts;
    lifts.reserve(ell);
    bool ok = true;
    double prev_a = lc.k_f;
    for (int i = 0; i < ell; ++i) {
      double base = prev_a + 1.02;
      double gap_mid = frac(factors[i].support_lo + factors[i].support_len +
                            0.5 * (1.0 - factors[i].support_len));
      double a = std::floor(base) + gap_mid;
      while (a < base) a += 1.0;
      anchors[i] = a;
      prev_a = a;
      try {
        lifts.push_back(lift_factor(lc, factors[i], anchors[i]));
      } catch (const std::invalid_argument&) {
        ok = false;
        break;
      }
    }
    // depth guard: beyond this the endpoint chart runs out of mantissa
    if (ok && ell > 0 && (anchors.back() + 2.0) * (-std::log(f.beta)) > 30.0) ok = false;
    if (!ok) continue;

    // g = f o h_1 o ... o h_ell
    auto f_copy = f;
    auto value = [f_copy, lifts](double x) {
      for (auto it = lifts.rbegin(); it != lifts.rend(); ++it) x = it->value(x);
      return f_copy.value(x);
    };
    auto deriv = [f_copy, lifts](double x) {
      double d = 1.0;
      for (auto it = lifts.rbegin(); it != lifts.rend(); ++it) {
        d *= it->deriv(x);
        x = it->value(x);
      }
      return d * f_copy.deriv(x);
    };
    IntervalDiffeo g;
    g.value = value;
    g.deriv = deriv;
    g.alpha = f.alpha;
    g.beta = f.beta;
    g.r0 = f.r0;
    double deepest = lc.phi->inv(anchors.empty() ? lc.k_f : anchors.back() + 1.0);
    g.r1 = std::min(f.r1, (1.0 - deepest) * 0.9);

    // measured C1 distance on support-adapted grids
    double c1 = 0.0;
    for (int i = 0; i < ell; ++i) {
      for (int t = 0; t <= 160; ++t) {
        double y = anchors[i] + static_cast<double>(t) / 160.0;
        double x = lc.phi->inv(y);
        c1 = std::max(c1, std::abs(g.deriv(x) - f.deriv(x)));
      }
    }
    for (int t = 1; t < 400; ++t) {
      double x = static_cast<double>(t) / 400.0;
      c1 = std::max(c1, std::abs(g.deriv(x) - f.deriv(x)));
    }
    if (c1 >= eps) continue;

    RotationDefect after = rotation_defect(mather_invariant_circle(g), 4096);
    report.defect_after = after.defect;
    report.c1_distance = c1;
    report.factor_count = ell;
    report.anchors = anchors;
    return {g, report};
  }
  throw std::runtime_error("kill_mather_circle: fragmentation budget infeasible for eps");
}

// ---------------------------------------------------------------------------
// field reconstruction

double reconstruct_y(const LineConjugate& lc, double x, int n) {
  double d = 1.0, y = x;
  for (int i = 0; i < n; ++i) {
    d *= lc.dtheta(y);
    y = lc.theta(y);
  }
  if (y < lc.k_f) throw std::invalid_argument("reconstruct_y: n too small for this x");
  return 1.0 / d;
}

core::VectorField reconstruct_field(const IntervalDiffeo& g, double defect_tol) {
  LineConjugate lc = conjugate_to_line(g);
  RotationDefect rd = rotation_defect(mather_invariant_circle(lc), 2048);
  if (rd.defect > defect_tol)
    throw std::invalid_argument("reconstruct_field: invariant defect too large");

  auto phi = lc.phi;
  double kf = lc.k_f;
  double la = std::log(g.alpha), lb = std::log(g.beta);
  auto lc_holder = std::make_shared<LineConjugate>(lc);
  auto xfield = [phi, lc_holder, kf, la, lb, g](double y) {
    if (y <= 0.0) return 0.0;
    if (y >= 1.0) return 0.0;
    if (y <= g.r0 * 0.5) return la * y;
    if (y >= 1.0 - g.r1 * 0.5) return lb * (y - 1.0);
    double x = phi->value(y);
    int n = static_cast<int>(std::ceil(kf - x)) + 1;
    if (n < 1) n = 1;
    double yy = reconstruct_y(*lc_holder, x, n);
    return yy / phi->deriv(y);
  };
  core::VectorField field;
  field.dim = 1;
  field.value = [xfield](const core::Vec& p) {
    core::Vec v(1);
    v[0] = xfield(p[0]);
    return v;
  };
  return field;
}

// ---------------------------------------------------------------------------
// circle gluing

double CircleDiffeo::circ(double x) const { return frac(lift(x)); }

CircleDiffeo CircleDiffeo::inverse() const {
  auto fl = lift;
  auto dfl = dlift;
  int deg = degree;
  CircleDiffeo out;
  out.degree = deg;
  out.lift = [fl, dfl, deg](double y) {
    if (deg == 1) {
      return solve_increasing(fl, dfl, y, y - 2.0, y + 2.0);
    }
    auto gl = [fl](double x) { return -fl(x); };
    auto dgl = [dfl](double x) { return -dfl(x); };
    return solve_increasing(gl, dgl, -y, -y - 2.0, -y + 2.0);
  };
  out.dlift = [out_lift = out.lift, dfl](double y) { return 1.0 / dfl(out_lift(y)); };
  return out;
}

namespace {

// lift of f^q together with its derivative
std::pair<double, double> iterate_lift(const CircleDiffeo& f, double x, int q) {
  double d = 1.0;
  for (int i = 0; i < q; ++i) {
    d *= f.dlift(x);
    x = f.lift(x);
  }
  return {x, d};
}

}  // namespace

PeriodicData find_periodic_orbits(const CircleDiffeo& f, int max_period) {
  PeriodicData out;
  for (int q = 1; q <= max_period; ++q) {
    int deg_q = (f.degree == 1) ? 1 : (q % 2 == 0 ? 1 : -1);
    auto gq = [&](double x) { return iterate_lift(f, x, q).first; };
    // roots of F_q(x) - x - p on [0,1)
    const int n = 4096;
    std::vector<double> roots;
    std::vector<double> vals(n + 1);
    for (int i = 0; i <= n; ++i) vals[i] = gq(static_cast<double>(i) / n);
    double lo_p = 1e300, hi_p = -1e300;
    for (int i = 0; i <= n; ++i) {
      double diff = vals[i] - static_cast<double>(i) / n;
      lo_p = std::min(lo_p, diff);
      hi_p = std::max(hi_p, diff);
    }
    for (int p = static_cast<int>(std::floor(lo_p)); p <= static_cast<int>(std::ceil(hi_p)); ++p) {
      for (int i = 0; i < n; ++i) {
        double a = vals[i] - static_cast<double>(i) / n - p;
        double b = vals[i + 1] - static_cast<double>(i + 1) / n - p;
        if (a == 0.0) roots.push_back(static_cast<double>(i) / n);
        if (a * b < 0) {
          double xl = static_cast<double>(i) / n, xr = static_cast<double>(i + 1) / n;
          for (int it = 0; it < 80; ++it) {
            double xm = 0.5 * (xl + xr);
            double vm = gq(xm) - xm - p;
            if (a * vm <= 0) xr = xm; else xl = xm;
          }
          roots.push_back(0.5 * (xl + xr));
        }
      }
      (void)deg_q;
    }
    if (roots.empty()) continue;
    std::sort(roots.begin(), roots.end());
    std::vector<double> uniq;
    for (double r : roots) {
      if (uniq.empty() || (r - uniq.back() > 1e-6 && (1.0 + uniq.front() - r) > 1e-6))
        uniq.push_back(r);
    }
    out.points = uniq;
    out.orbit_period = q;
    out.segment_period = (f.degree == -1) ? 2 : q;
    int k = out.segment_period;
    for (double r : out.points) {
      double mult = iterate_lift(f, r, k).second;
      if (std::abs(std::abs(mult) - 1.0) < 1e-3)
        throw std::runtime_error("find_periodic_orbits: non-hyperbolic periodic point");
      out.multipliers.push_back(mult);
    }
    return out;
  }
  throw std::runtime_error("find_periodic_orbits: no periodic orbit up to the cap");
}

PreparedCircle prepare_circle(const CircleDiffeo& f, double eps) {
  PeriodicData pd = find_periodic_orbits(f);
  double min_gap = 1.0;
  for (size_t i = 0; i < pd.points.size(); ++i) {
    double next = (i + 1 < pd.points.size()) ? pd.points[i + 1] : pd.points[0] + 1.0;
    min_gap = std::min(min_gap, next - pd.points[i]);
  }

  for (double r = std::min(0.2 * min_gap, 0.05); r > 1e-6; r *= 0.5) {
    // bump-patch the lift toward the affine germ at every periodic point
    auto pts = pd.points;
    auto fl = f.lift;
    auto dfl = f.dlift;
    std::vector<double> slopes(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) slopes[i] = dfl(pts[i]);
    auto cap = [r](double t) { return 1.0 - core::smoothstep((std::abs(t) - 0.5 * r) / (0.5 * r)); };
    auto dcap = [r](double t) {
      double sgn = t >= 0 ? 1.0 : -1.0;
      return -sgn * core::smoothstep_deriv((std::abs(t) - 0.5 * r) / (0.5 * r)) / (0.5 * r);
    };
    auto lift = [fl, pts, slopes, cap](double x) {
      double out = fl(x);
      for (size_t i = 0; i < pts.size(); ++i) {
        double t = x - pts[i] - std::round(x - pts[i]);
        double w = cap(t);
        if (w > 0) {
          double shift = std::floor(x - pts[i] + 0.5);
          // affine germ expressed in the local branch of the lift
          double local = fl(pts[i] + shift) + slopes[i] * t;
          out += w * (local - fl(x));
        }
      }
      return out;
    };
    auto dlift = [fl, dfl, pts, slopes, cap, dcap](double x) {
      double out = dfl(x);
      for (size_t i = 0; i < pts.size(); ++i) {
        double t = x - pts[i] - std::round(x - pts[i]);
        double w = cap(t);
        if (w > 0) {
          double shift = std::floor(x - pts[i] + 0.5);
          double local = fl(pts[i] + shift) + slopes[i] * t;
          out += dcap(t) * (local - fl(x)) + w * (slopes[i] - dfl(x));
        }
      }
      return out;
    };

    // monotone in the degree direction, and within budget
    bool mono = true;
    double c1 = 0.0;
    for (int i = 0; i <= 8192; ++i) {
      double x = static_cast<double>(i) / 8192.0;
      double d = dlift(x);
      if (d * f.degree <= 1e-6) mono = false;
      c1 = std::max(c1, std::abs(d - dfl(x)));
    }
    if (!mono || c1 >= eps) continue;

    PreparedCircle out;
    out.map = CircleDiffeo{lift, dlift, f.degree};
    out.periodic = pd;
    out.periodic.points = pts;
    out.germ_radius = 0.45 * r;
    return out;
  }
  throw std::runtime_error("prepare_circle: no patch radius met the budget");
}

CircleFlowEmbed embed_circle_diffeo(const PreparedCircle& prep, double eps) {
  const CircleDiffeo& f = prep.map;
  const auto& pts = prep.periodic.points;
  const int s = static_cast<int>(pts.size());
  const int k = prep.periodic.segment_period;
  if (s < 2) throw std::invalid_argument("embed_circle_diffeo: need at least two periodic points");

  // segment i = [pts[i], pts[i+1]] (the last one wraps)
  auto seg_lo = [&](int i) { return pts[i]; };
  auto seg_hi = [&](int i) { return (i + 1 < s) ? pts[i + 1] : pts[0] + 1.0; };
  auto locate = [&](double x) {
    double t = frac(x);
    if (t < pts[0]) t += 1.0;
    for (int i = 0; i < s; ++i)
      if (t >= seg_lo(i) - 1e-12 && t <= seg_hi(i) + 1e-12) return i;
    throw std::runtime_error("embed: segment location failed");
  };

  // the permutation induced on segments
  std::vector<int> sigma(s);
  for (int i = 0; i < s; ++i) sigma[i] = locate(f.circ(0.5 * (seg_lo(i) + seg_hi(i))));

  std::vector<int> cycle_rep(s, -1);
  std::vector<int> reps;
  for (int i = 0; i < s; ++i) {
    if (cycle_rep[i] >= 0) continue;
    int j = i, len = 0;
    do {
      cycle_rep[j] = i;
      j = sigma[j];
      ++len;
    } while (j != i);
    if (len != k) throw std::runtime_error("embed: segment cycle length mismatch");
    reps.push_back(i);
  }

  struct RepData {
    int seg = 0;
    double a = 0, b = 0;          // repelling / attracting endpoints (lift coords)
    IntervalDiffeo phi_i;         // conjugated interval map
    IntervalDiffeo killed;        // flow-embeddable replacement
    std::function<double(double)> y_field;  // field on [0,1]
    int last_seg = 0;             // the segment f^{k-1}(I)
    double c1 = 0;
  };
  std::vector<RepData> data;

  for (int rep : reps) {
    RepData rd;
    rd.seg = rep;
    double lo = seg_lo(rep), hi = seg_hi(rep);
    auto [fk_lo, d_lo] = iterate_lift(f, lo, k);
    (void)fk_lo;
    bool lo_repels = std::abs(d_lo) > 1.0;
    rd.a = lo_repels ? lo : hi;
    rd.b = lo_repels ? hi : lo;

    // germ radius transported along the orbit of the endpoints
    double w = prep.germ_radius;
    auto germ_scale = [&](double p) {
      double shrink = 1.0, x = p, acc = 1.0;
      for (int j = 0; j < k; ++j) {
        acc *= std::abs(f.dlift(x));
        shrink = std::max(shrink, acc);
        x = f.lift(x);
      }
      return w / shrink;
    };
    double germ_a = germ_scale(rd.a) * 0.9, germ_b = germ_scale(rd.b) * 0.9;

    double span = rd.b - rd.a;  // signed
    auto h = [a = rd.a, span](double x) { return (x - a) / span; };
    auto hinv = [a = rd.a, span](double u) { return a + u * span; };
    auto fdil = f;
    IntervalDiffeo phi_i;
    phi_i.value = [fdil, h, hinv, k](double u) {
      return h(iterate_lift(fdil, hinv(u), k).first);
    };
    phi_i.deriv = [fdil, hinv, k](double u) { return iterate_lift(fdil, hinv(u), k).second; };
    phi_i.alpha = iterate_lift(f, rd.a, k).second;
    phi_i.beta = iterate_lift(f, rd.b, k).second;
    if (f.degree == -1) {
      phi_i.alpha = std::abs(phi_i.alpha);
      phi_i.beta = std::abs(phi_i.beta);
    }
    phi_i.r0 = std::min(0.45, germ_a / std::abs(span));
    phi_i.r1 = std::min(0.45, germ_b / std::abs(span));
    phi_i.validate();
    rd.phi_i = phi_i;

    // inverse-leg derivative bound for the composed budget
    double l_inv = 0.0;
    for (int t = 0; t <= 200; ++t) {
      double x = hinv(static_cast<double>(t) / 200.0);
      double d = std::abs(iterate_lift(f, x, k - 1).second);
      l_inv = std::max(l_inv, 1.0 / std::max(d, 1e-12));
    }
    double eps_kill = 0.8 * eps / std::max(l_inv, 1.0);

    auto [killed, report] = kill_mather_circle(phi_i, eps_kill);
    rd.killed = killed;
    rd.c1 = report.c1_distance;

    core::VectorField yf = reconstruct_field(killed, 1e-4);
    rd.y_field = [yf](double u) {
      core::Vec p(1);
      p[0] = u;
      return yf.value(p)[0];
    };

    // which segment is f^{k-1}(I)
    int seg_j = rep;
    for (int j = 0; j < k - 1; ++j) seg_j = sigma[seg_j];
    rd.last_seg = seg_j;
    data.push_back(std::move(rd));
  }

  // f_n: on f^{k-1}(I_rep) use killed o f^{-(k-1)}, elsewhere f
  auto finv = f.inverse();
  auto f_copy = f;
  int deg = f.degree;
  auto shared_data = std::make_shared<std::vector<RepData>>(std::move(data));
  auto pts_copy = pts;

  auto base_of = [pts_copy, s](double x) {
    double t = frac(x);
    if (t < pts_copy[0]) t += 1.0;
    return std::make_pair(t, x - t);
  };

  auto fn_lift = [shared_data, f_copy, finv, base_of, deg, k](double x) {
    auto [t, off] = base_of(x);
    for (const RepData& rd : *shared_data) {
      double lo = rd.a < rd.b ? rd.a : rd.b, hi = rd.a < rd.b ? rd.b : rd.a;
      // t may live in the last segment of this cycle
      double y = t;
      bool inside = false;
      {
        // pull back k-1 steps and test membership in I
        double z = y;
        for (int j = 0; j < k - 1; ++j) z = finv.lift(z);
        double zt = frac(z);
        if (zt < lo - 1e-12) zt += 1.0;
        if (zt >= lo - 1e-12 && zt <= hi + 1e-12) {
          inside = true;
          double u = (zt - rd.a) / (rd.b - rd.a);
          u = std::min(std::max(u, 0.0), 1.0);
          double gu = rd.killed.value(u);
          double img = rd.a + gu * (rd.b - rd.a);
          // keep the lift branch of f (f_n is C1-close to f)
          y = img + std::round(f_copy.lift(t) - img);
        }
      }
      if (inside) return y + deg * off;
    }
    return f_copy.lift(t) + deg * off;
  };
  auto fn_dlift = [shared_data, f_copy, finv, base_of, k](double x) {
    auto [t, off] = base_of(x);
    (void)off;
    for (const RepData& rd : *shared_data) {
      double lo = rd.a < rd.b ? rd.a : rd.b, hi = rd.a < rd.b ? rd.b : rd.a;
      double z = t;
      double dinv = 1.0;
      for (int j = 0; j < k - 1; ++j) {
        dinv *= finv.dlift(z);
        z = finv.lift(z);
      }
      double zt = frac(z);
      if (zt < lo - 1e-12) zt += 1.0;
      if (zt >= lo - 1e-12 && zt <= hi + 1e-12) {
        double u = (zt - rd.a) / (rd.b - rd.a);
        u = std::min(std::max(u, 0.0), 1.0);
        return rd.killed.deriv(u) * dinv;
      }
    }
    return f_copy.dlift(t);
  };

  CircleFlowEmbed out;
  out.k = k;
  out.f_n = CircleDiffeo{fn_lift, fn_dlift, deg};
  for (int rep : reps) out.rep_segments.push_back(seg_lo(rep));

  // the field: pull back to the representative segment, evaluate, push forward
  auto field_fixed = [shared_data, f_copy, finv, base_of, k](double x) {
    auto [t, off] = base_of(x);
    (void)off;
    for (const RepData& rd : *shared_data) {
      double lo = rd.a < rd.b ? rd.a : rd.b, hi = rd.a < rd.b ? rd.b : rd.a;
      double z = t;
      for (int j = 0; j < k; ++j) {
        double zt = frac(z);
        if (zt < lo - 1e-12) zt += 1.0;
        if (zt >= lo - 1e-12 && zt <= hi + 1e-12) {
          double u = (zt - rd.a) / (rd.b - rd.a);
          u = std::min(std::max(u, 0.0), 1.0);
          double xi_val = rd.y_field(u) * (rd.b - rd.a);
          // push forward j steps from xi = zt back to t
          double acc = xi_val, w = zt;
          for (int m = 0; m < j; ++m) {
            acc *= f_copy.dlift(w);
            w = f_copy.lift(w);
          }
          return acc;
        }
        z = finv.lift(z);
      }
    }
    return 0.0;
  };
  out.field = field_fixed;

  // measured C1 distance to f
  double c1 = 0.0;
  for (int i = 0; i < 4096; ++i) {
    double x = static_cast<double>(i) / 4096.0;
    c1 = std::max(c1, std::abs(fn_dlift(x) - f.dlift(x)));
  }
  out.c1_distance = c1;
  return out;
}

}  // namespace pertkit::mather
