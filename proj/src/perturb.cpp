#include "pertkit/perturb.hpp"

#include <algorithm>
#include <cmath>

namespace pertkit::construct {

using core::ExprPtr;
using core::MapExpr;

// ---------------------------------------------------------------------------
// tidy check

TidyCheckReport tidy_check(const TidyPerturbation& p, const CompactSample& probes, int n_steps) {
  TidyCheckReport rep;
  for (size_t i = 0; i < probes.points.size(); ++i) {
    const Vec& x0 = probes.points[i];
    if (!p.support.outside(x0)) continue;
    Vec xg = x0, xf = x0;
    for (int m = 1; m <= n_steps; ++m) {
      xg = p.result(xg);
      xf = p.base(xf);
      if (p.support.outside(xg)) {
        double res = (xg - xf).norm();
        rep.entries.push_back({static_cast<int>(i), m, res});
        rep.max_residual = std::max(rep.max_residual, res);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// local extension / germ linearization

SmoothMap extend_local(const SmoothMap& f, const SmoothMap& g_local, double r1, double r2,
                       double eps) {
  if (!(0 < r1 && r1 < r2)) throw std::invalid_argument("extend_local: need 0 < r1 < r2");
  double lam = r2 / r1;
  double eps_prime = eps / (1.0 + 2.0 * lam / (lam - 1.0));

  Vec zero = Vec::Zero(f.dim());
  if (g_local(zero).norm() > 1e-12)
    throw std::invalid_argument("extend_local: g_local must fix the origin");
  double measured = core::c1_distance(g_local, f, core::grid_ball(f.dim(), 13, r2));
  if (measured >= eps_prime)
    throw std::invalid_argument("extend_local: ||Dg - Df|| exceeds the eps' budget");

  // equals g_local inside r1, f outside r2
  return core::bump_blend(g_local, f, zero, core::Shell(r1, r2));
}

LinearGerm linearize_germ(const SmoothMap& f, const CompactSample& lambda,
                          const CompactSample& delta, double eps, double domain_radius) {
  Mat a = f.jacobian(Vec::Zero(f.dim()));
  // already linear: nothing to do
  bool is_linear = true;
  for (const Vec& p : core::grid_ball(f.dim(), 5, domain_radius)) {
    if ((f(p) - a * p).norm() > 1e-12) {
      is_linear = false;
      break;
    }
  }
  if (is_linear) return {f, a, domain_radius, 0.0};

  double r2 = 0.4 * domain_radius;
  double min_norm = std::min(lambda.empty() ? 1.0 : lambda.min_norm(),
                             delta.empty() ? 1.0 : delta.min_norm());
  r2 = std::min(r2, 0.5 * min_norm);
  for (int attempt = 0; attempt < 24; ++attempt, r2 *= 0.5) {
    SmoothMap cand;
    try {
      cand = extend_local(f, core::linear(a), r2 / 2.0, r2, eps);
    } catch (const std::invalid_argument&) {
      continue;  // Df not yet close enough to A on B(0, r2); shrink
    }
    auto cert = dist::is_dynamically_disjoint(cand, lambda, delta, domain_radius);
    if (!cert.certified) continue;
    double change = core::c1_distance(cand, f, core::grid_ball(f.dim(), 13, r2));
    return {cand, a, r2 / 2.0, change};
  }
  throw std::runtime_error("linearize_germ: no germ radius preserved disjointness");
}

// ---------------------------------------------------------------------------
// ball bump

namespace {

// Radial profile for the ball bump: h(s) = s m(s) interpolates the homothety
// (slope c) to the identity (slope 1) with a flattened radial eigenvalue: h'
// ramps c -> q, holds, and ramps q -> 1, with q solved so that h(r0) = r0.
// Keeping h' nearly constant minimizes the sup deviation of the radial
// eigenvalue, which is what the eps budget pays for.
struct BallProfile {
  double c, r1, r0, w, q;

  BallProfile(double c_, double r1_, double r0_) : c(c_), r1(r1_), r0(r0_) {
    w = 0.15 * (r0 - r1);
    q = (r0 - c * r1 - (c + 1.0) * w / 2.0) / (r0 - r1 - w);
    if (!(q > 0)) throw std::invalid_argument("ball profile: mu too small for the geometry");
  }

  static double sigma(double t) { return core::smoothstep(t); }
  static double sigma_int(double t) {  // integral of the quintic step from 0
    if (t <= 0) return 0.0;
    if (t >= 1) return t - 0.5;
    double t4 = t * t * t * t;
    return t4 * t * t - 3.0 * t4 * t + 2.5 * t4;
  }

  double hp(double s) const {  // h'(s): the radial eigenvalue
    if (s <= r1) return c;
    if (s >= r0) return 1.0;
    if (s < r1 + w) return c + (q - c) * sigma((s - r1) / w);
    if (s <= r0 - w) return q;
    return q + (1.0 - q) * sigma((s - (r0 - w)) / w);
  }

  double h(double s) const {
    if (s <= r1) return c * s;
    if (s >= r0) return s;
    if (s < r1 + w) {
      double t = (s - r1) / w;
      return c * r1 + c * (s - r1) + (q - c) * w * sigma_int(t);
    }
    double h1 = c * r1 + c * w + (q - c) * w * 0.5;
    if (s <= r0 - w) return h1 + q * (s - r1 - w);
    double h2 = h1 + q * (r0 - 2.0 * w - r1);
    double u = (s - (r0 - w)) / w;
    return h2 + q * (s - (r0 - w)) + (1.0 - q) * w * sigma_int(u);
  }

  double m(double s) const { return s > 0 ? h(s) / s : c; }
  double dm(double s) const { return s > 0 ? (hp(s) - m(s)) / s : 0.0; }

  // sup deviations of the forward and inverse maps from the identity
  std::pair<double, double> sups() const {
    double fwd = 0.0, inv = 0.0;
    const int samples = 4000;
    for (int i = 0; i <= samples; ++i) {
      double s = r1 + (r0 - r1) * i / samples;
      for (double eig : {m(s), hp(s)}) {
        fwd = std::max(fwd, std::abs(eig - 1.0));
        inv = std::max(inv, std::abs(1.0 / eig - 1.0));
      }
    }
    return {fwd, inv};
  }
};

}  // namespace

double ball_bump_feasible_mu(int dim, double ratio, double alpha, double eps) {
  if (!(ratio > 1.0)) throw std::invalid_argument("ball_bump_feasible_mu: ratio must be > 1");
  // feasibility is monotone in c = mu^{1/d}; bisect for the smallest feasible c
  auto feasible = [&](double c) {
    auto [fwd, inv] = BallProfile(c, 1.0, ratio).sups();
    return alpha * std::max(fwd, inv) < 0.95 * eps;
  };
  if (!feasible(1.0 - 1e-6))
    throw std::invalid_argument("ball_bump_feasible_mu: eps budget infeasible at this ratio");
  double lo = 0.0, hi = 1.0 - 1e-6;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    (feasible(mid) ? hi : lo) = mid;
  }
  return std::pow(hi, dim);
}

SmoothMap ball_bump(const Vec& center, double r0, double r1, double mu,
                    const ConformalLinear& a, double eps) {
  if (!(0 < r1 && r1 < r0)) throw std::invalid_argument("ball_bump: need 0 < r1 < r0");
  if (!(mu > 0.0 && mu <= 1.0)) throw std::invalid_argument("ball_bump: mu must be in (0,1]");
  const int d = static_cast<int>(center.size());
  if (mu == 1.0) return core::identity(d);
  double c = std::pow(mu, 1.0 / d);
  BallProfile prof(c, r1, r0);
  auto [fwd, inv] = prof.sups();
  if (a.norm() * std::max(fwd, inv) >= eps)
    throw std::invalid_argument("ball_bump: mu too small for the eps budget at this ratio");
  return core::radial_map(center, [prof](double s) { return prof.m(s); },
                          [prof](double s) { return prof.dm(s); });
}

// ---------------------------------------------------------------------------
// the orbit-supported composite map

namespace {

// log-safe application of a conformal power to a point
Vec conformal_power_apply(const ConformalLinear& a, long j, const Vec& x) {
  Vec y = x;
  if (!a.angles.empty()) {
    for (size_t b = 0; b < a.angles.size(); ++b) {
      double t = a.angles[b] * j;
      double cth = std::cos(t), sth = std::sin(t);
      int i = static_cast<int>(2 * b);
      double u = y[i], v = y[i + 1];
      y[i] = cth * u - sth * v;
      y[i + 1] = sth * u + cth * v;
    }
  }
  double n = y.norm();
  if (n == 0.0) return y;
  double scale = std::exp(j * std::log(a.ratio) + std::log(n));
  return (scale / n) * y;
}

Mat rotation_power(const ConformalLinear& a, long j) {
  int d = a.dim;
  Mat r = Mat::Identity(d, d);
  for (size_t b = 0; b < a.angles.size(); ++b) {
    double t = a.angles[b] * j;
    int i = static_cast<int>(2 * b);
    r(i, i) = std::cos(t);
    r(i, i + 1) = -std::sin(t);
    r(i + 1, i) = std::sin(t);
    r(i + 1, i + 1) = std::cos(t);
  }
  return r;
}

struct OrbitEntry {
  Vec center;
  double r0 = 0;
  ExprPtr eta, eta_inv;
  int n = 0, m = 0;
};

// g(x) = A o eta_{n+i}(x) on A^{n+i}(D0) for i in [0,m),
//        A o eta_{n+m+i}^{-1}(x) on A^{n+m+i}(D0) for i in [0,m),
//        A(x) elsewhere; eta_j = A^j eta A^{-j}.
class OrbitBumpMap final : public MapExpr {
 public:
  OrbitBumpMap(ConformalLinear a, std::vector<OrbitEntry> entries)
      : a_(std::move(a)), entries_(std::move(entries)) {}

  int dim() const override { return a_.dim; }

  Vec value(const Vec& x) const override {
    const MapExpr* local = nullptr;
    long j = 0;
    if (locate(x, &local, &j)) {
      Vec y = conformal_power_apply(a_, -j, x);
      return conformal_power_apply(a_, j + 1, local->value(y));
    }
    return conformal_power_apply(a_, 1, x);
  }

  Mat jacobian(const Vec& x) const override {
    const MapExpr* local = nullptr;
    long j = 0;
    if (locate(x, &local, &j)) {
      Vec y = conformal_power_apply(a_, -j, x);
      // A^{j+1} Deta A^{-j} = alpha * R^{j+1} Deta R^{-j}
      return a_.ratio * rotation_power(a_, j + 1) * local->jacobian(y) * rotation_power(a_, -j);
    }
    return a_.matrix();
  }

 private:
  bool locate(const Vec& x, const MapExpr** local, long* j_out) const {
    double nx = x.norm();
    if (nx <= 0.0) return false;
    double lr = std::log(a_.ratio);
    for (const OrbitEntry& e : entries_) {
      double nc = e.center.norm();
      long j_guess = std::lround((std::log(nx) - std::log(nc)) / lr);
      for (long j = j_guess - 1; j <= j_guess + 1; ++j) {
        if (j < e.n || j >= e.n + 2L * e.m) continue;
        Vec y = conformal_power_apply(a_, -j, x);
        if ((y - e.center).norm() <= e.r0) {
          *local = (j < e.n + e.m) ? e.eta.get() : e.eta_inv.get();
          *j_out = j;
          return true;
        }
      }
    }
    return false;
  }

  ConformalLinear a_;
  std::vector<OrbitEntry> entries_;
};

}  // namespace

TidyPerturbation conformal_ball_sequence(const ConformalLinear& a, const SmoothMap& eta,
                                         const SmoothMap& eta_inv, const CoveredBall& ball,
                                         int n_start, int m_len) {
  SmoothMap base = core::linear(a);
  if (m_len == 0) {
    Shell trivial(std::pow(a.ratio, n_start + 1) * ball.r_fund,
                  std::pow(a.ratio, n_start) * ball.r_fund);
    return {base, base, SupportRegion::full(trivial), 0.0, true};
  }
  std::vector<OrbitEntry> entries{
      {ball.center, ball.r0, eta.expr(), eta_inv.expr(), n_start, m_len}};
  SmoothMap g(std::make_shared<OrbitBumpMap>(a, std::move(entries)));
  Shell support(std::pow(a.ratio, n_start + 2.0 * m_len) * ball.r_fund,
                std::pow(a.ratio, n_start) * ball.r_fund);
  return {base, g, SupportRegion::full(support), 0.0, true};
}

// ---------------------------------------------------------------------------
// ball cover

namespace {

// does the full A-orbit of B(center, r0) avoid every margin ball of lambda?
bool orbit_avoids(const ConformalLinear& a, const Vec& center, double r0,
                  const CompactSample& lambda) {
  double alpha = a.ratio;
  double nc = center.norm();
  double lo = lambda.min_norm() - lambda.margin, hi = lambda.max_norm() + lambda.margin;
  long n_lo = static_cast<long>(std::floor(std::log((lo) / (nc + r0)) / std::log(alpha))) - 1;
  long n_hi = static_cast<long>(std::ceil(std::log(hi / (nc - r0)) / std::log(alpha))) + 1;
  if (n_lo > n_hi) std::swap(n_lo, n_hi);
  for (long n = n_lo; n <= n_hi; ++n) {
    Vec cn = conformal_power_apply(a, n, center);
    double rn = std::pow(alpha, static_cast<double>(n)) * r0;
    for (const Vec& x : lambda.points)
      if ((x - cn).norm() <= rn + lambda.margin) return false;
  }
  return true;
}

}  // namespace

BallCover cover_target(const ConformalLinear& a, const CompactSample& lambda,
                       const CompactSample& delta) {
  BallCover cover;
  double alpha = a.ratio;
  double sq = std::sqrt(alpha);
  for (const Vec& y : delta.points) {
    double ny = y.norm();
    if (ny <= 0.0) throw std::invalid_argument("cover_target: target point at the origin");
    double r_fund = ny / sq;  // y sits mid-shell in S(alpha r, r)
    double gap = 0.9 * std::min(ny * (1.0 / sq - 1.0), ny * (1.0 - sq));
    double r0 = std::min(gap, std::max(4.0 * delta.margin, 0.05 * ny));
    bool placed = false;
    for (int attempt = 0; attempt < 40; ++attempt, r0 *= 0.6) {
      if (r0 <= delta.margin) break;  // margin ball must fit in D1 = D0/4
      if (r0 / 4.0 <= delta.margin) continue;
      if (orbit_avoids(a, y, r0, lambda)) {
        cover.balls.push_back({y, r0, r0 / 4.0, r_fund});
        placed = true;
        break;
      }
    }
    if (!placed)
      throw std::runtime_error("cover_target: could not place a ball avoiding Lambda's orbit");
  }
  return cover;
}

// ---------------------------------------------------------------------------
// the conformal K-distortion pipeline

namespace {

bool orbits_disjoint(const ConformalLinear& a, const CoveredBall& b1, const CoveredBall& b2) {
  double alpha = a.ratio;
  double n1 = b1.center.norm(), n2 = b2.center.norm();
  long lo = static_cast<long>(std::floor(std::log((n2 - b2.r0) / (n1 + b1.r0)) / std::log(alpha))) - 1;
  long hi = static_cast<long>(std::ceil(std::log((n2 + b2.r0) / (n1 - b1.r0)) / std::log(alpha))) + 1;
  if (lo > hi) std::swap(lo, hi);
  for (long n = lo; n <= hi; ++n) {
    Vec cn = conformal_power_apply(a, n, b1.center);
    double rn = std::pow(alpha, static_cast<double>(n)) * b1.r0;
    if ((cn - b2.center).norm() <= rn + b2.r0) return false;
  }
  return true;
}

}  // namespace

ConformalDistortionResult conformal_k_distortion(const ConformalLinear& a,
                                                 const CompactSample& lambda,
                                                 const CompactSample& delta, double eps,
                                                 double K, double s,
                                                 const ConformalDistortionOptions& opts) {
  ConformalDistortionResult res;
  SmoothMap base = core::linear(a);
  double alpha = a.ratio;
  if (!(alpha < 1.0)) throw std::invalid_argument("conformal_k_distortion: not a contraction");

  if (K <= 1.0 || lambda.empty() || delta.empty()) {
    res.tidy = {base, base, SupportRegion::full(Shell(alpha * s, s)), 0.0, true};
    res.beta = alpha;
    res.s = s;
    res.witnesses = dist::k_distortion_time(base, lambda, delta, std::min(K, 0.999999), 1);
    return res;
  }

  double r = std::min(lambda.min_norm() - lambda.margin, delta.min_norm() - delta.margin);
  if (!(0 < s && s < r))
    throw std::invalid_argument("conformal_k_distortion: need 0 < s < dist(samples, 0)");

  // ell: the samples span ell consecutive fundamental domains (the enclosing
  // shell S(alpha^ell r_out, r_out))
  double r_out = std::max(lambda.max_norm() + lambda.margin, delta.max_norm() + delta.margin);
  int ell = 1;
  while (std::pow(alpha, ell) * r_out >= r) ++ell;
  res.ell = ell;

  res.cover = cover_target(a, lambda, delta);
  const int d = a.dim;

  // per-ball contraction factors and lengths
  for (const CoveredBall& b : res.cover.balls) {
    double ratio = b.r0 / b.r1;
    double mu = ball_bump_feasible_mu(d, ratio, alpha, eps);
    int m = static_cast<int>(std::ceil(std::log(K) / -std::log(mu))) + 1;
    res.ball_mu.push_back(mu);
    res.ball_m.push_back(m);
  }

  // batches of balls with pairwise disjoint orbits share one shell window
  std::vector<std::vector<int>> batches;
  for (int bi = 0; bi < static_cast<int>(res.cover.balls.size()); ++bi) {
    bool placed = false;
    if (!opts.strict_nesting) {
      for (auto& batch : batches) {
        bool ok = true;
        for (int other : batch)
          if (!orbits_disjoint(a, res.cover.balls[bi], res.cover.balls[other])) {
            ok = false;
            break;
          }
        if (ok) {
          batch.push_back(bi);
          placed = true;
          break;
        }
      }
    }
    if (!placed) batches.push_back({bi});
  }

  // nested shell ladder across batches
  double s_b = std::min(s, std::pow(alpha, ell) * r_out);
  std::vector<OrbitEntry> entries;
  double beta_total = 1.0;
  int horizon = 0;
  for (const auto& batch : batches) {
    int m_max = 0;
    for (int bi : batch) m_max = std::max(m_max, res.ball_m[bi]);
    double beta_b = std::pow(alpha, 2.0 * m_max + 1.0);
    for (int bi : batch) {
      const CoveredBall& ball = res.cover.balls[bi];
      int n_j = 0;
      while (std::pow(alpha, n_j) * ball.r_fund >= s_b) ++n_j;
      SmoothMap eta = ball_bump(ball.center, ball.r0, ball.r1, res.ball_mu[bi], a, eps);
      SmoothMap eta_inv = eta.inverse();
      entries.push_back({ball.center, ball.r0, eta.expr(), eta_inv.expr(), n_j, res.ball_m[bi]});
      horizon = std::max(horizon, n_j + 2 * res.ball_m[bi]);
    }
    beta_total *= beta_b;
    s_b = std::pow(alpha, 2.0 * ell + 1.0) * beta_b * s_b;
  }
  res.beta = std::pow(alpha, (2.0 * ell + 1.0) * batches.size()) * beta_total;
  res.s = s;
  if (!(res.beta * s > 0))
    throw std::runtime_error("conformal_k_distortion: shell ladder underflowed");

  SmoothMap g(std::make_shared<OrbitBumpMap>(a, entries));
  res.tidy = {base, g, SupportRegion::full(Shell(res.beta * s, s)), eps, true};

  // c1 distance, sampled on the active legs (conformal conjugation preserves
  // the norm, so the base ball position is representative; we still sample a
  // few conjugated legs directly)
  double c1 = 0.0;
  for (const OrbitEntry& e : entries) {
    std::vector<Vec> grid;
    for (const Vec& p : core::grid_box(d, 7, e.r0 * 1.1, e.center)) {
      grid.push_back(conformal_power_apply(a, e.n, p));
      grid.push_back(conformal_power_apply(a, e.n + e.m, p));
    }
    c1 = std::max(c1, core::c1_distance(g, base, grid));
  }
  res.c1_measured = c1;

  int n_max = std::min(horizon + 2 * ell + 4, opts.n_max);
  res.witnesses = dist::k_distortion_time(g, lambda, delta, K, n_max);
  if (!res.witnesses.all_pairs)
    throw std::runtime_error("conformal_k_distortion: a pair failed to reach K (internal)");
  return res;
}

}  // namespace pertkit::construct
