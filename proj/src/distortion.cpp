#include "pertkit/distortion.hpp"

#include <algorithm>
#include <cmath>

namespace pertkit::dist {

double CompactSample::min_norm() const {
  double r = std::numeric_limits<double>::infinity();
  for (const Vec& p : points) r = std::min(r, p.norm());
  return r;
}

double CompactSample::max_norm() const {
  double r = 0.0;
  for (const Vec& p : points) r = std::max(r, p.norm());
  return r;
}

namespace {

double min_pair_distance(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  double best = std::numeric_limits<double>::infinity();
  for (const Vec& x : a)
    for (const Vec& y : b) best = std::min(best, (x - y).norm());
  return best;
}

// sup of ||f(x)|| over a grid of the ball: the absorbing-ball test
double sup_image_norm(const SmoothMap& f, double radius) {
  double sup = 0.0;
  int per_axis = f.dim() <= 2 ? 17 : 9;
  for (const Vec& p : core::grid_ball(f.dim(), per_axis, radius))
    sup = std::max(sup, f(p).norm());
  return sup;
}

double sup_jacobian_norm(const SmoothMap& f, double radius) {
  double sup = 0.0;
  int per_axis = f.dim() <= 2 ? 17 : 9;
  for (const Vec& p : core::grid_ball(f.dim(), per_axis, radius))
    sup = std::max(sup, core::op_norm(f.jacobian(p)));
  return sup;
}

}  // namespace

DisjointReport is_dynamically_disjoint(const SmoothMap& f, const CompactSample& lambda,
                                       const CompactSample& delta, double domain_radius,
                                       int max_iterates) {
  DisjointReport rep;
  if (lambda.empty() || delta.empty()) {
    rep.certified = true;
    rep.reason = "empty sample";
    rep.min_gap = std::numeric_limits<double>::infinity();
    return rep;
  }

  const double margin_sum = lambda.margin + delta.margin;
  rep.lipschitz = sup_jacobian_norm(f, domain_radius);
  const double lip = std::max(rep.lipschitz, 1e-12);

  const double r_lambda = lambda.min_norm() - lambda.margin;
  const double r_delta = delta.min_norm() - delta.margin;
  if (r_lambda <= 0 || r_delta <= 0) {
    rep.reason = "sample margin reaches the origin";
    return rep;
  }

  rep.min_gap = std::numeric_limits<double>::infinity();

  // One-sided scans suffice: f^n(L) meets f^m(D) iff L meets f^{m-n}(D) or
  // f^{n-m}(L) meets D, since f is injective.
  struct Side {
    const std::vector<Vec>* moving;
    const std::vector<Vec>* fixed;
    double margin_moving, margin_fixed, r_fixed;
  };
  Side sides[2] = {{&delta.points, &lambda.points, delta.margin, lambda.margin, r_lambda},
                   {&lambda.points, &delta.points, lambda.margin, delta.margin, r_delta}};

  for (const Side& side : sides) {
    std::vector<Vec> pts = *side.moving;
    double margin_now = side.margin_moving;
    for (int j = 0;; ++j) {
      double gap = min_pair_distance(pts, *side.fixed) - (margin_now + side.margin_fixed);
      rep.min_gap = std::min(rep.min_gap, gap);
      if (gap <= 0) {
        rep.reason = "iterate distance below the margin sum at step " + std::to_string(j);
        rep.horizon = std::max(rep.horizon, j);
        return rep;
      }
      // stopping rule: the moving set (with its margin) sits inside a ball
      // disjoint from the fixed set, and the ball is forward invariant.
      double ball = 0.0;
      for (const Vec& p : pts) ball = std::max(ball, p.norm());
      ball += margin_now;
      if (ball < side.r_fixed && sup_image_norm(f, ball) < ball) {
        rep.absorb_radius = std::max(rep.absorb_radius, ball);
        rep.horizon = std::max(rep.horizon, j);
        break;
      }
      if (j >= max_iterates) {
        rep.reason = "no absorbing ball found within the iterate cap";
        rep.horizon = j;
        return rep;
      }
      for (Vec& p : pts) {
        p = f(p);
        if (p.norm() > domain_radius) {
          rep.reason = "orbit left the domain";
          return rep;
        }
      }
      if (lip > 1.0) margin_now *= lip;
    }
  }

  rep.certified = true;
  if (rep.lipschitz < 1.0)
    rep.c1_allowance = rep.min_gap * (1.0 - rep.lipschitz) / 4.0;
  return rep;
}

DistortionReport k_distortion_time(const SmoothMap& f, const CompactSample& lambda,
                                   const CompactSample& delta, double k, int n_max,
                                   double domain_radius) {
  if (k <= 0) throw std::invalid_argument("k_distortion_time: K must be positive");
  DistortionReport rep;
  rep.k = k;
  rep.n_max = n_max;
  for (const Vec& x : lambda.points)
    rep.lambda_traces.push_back(core::log_det_trace(f, x, n_max, domain_radius));
  for (const Vec& y : delta.points)
    rep.delta_traces.push_back(core::log_det_trace(f, y, n_max, domain_radius));

  const double log_k = std::log(k);
  rep.all_pairs = true;
  for (size_t i = 0; i < rep.lambda_traces.size(); ++i) {
    for (size_t j = 0; j < rep.delta_traces.size(); ++j) {
      PairWitness w;
      w.lambda_index = static_cast<int>(i);
      w.delta_index = static_cast<int>(j);
      double best = -std::numeric_limits<double>::infinity();
      for (int n = 0; n <= n_max; ++n) {
        double lr = rep.lambda_traces[i][n] - rep.delta_traces[j][n];
        best = std::max(best, lr);
        if (lr > log_k) {
          w.time = n;
          w.log_ratio = lr;
          break;
        }
      }
      if (!w.time) {
        w.log_ratio = best;
        rep.all_pairs = false;
      }
      rep.pairs.push_back(w);
    }
  }
  return rep;
}

double commuting_distortion_bound(const SmoothMap& f, const Vec& x, int m, int n_steps,
                                  double domain_radius) {
  if (x.norm() == 0.0) throw std::invalid_argument("commuting_distortion_bound: x must be nonzero");
  Vec y = x;
  for (int i = 0; i < m; ++i) y = f(y);
  auto tx = core::log_det_trace(f, x, n_steps, domain_radius);
  auto ty = core::log_det_trace(f, y, n_steps, domain_radius);
  double best = 0.0;  // n = 0 gives ratio 1
  for (int n = 1; n <= n_steps; ++n) best = std::max(best, tx[n] - ty[n]);
  return std::exp(best);
}

}  // namespace pertkit::dist
