#pragma once

// Certification of dynamical disjointness and of the K-distortion property
// for contractions, plus the commutator-boundedness quantity that makes
// unbounded distortion force trivial centralizers.
//
// Compact sets are represented by finite samples with a separation margin;
// certification is rigorous relative to the margin and the sampled
// sup-norms.

#include <optional>
#include <string>
#include <vector>

#include "pertkit/core.hpp"

namespace pertkit::dist {

using core::Mat;
using core::SmoothMap;
using core::Vec;

// Finite point set standing in for a compact set, with a covering/separation
// radius: the true set is contained in the union of margin-balls around the
// sample points.
struct CompactSample {
  std::vector<Vec> points;
  double margin = 0.0;

  CompactSample() = default;
  CompactSample(std::vector<Vec> pts, double m) : points(std::move(pts)), margin(m) {
    if (margin < 0) throw std::invalid_argument("CompactSample: negative margin");
  }
  bool empty() const { return points.empty(); }
  double min_norm() const;
  double max_norm() const;
};

struct DisjointReport {
  bool certified = false;
  std::string reason;        // set when not certified
  int horizon = 0;           // iterates examined on each side
  double min_gap = 0.0;      // min over checked pairs of (distance - margin sum)
  double lipschitz = 0.0;    // measured sup ||Df|| over the working ball
  double absorb_radius = 0;  // forward-invariant ball used to stop the scan
  double c1_allowance = 0;   // perturbations of f below this keep the certificate
};

// Absorbing-ball certification: iterate each sample until it is inside a
// verified forward-invariant ball separated from the other set, checking all
// pairwise distances along the way against the margin sum.
DisjointReport is_dynamically_disjoint(const SmoothMap& f, const CompactSample& lambda,
                                       const CompactSample& delta,
                                       double domain_radius = 1.0, int max_iterates = 20000);

struct PairWitness {
  int lambda_index = 0;
  int delta_index = 0;
  std::optional<int> time;   // least n <= n_max with log-ratio > log K
  double log_ratio = 0.0;    // achieved log ratio at the witness (or best seen)
};

// Witness table plus the raw log|Jac| traces it was read from, so every
// reported time is recomputable offline.
struct DistortionReport {
  double k = 1.0;
  int n_max = 0;
  bool all_pairs = false;
  std::vector<PairWitness> pairs;
  std::vector<std::vector<double>> lambda_traces;  // log|Jac f^n(x)|, n = 0..n_max
  std::vector<std::vector<double>> delta_traces;
};

// least witness times for |Jac f^n(x) / Jac f^n(y)| > K over Lambda x Delta
DistortionReport k_distortion_time(const SmoothMap& f, const CompactSample& lambda,
                                   const CompactSample& delta, double k, int n_max,
                                   double domain_radius = 1e9);

// max over n <= n_steps of |Jac f^n(x) / Jac f^n(f^m x)|.  Bounded in m for
// commuting pairs; the quantity the distortion mechanism contrasts against.
double commuting_distortion_bound(const SmoothMap& f, const Vec& x, int m, int n_steps,
                                  double domain_radius = 1e9);

}  // namespace pertkit::dist
