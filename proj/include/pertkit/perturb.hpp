#pragma once

// Constructive shell-supported perturbations: given a contraction and
// dynamically disjoint samples, manufacture a tidy perturbation achieving
// the K-distortion property.  Conformal, reduced-linear, and general
// (dimension-induction) routes.

#include <optional>
#include <vector>

#include "pertkit/core.hpp"
#include "pertkit/distortion.hpp"
#include "pertkit/rng.hpp"

namespace pertkit::construct {

using core::ConformalLinear;
using core::Mat;
using core::Shell;
using core::SmoothMap;
using core::Vec;
using dist::CompactSample;
using dist::DistortionReport;

// ---------------------------------------------------------------------------
// tidy perturbations

// Support descriptor: a spherical shell of R^d about the origin, or the
// product U_E x (shell in F) with F spanned by the trailing dim_f coordinates.
struct SupportRegion {
  enum class Kind { FullShell, ProductShell };
  Kind kind = Kind::FullShell;
  Shell shell;
  int dim_f = 0;  // ProductShell only

  static SupportRegion full(const Shell& s) { return {Kind::FullShell, s, 0}; }
  static SupportRegion product(const Shell& s, int df) { return {Kind::ProductShell, s, df}; }

  // complement of the open support region
  bool outside(const Vec& x) const {
    double s = kind == Kind::FullShell ? x.norm() : x.tail(dim_f).norm();
    return s <= shell.r1 || s >= shell.r2;
  }
};

struct TidyPerturbation {
  SmoothMap base;
  SmoothMap result;
  SupportRegion support;
  double epsilon_used = 0.0;
  bool claims_tidy = true;  // the general pipeline may give up tidiness
};

struct TidyCheckEntry {
  int probe = 0;
  int time = 0;
  double residual = 0.0;
};

struct TidyCheckReport {
  double max_residual = 0.0;
  std::vector<TidyCheckEntry> entries;
};

// For each probe outside the support and each m <= n_steps with g^m(probe)
// outside the support, report ||g^m - f^m||.
TidyCheckReport tidy_check(const TidyPerturbation& p, const CompactSample& probes, int n_steps);

// ---------------------------------------------------------------------------
// local extension and germ linearization

// Bump-glue g_local (on B(0,r2)) into f: result equals g_local on B(0,r1),
// f outside B(0,r2), with c1 distance to f below eps.  Requires
// sup ||Dg - Df|| on B(0,r2) below eps / (1 + 2 lam/(lam-1)), lam = r2/r1.
SmoothMap extend_local(const SmoothMap& f, const SmoothMap& g_local, double r1, double r2,
                       double eps);

struct LinearGerm {
  SmoothMap map;     // f with the germ installed
  Mat germ;          // D_0 f
  double radius;     // map == germ on B(0, radius)
  double c1_change;  // measured distance to the input
};

// Install the linear germ D_0 f near the origin, shrinking the germ ball
// until the c1 budget holds and (Lambda, Delta) re-certify as dynamically
// disjoint.
LinearGerm linearize_germ(const SmoothMap& f, const CompactSample& lambda,
                          const CompactSample& delta, double eps, double domain_radius = 1.0);

// ---------------------------------------------------------------------------
// conformal pipeline

// eta: identity off B(c, r0), affine conformal contraction of Jacobian mu on
// B(c, r1); throws when mu is too small for the eps budget at ratio r1/r0.
SmoothMap ball_bump(const Vec& center, double r0, double r1, double mu,
                    const ConformalLinear& a, double eps);

// largest per-step Jacobian mu feasible for the budget (both eta and eta^{-1}
// within eps of the identity after composing with a); ratio = r1/r0.
double ball_bump_feasible_mu(int dim, double ratio, double alpha, double eps);

struct CoveredBall {
  Vec center;
  double r0 = 0, r1 = 0;  // outer/inner radii (D0, D1)
  double r_fund = 0;      // D0 is inside the fundamental domain S(alpha r, r)
};

struct BallCover {
  std::vector<CoveredBall> balls;
};

// Cover the Delta sample by balls inside fundamental domains whose A-orbits
// avoid Lambda (certified; radii shrink until the checks pass).
BallCover cover_target(const ConformalLinear& a, const CompactSample& lambda,
                       const CompactSample& delta);

// The basic tidy move: apply conjugates eta_i = A^i eta A^{-i} forward for m
// steps and their inverses for the next m steps.
TidyPerturbation conformal_ball_sequence(const ConformalLinear& a, const SmoothMap& eta,
                                         const SmoothMap& eta_inv, const CoveredBall& ball,
                                         int n_start, int m_len);

struct ConformalDistortionOptions {
  bool strict_nesting = false;  // one nested shell per ball (no orbit-parallel batching)
  int n_max = 4000;             // witness horizon cap
};

struct ConformalDistortionResult {
  TidyPerturbation tidy;
  double beta = 0.0;  // result is tidy relative to S(beta s, s)
  double s = 0.0;
  int ell = 0;                     // S(alpha^ell, 1) contains the samples
  BallCover cover;
  std::vector<int> ball_m;         // per-ball distortion length
  std::vector<double> ball_mu;     // per-ball Jacobian factor
  DistortionReport witnesses;
  double c1_measured = 0.0;
};

// Full nested-shell composition: K-distortion for all Lambda x Delta pairs,
// tidy relative to A and S(beta s, s).
ConformalDistortionResult conformal_k_distortion(const ConformalLinear& a,
                                                 const CompactSample& lambda,
                                                 const CompactSample& delta, double eps,
                                                 double K, double s,
                                                 const ConformalDistortionOptions& opts = {});

// ---------------------------------------------------------------------------
// reduced linear contractions

struct ReducedLinearContraction {
  Mat matrix;          // block diag(A_E, A_F) in the working coordinates
  int dim_e = 0, dim_f = 0;
  Mat a_e;             // E block (weakly contracted sum)
  ConformalLinear a_f; // F block: most contracted, conformal
  double nu = 0.0;     // ||A_E^{-1}|| ||A_F|| < 1

  ReducedLinearContraction(Mat ae, ConformalLinear af);
  double alpha_f() const { return a_f.ratio; }
  SmoothMap map() const { return core::linear(matrix); }
};

// Reduce a linear contraction to block-conformal coordinates, perturbing by
// at most eps when the spectrum is not simple (resampled rotations, up to 8
// tries).  Returns the reduced form plus the basis change T with
// A = T * reduced * T^{-1}.
struct ReductionResult {
  ReducedLinearContraction reduced;
  Mat basis;  // columns: new coordinates expressed in old ones
  double perturbation = 0.0;
};
ReductionResult reduce_contraction(const Mat& a, double eps, Rng& rng);

// thin-shell move (inside F): psi = conformal dilation alpha^{-3/k} on
// S_{i,k}, identity outside a fundamental domain G_r with flanking shells of
// modulus >= mu/3
struct ThinShellMove {
  SmoothMap psi;       // on F
  Shell domain;        // the fundamental domain G_r
  Shell moved_shell;   // S_{i,k}
  Shell image_shell;   // d_k(S_{i,k}) = S_{i-3,k}
  double dilation = 0; // alpha^{-3/k}
};

int move_thin_shell_k0(double alpha, double eps0);
ThinShellMove move_thin_shell(int dim_f, double alpha, int k, int i, double eps0);

// product pieces: closure of B_E(center, delta) x S_{i,k}
struct ProductPiece {
  Vec center_e;
  double delta = 0;
  int shell_index = 0;
  int k = 1;
  Shell f_shell(double alpha) const {
    return Shell(std::pow(alpha, (shell_index + 1.0) / k), std::pow(alpha, double(shell_index) / k));
  }
};

CompactSample sample_product_piece(const ReducedLinearContraction& a, const ProductPiece& piece,
                                   int count, double margin, Rng& rng);

struct SeparationResult {
  SmoothMap g1;
  SmoothMap phi;        // g1 = A o phi; identity when the projections were already disjoint
  bool trivial = false; // the projections were already dynamically disjoint
  Shell s1;             // fundamental domain of A_F containing the move
  int ell = 0;          // iterates taken before the move
  int ell1 = 0;         // g1^{ell1}(samples) inside U_E x I(S1)
};

// Skew perturbation g1 = A o phi, phi(u,v) = (u, rho(u) psi(v) + (1-rho(u)) v),
// making the F-projections of the two pieces dynamically disjoint.
SeparationResult separate_projections(const ReducedLinearContraction& a,
                                      const ProductPiece& piece_lambda,
                                      const ProductPiece& piece_delta,
                                      const CompactSample& lambda, const CompactSample& delta,
                                      double eps, double v_f_radius);

struct ReducedDistortionResult {
  TidyPerturbation tidy;
  SeparationResult separation;
  double k_prime = 0.0;
  int ell2 = 0;
  Shell s2, s3;
  DistortionReport witnesses;
  double c1_measured = 0.0;
};

// Three-step composition g3 = g2 o phibar of Proposition-style reduced
// distortion: separation, projection distortion glued on U_E x S2, then the
// tidying conjugation phibar = A^{l2} phi^{-1} A^{-l2}.
ReducedDistortionResult reduced_linear_k_distortion(const ReducedLinearContraction& a,
                                                    const ProductPiece& piece_lambda,
                                                    const ProductPiece& piece_delta,
                                                    const CompactSample& lambda,
                                                    const CompactSample& delta, double eps,
                                                    double K, double v_f_radius = 0.5);

// ---------------------------------------------------------------------------
// general pipeline (dimension induction)

struct GeneralDistortionResult {
  TidyPerturbation tidy;
  DistortionReport witnesses;  // over the original samples
  double c1_measured = 0.0;
  int madjust_time = 0;        // iterates taken before entering the germ
  double k_effective = 0.0;    // K' requested inside the germ
  std::string route;           // which construction path ran
};

GeneralDistortionResult general_k_distortion(const SmoothMap& f, const CompactSample& lambda,
                                             const CompactSample& delta, double eps, double K,
                                             Rng& rng, double domain_radius = 1.0);

}  // namespace pertkit::construct
