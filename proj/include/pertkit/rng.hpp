#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace pertkit {

// Seedable, portable random source.  All draws go through the raw 64-bit
// output of mt19937_64 (whose sequence is fixed by the standard), so the
// same seed produces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // uniform in [0,1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  // point with norm in [r_lo, r_hi], direction uniform on the sphere
  Eigen::VectorXd annulus_point(int dim, double r_lo, double r_hi) {
    Eigen::VectorXd v(dim);
    double n2;
    do {
      for (int i = 0; i < dim; ++i) v[i] = gaussian();
      n2 = v.squaredNorm();
    } while (n2 < 1e-30);
    v /= std::sqrt(n2);
    return v * uniform(r_lo, r_hi);
  }

  double gaussian() {
    // Box-Muller on the portable uniform stream
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace pertkit
