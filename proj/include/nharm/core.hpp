#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace nharm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double ball_volume(int n) {
  // |B^1|=2, |B^2|=pi, |B^3|=4pi/3
  switch (n) {
    case 1: return 2.0;
    case 2: return M_PI;
    case 3: return 4.0 * M_PI / 3.0;
    default: throw std::invalid_argument("ball_volume: dimension out of range");
  }
}

inline double sphere_area(int n) {
  // |S^{n-1}| = n |B^n|
  return n * ball_volume(n);
}

// Quintic ramp q with q(0)=0, q(1)=1 and vanishing first and second
// derivatives at both ends. Used for all cutoffs and blending profiles.
inline double quintic_ramp(double t) {
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
}

inline double quintic_ramp_d(double t) {
  if (t <= 0.0 || t >= 1.0) return 0.0;
  return 30.0 * t * t * (1.0 + t * (-2.0 + t));
}

// bump == 1 for t <= t0, == 0 for t >= t1, quintic in between.
inline double quintic_bump(double t, double t0, double t1) {
  return 1.0 - quintic_ramp((t - t0) / (t1 - t0));
}

inline double quintic_bump_d(double t, double t0, double t1) {
  return -quintic_ramp_d((t - t0) / (t1 - t0)) / (t1 - t0);
}

// ---------------------------------------------------------------------------
// Small dense matrix functions (n = 2 or 3 in practice, code is generic).

// Scaling-and-squaring with a truncated Taylor tail; fine for the small,
// moderately sized matrices used here.
Mat matrix_exp(const Mat& A);

// Principal logarithm for M with ||M - I||_2 < 0.5, by inverse scaling and
// squaring (repeated square roots) plus the log(1+X) series with remainder
// control. Throws std::invalid_argument outside the convergence ball.
Mat matrix_log_near_identity(const Mat& M);

// Polar decomposition A = Q S with Q orthogonal and S symmetric positive
// definite, by the Newton iteration Q <- (Q + Q^{-T})/2. Throws if the
// smallest singular value of A is below sigma_min_tol.
void polar_decompose(const Mat& A, Mat& Q, Mat& S, double sigma_min_tol = 1e-6);

// Rotation R (det = +1) with R*from = to for unit vectors, minimal-angle
// (Rodrigues). Antipodal inputs fall back to a fixed 180-degree rotation.
Mat rotation_between(const Vec& from, const Vec& to);

// Orthonormal basis of the hyperplane orthogonal to unit vector w,
// deterministic in w. Columns of the returned (n x n-1) matrix.
Mat tangent_basis(const Vec& w);

// ---------------------------------------------------------------------------
// Deterministic parallelism: work is split into a fixed number of blocks
// (independent of the thread count) and any reduction is performed by the
// caller in block order, so results are bitwise reproducible.

int thread_count();
void set_thread_count(int t);

// Executes body(block, begin, end) for a fixed partition of [0, nitems).
void parallel_blocks(std::size_t nitems,
                     const std::function<void(int, std::size_t, std::size_t)>& body,
                     int nblocks = 64);

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes/weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w);

// Simplex quadrature: barycentric points (rows) and weights summing to 1.
// degree = 2 or 4. dim = 2 (triangles) or 3 (tets).
void simplex_quadrature(int dim, int degree, Mat& bary, std::vector<double>& w);

// RNG convenience: deterministic uniform in [lo,hi) from a seeded engine.
struct SplitMix {
  // Tiny deterministic generator, stable across platforms.
  uint64_t state;
  explicit SplitMix(uint64_t seed) : state(seed) {}
  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  double uniform() { return (next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller (deterministic).
  double normal() {
    double u1 = std::max(uniform(), 1e-300), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  Vec unit_vector(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v[i] = normal();
    double nrm = v.norm();
    return nrm > 0 ? Vec(v / nrm) : Vec(Vec::Unit(n, 0));
  }
};

}  // namespace nharm
