#pragma once

#include "nharm/core.hpp"

#include <memory>
#include <optional>

namespace nharm {

// ---------------------------------------------------------------------------
// Simplicial mesh of a domain diffeomorphic to the unit ball, n = 2 or 3.
// Simplices are stored positively oriented; boundary faces are oriented
// outward (2D: interior lies left of a->b; 3D: (b-a)x(c-a) points outward).

struct Domain {
  int dim = 3;
  Mat vertices;                     // nv x dim
  Eigen::MatrixXi simplices;        // ns x (dim+1)
  Eigen::MatrixXi boundary_faces;   // nb x dim
  Mat boundary_normals;             // nb x dim, unit outward
  Eigen::VectorXi boundary_face_simplex;  // adjacent simplex per face
  std::vector<char> vertex_on_boundary;
  double max_edge = 0.0;

  // Smooth boundary description for the built-in families: rho > 0 inside,
  // rho = 0 on the boundary, grad rho != 0 near it.
  std::function<double(const Vec&)> levelset;
  std::function<Vec(const Vec&)> levelset_grad;

  // Caches filled by finalize().
  std::vector<double> simplex_volume;
  std::vector<Mat> simplex_grad;    // (dim+1) x dim: rows are grad of P1 hats
  std::vector<double> boundary_face_area;
  std::vector<double> vertex_lumped_volume;
  std::vector<double> vertex_lumped_boundary_area;

  int num_vertices() const { return static_cast<int>(vertices.rows()); }
  int num_simplices() const { return static_cast<int>(simplices.rows()); }
  int num_boundary_faces() const { return static_cast<int>(boundary_faces.rows()); }
  double total_volume() const;

  // Orients simplices/faces, computes caches, validates invariants
  // (conformity, positive volumes, unit normals). Throws on violation.
  void finalize();
};

using DomainPtr = std::shared_ptr<const Domain>;

// Point-in-simplex location with a uniform-grid accelerator. interpolate()
// clamps to the nearest simplex when the query sits slightly outside the
// piecewise-linear mesh (curved-boundary overshoot).
class SimplexLocator {
 public:
  explicit SimplexLocator(DomainPtr dom);
  // Returns simplex index and barycentric coordinates (possibly clamped).
  int locate(const Vec& x, Vec& bary) const;

 private:
  DomainPtr dom_;
  Vec lo_, hi_;
  Eigen::VectorXi dims_;
  double cell_ = 0.0;
  std::vector<std::vector<int>> bins_;
  int bin_index(const Vec& x) const;
};

// ---------------------------------------------------------------------------
// Diffeomorphism Phi: closure of Omega -> closed unit ball, with analytic
// differential and inverse.

struct Diffeomorphism {
  std::function<Vec(const Vec&)> forward;
  std::function<Mat(const Vec&)> differential;   // d(Phi)
  std::function<Vec(const Vec&)> inverse;        // Phi^{-1}: ball -> Omega
  double c1_distance_to_identity = 0.0;          // measured sup |Phi-Id| + sup ||dPhi-Id||
};

// Local boundary-straightening chart f_a: maps a neighbourhood of a boundary
// point a to the upper half space, f_a(a) = 0, df_a(a) orthogonal, boundary
// to {x_n = 0}.
struct BoundaryChart {
  Vec anchor;          // the (projected) boundary point
  Mat frame;           // O_a: rotation, O_a * nu(a) = -e_n
  double grad_scale;   // |grad rho(a)|
  double radius;       // chart radius r_a
  std::function<double(const Vec&)> rho;
  std::function<Vec(const Vec&)> rho_grad;

  Vec forward(const Vec& x) const;
  Mat differential(const Vec& x) const;
  Vec inverse(const Vec& y) const;  // Newton; valid within the chart
};

// Per-point corrected diffeomorphism, conformal at the anchor (boundary
// anchors); interior anchors in the tubular band blend with Phi.
struct ConformalizedDiffeo {
  Vec anchor;
  double beta = 1.0;          // conformal scale at a boundary anchor
  Mat rotation;               // R_a with dPhi_a(a) = beta * R_a (boundary anchors)
  std::function<Vec(const Vec&)> forward;
  std::function<Mat(const Vec&)> differential;
};

struct ConformalizeOptions {
  double chart_radius = 0.45;      // straightening chart radius
  double cutoff_on = 0.12;         // chi == 1 for |y| <= cutoff_on (chart coords)
  double cutoff_off = 0.32;        // chi == 0 for |y| >= cutoff_off
  int flow_steps = 64;             // fixed-step RK4 steps for the time-1 flow
  double tubular_width = 0.2;      // eta: band where interior anchors blend
};

// ---------------------------------------------------------------------------
// Builders.

struct BallMeshOptions {
  int vertex_budget = 600000;
};

// Structured mesh of the unit ball: Kuhn-triangulated grid on [-1,1]^n mapped
// radially onto the ball (sup-norm shells to spheres). Deterministic.
DomainPtr build_ball_mesh(int n, double h, const BallMeshOptions& opts = {});

// Refines every simplex (edge midpoints; 2D: 4 children, 3D: 8 children with
// a fixed interior diagonal). Boundary midpoints are projected to the smooth
// boundary when a levelset is available.
DomainPtr uniform_refine(const Domain& dom);

// Rivara longest-edge bisection until every simplex meeting
// B(center, radius) has edges <= target_h; conforming.
DomainPtr refine_near(const Domain& dom, const Vec& center, double radius, double target_h);

// Same, over a sequence of (radius, target_h) shells in one session.
DomainPtr refine_graded(const Domain& dom, const Vec& center,
                        const std::vector<std::pair<double, double>>& shells);

// A perturbed ball: the image of the unit ball under
//   T(x) = x * (1 + L0 * psi(|x|) * Y(x/|x|)),
// with Y a low-order spherical-harmonic-type bump and psi a quintic radial
// ramp vanishing near the origin. Returns the pushed-forward mesh and
// Phi = T^{-1} with measured C1 distance to the identity.
struct PerturbationShape {
  int harmonic_degree = 2;   // degree of the harmonic polynomial bump
  int harmonic_index = 0;    // which basis polynomial
  double ramp_start = 0.3;   // psi == 0 for r <= ramp_start
};

struct PerturbedBall {
  DomainPtr domain;
  Diffeomorphism phi;
  double amplitude = 0.0;
  PerturbationShape shape;
  // Exact boundary point of Omega in direction theta (|theta| = 1).
  std::function<Vec(const Vec&)> boundary_point;
};

PerturbedBall build_perturbed_ball(int n, double h, double amplitude,
                                   const PerturbationShape& shape = {},
                                   const BallMeshOptions& opts = {});

// The unperturbed ball wrapped in the same interface (Phi = Id).
PerturbedBall wrap_unit_ball(int n, double h, const BallMeshOptions& opts = {});

// ---------------------------------------------------------------------------
// Operations.

// Straightening chart at a boundary point (within h of the smooth boundary;
// the anchor is projected exactly onto it). Requires dom.levelset.
BoundaryChart straighten_boundary(const Domain& dom, const Vec& a);

// Corrected diffeomorphism Phi_a per the flow construction: polar
// decomposition of the straightened differential, matrix log, linear vector
// field cut off in the chart, RK4 time-1 flow. Interior anchors blend
// Phi_{Pi(a)} with Phi across the tubular band.
ConformalizedDiffeo conformalize_at(const PerturbedBall& setup, const Vec& a,
                                    const ConformalizeOptions& opts = {});

}  // namespace nharm
