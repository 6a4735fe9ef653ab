#pragma once

#include "nharm/geometry.hpp"

namespace nharm {

// ---------------------------------------------------------------------------
// Discrete maps u: Omega -> R^n, one nodal n-vector per vertex, P1 in between.

struct MapField {
  DomainPtr domain;
  Mat values;  // nv x dim
  bool boundary_unit_norm = false;
  std::optional<int> claimed_degree;

  // Validates finiteness and (when flagged) |v| = 1 at boundary nodes to 1e-10.
  void seal() const;
};

MapField sample_map(DomainPtr dom, const std::function<Vec(const Vec&)>& f,
                    bool boundary_unit = false);
MapField constant_field(DomainPtr dom, const Vec& c);

// du on simplex s (dim x dim), du(i,j) = d u_i / d x_j; constant per simplex.
Mat local_gradient(const MapField& u, int s);

Vec interpolate(const MapField& u, const SimplexLocator& loc, const Vec& x);

struct EnergyReport {
  double p = 0.0;
  double value = 0.0;
  std::vector<double> per_simplex;
  double quadrature_error = 0.0;  // roundoff bound; P1 energies are exact
};
EnergyReport energy(const MapField& u, double p);

// int_Omega det(du); exact per simplex.
double jacobian_integral(const MapField& u);

struct DegreeEstimates {
  double from_jacobian;           // (1/|B^n|) int Jac
  double from_boundary_pullback;  // (1/|S^{n-1}|) int_bdry u* sigma
};
DegreeEstimates degree_estimates(const MapField& u);

// Rounds both estimates; throws std::runtime_error("degree ambiguous ...")
// when either is farther than 0.2 from the nearest integer or they disagree.
int boundary_degree(const MapField& u);

struct HadamardGap {
  double energy;             // int |du|^n
  double scaled_jacobian;    // n^{n/2} |int Jac|
  double slack;              // energy - scaled_jacobian
};
HadamardGap hadamard_gap(const MapField& u);

// Normalised integral of ||du^T du - |det du|^{2/n} I||^2; zero iff conformal.
double conformality_defect(const MapField& u);

// ---------------------------------------------------------------------------
// Degree-raising bubble: glues the conformal half-space bubble P o I_sigma
// inside B_sigma (chart coords), the unit-norm interpolation on the collar
// B_tau \ B_sigma with tau = sigma + sigma^{1 + 1/(2(n-1))}, and u outside.
// Works through the boundary-straightening chart; builds a locally
// graded-refined Domain (bubble features live at scales down to ~sigma^2).

struct DegreeRaiseOptions {
  bool reverse = false;        // orientation-reversed bubble: decrements degree
  int min_cells_across = 8;    // "mesh too coarse" below this over B_sigma
  double core_scale_factor = 10.0;  // grade down to sigma^2 / this
};

struct DegreeRaiseResult {
  MapField field;
  double sigma = 0.0;
  double tau = 0.0;
  double denominator_min = 0.0;  // min |interpolation denominator| observed
};

DegreeRaiseResult degree_raiser(const MapField& u, const Vec& x0, double sigma,
                                const DegreeRaiseOptions& opts = {});

// |int Jac(u_k - u) - int Jac u_k + int Jac u| per element of the sequence.
std::vector<double> brezis_lieb_jacobian_defect(const std::vector<MapField>& seq,
                                                const MapField& limit);

}  // namespace nharm
