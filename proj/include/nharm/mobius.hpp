#pragma once

#include "nharm/fields.hpp"
#include "nharm/geometry.hpp"

namespace nharm {

// psi_a(x) = a + (1 - |a|^2)(a - x)/|a - x|^2; singular at x = a.
Vec mobius_psi(const Vec& a, const Vec& x);

// Moebius transform of the unit ball: R * F * M_a with M_a = psi_a / |psi_a|^2
// evaluated through its explicit rational formula, F the fixed reflection
// diag(-1, 1, ..., 1) in odd dimensions (so the stored map always has
// boundary degree +1 when R is a rotation), and R an orthogonal factor.
struct MobiusMap {
  Vec center;    // a, |a| < 1 strictly
  Mat rotation;  // R, orthogonal to 1e-13

  static MobiusMap make(const Vec& a);
  static MobiusMap make(const Vec& a, const Mat& R);

  int dim() const { return static_cast<int>(center.size()); }
  Vec apply(const Vec& x) const;     // removable limit apply(a) = 0
  Mat differential(const Vec& x) const;  // analytic, conformal
  // Newton inversion of apply (multistart, damped). Throws on failure.
  Vec invert(const Vec& y) const;
};

struct MobiusEnergyReport {
  double value = 0.0;
  double error_estimate = 0.0;
  bool underresolved_warning = false;  // center within 2h of the boundary
};

// int_Omega |dM|^p by per-simplex quadrature (order 4, embedded order-2
// error estimate) with recursive subdivision near the concentration point.
MobiusEnergyReport mobius_energy(const MobiusMap& m, const Domain& dom, double p);

// Same integral on the exact ball by a spherical product rule with radial
// panels split exactly at the concentration cap.
MobiusEnergyReport mobius_energy_ball(const MobiusMap& m, double p, int order = 24);

struct ConcentrationReport {
  double l1_distance_to_constant = 0.0;  // int_B |M_{(1-r)a} - a|
  double energy_in_cap = 0.0;            // int over B^n cap B(a, sqrt r) of |dM|^n
  double energy_outside_cap = 0.0;
};

ConcentrationReport concentration_report(const Vec& a_boundary, double r, int order = 32);

// ---------------------------------------------------------------------------
// Almost-Moebius maps  M_{(1-r)Phi(a)} o Phi_a  sampled as a nodal field.
// Boundary nodes are renormalised onto the sphere (exact for boundary and
// deep-interior anchors; a tiny correction inside the blending band).
// Small r needs a mesh refined around the anchor; pass it as dom_override.
MapField almost_mobius(const PerturbedBall& setup, const ConformalizedDiffeo& phi_a,
                       double r, DomainPtr dom_override = nullptr);

// Continuum (n+alpha)-energy of the almost-Moebius map by locally refined
// quadrature with analytic differentials; resolves the concentration scale r.
MobiusEnergyReport almost_mobius_energy(const PerturbedBall& setup,
                                        const ConformalizedDiffeo& phi_a, double r,
                                        double p);

}  // namespace nharm
