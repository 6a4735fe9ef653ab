#include "nharm/mobius.hpp"

#include <cmath>

namespace nharm {

Vec mobius_psi(const Vec& a, const Vec& x) {
  Vec d = a - x;
  double d2 = d.squaredNorm();
  if (d2 < 1e-28) throw std::invalid_argument("mobius_psi: singular at x = a");
  return a + (1.0 - a.squaredNorm()) * d / d2;
}

namespace {

Mat orientation_fix(int n) {
  Mat F = Mat::Identity(n, n);
  if (n % 2 == 1) F(0, 0) = -1.0;
  return F;
}

// Raw M_a = psi_a/|psi_a|^2 through the explicit rational formula; the
// denominator is bounded away from zero on the closed ball.
Vec raw_apply(const Vec& a, const Vec& x) {
  Vec d = a - x;
  double d2 = d.squaredNorm();
  double one_a2 = 1.0 - a.squaredNorm();
  if (d2 < 1e-28) return Vec::Zero(a.size());
  double den = a.squaredNorm() * d2 + one_a2 * one_a2 + 2.0 * one_a2 * a.dot(d);
  if (!(den > 1e-14)) throw std::runtime_error("mobius: formula denominator vanished");
  return (d2 * a + one_a2 * d) / den;
}

Mat raw_differential(const Vec& a, const Vec& x) {
  const int n = static_cast<int>(a.size());
  Vec d = a - x;
  double d2 = d.squaredNorm();
  double one_a2 = 1.0 - a.squaredNorm();
  double den = a.squaredNorm() * d2 + one_a2 * one_a2 + 2.0 * one_a2 * a.dot(d);
  Vec num = d2 * a + one_a2 * d;
  // d/dx |a-x|^2 = -2(a-x)
  Mat dnum = -2.0 * a * d.transpose() - one_a2 * Mat::Identity(n, n);
  Vec gden = -2.0 * a.squaredNorm() * d - 2.0 * one_a2 * a;
  return (dnum * den - num * gden.transpose()) / (den * den);
}

}  // namespace

MobiusMap MobiusMap::make(const Vec& a) {
  return make(a, Mat::Identity(static_cast<int>(a.size()), static_cast<int>(a.size())));
}

MobiusMap MobiusMap::make(const Vec& a, const Mat& R) {
  if (a.norm() >= 1.0) throw std::invalid_argument("MobiusMap: |a| must be < 1");
  const int n = static_cast<int>(a.size());
  if ((R.transpose() * R - Mat::Identity(n, n)).norm() > 1e-13)
    throw std::invalid_argument("MobiusMap: R is not orthogonal");
  MobiusMap m;
  m.center = a;
  m.rotation = R;
  return m;
}

Vec MobiusMap::apply(const Vec& x) const {
  return rotation * orientation_fix(dim()) * raw_apply(center, x);
}

Mat MobiusMap::differential(const Vec& x) const {
  return rotation * orientation_fix(dim()) * raw_differential(center, x);
}

Vec MobiusMap::invert(const Vec& y) const {
  const int n = dim();
  std::vector<Vec> starts = {Vec::Zero(n), center, Vec(-center), Vec(0.5 * y), Vec(-0.5 * y)};
  for (const Vec& s0 : starts) {
    Vec z = s0;
    bool ok = true;
    for (int it = 0; it < 80; ++it) {
      Vec r = apply(z) - y;
      if (r.norm() < 1e-12) break;
      Vec step = differential(z).partialPivLu().solve(r);
      double damp = 1.0;
      // Keep the iterate inside the closed ball minus a sliver around a.
      for (int tries = 0; tries < 40; ++tries) {
        Vec cand = z - damp * step;
        if (cand.norm() <= 1.0 + 1e-9 && (apply(cand) - y).norm() < r.norm()) {
          z = cand;
          break;
        }
        damp *= 0.5;
        if (tries == 39) ok = false;
      }
      if (!ok) break;
    }
    if (ok && (apply(z) - y).norm() < 1e-10) return z;
  }
  throw std::runtime_error("MobiusMap::invert: Newton did not converge");
}

// ---------------------------------------------------------------------------
// Recursive simplex quadrature with an embedded error estimate.

namespace {

struct SimplexRule {
  Mat bary_hi, bary_lo;
  std::vector<double> w_hi, w_lo;
  explicit SimplexRule(int dim) {
    simplex_quadrature(dim, 4, bary_hi, w_hi);
    simplex_quadrature(dim, 2, bary_lo, w_lo);
  }
};

struct AdaptiveParams {
  Vec peak;              // concentration point (may be empty)
  double feature = 1.0;  // smallest feature scale near the peak
  int max_depth = 14;
};

double simplex_measure(const std::vector<Vec>& v) {
  const int d = static_cast<int>(v.size()) - 1;
  Mat E(d, d);
  for (int j = 0; j < d; ++j) E.col(j) = v[j + 1] - v[0];
  return std::abs(E.determinant()) / (d == 2 ? 2.0 : 6.0);
}

void adaptive_simplex(const std::vector<Vec>& v, const SimplexRule& rule,
                      const std::function<double(const Vec&)>& f, const AdaptiveParams& ap,
                      int depth, double& value, double& err) {
  const int d = static_cast<int>(v.size()) - 1;
  double edge = 0.0;
  for (int i = 0; i <= d; ++i)
    for (int j = i + 1; j <= d; ++j) edge = std::max(edge, (v[i] - v[j]).norm());
  bool split = false;
  if (ap.peak.size() && depth < ap.max_depth) {
    Vec c = Vec::Zero(d);
    for (const auto& p : v) c += p / (d + 1);
    double dist = std::max((c - ap.peak).norm() - edge, 0.0);
    split = edge > 0.45 * std::max(dist, ap.feature);
  }
  if (!split) {
    double vol = simplex_measure(v);
    double hi = 0.0, lo = 0.0;
    for (int q = 0; q < rule.bary_hi.rows(); ++q) {
      Vec x = Vec::Zero(d);
      for (int i = 0; i <= d; ++i) x += rule.bary_hi(q, i) * v[i];
      hi += rule.w_hi[q] * f(x);
    }
    for (int q = 0; q < rule.bary_lo.rows(); ++q) {
      Vec x = Vec::Zero(d);
      for (int i = 0; i <= d; ++i) x += rule.bary_lo(q, i) * v[i];
      lo += rule.w_lo[q] * f(x);
    }
    value += vol * hi;
    err += vol * std::abs(hi - lo);
    return;
  }
  auto mid = [&](int i, int j) { return Vec(0.5 * (v[i] + v[j])); };
  if (d == 2) {
    Vec m01 = mid(0, 1), m12 = mid(1, 2), m02 = mid(0, 2);
    std::vector<std::vector<Vec>> kids = {{v[0], m01, m02}, {m01, v[1], m12},
                                          {m02, m12, v[2]}, {m01, m12, m02}};
    for (auto& k : kids) adaptive_simplex(k, rule, f, ap, depth + 1, value, err);
  } else {
    Vec m01 = mid(0, 1), m02 = mid(0, 2), m03 = mid(0, 3);
    Vec m12 = mid(1, 2), m13 = mid(1, 3), m23 = mid(2, 3);
    std::vector<std::vector<Vec>> kids = {
        {v[0], m01, m02, m03}, {v[1], m01, m12, m13}, {v[2], m02, m12, m23},
        {v[3], m03, m13, m23}, {m02, m13, m01, m03},  {m02, m13, m03, m23},
        {m02, m13, m23, m12},  {m02, m13, m12, m01}};
    for (auto& k : kids) adaptive_simplex(k, rule, f, ap, depth + 1, value, err);
  }
}

struct QuadResult {
  double value = 0.0, err = 0.0;
};

// The mesh is a chordal approximation of a curved star-shaped boundary; the
// radial gap between each planar boundary face and the levelset carries
// O(h^2) of the volume, concentrated where Moebius integrands peak. Adds
// int over {s*theta : theta over the face, s from face to boundary} with
// adaptive face subdivision around ap.peak.
void face_gap_recursive(const Domain& dom, const std::vector<Vec>& face,
                        const std::function<double(const Vec&)>& f, const AdaptiveParams& ap,
                        const std::vector<double>& gx, const std::vector<double>& gw, int depth,
                        double& value) {
  const int d = dom.dim;
  double edge = 0.0;
  for (size_t i = 0; i < face.size(); ++i)
    for (size_t j = i + 1; j < face.size(); ++j)
      edge = std::max(edge, (face[i] - face[j]).norm());
  if (ap.peak.size() && depth < ap.max_depth) {
    Vec c = Vec::Zero(d);
    for (const auto& p : face) c += p / double(face.size());
    double dist = std::max((c - ap.peak).norm() - edge, 0.0);
    if (edge > 0.45 * std::max(dist, ap.feature)) {
      if (d == 3) {
        Vec m01 = 0.5 * (face[0] + face[1]), m12 = 0.5 * (face[1] + face[2]),
            m02 = 0.5 * (face[0] + face[2]);
        for (auto& kid : std::vector<std::vector<Vec>>{{face[0], m01, m02},
                                                       {m01, face[1], m12},
                                                       {m02, m12, face[2]},
                                                       {m01, m12, m02}})
          face_gap_recursive(dom, kid, f, ap, gx, gw, depth + 1, value);
      } else {
        Vec m = 0.5 * (face[0] + face[1]);
        face_gap_recursive(dom, {face[0], m}, f, ap, gx, gw, depth + 1, value);
        face_gap_recursive(dom, {m, face[1]}, f, ap, gx, gw, depth + 1, value);
      }
      return;
    }
  }
  // Quadrature over the planar face; along each radial ray integrate from the
  // face to the exact levelset crossing.
  Mat fb;
  std::vector<double> fw;
  if (d == 3) {
    simplex_quadrature(2, 4, fb, fw);
  } else {
    std::vector<double> x1, w1;
    gauss_legendre(4, x1, w1);
    fb.resize(4, 2);
    fw.resize(4);
    for (int q = 0; q < 4; ++q) {
      fb(q, 0) = 0.5 * (1.0 - x1[q]);
      fb(q, 1) = 0.5 * (1.0 + x1[q]);
      fw[q] = 0.5 * w1[q];
    }
  }
  double area;
  Vec nrm(d);
  if (d == 3) {
    Eigen::Vector3d a = face[0], b = face[1], c = face[2];
    Eigen::Vector3d cr = (b - a).cross(c - a);
    area = 0.5 * cr.norm();
    nrm = cr.normalized();
  } else {
    Vec t = face[1] - face[0];
    area = t.norm();
    nrm.resize(2);
    nrm << t[1], -t[0];
    nrm.normalize();
  }
  for (int q = 0; q < fb.rows(); ++q) {
    Vec y = Vec::Zero(d);
    for (size_t i = 0; i < face.size(); ++i) y += fb(q, i) * face[i];
    double ry = y.norm();
    if (ry < 1e-12) continue;
    Vec theta = y / ry;
    // Ray exit through the levelset (Newton from the face radius).
    double s = ry;
    for (int it = 0; it < 40; ++it) {
      double rho = dom.levelset(Vec(s * theta));
      double drho = dom.levelset_grad(Vec(s * theta)).dot(theta);
      if (std::abs(drho) < 1e-14) break;
      double step = rho / drho;
      s -= step;
      if (std::abs(step) < 1e-14) break;
    }
    // Solid-angle weight: dOmega = (n . theta) dA / |y|^2.
    double wsolid = fw[q] * area * std::abs(nrm.dot(theta)) / (ry * ry);
    double acc = 0.0;
    for (size_t g = 0; g < gx.size(); ++g) {
      double t = 0.5 * (ry + s) + 0.5 * (s - ry) * gx[g];
      acc += 0.5 * (s - ry) * gw[g] * std::pow(t, d - 1) * f(Vec(t * theta));
    }
    value += wsolid * acc;
  }
}

double boundary_gap_correction(const Domain& dom, const std::function<double(const Vec&)>& f,
                               const AdaptiveParams& ap) {
  if (!dom.levelset) return 0.0;
  std::vector<double> gx, gw;
  gauss_legendre(5, gx, gw);
  const int nb = dom.num_boundary_faces();
  std::vector<double> val(64, 0.0);
  parallel_blocks(nb, [&](int b, std::size_t lo, std::size_t hi) {
    for (std::size_t fi = lo; fi < hi; ++fi) {
      std::vector<Vec> face(dom.dim);
      for (int i = 0; i < dom.dim; ++i)
        face[i] = dom.vertices.row(dom.boundary_faces(fi, i)).transpose();
      face_gap_recursive(dom, face, f, ap, gx, gw, 0, val[b]);
    }
  });
  double total = 0.0;
  for (double v : val) total += v;
  return total;
}

QuadResult integrate_over_domain(const Domain& dom, const std::function<double(const Vec&)>& f,
                                 const AdaptiveParams& ap) {
  SimplexRule rule(dom.dim);
  const int ns = dom.num_simplices();
  std::vector<double> val(64, 0.0), err(64, 0.0);
  parallel_blocks(ns, [&](int b, std::size_t lo, std::size_t hi) {
    for (std::size_t s = lo; s < hi; ++s) {
      std::vector<Vec> v(dom.dim + 1);
      for (int i = 0; i <= dom.dim; ++i)
        v[i] = dom.vertices.row(dom.simplices(s, i)).transpose();
      adaptive_simplex(v, rule, f, ap, 0, val[b], err[b]);
    }
  });
  QuadResult out;
  for (int b = 0; b < 64; ++b) {
    out.value += val[b];
    out.err += err[b];
  }
  return out;
}

}  // namespace

MobiusEnergyReport mobius_energy(const MobiusMap& m, const Domain& dom, double p) {
  const int n = dom.dim;
  if (p < n - 0.5) throw std::invalid_argument("mobius_energy: p must be >= n - 1/2");
  AdaptiveParams ap;
  double anorm = m.center.norm();
  if (anorm > 1e-12) {
    ap.peak = m.center / anorm;
    ap.feature = std::max((1.0 - anorm) / 3.0, 1e-4);
  }
  auto f = [&](const Vec& x) { return std::pow(m.differential(x).squaredNorm(), p / 2.0); };
  QuadResult q = integrate_over_domain(dom, f, ap);
  MobiusEnergyReport rep;
  rep.value = q.value + boundary_gap_correction(dom, f, ap);
  rep.error_estimate = q.err;
  rep.underresolved_warning = (1.0 - anorm) < 2.0 * (dom.max_edge / 1.5);
  return rep;
}

// ---------------------------------------------------------------------------
// Exact-ball quadrature: product rule with polar axis aligned to a direction
// of interest and radial panels split exactly at a spherical cap.

namespace {

struct BallRule {
  // Integrates f over the unit ball. `axis` aligns the polar direction;
  // `cap_center` (on the sphere) and cap_radius split radial panels exactly
  // at the cap boundary; `grade_scale` refines radially toward r = 1 near
  // the axis direction.
  int n;
  Vec axis;
  double cap_radius = -1.0;
  double grade_scale = -1.0;
  int order = 32;

  double integrate(const std::function<double(const Vec&)>& f, bool inside_cap_only,
                   bool outside_cap_only) const {
    std::vector<double> gx, gw;
    gauss_legendre(8, gx, gw);
    Mat frame(n, n);
    frame.col(n - 1) = axis;
    frame.leftCols(n - 1) = tangent_basis(axis);

    auto radial = [&](const Vec& theta, double cos_angle) {
      // Panel boundaries in rho.
      std::vector<double> cuts = {0.0, 1.0};
      double lo_in = 2.0, hi_in = -1.0;
      if (cap_radius > 0.0) {
        double disc = cos_angle * cos_angle - (1.0 - cap_radius * cap_radius);
        if (disc >= 0.0) {
          double s = std::sqrt(disc);
          lo_in = std::clamp(cos_angle - s, 0.0, 1.0);
          hi_in = std::clamp(cos_angle + s, 0.0, 1.0);
          cuts.push_back(lo_in);
          cuts.push_back(hi_in);
        }
      }
      if (grade_scale > 0.0) {
        for (double w = 0.5; w > grade_scale / 4.0; w *= 0.5) cuts.push_back(1.0 - w);
      }
      std::sort(cuts.begin(), cuts.end());
      double acc = 0.0;
      for (size_t k = 0; k + 1 < cuts.size(); ++k) {
        double a = cuts[k], b = cuts[k + 1];
        if (b - a < 1e-15) continue;
        double mid = 0.5 * (a + b);
        bool in_cap = cap_radius > 0.0 && mid >= lo_in && mid <= hi_in;
        if (inside_cap_only && !in_cap) continue;
        if (outside_cap_only && in_cap) continue;
        for (size_t q = 0; q < gx.size(); ++q) {
          double rho = 0.5 * (a + b) + 0.5 * (b - a) * gx[q];
          double w = 0.5 * (b - a) * gw[q] * std::pow(rho, n - 1);
          acc += w * f(Vec(rho * (frame * theta)));
        }
      }
      return acc;
    };

    double total = 0.0;
    if (n == 3) {
      // Composite polar panels in the angle phi, graded toward the axis.
      std::vector<double> pcuts = {0.0, M_PI};
      if (grade_scale > 0.0)
        for (double w = M_PI / 2; w > grade_scale / 2.0; w *= 0.5) pcuts.push_back(w);
      if (cap_radius > 0.0) pcuts.push_back(2.0 * std::asin(std::min(cap_radius / 2.0, 1.0)));
      std::sort(pcuts.begin(), pcuts.end());
      int nphi = std::max(4, order / 4);
      int nazi = std::max(8, order);
      for (size_t k = 0; k + 1 < pcuts.size(); ++k) {
        double a = pcuts[k], b = pcuts[k + 1];
        if (b - a < 1e-15) continue;
        std::vector<double> px, pw;
        gauss_legendre(nphi, px, pw);
        for (int i = 0; i < nphi; ++i) {
          double phi = 0.5 * (a + b) + 0.5 * (b - a) * px[i];
          double wphi = 0.5 * (b - a) * pw[i] * std::sin(phi);
          for (int j = 0; j < nazi; ++j) {
            double azi = 2.0 * M_PI * (j + 0.5) / nazi;
            Vec theta(3);
            theta << std::sin(phi) * std::cos(azi), std::sin(phi) * std::sin(azi), std::cos(phi);
            total += wphi * (2.0 * M_PI / nazi) * radial(theta, std::cos(phi));
          }
        }
      }
    } else {
      int nang = std::max(16, order * 2);
      for (int j = 0; j < nang; ++j) {
        double ang = 2.0 * M_PI * (j + 0.5) / nang;
        Vec theta(2);
        theta << std::sin(ang), std::cos(ang);  // angle from axis (last coord)
        total += (2.0 * M_PI / nang) * radial(theta, std::cos(ang));
      }
    }
    return total;
  }
};

}  // namespace

MobiusEnergyReport mobius_energy_ball(const MobiusMap& m, double p, int order) {
  const int n = m.dim();
  double anorm = m.center.norm();
  BallRule rule;
  rule.n = n;
  rule.axis = anorm > 1e-12 ? Vec(m.center / anorm) : Vec(Vec::Unit(n, n - 1));
  rule.grade_scale = anorm > 1e-12 ? std::max(1.0 - anorm, 1e-3) : -1.0;
  rule.order = order;
  auto f = [&](const Vec& x) { return std::pow(m.differential(x).squaredNorm(), p / 2.0); };
  double v1 = rule.integrate(f, false, false);
  rule.order = order / 2;
  double v0 = rule.integrate(f, false, false);
  MobiusEnergyReport rep;
  rep.value = v1;
  rep.error_estimate = std::abs(v1 - v0);
  rep.underresolved_warning = false;
  return rep;
}

ConcentrationReport concentration_report(const Vec& a_boundary, double r, int order) {
  const int n = static_cast<int>(a_boundary.size());
  if (!(r > 0.0 && r < 0.5)) throw std::invalid_argument("concentration_report: need 0 < r < 1/2");
  Vec a = a_boundary.normalized();
  MobiusMap m = MobiusMap::make(Vec((1.0 - r) * a));

  BallRule rule;
  rule.n = n;
  rule.axis = a;
  rule.cap_radius = std::sqrt(r);
  rule.grade_scale = std::max(r / 2.0, 1e-4);
  rule.order = order;

  auto energy_density = [&](const Vec& x) {
    return std::pow(m.differential(x).squaredNorm(), n / 2.0);
  };
  // The raw map (no orientation fix) is the object of the estimates; the fix
  // is an isometry so |dM| and the L1 distance are unchanged by it, but the
  // L1 comparison against the constant must use the unnormalised map.
  auto l1_density = [&](const Vec& x) { return (raw_apply(m.center, x) - a).norm(); };

  ConcentrationReport rep;
  rep.energy_in_cap = rule.integrate(energy_density, true, false);
  rep.energy_outside_cap = rule.integrate(energy_density, false, true);
  rep.l1_distance_to_constant = rule.integrate(l1_density, false, false);
  return rep;
}

// ---------------------------------------------------------------------------
// Almost-Moebius maps.

MapField almost_mobius(const PerturbedBall& setup, const ConformalizedDiffeo& phi_a, double r,
                       DomainPtr dom_override) {
  if (!(r > 0.0 && r < 1.0)) throw std::invalid_argument("almost_mobius: need 0 < r < 1");
  const Vec a = phi_a.anchor;
  MobiusMap m = MobiusMap::make(Vec((1.0 - r) * setup.phi.forward(a)));
  MapField u = sample_map(dom_override ? dom_override : setup.domain,
                          [&](const Vec& x) { return m.apply(phi_a.forward(x)); },
                          /*boundary_unit=*/true);
  u.claimed_degree = 1;
  return u;
}

MobiusEnergyReport almost_mobius_energy(const PerturbedBall& setup,
                                        const ConformalizedDiffeo& phi_a, double r, double p) {
  const Vec a = phi_a.anchor;
  MobiusMap m = MobiusMap::make(Vec((1.0 - r) * setup.phi.forward(a)));
  AdaptiveParams ap;
  ap.peak = a;
  ap.feature = std::max(r / 3.0, 5e-4);
  auto f = [&](const Vec& x) {
    Mat d = m.differential(phi_a.forward(x)) * phi_a.differential(x);
    return std::pow(d.squaredNorm(), p / 2.0);
  };
  QuadResult q = integrate_over_domain(*setup.domain, f, ap);
  MobiusEnergyReport rep;
  rep.value = q.value + boundary_gap_correction(*setup.domain, f, ap);
  rep.error_estimate = q.err;
  rep.underresolved_warning = false;
  return rep;
}

}  // namespace nharm
