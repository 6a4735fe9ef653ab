#include "nharm/fields.hpp"

#include <cmath>

namespace nharm {

void MapField::seal() const {
  if (!values.allFinite()) throw std::runtime_error("MapField: non-finite nodal values");
  if (boundary_unit_norm) {
    for (int v = 0; v < domain->num_vertices(); ++v) {
      if (!domain->vertex_on_boundary[v]) continue;
      if (std::abs(values.row(v).norm() - 1.0) > 1e-10)
        throw std::runtime_error("MapField: boundary nodal value leaves the unit sphere");
    }
  }
}

MapField sample_map(DomainPtr dom, const std::function<Vec(const Vec&)>& f, bool boundary_unit) {
  MapField u;
  u.domain = dom;
  u.values.resize(dom->num_vertices(), dom->dim);
  for (int v = 0; v < dom->num_vertices(); ++v)
    u.values.row(v) = f(dom->vertices.row(v).transpose()).transpose();
  u.boundary_unit_norm = boundary_unit;
  if (boundary_unit) {
    for (int v = 0; v < dom->num_vertices(); ++v)
      if (dom->vertex_on_boundary[v]) u.values.row(v).normalize();
  }
  return u;
}

MapField constant_field(DomainPtr dom, const Vec& c) {
  MapField u;
  u.domain = dom;
  u.values = c.transpose().replicate(dom->num_vertices(), 1);
  u.boundary_unit_norm = std::abs(c.norm() - 1.0) < 1e-12;
  u.claimed_degree = 0;
  return u;
}

Mat local_gradient(const MapField& u, int s) {
  const Domain& D = *u.domain;
  const int d = D.dim;
  Mat du = Mat::Zero(d, d);
  for (int i = 0; i <= d; ++i)
    du += u.values.row(D.simplices(s, i)).transpose() * D.simplex_grad[s].row(i);
  return du;
}

Vec interpolate(const MapField& u, const SimplexLocator& loc, const Vec& x) {
  Vec bary;
  int s = loc.locate(x, bary);
  const Domain& D = *u.domain;
  Vec v = Vec::Zero(D.dim);
  for (int i = 0; i <= D.dim; ++i) v += bary[i] * u.values.row(D.simplices(s, i)).transpose();
  return v;
}

EnergyReport energy(const MapField& u, double p) {
  const Domain& D = *u.domain;
  const int ns = D.num_simplices();
  EnergyReport rep;
  rep.p = p;
  rep.per_simplex.assign(ns, 0.0);
  parallel_blocks(ns, [&](int, std::size_t lo, std::size_t hi) {
    for (std::size_t s = lo; s < hi; ++s) {
      Mat du = local_gradient(u, static_cast<int>(s));
      rep.per_simplex[s] = D.simplex_volume[s] * std::pow(du.squaredNorm(), p / 2.0);
    }
  });
  double total = 0.0, abs_total = 0.0;
  for (double e : rep.per_simplex) {
    total += e;
    abs_total += std::abs(e);
  }
  rep.value = total;
  rep.quadrature_error = abs_total * 1e-15 * std::log2(double(ns) + 2.0);
  return rep;
}

double jacobian_integral(const MapField& u) {
  const Domain& D = *u.domain;
  const int ns = D.num_simplices();
  std::vector<double> partial(64, 0.0);
  parallel_blocks(ns, [&](int b, std::size_t lo, std::size_t hi) {
    double acc = 0.0;
    for (std::size_t s = lo; s < hi; ++s)
      acc += D.simplex_volume[s] * local_gradient(u, static_cast<int>(s)).determinant();
    partial[b] = acc;
  });
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

namespace {

// Boundary pullback of the volume form: for P1 traces the integrand is
// linear on each face, so the centroid value is exact.
double boundary_pullback_integral(const MapField& u) {
  const Domain& D = *u.domain;
  const int d = D.dim;
  double total = 0.0;
  for (int f = 0; f < D.num_boundary_faces(); ++f) {
    if (d == 3) {
      Eigen::Vector3d u0 = u.values.row(D.boundary_faces(f, 0)),
                      u1 = u.values.row(D.boundary_faces(f, 1)),
                      u2 = u.values.row(D.boundary_faces(f, 2));
      Eigen::Vector3d mean = (u0 + u1 + u2) / 3.0;
      total += 0.5 * mean.dot((u1 - u0).cross(u2 - u0));
    } else {
      // For a straight segment, int u*(x dy - y dx) = cross(u0, u1).
      Eigen::Vector2d u0 = u.values.row(D.boundary_faces(f, 0)),
                      u1 = u.values.row(D.boundary_faces(f, 1));
      total += u0[0] * u1[1] - u0[1] * u1[0];
    }
  }
  return total;
}

}  // namespace

DegreeEstimates degree_estimates(const MapField& u) {
  const int n = u.domain->dim;
  DegreeEstimates de;
  de.from_jacobian = jacobian_integral(u) / ball_volume(n);
  de.from_boundary_pullback = boundary_pullback_integral(u) / sphere_area(n);
  return de;
}

int boundary_degree(const MapField& u) {
  if (!u.boundary_unit_norm)
    throw std::invalid_argument("boundary_degree: field lacks unit boundary norm");
  DegreeEstimates de = degree_estimates(u);
  auto snap = [](double v, const char* which) {
    double r = std::round(v);
    if (std::abs(v - r) > 0.2)
      throw std::runtime_error(std::string("degree ambiguous: ") + which +
                               " estimate far from integer");
    return static_cast<int>(r);
  };
  int d1 = snap(de.from_jacobian, "jacobian");
  int d2 = snap(de.from_boundary_pullback, "boundary pullback");
  if (d1 != d2) throw std::runtime_error("degree ambiguous: estimators disagree");
  return d1;
}

HadamardGap hadamard_gap(const MapField& u) {
  const int n = u.domain->dim;
  HadamardGap g;
  g.energy = energy(u, double(n)).value;
  g.scaled_jacobian = std::pow(double(n), n / 2.0) * std::abs(jacobian_integral(u));
  g.slack = g.energy - g.scaled_jacobian;
  return g;
}

double conformality_defect(const MapField& u) {
  const Domain& D = *u.domain;
  const int n = D.dim;
  double num = 0.0, den = 0.0;
  for (int s = 0; s < D.num_simplices(); ++s) {
    Mat du = local_gradient(u, s);
    Mat G = du.transpose() * du;
    double scale = std::pow(std::abs(du.determinant()), 2.0 / n);
    num += D.simplex_volume[s] * (G - scale * Mat::Identity(n, n)).squaredNorm();
    den += D.simplex_volume[s] * G.squaredNorm();
  }
  return den > 1e-300 ? num / den : 0.0;
}

// ---------------------------------------------------------------------------
// Degree raiser.

namespace {

// Conformal map from the closed upper half space onto the closed ball,
// P(0) = e_n, P(infinity) = 0; boundary plane to sphere.
Vec bubble_P(const Vec& z) {
  const int n = static_cast<int>(z.size());
  double s2 = z.head(n - 1).squaredNorm();
  double den = s2 + (1.0 + z[n - 1]) * (1.0 + z[n - 1]);
  Vec out(n);
  out.head(n - 1) = -2.0 * z.head(n - 1) / den;
  out[n - 1] = (1.0 - s2) / den;
  return out;
}

Vec bubble_pi(double sigma, const Vec& y) {
  double r2 = y.squaredNorm();
  if (r2 < 1e-28) {
    // P at infinity.
    return Vec::Zero(y.size());
  }
  return bubble_P(Vec(sigma * sigma * y / r2));
}

}  // namespace

DegreeRaiseResult degree_raiser(const MapField& u, const Vec& x0, double sigma,
                                const DegreeRaiseOptions& opts) {
  u.seal();
  if (!u.boundary_unit_norm)
    throw std::invalid_argument("degree_raiser: field lacks unit boundary norm");
  const Domain& D = *u.domain;
  const int n = D.dim;
  const double tau = sigma + std::pow(sigma, 1.0 + 1.0 / (2.0 * (n - 1)));

  BoundaryChart chart = straighten_boundary(D, x0);
  chart.radius = 0.8;  // the levelset chart stays injective well beyond the default
  if (2.0 * tau >= 0.9 * chart.radius)
    throw std::invalid_argument("degree_raiser: sigma too large for the boundary chart");

  SimplexLocator loc(u.domain);
  auto u_at = [&](const Vec& x) { return interpolate(u, loc, x); };

  // Anchor value on the sphere and the rotation aligning the bubble with it.
  Vec u0 = u_at(chart.anchor);
  if (u0.norm() < 0.5)
    throw std::runtime_error("degree_raiser: field value at anchor too far from the sphere");
  u0.normalize();
  Mat Q = rotation_between(Vec(Vec::Unit(n, n - 1)), u0);

  // Orientation probe: the parity of P o I_sigma depends on the dimension;
  // measure sign(det d pi_sigma) and reflect the target accordingly.
  Mat reflect = Mat::Identity(n, n);
  {
    Vec yt = 0.5 * sigma * Vec::Unit(n, n - 1);
    Mat J(n, n);
    for (int j = 0; j < n; ++j) {
      double h = 1e-6 * sigma;
      J.col(j) = (bubble_pi(sigma, Vec(yt + h * Vec::Unit(n, j))) -
                  bubble_pi(sigma, Vec(yt - h * Vec::Unit(n, j)))) /
                 (2.0 * h);
    }
    double want = opts.reverse ? -1.0 : 1.0;
    if (J.determinant() * want < 0.0) reflect(0, 0) = -1.0;
  }

  auto bubble = [&](const Vec& y) { return Vec(Q * reflect * bubble_pi(sigma, y)); };

  // Collar interpolation denominator check (precondition "sigma too large").
  double den_min = 1e300;
  {
    const int samples = 64;
    SplitMix rng(12345);
    for (int k = 0; k < samples; ++k) {
      Vec theta = rng.unit_vector(n);
      theta[n - 1] = std::abs(theta[n - 1]);  // upper half
      for (double mu : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        Vec ut = u_at(chart.inverse(Vec(tau * theta)));
        Vec pt = bubble(Vec(sigma * theta));
        den_min = std::min(den_min, (mu * ut + (1.0 - mu) * pt).norm());
      }
    }
    if (den_min < 0.5)
      throw std::runtime_error("degree_raiser: sigma too large (interpolation denominator below 1/2)");
  }

  // Graded local refinement: bubble features live at scales down to ~sigma^2.
  DomainPtr refined = nullptr;
  {
    double core = sigma * sigma / opts.core_scale_factor;
    std::vector<std::pair<double, double>> shells;
    for (double t = 2.0 * tau; t > core; t *= 0.5)
      shells.push_back({t, std::max(t / opts.min_cells_across, core / 2.0)});
    shells.push_back({core, core / 2.0});
    refined = refine_graded(*u.domain, chart.anchor, shells);
  }
  {
    // "mesh too coarse" guard: B_sigma must now be crossed by >= min cells.
    double local_h = 0.0;
    for (int s = 0; s < refined->num_simplices(); ++s) {
      bool near = false;
      for (int i = 0; i <= n; ++i)
        if ((refined->vertices.row(refined->simplices(s, i)).transpose() - chart.anchor).norm() <
            sigma)
          near = true;
      if (!near) continue;
      for (int i = 0; i <= n; ++i)
        for (int j = i + 1; j <= n; ++j)
          local_h = std::max(local_h, (refined->vertices.row(refined->simplices(s, i)) -
                                       refined->vertices.row(refined->simplices(s, j)))
                                          .norm());
    }
    if (local_h > 2.0 * sigma / opts.min_cells_across)
      throw std::runtime_error("degree_raiser: mesh too coarse around the bubble");
  }

  MapField v;
  v.domain = refined;
  v.values.resize(refined->num_vertices(), n);
  for (int idx = 0; idx < refined->num_vertices(); ++idx) {
    Vec x = refined->vertices.row(idx).transpose();
    if ((x - chart.anchor).norm() >= chart.radius) {
      v.values.row(idx) = u_at(x).transpose();
      continue;
    }
    Vec y = chart.forward(x);
    double r = y.norm();
    if (r >= tau) {
      v.values.row(idx) = u_at(x).transpose();
    } else if (r <= sigma) {
      if (r < 1e-12 && refined->vertex_on_boundary[idx]) {
        // Singular anchor vertex: the disk trace limits to the antipode.
        v.values.row(idx) = (Q * reflect * Vec(-Vec::Unit(n, n - 1))).transpose();
      } else {
        v.values.row(idx) = bubble(y).transpose();
      }
    } else {
      double mu = (r - sigma) / (tau - sigma);
      Vec theta = y / r;
      Vec ut = u_at(chart.inverse(Vec(tau * theta)));
      Vec pt = bubble(Vec(sigma * theta));
      Vec W = mu * ut + (1.0 - mu) * pt;
      den_min = std::min(den_min, W.norm());
      double scalar = mu * ut.norm() + (1.0 - mu) * pt.norm();
      v.values.row(idx) = (scalar * W / W.norm()).transpose();
    }
  }
  for (int idx = 0; idx < refined->num_vertices(); ++idx)
    if (refined->vertex_on_boundary[idx]) v.values.row(idx).normalize();
  v.boundary_unit_norm = true;
  if (u.claimed_degree) v.claimed_degree = *u.claimed_degree + (opts.reverse ? -1 : 1);
  v.seal();

  DegreeRaiseResult out;
  out.field = std::move(v);
  out.sigma = sigma;
  out.tau = tau;
  out.denominator_min = den_min;
  return out;
}

std::vector<double> brezis_lieb_jacobian_defect(const std::vector<MapField>& seq,
                                                const MapField& limit) {
  std::vector<double> out;
  double jac_limit = jacobian_integral(limit);
  for (const auto& uk : seq) {
    if (uk.domain != limit.domain)
      throw std::invalid_argument("brezis_lieb_jacobian_defect: mismatched domains");
    MapField diff = uk;
    diff.values -= limit.values;
    diff.boundary_unit_norm = false;
    out.push_back(std::abs(jacobian_integral(diff) - jacobian_integral(uk) + jac_limit));
  }
  return out;
}

}  // namespace nharm
