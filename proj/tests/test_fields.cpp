#include <doctest.h>

#include "nharm/fields.hpp"
#include "nharm/mobius.hpp"

#include <cmath>

using namespace nharm;

namespace {
const double kGroundState3 = 4.0 * std::sqrt(3.0) * M_PI;

MapField identity_field(DomainPtr dom) {
  return sample_map(dom, [](const Vec& x) { return x; }, true);
}
}  // namespace

TEST_CASE("energy of simple fields") {
  auto dom = build_ball_mesh(3, 0.3);
  SUBCASE("identity: |d Id|^2 = 3 exactly per simplex") {
    MapField u = identity_field(dom);
    auto rep = energy(u, 3.0);
    CHECK(rep.value == doctest::Approx(std::pow(3.0, 1.5) * dom->total_volume()).epsilon(1e-13));
    CHECK(rep.value == doctest::Approx(kGroundState3).epsilon(0.03));
    double sum = 0.0;
    for (double e : rep.per_simplex) sum += e;
    CHECK(std::abs(sum - rep.value) <= 1e-12 * rep.value);
  }
  SUBCASE("constants have zero energy") {
    MapField u = constant_field(dom, Vec(Vec::Unit(3, 0)));
    CHECK(energy(u, 3.0).value == 0.0);
  }
  SUBCASE("nodal Mobius sample matches the analytic quadrature") {
    auto m = MobiusMap::make(Vec(0.3 * Vec::Unit(3, 0)));
    MapField u = sample_map(dom, [&](const Vec& x) { return m.apply(x); }, true);
    auto nodal = energy(u, 3.0);
    auto analytic = mobius_energy(m, *dom, 3.0);
    CHECK(nodal.value == doctest::Approx(analytic.value).epsilon(0.05));
  }
  SUBCASE("convexity in the nodal values") {
    SplitMix rng(19);
    auto small = build_ball_mesh(3, 0.45);
    for (int k = 0; k < 25; ++k) {
      MapField u, v;
      u.domain = v.domain = small;
      u.values.resize(small->num_vertices(), 3);
      v.values.resize(small->num_vertices(), 3);
      for (int i = 0; i < small->num_vertices(); ++i)
        for (int j = 0; j < 3; ++j) {
          u.values(i, j) = rng.uniform(-1, 1);
          v.values(i, j) = rng.uniform(-1, 1);
        }
      double t = rng.uniform();
      MapField w;
      w.domain = small;
      w.values = t * u.values + (1.0 - t) * v.values;
      double p = rng.uniform(2.0, 3.5);
      CHECK(energy(w, p).value <=
            t * energy(u, p).value + (1.0 - t) * energy(v, p).value + 1e-10);
    }
  }
}

TEST_CASE("jacobian integral and degree") {
  auto dom = build_ball_mesh(3, 0.3);
  SUBCASE("identity") {
    MapField u = identity_field(dom);
    CHECK(jacobian_integral(u) == doctest::Approx(dom->total_volume()).epsilon(1e-12));
    auto de = degree_estimates(u);
    CHECK(de.from_jacobian == doctest::Approx(1.0).epsilon(0.03));
    CHECK(de.from_boundary_pullback == doctest::Approx(1.0).epsilon(0.03));
    CHECK(boundary_degree(u) == 1);
  }
  SUBCASE("constant") {
    MapField u = constant_field(dom, Vec(Vec::Unit(3, 0)));
    CHECK(jacobian_integral(u) == 0.0);
    CHECK(boundary_degree(u) == 0);
  }
  SUBCASE("normalised Mobius sample has degree +1") {
    for (double t : {0.0, 0.4}) {
      auto m = MobiusMap::make(Vec(t * Vec::Unit(3, 2)));
      MapField u = sample_map(dom, [&](const Vec& x) { return m.apply(x); }, true);
      CHECK(jacobian_integral(u) == doctest::Approx(ball_volume(3)).epsilon(0.05));
      CHECK(boundary_degree(u) == 1);
    }
  }
  SUBCASE("2d sanity") {
    auto disk = build_ball_mesh(2, 0.3);
    MapField u = identity_field(disk);
    CHECK(boundary_degree(u) == 1);
    auto m = MobiusMap::make(Vec(0.3 * Vec::Unit(2, 0)));
    MapField v = sample_map(disk, [&](const Vec& x) { return m.apply(x); }, true);
    CHECK(boundary_degree(v) == 1);
  }
  SUBCASE("half-covering trace is flagged ambiguous") {
    auto disk = build_ball_mesh(2, 0.3);
    MapField u = sample_map(disk, [](const Vec& x) {
      double theta = std::atan2(x[1], x[0]);
      Vec v(2);
      v << std::cos(theta / 2.0), std::sin(theta / 2.0);
      return v;
    }, true);
    CHECK_THROWS_WITH_AS(boundary_degree(u), doctest::Contains("degree ambiguous"),
                         std::runtime_error);
  }
  SUBCASE("precondition: unit boundary norm") {
    MapField u = identity_field(dom);
    u.boundary_unit_norm = false;
    CHECK_THROWS_AS(boundary_degree(u), std::invalid_argument);
  }
}

TEST_CASE("Hadamard gap") {
  auto dom = build_ball_mesh(3, 0.3);
  SUBCASE("identity is the equality case") {
    auto g = hadamard_gap(identity_field(dom));
    CHECK(std::abs(g.slack) <= 1e-10 * g.energy);
  }
  SUBCASE("Mobius slack shrinks under refinement") {
    auto m = MobiusMap::make(Vec(0.3 * Vec::Unit(3, 0)));
    auto coarse = build_ball_mesh(3, 0.4);
    auto fine = uniform_refine(*coarse);
    double s0 = hadamard_gap(sample_map(coarse, [&](const Vec& x) { return m.apply(x); }, true)).slack;
    double s1 = hadamard_gap(sample_map(fine, [&](const Vec& x) { return m.apply(x); }, true)).slack;
    CHECK(s0 > 0.0);
    CHECK(s1 < 0.5 * s0);
  }
  SUBCASE("anisotropic linear map: frozen analytic slack") {
    MapField u = sample_map(dom, [](const Vec& x) {
      Vec v = x;
      v[2] *= 2.0;
      return v;
    });
    auto g = hadamard_gap(u);
    // |du|^2 = 6, det = 2: slack = (6^{3/2} - 2 * 3^{3/2}) * vol
    double expect = (std::pow(6.0, 1.5) - 2.0 * std::pow(3.0, 1.5)) * dom->total_volume();
    CHECK(g.slack == doctest::Approx(expect).epsilon(1e-12));
    CHECK(g.slack > 0.0);
  }
  SUBCASE("1000 random fields: slack >= -1e-8 * energy") {
    auto small = build_ball_mesh(3, 0.45);
    SplitMix rng(77);
    for (int k = 0; k < 1000; ++k) {
      MapField u;
      u.domain = small;
      u.values.resize(small->num_vertices(), 3);
      for (int i = 0; i < small->num_vertices(); ++i)
        for (int j = 0; j < 3; ++j) u.values(i, j) = rng.uniform(-1, 1);
      auto g = hadamard_gap(u);
      CHECK(g.slack >= -1e-8 * g.energy);
    }
  }
}

TEST_CASE("conformality defect") {
  SUBCASE("identity is exactly conformal") {
    auto dom = build_ball_mesh(3, 0.35);
    CHECK(conformality_defect(identity_field(dom)) <= 1e-28);
  }
  SUBCASE("Mobius sample: small on the reference mesh, shrinking under refinement") {
    auto m = MobiusMap::make(Vec(0.3 * Vec::Unit(3, 0)));
    auto ref = build_ball_mesh(3, 0.15);
    double d_ref = conformality_defect(sample_map(ref, [&](const Vec& x) { return m.apply(x); }, true));
    CHECK(d_ref <= 1e-3);
    auto coarse = build_ball_mesh(3, 0.3);
    auto fine = uniform_refine(*coarse);
    double d0 = conformality_defect(sample_map(coarse, [&](const Vec& x) { return m.apply(x); }, true));
    double d1 = conformality_defect(sample_map(fine, [&](const Vec& x) { return m.apply(x); }, true));
    CHECK(d1 < 0.5 * d0);
  }
  SUBCASE("anisotropic map: frozen value 0.3617...") {
    auto dom = build_ball_mesh(3, 0.35);
    MapField u = sample_map(dom, [](const Vec& x) {
      Vec v = x;
      v[2] *= 2.0;
      return v;
    });
    // ||diag(1,1,4) - 2^{2/3} I||^2 / ||diag(1,1,4)||^2
    double scale = std::pow(2.0, 2.0 / 3.0);
    double expect = (2.0 * std::pow(1.0 - scale, 2) + std::pow(4.0 - scale, 2)) / 18.0;
    CHECK(conformality_defect(u) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(conformality_defect(u) > 0.01);
  }
}

TEST_CASE("degree raiser") {
  auto dom = build_ball_mesh(3, 0.35);
  Vec e3 = Vec::Unit(3, 2);
  MapField u = constant_field(dom, e3);

  SUBCASE("raises a constant to degree 1 with bounded energy overshoot") {
    auto res = degree_raiser(u, e3, 0.12);
    CHECK(res.denominator_min >= 0.5);
    CHECK(boundary_degree(res.field) == 1);
    double e = energy(res.field, 3.0).value;
    double delta = e - kGroundState3;
    CAPTURE(delta);
    CHECK(e > 0.5 * kGroundState3);
    CHECK(delta < 0.6 * kGroundState3);
  }
  SUBCASE("raise then lower at distinct points returns to degree 0") {
    auto res = degree_raiser(u, e3, 0.15);
    DegreeRaiseOptions down;
    down.reverse = true;
    Vec x1 = Vec::Unit(3, 0);
    auto res2 = degree_raiser(res.field, x1, 0.15, down);
    CHECK(boundary_degree(res2.field) == 0);
  }
  SUBCASE("overshoot shrinks with sigma") {
    double prev = 1e300;
    for (double sigma : {0.18, 0.09}) {
      auto res = degree_raiser(u, e3, sigma);
      double delta = std::abs(energy(res.field, 3.0).value - kGroundState3);
      CHECK(delta < prev);
      prev = delta;
    }
  }
  SUBCASE("2d raise") {
    auto disk = build_ball_mesh(2, 0.3);
    MapField c = constant_field(disk, Vec(Vec::Unit(2, 1)));
    auto res = degree_raiser(c, Vec(Vec::Unit(2, 1)), 0.12);
    CHECK(boundary_degree(res.field) == 1);
    double e2 = energy(res.field, 2.0).value;
    CHECK(std::abs(e2 - 2.0 * M_PI) < 0.25 * 2.0 * M_PI);
  }
}

TEST_CASE("Brezis-Lieb jacobian defect") {
  auto dom = build_ball_mesh(3, 0.4);
  MapField u = sample_map(dom, [](const Vec& x) { return x; }, true);
  SUBCASE("identical sequence: defect exactly zero") {
    std::vector<MapField> seq = {u, u, u};
    for (double d : brezis_lieb_jacobian_defect(seq, u)) CHECK(d == 0.0);
  }
  SUBCASE("u + w/k: defect decays") {
    MapField w = sample_map(dom, [](const Vec& x) {
      Vec v(3);
      v << std::sin(x[1]), x[0] * x[2], std::cos(x[0]);
      return v;
    });
    std::vector<MapField> seq;
    for (int k = 1; k <= 4; ++k) {
      MapField uk = u;
      uk.values += w.values / double(1 << k);
      uk.boundary_unit_norm = false;
      seq.push_back(uk);
    }
    auto defects = brezis_lieb_jacobian_defect(seq, u);
    for (size_t i = 1; i < defects.size(); ++i) CHECK(defects[i] < defects[i - 1]);
  }
  SUBCASE("mismatched domains rejected") {
    auto other = build_ball_mesh(3, 0.45);
    MapField v = sample_map(other, [](const Vec& x) { return x; }, true);
    std::vector<MapField> seq = {v};
    CHECK_THROWS_AS(brezis_lieb_jacobian_defect(seq, u), std::invalid_argument);
  }
}
