#include <doctest.h>

#include "nharm/geometry.hpp"

#include <cmath>

using namespace nharm;

TEST_CASE("simplex quadrature rules are exact to their degree") {
  for (int dim : {2, 3}) {
    for (int deg : {2, 4}) {
      Mat bary;
      std::vector<double> w;
      simplex_quadrature(dim, deg, bary, w);
      double wsum = 0.0;
      for (double wi : w) wsum += wi;
      CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
      // Integrate monomials lambda_0^a lambda_1^b over the reference simplex and
      // compare with the exact Dirichlet-type formula a! b! d! / (a+b+d)!.
      auto fact = [](int k) {
        double f = 1.0;
        for (int i = 2; i <= k; ++i) f *= i;
        return f;
      };
      for (int a = 0; a <= deg; ++a) {
        for (int b = 0; a + b <= deg; ++b) {
          double quad = 0.0;
          for (int q = 0; q < bary.rows(); ++q)
            quad += w[q] * std::pow(bary(q, 0), a) * std::pow(bary(q, 1), b);
          double exact = fact(a) * fact(b) * fact(dim) / fact(a + b + dim);
          CHECK(quad == doctest::Approx(exact).epsilon(1e-10));
        }
      }
    }
  }
}

TEST_CASE("matrix log and exp round-trip") {
  // ln 1.1 = 0.09531017980432486
  Mat M = Mat::Identity(3, 3);
  M(0, 0) = 1.1;
  Mat N = matrix_log_near_identity(M);
  CHECK(N(0, 0) == doctest::Approx(0.09531017980432486).epsilon(1e-12));
  CHECK(std::abs(N(1, 1)) < 1e-14);
  CHECK((matrix_exp(N) - M).norm() < 1e-12);

  SUBCASE("identity maps to zero") {
    Mat Z = matrix_log_near_identity(Mat::Identity(3, 3));
    CHECK(Z.norm() < 1e-14);
  }
  SUBCASE("rejects matrices outside the convergence ball") {
    Mat bad = Mat::Identity(3, 3) + 0.6 * Mat::Ones(3, 3);
    CHECK_THROWS_AS(matrix_log_near_identity(bad), std::invalid_argument);
  }
  SUBCASE("1000 random matrices with ||M-I|| < 0.4") {
    SplitMix rng(7);
    for (int k = 0; k < 1000; ++k) {
      int n = (k % 2) ? 2 : 3;
      Mat P(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) P(i, j) = rng.uniform(-1.0, 1.0);
      P *= 0.38 / std::max(P.norm(), 1e-12);
      Mat M2 = Mat::Identity(n, n) + P;
      Mat N2 = matrix_log_near_identity(M2);
      CHECK((matrix_exp(N2) - M2).norm() < 1e-12);
    }
  }
}

TEST_CASE("polar decomposition") {
  SplitMix rng(3);
  for (int k = 0; k < 50; ++k) {
    int n = (k % 2) ? 2 : 3;
    Mat A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = (i == j) + 0.3 * rng.uniform(-1, 1);
    Mat Q, S;
    polar_decompose(A, Q, S);
    CHECK((Q.transpose() * Q - Mat::Identity(n, n)).norm() < 1e-12);
    CHECK((Q * S - A).norm() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Mat> eig(S);
    CHECK(eig.eigenvalues().minCoeff() > 0.0);
  }
  Mat sing = Mat::Zero(3, 3);
  CHECK_THROWS(polar_decompose(sing, sing, sing));
}

TEST_CASE("ball mesh: volume, boundary, budget") {
  SUBCASE("2d volume within 2% of pi at h = 0.5") {
    auto dom = build_ball_mesh(2, 0.5);
    CHECK(dom->total_volume() == doctest::Approx(M_PI).epsilon(0.02));
    CHECK(dom->max_edge <= 0.75);
  }
  SUBCASE("3d volume within 5% of 4pi/3 at h = 0.4") {
    auto dom = build_ball_mesh(3, 0.4);
    CHECK(dom->total_volume() == doctest::Approx(4.0 * M_PI / 3.0).epsilon(0.05));
    CHECK(dom->max_edge <= 0.6);
    for (int v = 0; v < dom->num_vertices(); ++v) {
      if (!dom->vertex_on_boundary[v]) continue;
      CHECK(std::abs(dom->vertices.row(v).norm() - 1.0) <= dom->max_edge * dom->max_edge);
    }
    // Normals unit and outward-ish.
    for (int f = 0; f < dom->num_boundary_faces(); ++f) {
      CHECK(dom->boundary_normals.row(f).norm() == doctest::Approx(1.0).epsilon(1e-12));
      Vec mid = Vec::Zero(3);
      for (int i = 0; i < 3; ++i) mid += dom->vertices.row(dom->boundary_faces(f, i)).transpose() / 3.0;
      CHECK(dom->boundary_normals.row(f).dot(mid.transpose()) > 0.5);
    }
  }
  SUBCASE("rejects bad dimension and budget") {
    CHECK_THROWS_AS(build_ball_mesh(4, 0.3), std::invalid_argument);
    BallMeshOptions tiny;
    tiny.vertex_budget = 10;
    CHECK_THROWS_AS(build_ball_mesh(3, 0.3, tiny), std::runtime_error);
  }
}

TEST_CASE("uniform refinement halves edges and improves volume") {
  auto dom = build_ball_mesh(3, 0.4);
  auto fine = uniform_refine(*dom);
  CHECK(fine->num_simplices() == 8 * dom->num_simplices());
  CHECK(fine->max_edge < 0.62 * dom->max_edge);
  double err0 = std::abs(dom->total_volume() - 4.0 * M_PI / 3.0);
  double err1 = std::abs(fine->total_volume() - 4.0 * M_PI / 3.0);
  CHECK(err1 < 0.35 * err0);
}

TEST_CASE("local bisection refinement reaches target size and stays conforming") {
  auto dom = build_ball_mesh(3, 0.45);
  Vec c = Vec::Unit(3, 2);
  auto ref = refine_near(*dom, c, 0.3, 0.08);
  // finalize() inside build() already checks conformity + positivity.
  double local = 0.0;
  for (int s = 0; s < ref->num_simplices(); ++s) {
    bool near = false;
    for (int i = 0; i <= 3; ++i)
      if ((ref->vertices.row(ref->simplices(s, i)).transpose() - c).norm() < 0.3) near = true;
    if (!near) continue;
    for (int i = 0; i <= 3; ++i)
      for (int j = i + 1; j <= 3; ++j)
        local = std::max(local, (ref->vertices.row(ref->simplices(s, i)) -
                                 ref->vertices.row(ref->simplices(s, j))).norm());
  }
  CHECK(local <= 0.08);
  CHECK(ref->num_simplices() > dom->num_simplices());
}

TEST_CASE("perturbed ball") {
  SUBCASE("zero amplitude is the identity") {
    auto setup = build_perturbed_ball(3, 0.4, 0.0);
    CHECK(setup.phi.c1_distance_to_identity == 0.0);
    Vec x(3);
    x << 0.3, -0.1, 0.2;
    CHECK((setup.phi.forward(x) - x).norm() == 0.0);
  }
  SUBCASE("moderate amplitude: measured C1 distance in (0, 0.2)") {
    auto setup = build_perturbed_ball(3, 0.35, 0.05);
    CHECK(setup.phi.c1_distance_to_identity > 0.0);
    CHECK(setup.phi.c1_distance_to_identity < 0.2);
    // Phi maps the smooth boundary onto the unit sphere.
    SplitMix rng(11);
    for (int k = 0; k < 100; ++k) {
      Vec y = setup.boundary_point(rng.unit_vector(3));
      CHECK(std::abs(setup.phi.forward(y).norm() - 1.0) < 1e-10);
      CHECK(std::abs(setup.domain->levelset(y)) < 1e-12);
    }
    // Round trip.
    for (int k = 0; k < 50; ++k) {
      Vec x = 0.95 * rng.uniform() * rng.unit_vector(3);
      Vec y = setup.phi.inverse(x);
      CHECK((setup.phi.forward(y) - x).norm() < 1e-8);
    }
    // det dPhi > 0 on sampled points.
    for (int k = 0; k < 50; ++k) {
      Vec y = setup.phi.inverse(Vec(0.9 * rng.uniform() * rng.unit_vector(3)));
      CHECK(setup.phi.differential(y).determinant() > 0.0);
    }
  }
  SUBCASE("excessive amplitude fails with non-positive Jacobian") {
    CHECK_THROWS_WITH_AS(build_perturbed_ball(3, 0.4, 0.5),
                         doctest::Contains("non-positive Jacobian"), std::runtime_error);
  }
}

TEST_CASE("boundary straightening chart") {
  auto dom = build_ball_mesh(3, 0.4);
  Vec a = Vec::Unit(3, 2);
  BoundaryChart chart = straighten_boundary(*dom, a);
  CHECK(chart.forward(a).norm() < 1e-12);
  // df(a) orthogonal.
  Mat d = chart.differential(a);
  CHECK((d.transpose() * d - Mat::Identity(3, 3)).norm() < 1e-10);
  // Interior maps to upper half space.
  Vec x = 0.99 * a;
  CHECK(chart.forward(x)[2] > 0.0);
  // Boundary points near a map to {y_n = 0}.
  SplitMix rng(5);
  for (int k = 0; k < 50; ++k) {
    Vec t(3);
    t << rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 1.0;
    Vec b = t.normalized();
    CHECK(std::abs(chart.forward(b)[2]) < 1e-8);
    CHECK((chart.inverse(chart.forward(b)) - b).norm() < 1e-10);
  }
  // Rejects points far from the boundary.
  CHECK_THROWS_AS(straighten_boundary(*dom, Vec(0.2 * a)), std::invalid_argument);
}

TEST_CASE("conformalize_at") {
  SUBCASE("identity diffeomorphism is untouched") {
    auto setup = wrap_unit_ball(3, 0.4);
    Vec a = Vec::Unit(3, 2);
    auto ca = conformalize_at(setup, a);
    CHECK(ca.beta == doctest::Approx(1.0).epsilon(1e-9));
    CHECK((ca.rotation - Mat::Identity(3, 3)).norm() < 1e-7);
    SplitMix rng(2);
    for (int k = 0; k < 20; ++k) {
      Vec x = 0.99 * rng.uniform() * rng.unit_vector(3);
      CHECK((ca.forward(x) - x).norm() < 1e-9);
      CHECK((ca.differential(x) - Mat::Identity(3, 3)).norm() < 1e-8);
    }
  }
  SUBCASE("boundary anchor: dPhi_a(a)^T dPhi_a(a) = beta^2 I") {
    auto setup = build_perturbed_ball(3, 0.35, 0.05);
    SplitMix rng(9);
    for (int k = 0; k < 8; ++k) {
      Vec a = setup.boundary_point(rng.unit_vector(3));
      auto ca = conformalize_at(setup, a);
      Mat d = ca.differential(a);
      Mat gram = d.transpose() * d;
      Mat expected = ca.beta * ca.beta * Mat::Identity(3, 3);
      CHECK((gram - expected).norm() / expected.norm() < 1e-6);
      // Phi_a(a) = Phi(a)
      CHECK((ca.forward(a) - setup.phi.forward(a)).norm() < 1e-10);
      // Phi_a still maps the boundary into the sphere.
      for (int j = 0; j < 10; ++j) {
        Vec b = setup.boundary_point(rng.unit_vector(3));
        CHECK(ca.forward(b).norm() == doctest::Approx(1.0).epsilon(1e-8));
      }
    }
  }
  SUBCASE("continuity in the anchor") {
    auto setup = build_perturbed_ball(3, 0.35, 0.05);
    Vec dir(3);
    dir << 0.3, 0.8, 0.52;
    dir.normalize();
    Vec a0 = setup.boundary_point(dir);
    auto c0 = conformalize_at(setup, a0);
    double prev = 1e300;
    for (double eps : {3e-2, 1e-2, 3e-3}) {
      Vec dir2 = (dir + eps * Vec(Vec::Unit(3, 0))).normalized();
      auto c1 = conformalize_at(setup, setup.boundary_point(dir2));
      SplitMix rng(17);
      double dsup = 0.0;
      for (int k = 0; k < 30; ++k) {
        // Sample inside the correction region around the anchor.
        Vec off(3);
        off << rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0;
        Vec y = ((dir + off).normalized() * rng.uniform(0.8, 0.999));
        Vec x = setup.phi.inverse(y);
        dsup = std::max(dsup, (c0.forward(x) - c1.forward(x)).norm());
        dsup = std::max(dsup, 0.1 * (c0.differential(x) - c1.differential(x)).norm());
      }
      CHECK(dsup < prev);
      prev = dsup;
    }
    CHECK(prev < 0.02);
  }
  SUBCASE("deep interior anchor leaves Phi unchanged") {
    auto setup = build_perturbed_ball(3, 0.35, 0.05);
    Vec a = Vec::Zero(3);
    a[0] = 0.3;  // well inside the tubular band
    auto ca = conformalize_at(setup, a);
    SplitMix rng(23);
    for (int k = 0; k < 20; ++k) {
      Vec x = setup.phi.inverse(Vec(0.9 * rng.uniform() * rng.unit_vector(3)));
      CHECK((ca.forward(x) - setup.phi.forward(x)).norm() < 1e-13);
    }
  }
}

TEST_CASE("simplex locator") {
  auto dom = build_ball_mesh(2, 0.3);
  SimplexLocator loc(dom);
  SplitMix rng(31);
  for (int k = 0; k < 200; ++k) {
    Vec x = 0.98 * rng.uniform() * rng.unit_vector(2);
    Vec bary;
    int s = loc.locate(x, bary);
    REQUIRE(s >= 0);
    Vec rec = Vec::Zero(2);
    for (int i = 0; i <= 2; ++i) rec += bary[i] * dom->vertices.row(dom->simplices(s, i)).transpose();
    CHECK((rec - x).norm() < 1e-9);
  }
}
