#include "nharm/core.hpp"

#include <Eigen/Eigenvalues>

#include <atomic>
#include <thread>

namespace nharm {

Mat matrix_exp(const Mat& A) {
  const int n = static_cast<int>(A.rows());
  double nrm = A.cwiseAbs().rowwise().sum().maxCoeff();  // inf-norm bound
  int s = 0;
  while (nrm > 0.25) {
    nrm *= 0.5;
    ++s;
  }
  Mat B = A / std::pow(2.0, s);
  Mat term = Mat::Identity(n, n);
  Mat sum = term;
  for (int k = 1; k <= 24; ++k) {
    term = (term * B) / double(k);
    sum += term;
    if (term.cwiseAbs().maxCoeff() < 1e-18) break;
  }
  for (int k = 0; k < s; ++k) sum = sum * sum;
  return sum;
}

Mat matrix_log_near_identity(const Mat& M) {
  const int n = static_cast<int>(M.rows());
  const Mat I = Mat::Identity(n, n);
  {
    Eigen::JacobiSVD<Mat> svd(M - I);
    if (svd.singularValues().size() && svd.singularValues()(0) >= 0.5)
      throw std::invalid_argument("matrix_log_near_identity: ||M - I|| >= 0.5");
  }
  // Inverse scaling and squaring: take square roots until close to I,
  // then log(I + X) by its series with remainder below 1e-16.
  Mat R = M;
  int s = 0;
  auto dist = [&](const Mat& A) { return (A - I).norm(); };
  while (dist(R) > 0.25 && s < 40) {
    // Denman-Beavers square root iteration.
    Mat Y = R, Z = I;
    for (int it = 0; it < 60; ++it) {
      Mat Yn = 0.5 * (Y + Z.inverse());
      Mat Zn = 0.5 * (Z + Y.inverse());
      double delta = (Yn - Y).norm();
      Y = Yn;
      Z = Zn;
      if (delta < 1e-15) break;
    }
    R = Y;
    ++s;
  }
  Mat X = R - I;
  Mat term = X;
  Mat sum = Mat::Zero(n, n);
  double sign = 1.0;
  for (int k = 1; k <= 60; ++k) {
    sum += (sign / k) * term;
    term = term * X;
    sign = -sign;
    if (term.norm() / (k + 1) < 1e-18) break;
  }
  return std::pow(2.0, s) * sum;
}

void polar_decompose(const Mat& A, Mat& Q, Mat& S, double sigma_min_tol) {
  Eigen::JacobiSVD<Mat> svd(A);
  const auto& sv = svd.singularValues();
  if (sv(sv.size() - 1) < sigma_min_tol)
    throw std::runtime_error("polar_decompose: ill-conditioned factor, sigma_min < tol");
  Q = A;
  for (int it = 0; it < 200; ++it) {
    Mat Qn = 0.5 * (Q + Q.inverse().transpose());
    double delta = (Qn - Q).norm();
    Q = Qn;
    if (delta < 1e-14) break;
  }
  S = Q.transpose() * A;
  S = 0.5 * (S + S.transpose().eval());
}

Mat rotation_between(const Vec& from, const Vec& to) {
  const int n = static_cast<int>(from.size());
  Vec f = from.normalized(), t = to.normalized();
  double c = f.dot(t);
  if (c < -1.0 + 1e-14) {
    // Antipodal: rotate by pi in the plane span(f, u); det = +1.
    Mat B = tangent_basis(f);
    Vec u = B.col(0);
    return Mat::Identity(n, n) - 2.0 * f * f.transpose() - 2.0 * u * u.transpose();
  }
  // Minimal rotation in span(f,t): R = I + (t f^T - f t^T) + ((t f^T - f t^T)^2)/(1+c)
  Mat K = t * f.transpose() - f * t.transpose();
  return Mat::Identity(n, n) + K + (K * K) / (1.0 + c);
}

Mat tangent_basis(const Vec& w) {
  const int n = static_cast<int>(w.size());
  Mat B(n, n - 1);
  // Gram-Schmidt of coordinate axes against w, skipping the most parallel one.
  int skip = 0;
  for (int i = 1; i < n; ++i)
    if (std::abs(w[i]) > std::abs(w[skip])) skip = i;
  int col = 0;
  for (int i = 0; i < n; ++i) {
    if (i == skip) continue;
    Vec v = Vec::Unit(n, i);
    v -= w.dot(v) * w;
    for (int j = 0; j < col; ++j) v -= B.col(j).dot(v) * B.col(j);
    B.col(col++) = v.normalized();
  }
  return B;
}

namespace {
std::atomic<int> g_threads{1};
}

int thread_count() { return g_threads.load(); }
void set_thread_count(int t) { g_threads.store(std::max(1, t)); }

void parallel_blocks(std::size_t nitems,
                     const std::function<void(int, std::size_t, std::size_t)>& body,
                     int nblocks) {
  if (nitems == 0) return;
  nblocks = static_cast<int>(std::min<std::size_t>(nblocks, nitems));
  auto block_range = [&](int b, std::size_t& lo, std::size_t& hi) {
    lo = nitems * b / nblocks;
    hi = nitems * (b + 1) / nblocks;
  };
  int nt = std::min(thread_count(), nblocks);
  if (nt <= 1) {
    for (int b = 0; b < nblocks; ++b) {
      std::size_t lo, hi;
      block_range(b, lo, hi);
      body(b, lo, hi);
    }
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        int b = next.fetch_add(1);
        if (b >= nblocks) return;
        std::size_t lo, hi;
        block_range(b, lo, hi);
        body(b, lo, hi);
      }
    });
  }
  for (auto& th : pool) th.join();
}

void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(n, 0.0);
  w.assign(n, 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
      }
      pp = n * (z * p0 - p1) / (z * z - 1.0);
      double z1 = z;
      z = z1 - p0 / pp;
      if (std::abs(z - z1) < 1e-15) break;
    }
    x[i] = -z;
    x[n - 1 - i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    w[n - 1 - i] = w[i];
  }
}

void simplex_quadrature(int dim, int degree, Mat& bary, std::vector<double>& w) {
  if (dim == 2) {
    if (degree <= 2) {
      // 3-point, degree 2
      bary.resize(3, 3);
      w.assign(3, 1.0 / 3.0);
      double a = 2.0 / 3.0, b = 1.0 / 6.0;
      bary << a, b, b, b, a, b, b, b, a;
      return;
    }
    // Dunavant 6-point, degree 4
    bary.resize(6, 3);
    w.resize(6);
    const double w1 = 0.223381589678011, a1 = 0.108103018168070, b1 = 0.445948490915965;
    const double w2 = 0.109951743655322, a2 = 0.816847572980459, b2 = 0.091576213509771;
    int r = 0;
    auto put3 = [&](double a, double b, double wt) {
      bary.row(r) << a, b, b; w[r++] = wt;
      bary.row(r) << b, a, b; w[r++] = wt;
      bary.row(r) << b, b, a; w[r++] = wt;
    };
    put3(a1, b1, w1);
    put3(a2, b2, w2);
    return;
  }
  if (dim == 3) {
    if (degree <= 2) {
      // 4-point, degree 2
      bary.resize(4, 4);
      w.assign(4, 0.25);
      double a = 0.585410196624969, b = 0.138196601125011;
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) bary(i, j) = (i == j) ? a : b;
      }
      return;
    }
    // Keast 11-point, degree 4 (one negative weight; exactness tested).
    bary.resize(11, 4);
    w.resize(11);
    int r = 0;
    auto put = [&](double b0, double b1, double b2, double b3, double wt) {
      bary.row(r) << b0, b1, b2, b3;
      w[r++] = wt;
    };
    const double wc = -74.0 / 5625.0 * 6.0;
    const double w4 = 343.0 / 45000.0 * 6.0;
    const double w6 = 56.0 / 2250.0 * 6.0;
    put(0.25, 0.25, 0.25, 0.25, wc);
    const double a = 11.0 / 14.0, b = 1.0 / 14.0;
    put(a, b, b, b, w4);
    put(b, a, b, b, w4);
    put(b, b, a, b, w4);
    put(b, b, b, a, w4);
    const double g = 0.399403576166799, h = 0.100596423833201;
    put(g, g, h, h, w6);
    put(g, h, g, h, w6);
    put(g, h, h, g, w6);
    put(h, g, g, h, w6);
    put(h, g, h, g, w6);
    put(h, h, g, g, w6);
    return;
  }
  throw std::invalid_argument("simplex_quadrature: dim must be 2 or 3");
}

}  // namespace nharm
