#include "nharm/geometry.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <map>
#include <unordered_map>

namespace nharm {

namespace {

double signed_volume(const Mat& verts, const Eigen::VectorXi& simplex, int dim) {
  Mat E(dim, dim);
  for (int j = 0; j < dim; ++j)
    E.col(j) = (verts.row(simplex[j + 1]) - verts.row(simplex[0])).transpose();
  double fact = (dim == 2) ? 2.0 : 6.0;
  return E.determinant() / fact;
}

uint64_t edge_key(int a, int b) {
  if (a > b) std::swap(a, b);
  return (uint64_t(a) << 32) | uint64_t(b);
}

}  // namespace

double Domain::total_volume() const {
  double v = 0.0;
  for (double s : simplex_volume) v += s;
  return v;
}

void Domain::finalize() {
  const int d = dim;
  const int ns = num_simplices();
  const int nv = num_vertices();

  // Orient simplices positively.
  for (int s = 0; s < ns; ++s) {
    Eigen::VectorXi row = simplices.row(s);
    if (signed_volume(vertices, row, d) < 0.0) {
      std::swap(row[d - 1], row[d]);
      simplices.row(s) = row;
    }
  }

  simplex_volume.assign(ns, 0.0);
  simplex_grad.assign(ns, Mat());
  max_edge = 0.0;
  for (int s = 0; s < ns; ++s) {
    Mat E(d, d);
    for (int j = 0; j < d; ++j)
      E.col(j) = (vertices.row(simplices(s, j + 1)) - vertices.row(simplices(s, 0))).transpose();
    double det = E.determinant();
    double vol = det / ((d == 2) ? 2.0 : 6.0);
    if (!(vol > 1e-16))
      throw std::runtime_error("Domain::finalize: non-positive simplex volume");
    simplex_volume[s] = vol;
    Mat Einv = E.inverse();
    Mat G(d + 1, d);
    G.bottomRows(d) = Einv;  // rows are grad(lambda_i), i = 1..d
    G.row(0) = -Einv.colwise().sum();
    simplex_grad[s] = G;
    for (int i = 0; i <= d; ++i)
      for (int j = i + 1; j <= d; ++j)
        max_edge = std::max(max_edge,
                            (vertices.row(simplices(s, i)) - vertices.row(simplices(s, j))).norm());
  }

  // Faces keyed by the sorted vertex tuple packed into 64 bits
  // (vertex indices < 2^21; the vertex budget keeps us well below).
  if (nv >= (1 << 21)) throw std::runtime_error("Domain::finalize: vertex count exceeds key space");
  auto face_key = [&](int s, int opp) {
    int f[3] = {0, 0, 0};
    int c = 0;
    for (int i = 0; i <= d; ++i)
      if (i != opp) f[c++] = simplices(s, i);
    if (d == 3) {
      if (f[0] > f[1]) std::swap(f[0], f[1]);
      if (f[1] > f[2]) std::swap(f[1], f[2]);
      if (f[0] > f[1]) std::swap(f[0], f[1]);
      return (uint64_t(f[0])) | (uint64_t(f[1]) << 21) | (uint64_t(f[2]) << 42);
    }
    if (f[0] > f[1]) std::swap(f[0], f[1]);
    return (uint64_t(f[0])) | (uint64_t(f[1]) << 21);
  };
  std::unordered_map<uint64_t, std::pair<int, int>> first_owner;  // key -> (simplex, opp)
  std::unordered_map<uint64_t, int> owner_count;
  first_owner.reserve(ns * (d + 1));
  owner_count.reserve(ns * (d + 1));
  for (int s = 0; s < ns; ++s) {
    for (int opp = 0; opp <= d; ++opp) {
      uint64_t key = face_key(s, opp);
      auto [it, fresh] = owner_count.try_emplace(key, 0);
      if (++it->second > 2)
        throw std::runtime_error("Domain::finalize: non-conforming mesh (face shared by >2 simplices)");
      if (fresh) first_owner[key] = {s, opp};
    }
  }

  std::vector<std::pair<uint64_t, std::pair<int, int>>> bkeys;
  for (auto& [key, count] : owner_count)
    if (count == 1) bkeys.push_back({key, first_owner[key]});
  std::sort(bkeys.begin(), bkeys.end());  // deterministic face order

  std::vector<Eigen::VectorXi> bfs;
  std::vector<int> badj;
  for (auto& [key, owner] : bkeys) {
    auto [s, opp] = owner;
    Eigen::VectorXi face(d);
    int c = 0;
    for (int i = 0; i <= d; ++i)
      if (i != opp) face[c++] = simplices(s, i);
    // Orient outward relative to the opposite vertex q.
    Vec q = vertices.row(simplices(s, opp)).transpose();
    if (d == 3) {
      Vec a = vertices.row(face[0]).transpose(), b = vertices.row(face[1]).transpose(),
          cc = vertices.row(face[2]).transpose();
      Eigen::Vector3d nrm = Eigen::Vector3d(b - a).cross(Eigen::Vector3d(cc - a));
      Vec mid = (a + b + cc) / 3.0;
      if (nrm.dot(Eigen::Vector3d(mid - q)) < 0.0) std::swap(face[1], face[2]);
    } else {
      Vec a = vertices.row(face[0]).transpose(), b = vertices.row(face[1]).transpose();
      Vec t = b - a;
      // Interior (q) must lie left of a->b.
      double cross = t[0] * (q[1] - a[1]) - t[1] * (q[0] - a[0]);
      if (cross < 0.0) std::swap(face[0], face[1]);
    }
    bfs.push_back(face);
    badj.push_back(s);
  }

  const int nb = static_cast<int>(bfs.size());
  boundary_faces.resize(nb, d);
  boundary_normals.resize(nb, d);
  boundary_face_simplex.resize(nb);
  boundary_face_area.assign(nb, 0.0);
  vertex_on_boundary.assign(nv, 0);
  for (int f = 0; f < nb; ++f) {
    boundary_faces.row(f) = bfs[f].transpose();
    boundary_face_simplex[f] = badj[f];
    for (int i = 0; i < d; ++i) vertex_on_boundary[bfs[f][i]] = 1;
    if (d == 3) {
      Eigen::Vector3d a = vertices.row(bfs[f][0]), b = vertices.row(bfs[f][1]),
                      c = vertices.row(bfs[f][2]);
      Eigen::Vector3d nrm = (b - a).cross(c - a);
      boundary_face_area[f] = 0.5 * nrm.norm();
      boundary_normals.row(f) = nrm.normalized().transpose();
    } else {
      Eigen::Vector2d a = vertices.row(bfs[f][0]), b = vertices.row(bfs[f][1]);
      Eigen::Vector2d t = b - a;
      boundary_face_area[f] = t.norm();
      Eigen::Vector2d nrm(t[1], -t[0]);  // outward for ccw edges
      boundary_normals.row(f) = nrm.normalized().transpose();
    }
  }

  vertex_lumped_volume.assign(nv, 0.0);
  for (int s = 0; s < ns; ++s)
    for (int i = 0; i <= d; ++i)
      vertex_lumped_volume[simplices(s, i)] += simplex_volume[s] / (d + 1);
  vertex_lumped_boundary_area.assign(nv, 0.0);
  for (int f = 0; f < nb; ++f)
    for (int i = 0; i < d; ++i)
      vertex_lumped_boundary_area[boundary_faces(f, i)] += boundary_face_area[f] / d;
}

// ---------------------------------------------------------------------------
// SimplexLocator

SimplexLocator::SimplexLocator(DomainPtr dom) : dom_(std::move(dom)) {
  const auto& D = *dom_;
  const int d = D.dim;
  lo_ = D.vertices.colwise().minCoeff().transpose();
  hi_ = D.vertices.colwise().maxCoeff().transpose();
  cell_ = std::max(D.max_edge, 1e-6);
  dims_.resize(d);
  int total = 1;
  for (int k = 0; k < d; ++k) {
    dims_[k] = std::max(1, int((hi_[k] - lo_[k]) / cell_) + 1);
    total *= dims_[k];
  }
  bins_.assign(total, {});
  for (int s = 0; s < D.num_simplices(); ++s) {
    Vec smin = D.vertices.row(D.simplices(s, 0)).transpose();
    Vec smax = smin;
    for (int i = 1; i <= d; ++i) {
      Vec v = D.vertices.row(D.simplices(s, i)).transpose();
      smin = smin.cwiseMin(v);
      smax = smax.cwiseMax(v);
    }
    Eigen::VectorXi a(d), b(d);
    for (int k = 0; k < d; ++k) {
      a[k] = std::clamp(int((smin[k] - lo_[k]) / cell_), 0, dims_[k] - 1);
      b[k] = std::clamp(int((smax[k] - lo_[k]) / cell_), 0, dims_[k] - 1);
    }
    std::function<void(int, int)> rec = [&](int k, int flat) {
      if (k == d) {
        bins_[flat].push_back(s);
        return;
      }
      for (int i = a[k]; i <= b[k]; ++i) rec(k + 1, flat * dims_[k] + i);
    };
    rec(0, 0);
  }
}

int SimplexLocator::bin_index(const Vec& x) const {
  int flat = 0;
  for (int k = 0; k < dims_.size(); ++k) {
    int i = std::clamp(int((x[k] - lo_[k]) / cell_), 0, dims_[k] - 1);
    flat = flat * dims_[k] + i;
  }
  return flat;
}

int SimplexLocator::locate(const Vec& x, Vec& bary) const {
  const auto& D = *dom_;
  const int d = D.dim;
  auto bary_of = [&](int s, Vec& lam) {
    Mat E(d, d);
    for (int j = 0; j < d; ++j)
      E.col(j) = (D.vertices.row(D.simplices(s, j + 1)) - D.vertices.row(D.simplices(s, 0))).transpose();
    Vec rhs = x - D.vertices.row(D.simplices(s, 0)).transpose();
    Vec l = E.partialPivLu().solve(rhs);
    lam.resize(d + 1);
    lam[0] = 1.0 - l.sum();
    lam.tail(d) = l;
    return lam.minCoeff();
  };
  // Candidate bins: the containing bin plus a ring of neighbours.
  Eigen::VectorXi c(d);
  for (int k = 0; k < d; ++k)
    c[k] = std::clamp(int((x[k] - lo_[k]) / cell_), 0, dims_[k] - 1);
  int best = -1;
  double best_min = -1e300;
  Vec best_bary;
  for (int ring = 0; ring <= 2; ++ring) {
    std::vector<int> flats;
    std::function<void(int, int, bool)> rec = [&](int k, int flat, bool onring) {
      if (k == d) {
        if (ring == 0 || onring) flats.push_back(flat);
        return;
      }
      for (int i = std::max(0, c[k] - ring); i <= std::min(dims_[k] - 1, c[k] + ring); ++i)
        rec(k + 1, flat * dims_[k] + i, onring || std::abs(i - c[k]) == ring);
    };
    rec(0, 0, false);
    for (int flat : flats) {
      for (int s : bins_[flat]) {
        Vec lam;
        double m = bary_of(s, lam);
        if (m > best_min) {
          best_min = m;
          best = s;
          best_bary = lam;
        }
        if (m >= -1e-9) {
          bary = lam;
          return s;
        }
      }
    }
    if (best_min >= -1e-9) break;
  }
  if (best < 0) {  // empty bins nearby: brute force
    for (int s = 0; s < D.num_simplices(); ++s) {
      Vec lam;
      double m = bary_of(s, lam);
      if (m > best_min) {
        best_min = m;
        best = s;
        best_bary = lam;
      }
    }
  }
  // Clamp slightly-outside queries onto the nearest simplex.
  bary = best_bary.cwiseMax(0.0);
  bary /= bary.sum();
  return best;
}

// ---------------------------------------------------------------------------
// Ball mesh: Kuhn-triangulated cube grid mapped radially onto the ball.

namespace {

Vec spherify(const Vec& v) {
  double linf = v.cwiseAbs().maxCoeff();
  double l2 = v.norm();
  if (l2 < 1e-300) return v;
  return v * (linf / l2);
}

void kuhn_grid(int n, int m, Mat& verts, Eigen::MatrixXi& simps) {
  if (n == 2) {
    const int s = m + 1;
    verts.resize(s * s, 2);
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j)
        verts.row(i * s + j) << -1.0 + 2.0 * i / m, -1.0 + 2.0 * j / m;
    simps.resize(2 * m * m, 3);
    int r = 0;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        int v00 = i * s + j, v10 = (i + 1) * s + j, v01 = i * s + j + 1, v11 = (i + 1) * s + j + 1;
        simps.row(r++) << v00, v10, v11;
        simps.row(r++) << v00, v11, v01;
      }
    return;
  }
  const int s = m + 1;
  auto vid = [&](int i, int j, int k) { return (i * s + j) * s + k; };
  verts.resize(s * s * s, 3);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      for (int k = 0; k < s; ++k)
        verts.row(vid(i, j, k)) << -1.0 + 2.0 * i / m, -1.0 + 2.0 * j / m, -1.0 + 2.0 * k / m;
  static const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  simps.resize(6 * m * m * m, 4);
  int r = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int k = 0; k < m; ++k) {
        int base[3] = {i, j, k};
        for (auto& p : perms) {
          int c[3] = {base[0], base[1], base[2]};
          Eigen::Vector4i tet;
          tet[0] = vid(c[0], c[1], c[2]);
          for (int step = 0; step < 3; ++step) {
            c[p[step]] += 1;
            tet[step + 1] = vid(c[0], c[1], c[2]);
          }
          simps.row(r++) = tet;
        }
      }
}

void attach_ball_levelset(Domain& dom) {
  dom.levelset = [](const Vec& x) { return 1.0 - x.norm(); };
  dom.levelset_grad = [](const Vec& x) {
    double r = x.norm();
    return Vec(r > 1e-14 ? Vec(-x / r) : Vec(-Vec::Unit(x.size(), 0)));
  };
}

}  // namespace

DomainPtr build_ball_mesh(int n, double h, const BallMeshOptions& opts) {
  if (n != 2 && n != 3) throw std::invalid_argument("build_ball_mesh: n must be 2 or 3");
  if (!(h > 0.0 && h <= 0.5)) throw std::invalid_argument("build_ball_mesh: need 0 < h <= 0.5");
  int m = std::max(2, int(std::ceil(2.5 / h)));
  for (;; ++m) {
    double budget = std::pow(double(m + 1), n);
    if (budget > opts.vertex_budget)
      throw std::runtime_error("build_ball_mesh: vertex budget exceeded");
    auto dom = std::make_shared<Domain>();
    dom->dim = n;
    kuhn_grid(n, m, dom->vertices, dom->simplices);
    // Orientation reference before mapping.
    std::vector<double> pre(dom->num_simplices());
    for (int s = 0; s < dom->num_simplices(); ++s)
      pre[s] = signed_volume(dom->vertices, dom->simplices.row(s), n);
    for (int v = 0; v < dom->num_vertices(); ++v)
      dom->vertices.row(v) = spherify(dom->vertices.row(v).transpose()).transpose();
    for (int s = 0; s < dom->num_simplices(); ++s) {
      double post = signed_volume(dom->vertices, dom->simplices.row(s), n);
      if (pre[s] * post <= 0.0)
        throw std::runtime_error("build_ball_mesh: radial map inverted a simplex");
    }
    attach_ball_levelset(*dom);
    dom->finalize();
    if (dom->max_edge <= 1.5 * h) return dom;
  }
}

// ---------------------------------------------------------------------------
// Refinement.

namespace {

void project_to_levelset(const Domain& dom, Vec& x) {
  if (!dom.levelset) return;
  for (int it = 0; it < 50; ++it) {
    double r = dom.levelset(x);
    if (std::abs(r) < 1e-14) break;
    Vec g = dom.levelset_grad(x);
    x -= r * g / g.squaredNorm();
  }
}

}  // namespace

DomainPtr uniform_refine(const Domain& dom) {
  const int d = dom.dim;
  auto out = std::make_shared<Domain>();
  out->dim = d;
  out->levelset = dom.levelset;
  out->levelset_grad = dom.levelset_grad;

  std::unordered_map<uint64_t, int> mid;
  std::vector<Vec> verts;
  verts.reserve(dom.num_vertices() * 4);
  for (int v = 0; v < dom.num_vertices(); ++v)
    verts.push_back(dom.vertices.row(v).transpose());

  // Edges of boundary faces: midpoints get projected onto the smooth boundary.
  std::unordered_map<uint64_t, char> boundary_edge;
  for (int f = 0; f < dom.num_boundary_faces(); ++f)
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j)
        boundary_edge[edge_key(dom.boundary_faces(f, i), dom.boundary_faces(f, j))] = 1;

  auto midpoint = [&](int a, int b) {
    uint64_t key = edge_key(a, b);
    auto it = mid.find(key);
    if (it != mid.end()) return it->second;
    Vec p = 0.5 * (verts[a] + verts[b]);
    if (boundary_edge.count(key)) project_to_levelset(dom, p);
    verts.push_back(p);
    int idx = static_cast<int>(verts.size()) - 1;
    mid[key] = idx;
    return idx;
  };

  std::vector<Eigen::VectorXi> simps;
  for (int s = 0; s < dom.num_simplices(); ++s) {
    if (d == 2) {
      int a = dom.simplices(s, 0), b = dom.simplices(s, 1), c = dom.simplices(s, 2);
      int ab = midpoint(a, b), bc = midpoint(b, c), ca = midpoint(c, a);
      int kids[4][3] = {{a, ab, ca}, {ab, b, bc}, {ca, bc, c}, {ab, bc, ca}};
      for (auto& k : kids) simps.push_back(Eigen::Vector3i(k[0], k[1], k[2]));
    } else {
      int v0 = dom.simplices(s, 0), v1 = dom.simplices(s, 1), v2 = dom.simplices(s, 2),
          v3 = dom.simplices(s, 3);
      int m01 = midpoint(v0, v1), m02 = midpoint(v0, v2), m03 = midpoint(v0, v3);
      int m12 = midpoint(v1, v2), m13 = midpoint(v1, v3), m23 = midpoint(v2, v3);
      int kids[8][4] = {{v0, m01, m02, m03}, {v1, m01, m12, m13}, {v2, m02, m12, m23},
                        {v3, m03, m13, m23}, {m02, m13, m01, m03}, {m02, m13, m03, m23},
                        {m02, m13, m23, m12}, {m02, m13, m12, m01}};
      for (auto& k : kids) simps.push_back(Eigen::Vector4i(k[0], k[1], k[2], k[3]));
    }
  }
  out->vertices.resize(verts.size(), d);
  for (size_t v = 0; v < verts.size(); ++v) out->vertices.row(v) = verts[v].transpose();
  out->simplices.resize(simps.size(), d + 1);
  for (size_t s = 0; s < simps.size(); ++s) out->simplices.row(s) = simps[s].transpose();
  out->finalize();
  return out;
}

namespace {

// Mutable mesh for Rivara longest-edge bisection with incremental
// edge adjacency and an explicit boundary-face triangulation.
struct BisectionMesh {
  int dim;
  std::vector<Vec> verts;
  std::vector<std::vector<int>> simps;  // alive if non-empty
  std::unordered_map<uint64_t, std::vector<int>> edge2simp;
  std::unordered_map<uint64_t, std::vector<int>> edge2bface;
  std::vector<std::vector<int>> bfaces;  // alive if non-empty
  const Domain* base;

  explicit BisectionMesh(const Domain& dom) : dim(dom.dim), base(&dom) {
    for (int v = 0; v < dom.num_vertices(); ++v) verts.push_back(dom.vertices.row(v).transpose());
    for (int s = 0; s < dom.num_simplices(); ++s) {
      std::vector<int> t(dom.dim + 1);
      for (int i = 0; i <= dom.dim; ++i) t[i] = dom.simplices(s, i);
      add_simplex(t);
    }
    for (int f = 0; f < dom.num_boundary_faces(); ++f) {
      std::vector<int> bf(dom.dim);
      for (int i = 0; i < dom.dim; ++i) bf[i] = dom.boundary_faces(f, i);
      add_bface(bf);
    }
  }

  int add_simplex(const std::vector<int>& t) {
    int id = static_cast<int>(simps.size());
    simps.push_back(t);
    for (size_t i = 0; i < t.size(); ++i)
      for (size_t j = i + 1; j < t.size(); ++j)
        edge2simp[edge_key(t[i], t[j])].push_back(id);
    return id;
  }

  void remove_simplex(int id) {
    auto& t = simps[id];
    for (size_t i = 0; i < t.size(); ++i)
      for (size_t j = i + 1; j < t.size(); ++j) {
        auto& v = edge2simp[edge_key(t[i], t[j])];
        v.erase(std::remove(v.begin(), v.end(), id), v.end());
      }
    t.clear();
  }

  void add_bface(const std::vector<int>& f) {
    int id = static_cast<int>(bfaces.size());
    bfaces.push_back(f);
    for (size_t i = 0; i < f.size(); ++i)
      for (size_t j = i + 1; j < f.size(); ++j)
        edge2bface[edge_key(f[i], f[j])].push_back(id);
  }

  void remove_bface(int id) {
    auto& f = bfaces[id];
    for (size_t i = 0; i < f.size(); ++i)
      for (size_t j = i + 1; j < f.size(); ++j) {
        auto& v = edge2bface[edge_key(f[i], f[j])];
        v.erase(std::remove(v.begin(), v.end(), id), v.end());
      }
    f.clear();
  }

  double edge_len(uint64_t key) const {
    int a = int(key >> 32), b = int(key & 0xffffffffu);
    return (verts[a] - verts[b]).norm();
  }

  uint64_t longest_edge(int s) const {
    const auto& t = simps[s];
    uint64_t best = 0;
    double blen = -1.0;
    for (size_t i = 0; i < t.size(); ++i)
      for (size_t j = i + 1; j < t.size(); ++j) {
        uint64_t k = edge_key(t[i], t[j]);
        double len = edge_len(k);
        if (len > blen + 1e-15 || (std::abs(len - blen) <= 1e-15 && k < best)) {
          blen = len;
          best = k;
        }
      }
    return best;
  }

  // Splits edge key; updates simplices and boundary faces.
  void split_edge(uint64_t key) {
    int a = int(key >> 32), b = int(key & 0xffffffffu);
    Vec p = 0.5 * (verts[a] + verts[b]);
    bool on_boundary = edge2bface.count(key) && !edge2bface[key].empty();
    if (on_boundary && base->levelset) project_to_levelset(*base, p);
    verts.push_back(p);
    int m = static_cast<int>(verts.size()) - 1;

    auto owners = edge2simp[key];  // copy
    for (int s : owners) {
      std::vector<int> t = simps[s];
      remove_simplex(s);
      std::vector<int> t1 = t, t2 = t;
      for (auto& v : t1)
        if (v == a) v = m;
      for (auto& v : t2)
        if (v == b) v = m;
      add_simplex(t1);
      add_simplex(t2);
    }
    if (on_boundary) {
      auto bowners = edge2bface[key];  // copy
      for (int f : bowners) {
        std::vector<int> bf = bfaces[f];
        remove_bface(f);
        std::vector<int> f1 = bf, f2 = bf;
        for (auto& v : f1)
          if (v == a) v = m;
        for (auto& v : f2)
          if (v == b) v = m;
        add_bface(f1);
        add_bface(f2);
      }
    }
  }

  // Rivara LEPP: bisect simplex s by its longest edge, refining neighbours
  // first while their longest edges are strictly longer.
  void bisect(int s) {
    for (int guard = 0; guard < 10000; ++guard) {
      if (simps[s].empty()) return;  // already split as a neighbour
      std::vector<int> path{s};
      for (;;) {
        int cur = path.back();
        uint64_t e = longest_edge(cur);
        double elen = edge_len(e);
        int worst = -1;
        double wlen = elen;
        for (int nb : edge2simp[e]) {
          uint64_t ne = longest_edge(nb);
          double nlen = edge_len(ne);
          if (nlen > wlen * (1.0 + 1e-12)) {
            wlen = nlen;
            worst = nb;
          }
        }
        if (worst < 0) {
          split_edge(e);
          break;
        }
        path.push_back(worst);
        if (path.size() > 1000)
          throw std::runtime_error("refine_near: LEPP path did not terminate");
      }
      if (simps[s].empty()) return;
    }
    throw std::runtime_error("refine_near: bisection did not terminate");
  }

  DomainPtr build() const {
    auto out = std::make_shared<Domain>();
    out->dim = dim;
    out->levelset = base->levelset;
    out->levelset_grad = base->levelset_grad;
    out->vertices.resize(verts.size(), dim);
    for (size_t v = 0; v < verts.size(); ++v) out->vertices.row(v) = verts[v].transpose();
    int ns = 0;
    for (auto& t : simps)
      if (!t.empty()) ++ns;
    out->simplices.resize(ns, dim + 1);
    int r = 0;
    for (auto& t : simps) {
      if (t.empty()) continue;
      for (int i = 0; i <= dim; ++i) out->simplices(r, i) = t[i];
      ++r;
    }
    out->finalize();
    return out;
  }
};

}  // namespace

DomainPtr refine_graded(const Domain& dom, const Vec& center,
                        const std::vector<std::pair<double, double>>& shells) {
  BisectionMesh mesh(dom);
  for (auto [radius, target_h] : shells) {
    for (int pass = 0;; ++pass) {
      if (pass >= 400) throw std::runtime_error("refine_near: did not reach target size");
      bool any = false;
      const int ns = static_cast<int>(mesh.simps.size());
      for (int s = 0; s < ns; ++s) {
        if (mesh.simps[s].empty()) continue;
        const auto& t = mesh.simps[s];
        double dmin = 1e300;
        for (int v : t) dmin = std::min(dmin, (mesh.verts[v] - center).norm());
        if (dmin > radius) continue;
        if (mesh.edge_len(mesh.longest_edge(s)) <= target_h) continue;
        mesh.bisect(s);
        any = true;
      }
      if (!any) break;
    }
  }
  return mesh.build();
}

DomainPtr refine_near(const Domain& dom, const Vec& center, double radius, double target_h) {
  return refine_graded(dom, center, {{radius, target_h}});
}

// ---------------------------------------------------------------------------
// Perturbed ball.

namespace {

struct HarmonicBump {
  int n, degree, index;
  // P homogeneous harmonic of `degree`; value/gradient at x in R^n; the
  // normalisation makes sup_{S^{n-1}} |P| = 1.
  double P(const Vec& x) const {
    if (n == 2) {
      // Re((x+iy)^k), normalised (sup on circle = 1 already).
      std::complex<double> z(x[0], x[1]);
      return std::pow(z, degree).real();
    }
    switch (index % 3) {
      case 0: return 2.0 * x[0] * x[1];
      case 1: return 2.0 * x[1] * x[2];
      default: return x[0] * x[0] - x[1] * x[1];
    }
  }
  Vec gradP(const Vec& x) const {
    Vec g = Vec::Zero(n);
    if (n == 2) {
      std::complex<double> z(x[0], x[1]);
      std::complex<double> d = double(degree) * std::pow(z, degree - 1);
      g[0] = d.real();
      g[1] = -d.imag();  // d/dy Re(z^k) = -Im(k z^{k-1})
      return g;
    }
    switch (index % 3) {
      case 0:
        g[0] = 2.0 * x[1];
        g[1] = 2.0 * x[0];
        break;
      case 1:
        g[1] = 2.0 * x[2];
        g[2] = 2.0 * x[1];
        break;
      default:
        g[0] = 2.0 * x[0];
        g[1] = -2.0 * x[1];
        break;
    }
    return g;
  }
  double Y(const Vec& theta) const { return P(theta); }  // |theta| = 1
};

struct RadialGraphMap {
  int n;
  double L0;
  double r0;
  HarmonicBump bump;
  int degree;

  double psi(double r) const { return quintic_ramp((r - r0) / (1.0 - r0)); }
  double psi_d(double r) const { return quintic_ramp_d((r - r0) / (1.0 - r0)) / (1.0 - r0); }

  double scale(const Vec& x) const {
    double r = x.norm();
    if (r <= r0) return 1.0;
    return 1.0 + L0 * psi(r) * bump.P(x) / std::pow(r, degree);
  }

  Vec forward(const Vec& x) const { return scale(x) * x; }

  Mat dforward(const Vec& x) const {
    double r = x.norm();
    if (r <= r0) return Mat::Identity(n, n);
    double Yv = bump.P(x) / std::pow(r, degree);
    Vec gY = bump.gradP(x) / std::pow(r, degree) -
             double(degree) * bump.P(x) * x / std::pow(r, degree + 2);
    Vec gs = L0 * (psi_d(r) * Yv * x / r + psi(r) * gY);
    double s = 1.0 + L0 * psi(r) * Yv;
    return s * Mat::Identity(n, n) + x * gs.transpose();
  }

  // Inverse radius: solve t * scale(t*theta) = rho for t.
  Vec inverse(const Vec& y) const {
    double rho = y.norm();
    if (rho < 1e-300) return Vec::Zero(n);
    Vec theta = y / rho;
    double t = std::min(rho, 1.0);
    for (int it = 0; it < 100; ++it) {
      double Yv = bump.Y(theta);
      double g = t * (1.0 + L0 * psi(t) * Yv) - rho;
      double gd = 1.0 + L0 * (psi(t) * Yv + t * psi_d(t) * Yv);
      double step = g / gd;
      t -= step;
      if (std::abs(step) < 1e-15) break;
    }
    return t * theta;
  }
};

}  // namespace

PerturbedBall wrap_unit_ball(int n, double h, const BallMeshOptions& opts) {
  PerturbedBall out;
  out.domain = build_ball_mesh(n, h, opts);
  out.amplitude = 0.0;
  out.phi.forward = [](const Vec& x) { return x; };
  out.phi.differential = [n](const Vec&) { return Mat(Mat::Identity(n, n)); };
  out.phi.inverse = [](const Vec& y) { return y; };
  out.phi.c1_distance_to_identity = 0.0;
  out.boundary_point = [](const Vec& theta) { return theta; };
  return out;
}

PerturbedBall build_perturbed_ball(int n, double h, double amplitude,
                                   const PerturbationShape& shape, const BallMeshOptions& opts) {
  if (amplitude == 0.0) return wrap_unit_ball(n, h, opts);
  auto ball = build_ball_mesh(n, h, opts);
  RadialGraphMap T{n, amplitude, shape.ramp_start,
                   HarmonicBump{n, shape.harmonic_degree, shape.harmonic_index},
                   shape.harmonic_degree};

  // Reject non-diffeomorphic perturbations by sampling det dT.
  {
    Mat bary;
    std::vector<double> w;
    simplex_quadrature(n, 2, bary, w);
    for (int s = 0; s < ball->num_simplices(); ++s) {
      for (int q = 0; q < bary.rows(); ++q) {
        Vec x = Vec::Zero(n);
        for (int i = 0; i <= n; ++i)
          x += bary(q, i) * ball->vertices.row(ball->simplices(s, i)).transpose();
        if (T.dforward(x).determinant() <= 1e-10)
          throw std::runtime_error("build_perturbed_ball: non-positive Jacobian (perturbation too large)");
      }
    }
  }

  auto dom = std::make_shared<Domain>();
  dom->dim = n;
  dom->vertices.resize(ball->num_vertices(), n);
  for (int v = 0; v < ball->num_vertices(); ++v)
    dom->vertices.row(v) = T.forward(ball->vertices.row(v).transpose()).transpose();
  dom->simplices = ball->simplices;
  const double L0 = amplitude;
  HarmonicBump bump = T.bump;
  int deg = shape.harmonic_degree;
  dom->levelset = [L0, bump, deg](const Vec& y) {
    double r = y.norm();
    if (r < 1e-14) return 1.0;
    return 1.0 + L0 * bump.P(y) / std::pow(r, deg) - r;
  };
  dom->levelset_grad = [L0, bump, deg, n](const Vec& y) {
    double r = y.norm();
    Vec gY = bump.gradP(y) / std::pow(r, deg) - double(deg) * bump.P(y) * y / std::pow(r, deg + 2);
    return Vec(L0 * gY - y / r);
  };
  dom->finalize();

  PerturbedBall out;
  out.domain = dom;
  out.amplitude = amplitude;
  out.shape = shape;
  out.phi.forward = [T](const Vec& y) { return T.inverse(y); };
  out.phi.differential = [T](const Vec& y) { return Mat(T.dforward(T.inverse(y)).inverse()); };
  out.phi.inverse = [T](const Vec& x) { return T.forward(x); };
  out.boundary_point = [T](const Vec& theta) { return T.forward(theta.normalized()); };

  // Measured C1 distance to the identity, sampled at quadrature points.
  double dist0 = 0.0, dist1 = 0.0;
  Mat bary;
  std::vector<double> w;
  simplex_quadrature(n, 2, bary, w);
  for (int s = 0; s < dom->num_simplices(); ++s) {
    for (int q = 0; q < bary.rows(); ++q) {
      Vec y = Vec::Zero(n);
      for (int i = 0; i <= n; ++i)
        y += bary(q, i) * dom->vertices.row(dom->simplices(s, i)).transpose();
      Vec x = out.phi.forward(y);
      dist0 = std::max(dist0, (x - y).norm());
      Mat d = out.phi.differential(y) - Mat::Identity(n, n);
      Eigen::JacobiSVD<Mat> svd(d);
      dist1 = std::max(dist1, svd.singularValues()(0));
    }
  }
  out.phi.c1_distance_to_identity = dist0 + dist1;
  return out;
}

// ---------------------------------------------------------------------------
// Boundary straightening.

Vec BoundaryChart::forward(const Vec& x) const {
  const int n = static_cast<int>(x.size());
  Vec y(n);
  Vec t = frame * (x - anchor);
  y.head(n - 1) = t.head(n - 1);
  y[n - 1] = rho(x) / grad_scale;
  return y;
}

Mat BoundaryChart::differential(const Vec& x) const {
  const int n = static_cast<int>(x.size());
  Mat d(n, n);
  d.topRows(n - 1) = frame.topRows(n - 1);
  d.row(n - 1) = rho_grad(x).transpose() / grad_scale;
  return d;
}

Vec BoundaryChart::inverse(const Vec& y) const {
  const int n = static_cast<int>(y.size());
  Vec x = anchor + frame.transpose() * y;
  for (int it = 0; it < 60; ++it) {
    Vec r = forward(x) - y;
    if (r.norm() < 1e-13) break;
    x -= differential(x).partialPivLu().solve(r);
  }
  return x;
}

BoundaryChart straighten_boundary(const Domain& dom, const Vec& a) {
  if (!dom.levelset) throw std::invalid_argument("straighten_boundary: domain has no levelset");
  const int n = dom.dim;
  Vec g = dom.levelset_grad(a);
  double dist = std::abs(dom.levelset(a)) / g.norm();
  if (dist > dom.max_edge)
    throw std::invalid_argument("straighten_boundary: point farther than h from the boundary");
  Vec b = a;
  project_to_levelset(dom, b);
  Vec gb = dom.levelset_grad(b);
  Vec nu = -gb.normalized();  // outward
  BoundaryChart chart;
  chart.anchor = b;
  chart.frame = rotation_between(nu, Vec(-Vec::Unit(n, n - 1)));
  chart.grad_scale = gb.norm();
  chart.radius = 0.45;
  chart.rho = dom.levelset;
  chart.rho_grad = dom.levelset_grad;
  return chart;
}

// ---------------------------------------------------------------------------
// conformalize_at.

namespace {

// Time-1 flow of X(y) = chi(|y|) D y with C2 quintic cutoff, fixed-step RK4;
// optionally carries the Jacobian along the variational equation.
struct CutoffLinearFlow {
  Mat D;
  double c_on, c_off;
  int steps;

  Vec field(const Vec& y) const {
    double r = y.norm();
    return quintic_bump(r, c_on, c_off) * (D * y);
  }
  Mat field_jacobian(const Vec& y) const {
    double r = y.norm();
    double chi = quintic_bump(r, c_on, c_off);
    Mat J = chi * D;
    if (r > 1e-14 && r > c_on && r < c_off) {
      Vec gchi = quintic_bump_d(r, c_on, c_off) * y / r;
      J += (D * y) * gchi.transpose();
    }
    return J;
  }

  Vec flow(const Vec& y0) const {
    Vec y = y0;
    double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
      Vec k1 = field(y);
      Vec k2 = field(y + 0.5 * dt * k1);
      Vec k3 = field(y + 0.5 * dt * k2);
      Vec k4 = field(y + dt * k3);
      y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return y;
  }

  void flow_with_jacobian(const Vec& y0, Vec& y, Mat& J) const {
    const int n = static_cast<int>(y0.size());
    y = y0;
    J = Mat::Identity(n, n);
    double dt = 1.0 / steps;
    for (int i = 0; i < steps; ++i) {
      Vec k1 = field(y);
      Mat K1 = field_jacobian(y) * J;
      Vec y2 = y + 0.5 * dt * k1;
      Mat J2 = J + 0.5 * dt * K1;
      Vec k2 = field(y2);
      Mat K2 = field_jacobian(y2) * J2;
      Vec y3 = y + 0.5 * dt * k2;
      Mat J3 = J + 0.5 * dt * K2;
      Vec k3 = field(y3);
      Mat K3 = field_jacobian(y3) * J3;
      Vec y4 = y + dt * k3;
      Mat J4 = J + dt * K3;
      Vec k4 = field(y4);
      Mat K4 = field_jacobian(y4) * J4;
      y += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      J += (dt / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4);
    }
  }
};

}  // namespace

ConformalizedDiffeo conformalize_at(const PerturbedBall& setup, const Vec& a,
                                    const ConformalizeOptions& opts) {
  const Domain& dom = *setup.domain;
  const int n = dom.dim;
  const auto& phi = setup.phi;

  // Band coordinate: first-order distance to the smooth boundary.
  double band = std::abs(dom.levelset(a)) / dom.levelset_grad(a).norm();
  double lambda = quintic_bump(band, opts.tubular_width / 2.0, opts.tubular_width);

  ConformalizedDiffeo out;
  out.anchor = a;
  if (lambda <= 0.0) {
    out.beta = 1.0;
    out.rotation = Mat::Identity(n, n);
    out.forward = phi.forward;
    out.differential = phi.differential;
    return out;
  }

  // Project radially to the boundary (continuous on the band, which excludes
  // a neighbourhood of the origin).
  Vec b = setup.boundary_point(a.normalized());
  BoundaryChart chart = straighten_boundary(dom, b);
  chart.radius = opts.chart_radius;

  Mat dphi_b = phi.differential(chart.anchor);
  Mat K_full = dphi_b * chart.frame.transpose();  // d(Phi o f^{-1})(0)
  Vec w = phi.forward(chart.anchor);
  if (std::abs(w.norm() - 1.0) > 1e-8)
    throw std::runtime_error("conformalize_at: Phi does not map the boundary to the sphere");
  w.normalize();
  // Adapted target basis: tangent frame, then the inward radial -w, so that
  // the chart's e_n (inward) pairs with inward at the image point.
  Mat Q(n, n);
  Q.leftCols(n - 1) = tangent_basis(w);
  Q.col(n - 1) = -w;
  Mat K = Q.transpose() * K_full;
  if (K.row(n - 1).head(n - 1).norm() > 1e-6 * K.norm())
    throw std::runtime_error("conformalize_at: boundary tangency defect in straightened frame");
  K.row(n - 1).head(n - 1).setZero();

  Mat A = K.topLeftCorner(n - 1, n - 1);
  Vec B = K.topRightCorner(n - 1, 1);
  double beta = K(n - 1, n - 1);
  if (beta <= 0.0) throw std::runtime_error("conformalize_at: non-positive normal stretch");

  Mat RA, S;
  polar_decompose(A, RA, S);  // throws when sigma_min < 1e-6
  Mat N1 = matrix_log_near_identity(A.inverse() * RA);
  Mat Nt = std::log(beta) * Mat::Identity(n - 1, n - 1) + N1;  // generator upper block

  // N2 = -(int_0^1 exp(-s Nt) ds)^{-1} exp(-Nt) A^{-1} B ; Nt is symmetric.
  Eigen::SelfAdjointEigenSolver<Mat> eig(Nt);
  Vec lam = eig.eigenvalues();
  Mat V = eig.eigenvectors();
  Vec phi1(lam.size()), em(lam.size());
  for (int i = 0; i < lam.size(); ++i) {
    double l = lam[i];
    phi1[i] = std::abs(l) < 1e-12 ? 1.0 : (1.0 - std::exp(-l)) / l;
    em[i] = std::exp(-l);
  }
  Mat Eint = V * phi1.asDiagonal() * V.transpose();
  Mat Em = V * em.asDiagonal() * V.transpose();
  Vec N2 = -Eint.inverse() * Em * (A.inverse() * B);

  Mat D = Mat::Zero(n, n);
  D.topLeftCorner(n - 1, n - 1) = Nt;
  D.topRightCorner(n - 1, 1) = N2;

  auto flow = std::make_shared<CutoffLinearFlow>();
  flow->D = D;
  flow->c_on = opts.cutoff_on;
  flow->c_off = opts.cutoff_off;
  flow->steps = opts.flow_steps;
  if (opts.cutoff_off >= 0.9 * opts.chart_radius)
    throw std::invalid_argument("conformalize_at: cutoff must sit inside the chart");

  if (D.norm() < 1e-13) {
    // Nothing to correct (Phi already conformal at the anchor).
    out.beta = beta;
    out.rotation = Q * (K / beta) * chart.frame;
    out.forward = phi.forward;
    out.differential = phi.differential;
    return out;
  }

  auto chart_ptr = std::make_shared<BoundaryChart>(chart);
  double chart_radius = opts.chart_radius;
  double c_off = opts.cutoff_off;

  auto corrected_forward = [phi, chart_ptr, flow, chart_radius, c_off](const Vec& x) -> Vec {
    if ((x - chart_ptr->anchor).norm() >= chart_radius) return phi.forward(x);
    Vec y = chart_ptr->forward(x);
    if (y.norm() >= c_off) return phi.forward(x);
    Vec y1 = flow->flow(y);
    return phi.forward(chart_ptr->inverse(y1));
  };
  auto corrected_differential = [phi, chart_ptr, flow, chart_radius, c_off](const Vec& x) -> Mat {
    if ((x - chart_ptr->anchor).norm() >= chart_radius) return phi.differential(x);
    Vec y = chart_ptr->forward(x);
    if (y.norm() >= c_off) return phi.differential(x);
    Vec y1;
    Mat J;
    flow->flow_with_jacobian(y, y1, J);
    Vec x1 = chart_ptr->inverse(y1);
    Mat dfx1 = chart_ptr->differential(x1);
    return phi.differential(x1) * dfx1.partialPivLu().solve(J * chart_ptr->differential(x));
  };

  out.beta = beta;
  out.rotation = Q * (Mat(K * matrix_exp(D)) / beta) * chart.frame;  // dPhi_a(a)/beta
  if (lambda >= 1.0) {
    out.forward = corrected_forward;
    out.differential = corrected_differential;
    return out;
  }
  // Tubular-band blend with Phi (constant coefficient per anchor).
  auto base_fwd = phi.forward;
  auto base_dif = phi.differential;
  out.forward = [lambda, corrected_forward, base_fwd](const Vec& x) {
    return Vec(lambda * corrected_forward(x) + (1.0 - lambda) * base_fwd(x));
  };
  out.differential = [lambda, corrected_differential, base_dif](const Vec& x) {
    return Mat(lambda * corrected_differential(x) + (1.0 - lambda) * base_dif(x));
  };
  return out;
}

}  // namespace nharm
