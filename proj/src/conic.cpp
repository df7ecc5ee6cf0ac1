#include "ecmarket/conic.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SparseCholesky>

namespace ecmarket {

const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::Infeasible: return "infeasible";
    case SolveStatus::Unbounded: return "unbounded";
    case SolveStatus::MaxIters: return "max_iters";
    case SolveStatus::NumericalFailure: return "numerical_failure";
  }
  return "?";
}

int ConicProblem::add_var(double lo, double hi) {
  int i = num_vars();
  lo_.push_back(lo);
  hi_.push_back(hi);
  lin_.conservativeResize(i + 1);
  lin_[i] = 0;
  quad_diag_.conservativeResize(i + 1);
  quad_diag_[i] = 0;
  ++structure_version_;
  return i;
}

void ConicProblem::add_quad(int i, int j, double coeff) {
  quad_.emplace_back(i, j, coeff);
  ++structure_version_;
}

void ConicProblem::add_eq(Affine row, double rhs) {
  eq_rhs_.push_back(rhs - row.constant);
  row.constant = 0;
  eq_rows_.push_back(std::move(row));
  ++structure_version_;
}

void ConicProblem::add_le(Affine row, double rhs) {
  le_rhs_.push_back(rhs - row.constant);
  row.constant = 0;
  le_rows_.push_back(std::move(row));
  ++structure_version_;
}

void ConicProblem::add_soc(Affine bound, std::vector<Affine> vec) {
  if (vec.empty()) {  // ||()|| <= bound degenerates to 0 <= bound
    Affine neg;
    for (auto& t : bound.terms) neg.add(t.var, -t.coeff);
    add_le(std::move(neg), bound.constant);
    return;
  }
  socs_.push_back({std::move(bound), std::move(vec)});
  ++structure_version_;
}

double ConicProblem::eval_objective(const Eigen::VectorXd& x) const {
  double v = constant_ + lin_.dot(x);
  for (const auto& t : quad_) v += t.value() * x[t.row()] * x[t.col()];
  for (int i = 0; i < x.size(); ++i) v += quad_diag_[i] * x[i] * x[i];
  return v;
}

namespace {
double eval_affine(const Affine& a, const Eigen::VectorXd& x) {
  double v = a.constant;
  for (const auto& t : a.terms) v += t.coeff * x[t.var];
  return v;
}
}  // namespace

double ConicProblem::max_violation(const Eigen::VectorXd& x) const {
  double worst = 0;
  for (int i = 0; i < num_vars(); ++i) {
    if (lo_[i] > -inf) worst = std::max(worst, lo_[i] - x[i]);
    if (hi_[i] < inf) worst = std::max(worst, x[i] - hi_[i]);
  }
  for (size_t r = 0; r < eq_rows_.size(); ++r)
    worst = std::max(worst, std::abs(eval_affine(eq_rows_[r], x) - eq_rhs_[r]));
  for (size_t r = 0; r < le_rows_.size(); ++r)
    worst = std::max(worst, eval_affine(le_rows_[r], x) - le_rhs_[r]);
  for (const auto& c : socs_) {
    double nrm = 0;
    for (const auto& a : c.vec) {
      double v = eval_affine(a, x);
      nrm += v * v;
    }
    worst = std::max(worst, std::sqrt(nrm) - eval_affine(c.bound, x));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Interior-point solver internals.

namespace {
constexpr double kRegX = 1e-9;   // static primal regularization
constexpr double kRegYZ = 1e-9;  // static dual regularization
constexpr double kStep = 0.99;   // fraction-to-boundary damping
}  // namespace

struct ConeSolver::Impl {
  using SpMat = Eigen::SparseMatrix<double>;
  using Vec = Eigen::VectorXd;

  const ConicProblem* built_for = nullptr;
  long built_version = -1;

  int n = 0, p = 0, m = 0, l = 0;  // vars, eq rows, cone rows, orthant rows
  std::vector<int> soc_dims;       // trailing second-order cone sizes
  std::vector<int> soc_start;
  int ndeg = 0;

  SpMat P, A, G;  // P lower-triangular half
  Vec q, b, h;
  double r0 = 0;

  SpMat K;  // lower half of [[P Ap Gp],[A -r 0],[G 0 -W2-r]]
  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  std::vector<double> base_vals;  // static K values, aligned with K storage
  std::vector<std::pair<int, int>> p_slots;     // (triplet idx in P coeffs, K slot)
  std::vector<int> pdiag_slot, ydiag_slot, zdiag_slot;
  std::vector<std::pair<int, int>> ag_slots;    // (slot, source idx) for A/G values
  std::vector<double> ag_vals;
  std::vector<std::vector<int>> soc_slots;      // per cone, lower-triangle slots row-major

  // iterate + scaling workspace
  Vec x, y, z, s;
  Vec d2;                          // orthant W^2 diagonal
  Vec lambda;
  std::vector<double> soc_beta2;
  std::vector<Vec> soc_wbar;
  std::vector<Eigen::MatrixXd> soc_w2;
  // cone residues s0^2 - |s1|^2 per SOC block, carried analytically through
  // the updates; recomputing them from s directly cancels catastrophically
  // once the iterate approaches a boundary solution
  std::vector<double> soc_sres2, soc_zres2, soc_detlam;
  Vec ediag;  // regularization diagonal, sign included

  // --- cone algebra helpers -----------------------------------------------

  template <typename F>
  void each_soc(F&& f) const {
    for (size_t k = 0; k < soc_dims.size(); ++k) f(static_cast<int>(k), soc_start[k], soc_dims[k]);
  }

  double mindist(const Vec& v) const {
    double d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < l; ++i) d = std::min(d, v[i]);
    each_soc([&](int, int st, int dim) {
      d = std::min(d, v[st] - v.segment(st + 1, dim - 1).norm());
    });
    return d;
  }

  Vec cone_identity() const {
    Vec e = Vec::Zero(m);
    e.head(l).setOnes();
    each_soc([&](int, int st, int) { e[st] = 1.0; });
    return e;
  }

  // Nesterov-Todd scaling point for the current (s, z); false if not interior.
  bool compute_scaling() {
    for (int i = 0; i < l; ++i) {
      if (!(s[i] > 0) || !(z[i] > 0)) return false;
      d2[i] = s[i] / z[i];
      lambda[i] = std::sqrt(s[i] * z[i]);
    }
    bool ok = true;
    each_soc([&](int k, int st, int dim) {
      double sres2 = soc_sres2[k];
      double zres2 = soc_zres2[k];
      if (!(s[st] > 0) || !(z[st] > 0) || !(sres2 > 0) || !(zres2 > 0)) {
        ok = false;
        return;
      }
      double sres = std::sqrt(sres2), zres = std::sqrt(zres2);
      soc_detlam[k] = sres * zres;
      Vec sb = s.segment(st, dim) / sres;
      Vec zb = z.segment(st, dim) / zres;
      double gamma = std::sqrt((1.0 + sb.dot(zb)) / 2.0);
      Vec wbar(dim);
      wbar[0] = (sb[0] + zb[0]) / (2 * gamma);
      wbar.tail(dim - 1) = (sb.tail(dim - 1) - zb.tail(dim - 1)) / (2 * gamma);
      // halve the hyperbolic angle so that (2 wbar wbar' - J) rotates z onto s
      wbar[0] += 1.0;
      wbar /= std::sqrt(2.0 * wbar[0]);
      soc_beta2[k] = sres / zres;
      soc_wbar[k] = wbar;
      set_soc_w2(k);
      // lambda = W z = beta * (2 wbar (wbar' z) - J z)
      Vec zk = z.segment(st, dim);
      Vec jz(dim);
      jz[0] = zk[0];
      jz.tail(dim - 1) = -zk.tail(dim - 1);
      lambda.segment(st, dim) =
          std::sqrt(soc_beta2[k]) * (2.0 * wbar.dot(zk) * wbar - jz);
    });
    return ok;
  }

  // W^2 = beta^2 * (2 ww' - J)^2 = beta^2 * (4(w'w)ww' - 2w(Jw)' - 2(Jw)w' + I)
  void set_soc_w2(int k) {
    const Vec& wbar = soc_wbar[k];
    int dim = static_cast<int>(wbar.size());
    Vec jw(dim);
    jw[0] = wbar[0];
    jw.tail(dim - 1) = -wbar.tail(dim - 1);
    Eigen::MatrixXd w2 = 4.0 * wbar.squaredNorm() * (wbar * wbar.transpose());
    w2 -= 2.0 * (wbar * jw.transpose() + jw * wbar.transpose());
    w2 += Eigen::MatrixXd::Identity(dim, dim);
    soc_w2[k] = soc_beta2[k] * w2;
  }

  // Nesterov-Todd update after stepping to lambda + alpha dst (primal side)
  // and lambda + alpha dzt (dual side), both expressed in the current scaled
  // space. Working here rather than on raw (s, z) keeps every quantity at
  // unit scale, so boundary solutions do not wreck the scaling numerics.
  bool update_scaling(double alpha, const Vec& dst, const Vec& dzt) {
    for (int i = 0; i < l; ++i) {
      double ai = lambda[i] + alpha * dst[i];
      double bi = lambda[i] + alpha * dzt[i];
      if (!(ai > 0) || !(bi > 0)) return false;
      d2[i] *= ai / bi;
      lambda[i] = std::sqrt(ai * bi);
    }
    bool ok = true;
    each_soc([&](int k, int st, int dim) {
      Vec a = lambda.segment(st, dim) + alpha * dst.segment(st, dim);
      Vec b = lambda.segment(st, dim) + alpha * dzt.segment(st, dim);
      double det_a = a[0] * a[0] - a.tail(dim - 1).squaredNorm();
      double det_b = b[0] * b[0] - b.tail(dim - 1).squaredNorm();
      if (!(det_a > 0) || !(det_b > 0) || !(a[0] > 0) || !(b[0] > 0)) {
        ok = false;
        return;
      }
      double ra = std::sqrt(det_a), rb = std::sqrt(det_b);
      Vec ab = a / ra, bb = b / rb;
      double gamma = std::sqrt((1.0 + ab.dot(bb)) / 2.0);
      // full-angle point of the stepped pair, then transported by the old
      // scaling and halved: vnew = sqrt_J( (2 v v' - J) q )
      Vec q(dim);
      q[0] = (ab[0] + bb[0]) / (2 * gamma);
      q.tail(dim - 1) = (ab.tail(dim - 1) - bb.tail(dim - 1)) / (2 * gamma);
      const Vec v = soc_wbar[k];
      Vec jq(dim);
      jq[0] = q[0];
      jq.tail(dim - 1) = -q.tail(dim - 1);
      Vec u = 2.0 * v.dot(q) * v - jq;
      u[0] += 1.0;
      u /= std::sqrt(2.0 * u[0]);

      double b2old = soc_beta2[k];
      soc_sres2[k] = b2old * det_a;
      soc_zres2[k] = det_b / b2old;
      soc_detlam[k] = ra * rb;
      soc_beta2[k] = b2old * std::sqrt(det_a / det_b);
      soc_wbar[k] = u;
      set_soc_w2(k);

      // lambda = Wnew znew = sqrt(beta2new/beta2old) (2u u' - J)(2 Jv (Jv)' - J) b,
      // applied as two rank-one-plus-reflection products.
      Vec jb(dim);
      jb[0] = b[0];
      jb.tail(dim - 1) = -b.tail(dim - 1);
      Vec jv(dim);
      jv[0] = v[0];
      jv.tail(dim - 1) = -v.tail(dim - 1);
      Vec t = 2.0 * jv.dot(b) * jv - jb;
      Vec jt(dim);
      jt[0] = t[0];
      jt.tail(dim - 1) = -t.tail(dim - 1);
      lambda.segment(st, dim) =
          std::sqrt(soc_beta2[k] / b2old) * (2.0 * u.dot(t) * u - jt);
    });
    return ok;
  }

  Vec apply_W(const Vec& v) const {
    Vec out(m);
    out.head(l) = d2.head(l).cwiseSqrt().cwiseProduct(v.head(l));
    each_soc([&](int k, int st, int dim) {
      const Vec& w = soc_wbar[k];
      Vec vk = v.segment(st, dim);
      Vec jv(dim);
      jv[0] = vk[0];
      jv.tail(dim - 1) = -vk.tail(dim - 1);
      out.segment(st, dim) = std::sqrt(soc_beta2[k]) * (2.0 * w.dot(vk) * w - jv);
    });
    return out;
  }

  Vec apply_Winv(const Vec& v) const {
    Vec out(m);
    out.head(l) = v.head(l).cwiseQuotient(d2.head(l).cwiseSqrt());
    each_soc([&](int k, int st, int dim) {
      Vec jw(dim);
      jw[0] = soc_wbar[k][0];
      jw.tail(dim - 1) = -soc_wbar[k].tail(dim - 1);
      Vec vk = v.segment(st, dim);
      Vec jv(dim);
      jv[0] = vk[0];
      jv.tail(dim - 1) = -vk.tail(dim - 1);
      out.segment(st, dim) = (2.0 * jw.dot(vk) * jw - jv) / std::sqrt(soc_beta2[k]);
    });
    return out;
  }

  Vec jordan_mul(const Vec& u, const Vec& v) const {
    Vec out(m);
    out.head(l) = u.head(l).cwiseProduct(v.head(l));
    each_soc([&](int, int st, int dim) {
      Vec uk = u.segment(st, dim), vk = v.segment(st, dim);
      out[st] = uk.dot(vk);
      out.segment(st + 1, dim - 1) = uk[0] * vk.tail(dim - 1) + vk[0] * uk.tail(dim - 1);
    });
    return out;
  }

  // solve lambda o out = v
  Vec jordan_div_lambda(const Vec& v) const {
    Vec out(m);
    out.head(l) = v.head(l).cwiseQuotient(lambda.head(l));
    each_soc([&](int k, int st, int dim) {
      double l0 = lambda[st];
      auto l1 = lambda.segment(st + 1, dim - 1);
      double det = soc_detlam[k];
      double o0 = (l0 * v[st] - l1.dot(v.segment(st + 1, dim - 1))) / det;
      out[st] = o0;
      out.segment(st + 1, dim - 1) = (v.segment(st + 1, dim - 1) - o0 * l1) / l0;
    });
    return out;
  }

  // Largest step along dv keeping v (strictly interior) inside the cone.
  // det_v supplies precomputed residues s0^2 - |s1|^2 per SOC block.
  double max_step(const Vec& v, const Vec& dv, const std::vector<double>* det_v = nullptr) const {
    double amax = std::numeric_limits<double>::infinity();
    for (int i = 0; i < l; ++i)
      if (dv[i] < 0) amax = std::min(amax, -v[i] / dv[i]);
    each_soc([&](int k, int st, int dim) {
      double s0 = v[st], dd0 = dv[st];
      auto s1 = v.segment(st + 1, dim - 1);
      auto dd1 = dv.segment(st + 1, dim - 1);
      double a = dd0 * dd0 - dd1.squaredNorm();
      double bq = 2.0 * (s0 * dd0 - s1.dot(dd1));
      double c = det_v ? (*det_v)[k] : s0 * s0 - s1.squaredNorm();
      double root = std::numeric_limits<double>::infinity();
      if (std::abs(a) < 1e-14 * (std::abs(bq) + std::abs(a) + 1e-300)) {
        if (bq < 0) root = -c / bq;
      } else {
        double disc = bq * bq - 4 * a * c;
        if (disc >= 0) {
          double sq = std::sqrt(disc);
          double qq = -(bq + (bq >= 0 ? sq : -sq)) / 2.0;
          double r1 = (a != 0) ? qq / a : std::numeric_limits<double>::infinity();
          double r2 = (qq != 0) ? c / qq : std::numeric_limits<double>::infinity();
          if (r1 > r2) std::swap(r1, r2);
          if (r1 > 0)
            root = r1;
          else if (r2 > 0 && a < 0)
            root = r2;
        }
      }
      amax = std::min(amax, root);
    });
    return amax;
  }

  // --- KKT assembly ---------------------------------------------------------

  int find_slot(int row, int col) const {  // lower-triangle CSC lookup
    for (int idx = K.outerIndexPtr()[col]; idx < K.outerIndexPtr()[col + 1]; ++idx)
      if (K.innerIndexPtr()[idx] == row) return idx;
    return -1;
  }

  void build(const ConicProblem& prob) {
    n = prob.num_vars();
    p = 0;
    std::vector<Eigen::Triplet<double>> at, gt;
    std::vector<double> bv, hv;
    for (size_t r = 0; r < prob.eq_rows_.size(); ++r) {
      for (const auto& t : prob.eq_rows_[r].terms) at.emplace_back(p, t.var, t.coeff);
      bv.push_back(prob.eq_rhs_[r]);
      ++p;
    }
    for (int i = 0; i < n; ++i)  // pinned variables become equality rows
      if (prob.lo_[i] == prob.hi_[i] && prob.lo_[i] > -ConicProblem::inf) {
        at.emplace_back(p, i, 1.0);
        bv.push_back(prob.lo_[i]);
        ++p;
      }

    int mrow = 0;
    for (int i = 0; i < n; ++i) {
      if (prob.lo_[i] == prob.hi_[i]) continue;
      if (prob.lo_[i] > -ConicProblem::inf) {
        gt.emplace_back(mrow++, i, -1.0);
        hv.push_back(-prob.lo_[i]);
      }
      if (prob.hi_[i] < ConicProblem::inf) {
        gt.emplace_back(mrow++, i, 1.0);
        hv.push_back(prob.hi_[i]);
      }
    }
    for (size_t r = 0; r < prob.le_rows_.size(); ++r) {
      for (const auto& t : prob.le_rows_[r].terms) gt.emplace_back(mrow, t.var, t.coeff);
      hv.push_back(prob.le_rhs_[r]);
      ++mrow;
    }
    l = mrow;
    soc_dims.clear();
    soc_start.clear();
    for (const auto& c : prob.socs_) {
      soc_start.push_back(mrow);
      soc_dims.push_back(1 + static_cast<int>(c.vec.size()));
      for (const auto& t : c.bound.terms) gt.emplace_back(mrow, t.var, -t.coeff);
      hv.push_back(c.bound.constant);
      ++mrow;
      for (const auto& a : c.vec) {
        for (const auto& t : a.terms) gt.emplace_back(mrow, t.var, -t.coeff);
        hv.push_back(a.constant);
        ++mrow;
      }
    }
    m = mrow;
    ndeg = l + static_cast<int>(soc_dims.size());

    A.resize(p, n);
    A.setFromTriplets(at.begin(), at.end());
    A.makeCompressed();
    G.resize(m, n);
    G.setFromTriplets(gt.begin(), gt.end());
    G.makeCompressed();
    b = Eigen::Map<Vec>(bv.data(), p);
    h = Eigen::Map<Vec>(hv.data(), m);

    // P: lower half; diagonal entries always present (regularization needs them)
    std::vector<Eigen::Triplet<double>> pt;
    for (const auto& t : prob.quad_) {
      int r = std::max(t.row(), t.col()), c = std::min(t.row(), t.col());
      pt.emplace_back(r, c, t.value() * (r == c ? 2.0 : 1.0));
    }
    for (int i = 0; i < n; ++i) pt.emplace_back(i, i, 0.0);
    P.resize(n, n);
    P.setFromTriplets(pt.begin(), pt.end());
    P.makeCompressed();

    // KKT structure (lower half), dims N = n + p + m
    int N = n + p + m;
    std::vector<Eigen::Triplet<double>> kt;
    for (int c = 0; c < P.outerSize(); ++c)
      for (SpMat::InnerIterator it(P, c); it; ++it) kt.emplace_back(it.row(), it.col(), 1.0);
    for (int c = 0; c < A.outerSize(); ++c)
      for (SpMat::InnerIterator it(A, c); it; ++it) kt.emplace_back(n + it.row(), it.col(), 1.0);
    for (int c = 0; c < G.outerSize(); ++c)
      for (SpMat::InnerIterator it(G, c); it; ++it)
        kt.emplace_back(n + p + it.row(), it.col(), 1.0);
    for (int j = 0; j < p; ++j) kt.emplace_back(n + j, n + j, 1.0);
    for (int i = 0; i < l; ++i) kt.emplace_back(n + p + i, n + p + i, 1.0);
    for (size_t k = 0; k < soc_dims.size(); ++k)
      for (int i = 0; i < soc_dims[k]; ++i)
        for (int j = 0; j <= i; ++j)
          kt.emplace_back(n + p + soc_start[k] + i, n + p + soc_start[k] + j, 1.0);
    K.resize(N, N);
    K.setFromTriplets(kt.begin(), kt.end());
    K.makeCompressed();

    // slot maps for fast value refresh
    pdiag_slot.resize(n);
    for (int i = 0; i < n; ++i) pdiag_slot[i] = find_slot(i, i);
    ydiag_slot.resize(p);
    for (int j = 0; j < p; ++j) ydiag_slot[j] = find_slot(n + j, n + j);
    zdiag_slot.resize(m);
    for (int i = 0; i < m; ++i) zdiag_slot[i] = find_slot(n + p + i, n + p + i);
    p_slots.clear();
    for (int c = 0; c < P.outerSize(); ++c)
      for (SpMat::InnerIterator it(P, c); it; ++it)
        if (it.row() != it.col())
          p_slots.emplace_back(find_slot(it.row(), it.col()), 0);  // value filled later
    ag_slots.clear();
    ag_vals.clear();
    for (int c = 0; c < A.outerSize(); ++c)
      for (SpMat::InnerIterator it(A, c); it; ++it) {
        ag_slots.emplace_back(find_slot(n + it.row(), it.col()), (int)ag_vals.size());
        ag_vals.push_back(it.value());
      }
    for (int c = 0; c < G.outerSize(); ++c)
      for (SpMat::InnerIterator it(G, c); it; ++it) {
        ag_slots.emplace_back(find_slot(n + p + it.row(), it.col()), (int)ag_vals.size());
        ag_vals.push_back(it.value());
      }
    soc_slots.assign(soc_dims.size(), {});
    for (size_t k = 0; k < soc_dims.size(); ++k)
      for (int i = 0; i < soc_dims[k]; ++i)
        for (int j = 0; j <= i; ++j)
          soc_slots[k].push_back(
              find_slot(n + p + soc_start[k] + i, n + p + soc_start[k] + j));

    ldlt.analyzePattern(K);

    d2.resize(m);
    lambda.resize(m);
    soc_beta2.assign(soc_dims.size(), 1.0);
    soc_wbar.assign(soc_dims.size(), Vec());
    soc_w2.assign(soc_dims.size(), Eigen::MatrixXd());
    soc_sres2.assign(soc_dims.size(), 1.0);
    soc_zres2.assign(soc_dims.size(), 1.0);
    soc_detlam.assign(soc_dims.size(), 1.0);
    ediag.resize(N);
    ediag.head(n).setConstant(kRegX);
    ediag.tail(p + m).setConstant(-kRegYZ);

    built_for = &prob;
    built_version = prob.structure_version_;
  }

  // refresh values that may change between solves (objective) or not at all
  void refresh_values(const ConicProblem& prob) {
    q = prob.lin_;
    r0 = prob.constant_;
    // rebuild P values (quad_diag may have changed)
    for (double* v = P.valuePtr(); v != P.valuePtr() + P.nonZeros(); ++v) *v = 0;
    for (const auto& t : prob.quad_) {
      int r = std::max(t.row(), t.col()), c = std::min(t.row(), t.col());
      P.coeffRef(r, c) += t.value() * (r == c ? 2.0 : 1.0);
    }
    for (int i = 0; i < n; ++i) P.coeffRef(i, i) += 2.0 * prob.quad_diag_[i];

    base_vals.assign(K.nonZeros(), 0.0);
    int slot_i = 0;
    for (int c = 0; c < P.outerSize(); ++c)
      for (SpMat::InnerIterator it(P, c); it; ++it) {
        if (it.row() == it.col())
          base_vals[pdiag_slot[it.row()]] += it.value() + kRegX;
        else
          base_vals[p_slots[slot_i++].first] += it.value();
      }
    for (const auto& [slot, src] : ag_slots) base_vals[slot] += ag_vals[src];
    for (int j = 0; j < p; ++j) base_vals[ydiag_slot[j]] += -kRegYZ;
    for (int i = 0; i < m; ++i) base_vals[zdiag_slot[i]] += -kRegYZ;
  }

  // Write base + current -W^2 into K and factorize. Near a degenerate
  // solution the scaling entries span enough orders of magnitude that a pivot
  // can cancel to exactly zero; retry with heavier diagonal shifts then, and
  // let the refinement passes (which correct against the unshifted matrix via
  // ediag) absorb the perturbation.
  bool factorize() {
    for (double boost : {1.0, 1e3, 1e6}) {
      std::copy(base_vals.begin(), base_vals.end(), K.valuePtr());
      double* vals = K.valuePtr();
      if (boost != 1.0) {
        for (int i = 0; i < n; ++i) vals[pdiag_slot[i]] += (boost - 1.0) * kRegX;
        for (int j = 0; j < p; ++j) vals[ydiag_slot[j]] -= (boost - 1.0) * kRegYZ;
        for (int i = 0; i < m; ++i) vals[zdiag_slot[i]] -= (boost - 1.0) * kRegYZ;
      }
      for (int i = 0; i < l; ++i) vals[zdiag_slot[i]] -= d2[i];
      for (size_t k = 0; k < soc_dims.size(); ++k) {
        int idx = 0;
        for (int i = 0; i < soc_dims[k]; ++i)
          for (int j = 0; j <= i; ++j) vals[soc_slots[k][idx++]] -= soc_w2[k](i, j);
      }
      ldlt.factorize(K);
      if (ldlt.info() == Eigen::Success) {
        ediag.head(n).setConstant(boost * kRegX);
        ediag.tail(p + m).setConstant(-boost * kRegYZ);
        return true;
      }
    }
    return false;
  }

  // solve K t = r with iterative refinement against the unregularized matrix
  Vec kkt_solve(const Vec& r) const {
    Vec t = ldlt.solve(r);
    for (int pass = 0; pass < 2; ++pass) {
      Vec resid = r - K.selfadjointView<Eigen::Lower>() * t + ediag.cwiseProduct(t);
      t += ldlt.solve(resid);
    }
    return t;
  }

  struct Dirs {
    Vec dx, dy, dz;
    Vec dzt, dst;  // scaled directions W dz and W^{-T} ds; steps are taken
                   // against lambda in scaled space, which stays well
                   // conditioned even when s or z rides the cone boundary
  };

  // Newton direction for rhs (bx, by, bz_eff) where bz_eff = bz - W(lambda \ bs)
  Dirs newton(const Vec& bx, const Vec& by, const Vec& bz_eff, const Vec& u) const {
    Vec rhs(n + p + m);
    rhs << bx, by, bz_eff;
    Vec t = kkt_solve(rhs);
    Dirs d;
    d.dx = t.head(n);
    d.dy = t.segment(n, p);
    d.dz = t.tail(m);
    d.dzt = apply_W(d.dz);
    d.dst = u - d.dzt;
    return d;
  }
};

ConeSolver::ConeSolver(SolverOptions opts) : options(opts), impl_(new Impl) {}
ConeSolver::~ConeSolver() = default;
ConeSolver::ConeSolver(ConeSolver&&) noexcept = default;
ConeSolver& ConeSolver::operator=(ConeSolver&&) noexcept = default;

ConicSolution ConeSolver::solve(const ConicProblem& prob) {
  Impl& im = *impl_;
  if (im.built_for != &prob || im.built_version != prob.structure_version_)
    im.build(prob);
  im.refresh_values(prob);

  using Vec = Eigen::VectorXd;
  const int n = im.n, p = im.p, m = im.m;
  ConicSolution out;

  auto finish = [&](SolveStatus st, const Vec& x, const Vec& y, const Vec& z, int it) {
    out.status = st;
    out.x = x;
    out.eq_dual = y.size() ? Vec(y.head(std::min<int>(p, (int)prob.eq_rows_.size()))) : Vec();
    out.cone_dual = z;
    out.objective = prob.eval_objective(x);
    out.iters = it;
    return out;
  };

  // No cone part: plain equality-constrained QP via one KKT solve.
  if (m == 0) {
    im.d2.resize(0);
    if (!im.factorize()) return finish(SolveStatus::NumericalFailure, Vec::Zero(n), Vec::Zero(p), Vec(), 0);
    Vec rhs(n + p);
    rhs << -im.q, im.b;
    Vec t = im.kkt_solve(rhs);
    Vec x = t.head(n), y = t.tail(p);
    double scale = 1.0 + im.q.norm() + im.b.norm();
    Vec rx = im.P.selfadjointView<Eigen::Lower>() * x + im.q + im.A.transpose() * y;
    Vec ry = im.A * x - im.b;
    if (rx.norm() / scale < 1e-6 && ry.norm() / scale < 1e-6)
      return finish(SolveStatus::Optimal, x, y, Vec(), 1);
    // Singular KKT: an unbounded ray or inconsistent equalities.
    double xn = x.norm();
    if (xn > 0 && (im.P.selfadjointView<Eigen::Lower>() * x).norm() / xn < 1e-8 &&
        (p == 0 || (im.A * x).norm() / xn < 1e-8) && im.q.dot(x) < 0)
      return finish(SolveStatus::Unbounded, x, y, Vec(), 1);
    return finish(SolveStatus::Infeasible, x, y, Vec(), 1);
  }

  // Interior starting point from the W = I KKT system.
  im.d2.setOnes();
  for (size_t k = 0; k < im.soc_dims.size(); ++k)
    im.soc_w2[k] = Eigen::MatrixXd::Identity(im.soc_dims[k], im.soc_dims[k]);
  if (!im.factorize())
    return finish(SolveStatus::NumericalFailure, Vec::Zero(n), Vec::Zero(p), Vec::Zero(m), 0);
  Vec rhs0(n + p + m);
  rhs0 << -im.q, im.b, im.h;
  Vec t0 = im.kkt_solve(rhs0);
  im.x = t0.head(n);
  im.y = t0.segment(n, p);
  Vec zhat = t0.tail(m);
  im.s = -zhat;
  im.z = zhat;
  double ds0 = im.mindist(im.s);
  Vec e = im.cone_identity();
  if (ds0 <= 0) im.s += (1.0 - ds0) * e;
  double dz0 = im.mindist(im.z);
  if (dz0 <= 0) im.z += (1.0 - dz0) * e;
  im.each_soc([&](int k, int st, int dim) {
    im.soc_sres2[k] =
        im.s[st] * im.s[st] - im.s.segment(st + 1, dim - 1).squaredNorm();
    im.soc_zres2[k] =
        im.z[st] * im.z[st] - im.z.segment(st + 1, dim - 1).squaredNorm();
  });
  // The scaling is computed from raw (s, z) once, then evolved in scaled
  // space each iteration; see update_scaling.
  if (!im.compute_scaling())
    return finish(SolveStatus::NumericalFailure, im.x, im.y, im.z, 0);

  const double resx0 = std::max(1.0, im.q.norm());
  const double resy0 = std::max(1.0, im.b.norm());
  const double resz0 = std::max(1.0, im.h.norm());

  double best_err = std::numeric_limits<double>::infinity();
  Vec best_x = im.x, best_y = im.y, best_z = im.z;

  // Terminal exit for a run that cannot reach the target tolerances: the
  // accept_tol fallback turns a good-enough best iterate into a success.
  auto giveup = [&](SolveStatus st, int it) {
    if (options.accept_tol > 0 && best_err <= options.accept_tol)
      return finish(SolveStatus::Optimal, best_x, best_y, best_z, it);
    return finish(st, best_x, best_y, best_z, it);
  };

  for (int iter = 0; iter < options.max_iters; ++iter) {
    Vec rx = im.P.selfadjointView<Eigen::Lower>() * im.x + im.q +
             im.A.transpose() * im.y + im.G.transpose() * im.z;
    Vec ry = im.A * im.x - im.b;
    Vec rz = im.G * im.x + im.s - im.h;
    double gap = im.lambda.squaredNorm();
    double pcost = 0.5 * im.x.dot(im.P.selfadjointView<Eigen::Lower>() * im.x) + im.q.dot(im.x);
    double dcost = pcost + im.y.dot(ry) + im.z.dot(rz) - gap;
    double pres = std::max(ry.norm() / resy0, rz.norm() / resz0);
    double dres = rx.norm() / resx0;
    double relgap = std::numeric_limits<double>::infinity();
    if (pcost < 0)
      relgap = gap / -pcost;
    else if (dcost > 0)
      relgap = gap / dcost;

    if (!std::isfinite(pres) || !std::isfinite(dres) || !std::isfinite(gap))
      return giveup(SolveStatus::NumericalFailure, iter);

    double err = std::max({pres, dres, std::min(gap, relgap)});
    if (err < best_err) {
      best_err = err;
      best_x = im.x;
      best_y = im.y;
      best_z = im.z;
    }

    if (pres <= options.feas_tol && dres <= options.feas_tol &&
        (gap <= options.gap_abs || relgap <= options.gap_rel))
      return finish(SolveStatus::Optimal, im.x, im.y, im.z, iter);

    // Farkas-style certificates (normalized iterates).
    if (iter >= 2) {
      double tinf = -(im.b.dot(im.y) + im.h.dot(im.z));
      if (tinf > 1e-8 * (im.y.norm() + im.z.norm() + 1)) {
        double cert = (im.A.transpose() * im.y + im.G.transpose() * im.z).norm() / tinf;
        // Only trust the certificate while the primal side is clearly stuck.
        if (cert <= 1e-7 * resx0 && pres > 1e-6)
          return finish(SolveStatus::Infeasible, im.x, im.y / tinf, im.z / tinf, iter);
      }
      double tunb = -im.q.dot(im.x);
      if (tunb > 1e-8 * (im.x.norm() + 1)) {
        Vec gx = im.G * im.x;
        double conedist = 0;
        for (int i = 0; i < im.l; ++i) conedist = std::max(conedist, gx[i]);
        im.each_soc([&](int, int st, int dim) {
          conedist = std::max(conedist, gx[st] + gx.segment(st + 1, dim - 1).norm());
        });
        double scale = 1.0 / tunb;
        if ((im.P.selfadjointView<Eigen::Lower>() * im.x).norm() * scale <= 1e-7 &&
            (p == 0 || (im.A * im.x).norm() * scale <= 1e-7 * resy0) &&
            conedist * scale <= 1e-7 * resz0 && dres > 1e-6)
          return finish(SolveStatus::Unbounded, im.x / tunb, im.y, im.z, iter);
      }
    }

    if (!im.factorize())
      return giveup(SolveStatus::NumericalFailure, iter);

    double mu = gap / im.ndeg;

    // predictor
    Vec u_aff = -im.lambda;
    Impl::Dirs aff = im.newton(-rx, -ry, -rz - im.apply_W(u_aff), u_aff);
    double a_s = im.max_step(im.lambda, aff.dst, &im.soc_detlam);
    double a_z = im.max_step(im.lambda, aff.dzt, &im.soc_detlam);
    double alpha_aff = std::min({1.0, a_s, a_z});
    double gap_aff = (im.lambda + alpha_aff * aff.dst)
                         .dot(im.lambda + alpha_aff * aff.dzt);
    double sigma = std::pow(std::clamp(gap_aff / gap, 0.0, 1.0), 3);

    // corrector
    Vec bs = -im.jordan_mul(im.lambda, im.lambda) -
             im.jordan_mul(aff.dst, aff.dzt) + sigma * mu * e;
    Vec u = im.jordan_div_lambda(bs);
    Impl::Dirs dir = im.newton(-rx, -ry, -rz - im.apply_W(u), u);
    double b_s = im.max_step(im.lambda, dir.dst, &im.soc_detlam);
    double b_z = im.max_step(im.lambda, dir.dzt, &im.soc_detlam);
    double alpha = std::min(1.0, kStep * std::min(b_s, b_z));
    if (!(alpha > 1e-13))
      return giveup(SolveStatus::NumericalFailure, iter);

    im.x += alpha * dir.dx;
    im.y += alpha * dir.dy;
    im.s += alpha * im.apply_W(dir.dst);
    im.z += alpha * dir.dz;
    if (!im.update_scaling(alpha, dir.dst, dir.dzt))
      return giveup(SolveStatus::NumericalFailure, iter);
  }
  return giveup(SolveStatus::MaxIters, options.max_iters);
}

ConicSolution solve(const ConicProblem& prob, const SolverOptions& opts) {
  ConeSolver solver(opts);
  return solver.solve(prob);
}

RestrictionResult solve_restrictions(const std::vector<ConicProblem*>& variants,
                                     const SolverOptions& opts, double tie_tol) {
  RestrictionResult best;
  for (size_t i = 0; i < variants.size(); ++i) {
    ConicSolution sol = solve(*variants[i], opts);
    if (!sol.ok()) continue;
    if (best.choice < 0 ||
        sol.objective <= best.sol.objective + tie_tol * std::max(1.0, std::abs(sol.objective))) {
      best.choice = static_cast<int>(i);
      best.sol = std::move(sol);
    }
  }
  if (best.choice < 0 && !variants.empty()) {
    best.sol.status = SolveStatus::Infeasible;
  }
  return best;
}

}  // namespace ecmarket
