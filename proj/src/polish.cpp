// Terminal refinement of a conic solve: freeze the active set suggested by
// the returned slacks (equality rows, tight nonnegative rows, boundary
// second-order blocks), then run Newton on the equality-restricted KKT
// system. The refined point is kept only when it strictly improves the
// membership-aware KKT residuals, so misclassification degrades to a no-op.
#include <algorithm>
#include <cmath>
#include <vector>

#include "bdcdn/conesolve.hpp"

namespace bdcdn {
namespace solver_detail {

namespace {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct SocBlock {
  int start = 0;
  int size = 0;
};

struct ActiveSet {
  std::vector<int> eq_rows;        // zero rows, then tight nonnegative rows
  std::vector<char> droppable;     // per eq row: true when from a nonneg row
  std::vector<SocBlock> socs;      // boundary second-order blocks
};

void row_direction(const SpMat& a, int r, Eigen::VectorXd& out) {
  out.setZero();
  for (SpMat::InnerIterator it(a, r); it; ++it) out(it.col()) = it.value();
}

// Support of the least-squares dual certificate
//   min || rhs + F z + N w ||_2   over free z and w >= 0,
// found by a Lawson-Hanson active-set sweep. The incoming duals of a loose
// iterate are unreliable near degenerate faces, so the binding rows are
// chosen by fitting a certificate over the near-tight pool instead; ties in
// the gradient resolve to the lowest column index, which keeps the selection
// independent of the solve trajectory.
struct CertFit {
  Eigen::VectorXd z;
  std::vector<int> support;
  std::vector<double> w;
};

void fit_certificate(const Eigen::MatrixXd& f, const Eigen::MatrixXd& n_cols,
                     const Eigen::VectorXd& rhs, CertFit& fit) {
  const int nf = static_cast<int>(f.cols());
  const int np = static_cast<int>(n_cols.cols());
  const int dim = static_cast<int>(rhs.size());
  std::vector<int> pset;
  std::vector<char> banned(np, 0);
  Eigen::VectorXd u = Eigen::VectorXd::Zero(nf);
  Eigen::VectorXd r = rhs;
  Eigen::MatrixXd m;
  Eigen::VectorXd cand;
  const auto solve_ls = [&](Eigen::VectorXd& sol) {
    m.resize(dim, nf + static_cast<int>(pset.size()));
    if (nf) m.leftCols(nf) = f;
    for (std::size_t j = 0; j < pset.size(); ++j)
      m.col(nf + static_cast<int>(j)) = n_cols.col(pset[j]);
    sol = m.colPivHouseholderQr().solve(-rhs);
  };
  const auto recompute_residual = [&]() {
    r = rhs;
    if (nf) r += f * u.head(nf);
    for (std::size_t j = 0; j < pset.size(); ++j)
      r += n_cols.col(pset[j]) * u(nf + static_cast<int>(j));
  };
  if (nf) {
    solve_ls(u);
    recompute_residual();
  }
  const double tolg = 1e-10 * (1.0 + rhs.lpNorm<Eigen::Infinity>());
  const int max_outer = std::min(3 * np + 32, 4096);
  for (int guard = 0; guard < max_outer; ++guard) {
    if (r.lpNorm<Eigen::Infinity>() <= tolg) break;
    int jbest = -1;
    double gbest = -tolg;
    for (int j = 0; j < np; ++j) {
      if (banned[j]) continue;
      const double gj = n_cols.col(j).dot(r);
      if (gj < gbest) {
        gbest = gj;
        jbest = j;
      }
    }
    if (jbest < 0) break;
    banned[jbest] = 1;
    pset.push_back(jbest);
    Eigen::VectorXd grown(u.size() + 1);
    grown.head(u.size()) = u;
    grown(u.size()) = 0.0;
    u = grown;
    for (int inner = 0; inner <= np; ++inner) {
      solve_ls(cand);
      double alpha = 1.0;
      int worst = -1;
      for (std::size_t j = 0; j < pset.size(); ++j) {
        const double wn = cand(nf + static_cast<int>(j));
        if (wn > 0.0) continue;
        const double wo = u(nf + static_cast<int>(j));
        const double step = wo <= 0.0 ? 0.0 : wo / (wo - wn);
        if (step < alpha) {
          alpha = step;
          worst = static_cast<int>(j);
        }
      }
      if (worst < 0) {
        u = cand;
        break;
      }
      u += alpha * (cand - u);
      std::vector<int> pkeep;
      Eigen::VectorXd u2(u.size());
      int kk = nf;
      u2.head(nf) = u.head(nf);
      for (std::size_t j = 0; j < pset.size(); ++j) {
        const double val = u(nf + static_cast<int>(j));
        if (static_cast<int>(j) == worst || val <= 1e-14) {
          // a column dropped at the boundary stays banned: re-adding it can
          // only cycle in finite precision
          continue;
        }
        pkeep.push_back(pset[j]);
        u2(kk++) = val;
      }
      pset = std::move(pkeep);
      u = u2.head(kk).eval();
    }
    recompute_residual();
  }
  fit.z = nf ? Eigen::VectorXd(u.head(nf)) : Eigen::VectorXd();
  fit.support.assign(pset.begin(), pset.end());
  fit.w.resize(pset.size());
  for (std::size_t j = 0; j < pset.size(); ++j)
    fit.w[j] = u(nf + static_cast<int>(j));
}

// Dual vector implied by the multipliers: lam on equality-pinned rows, and
// mu*(1, -s1/||s1||) on boundary blocks (the complementary boundary ray).
bool assemble_dual(const SpMat& a, const Eigen::VectorXd& b,
                   const ActiveSet& act, const Eigen::VectorXd& x,
                   const Eigen::VectorXd& lam, const Eigen::VectorXd& mu,
                   bool clamp, Eigen::VectorXd& y) {
  const Eigen::VectorXd s = b - a * x;
  y.setZero();
  for (size_t j = 0; j < act.eq_rows.size(); ++j) {
    double val = lam(static_cast<int>(j));
    if (clamp && act.droppable[j]) val = std::max(val, 0.0);
    y(act.eq_rows[j]) = val;
  }
  for (size_t k = 0; k < act.socs.size(); ++k) {
    const auto& blk = act.socs[k];
    const double ns1 = s.segment(blk.start + 1, blk.size - 1).norm();
    if (ns1 < 1e-14) return false;
    double m = mu(static_cast<int>(k));
    if (clamp) m = std::max(m, 0.0);
    y(blk.start) = m;
    y.segment(blk.start + 1, blk.size - 1) =
        -(m / ns1) * s.segment(blk.start + 1, blk.size - 1);
  }
  return true;
}

// One Newton run on the restricted KKT conditions; returns false when the
// geometry degenerates (vanishing SOC tail) or the iteration diverges.
bool newton(const SpMat& a, const Eigen::VectorXd& b, const Eigen::VectorXd& c,
            const ActiveSet& act, Eigen::VectorXd& x, Eigen::VectorXd& lam,
            Eigen::VectorXd& mu) {
  const int n = static_cast<int>(a.cols());
  const int ne = static_cast<int>(act.eq_rows.size());
  const int ns = static_cast<int>(act.socs.size());
  const int dim = n + ne + ns;
  const double reg = 1e-12;
  Eigen::MatrixXd kkt(dim, dim);
  Eigen::VectorXd rhs(dim), y(b.size());
  double first_norm = -1.0;
  for (int iter = 0; iter < 25; ++iter) {
    const Eigen::VectorXd s = b - a * x;
    if (!assemble_dual(a, b, act, x, lam, mu, /*clamp=*/false, y)) return false;
    rhs.head(n) = -(c + a.transpose() * y);
    for (int j = 0; j < ne; ++j) rhs(n + j) = s(act.eq_rows[j]);
    for (int k = 0; k < ns; ++k) {
      const auto& blk = act.socs[k];
      const double ns1 = s.segment(blk.start + 1, blk.size - 1).norm();
      if (ns1 < 1e-14) return false;
      rhs(n + ne + k) = s(blk.start) - ns1;
    }
    const double rnorm = rhs.lpNorm<Eigen::Infinity>();
    if (first_norm < 0.0) first_norm = rnorm;
    if (rnorm <= 1e-13 * (1.0 + c.lpNorm<Eigen::Infinity>())) return true;
    if (rnorm > 1e4 * first_norm + 1.0) return false;

    kkt.setZero();
    for (int i = 0; i < n; ++i) kkt(i, i) = reg;
    for (int j = 0; j < dim - n; ++j) kkt(n + j, n + j) = -reg;
    for (int j = 0; j < ne; ++j) {
      const int r = act.eq_rows[j];
      for (SpMat::InnerIterator it(a, r); it; ++it) {
        kkt(n + j, it.col()) = it.value();
        kkt(it.col(), n + j) = it.value();
      }
    }
    Eigen::VectorXd grad(n), wk(n);
    for (int k = 0; k < ns; ++k) {
      const auto& blk = act.socs[k];
      const Eigen::VectorXd s1 = s.segment(blk.start + 1, blk.size - 1);
      const double ns1 = s1.norm();
      const Eigen::VectorXd d = s1 / ns1;
      grad.setZero();
      for (SpMat::InnerIterator it(a, blk.start); it; ++it)
        grad(it.col()) += it.value();
      wk.setZero();
      const double curve = std::max(mu(k), 0.0) / ns1;
      for (int rr = 1; rr < blk.size; ++rr) {
        const int r = blk.start + rr;
        for (SpMat::InnerIterator it(a, r); it; ++it) {
          grad(it.col()) -= d(rr - 1) * it.value();
          wk(it.col()) += d(rr - 1) * it.value();
        }
        if (curve > 0.0) {
          // mu/||s1|| * A1'A1 accumulated row by row (rows are sparse)
          for (SpMat::InnerIterator i1(a, r); i1; ++i1)
            for (SpMat::InnerIterator i2(a, r); i2; ++i2)
              kkt(i1.col(), i2.col()) += curve * i1.value() * i2.value();
        }
      }
      if (curve > 0.0) kkt.topLeftCorner(n, n).noalias() -= curve * wk * wk.transpose();
      const int row = n + ne + k;
      kkt.row(row).head(n) = grad.transpose();
      kkt.col(row).head(n) = grad;
    }
    const Eigen::VectorXd step = kkt.partialPivLu().solve(rhs);
    if (!step.allFinite()) return false;
    x += step.head(n);
    lam += step.segment(n, ne);
    mu += step.tail(ns);
  }
  return true;
}

}  // namespace

SolveResult refine(const SpMat& a, const Eigen::VectorXd& b,
                   const Eigen::VectorXd& c,
                   const std::vector<ConeSegment>& cones,
                   const SolveResult& input) {
  SolveResult out = input;
  out.polished = false;
  const int n = static_cast<int>(a.cols());
  const int m = static_cast<int>(a.rows());
  if (input.status != SolveStatus::optimal &&
      input.status != SolveStatus::iteration_limit)
    return out;
  if (input.x.size() != n || input.y.size() != m || input.s.size() != m)
    return out;

  // slacks are problem-scaled, so judge tightness against the normalized
  // residual level of the incoming point, not raw norms
  const double noise =
      std::max({(a * input.x + input.s - b).norm() / (1.0 + b.norm()),
                (a.transpose() * input.y + c).norm() / (1.0 + c.norm()),
                1e-12});
  const double kappa = std::min(1e-3, std::max(1e-7, 1e3 * noise));
  const Eigen::VectorXd s = b - a * input.x;

  // near-tight pool, scale-aware per row
  std::vector<int> zrows;
  std::vector<int> crows;
  std::vector<SocBlock> csocs;
  Eigen::VectorXd rnorm = Eigen::VectorXd::Zero(m);
  for (int r = 0; r < m; ++r) {
    double t = 0.0;
    for (SpMat::InnerIterator it(a, r); it; ++it) t += it.value() * it.value();
    rnorm(r) = std::sqrt(t);
  }
  {
    int pos = 0;
    for (const auto& seg : cones) {
      switch (seg.tag) {
        case ConeTag::zero:
          for (int i = 0; i < seg.size; ++i) zrows.push_back(pos + i);
          break;
        case ConeTag::nonneg:
          for (int i = 0; i < seg.size; ++i)
            if (s(pos + i) <= kappa * (1.0 + rnorm(pos + i) + std::abs(b(pos + i))))
              crows.push_back(pos + i);
          break;
        case ConeTag::second_order: {
          const double s0 = s(pos);
          const double ns1 = s.segment(pos + 1, seg.size - 1).norm();
          if (ns1 > 1e-10 && std::abs(ns1 - s0) <= kappa * (1.0 + std::abs(s0)))
            csocs.push_back({pos, seg.size});
          break;
        }
      }
      pos += seg.size;
    }
  }
  if (zrows.empty() && crows.empty() && csocs.empty()) return out;

  // binding rows = support of the dual certificate fitted over the pool
  const int np = static_cast<int>(crows.size() + csocs.size());
  Eigen::MatrixXd fcols(n, static_cast<int>(zrows.size()));
  Eigen::MatrixXd ncols(n, np);
  Eigen::VectorXd dir(n), tail(n);
  for (std::size_t j = 0; j < zrows.size(); ++j) {
    row_direction(a, zrows[j], dir);
    fcols.col(static_cast<int>(j)) = dir;
  }
  for (std::size_t j = 0; j < crows.size(); ++j) {
    row_direction(a, crows[j], dir);
    ncols.col(static_cast<int>(j)) = dir;
  }
  for (std::size_t k = 0; k < csocs.size(); ++k) {
    const auto& blk = csocs[k];
    const Eigen::VectorXd s1 = s.segment(blk.start + 1, blk.size - 1);
    const Eigen::VectorXd d = s1 / s1.norm();
    row_direction(a, blk.start, dir);
    for (int rr = 1; rr < blk.size; ++rr) {
      row_direction(a, blk.start + rr, tail);
      dir -= d(rr - 1) * tail;
    }
    ncols.col(static_cast<int>(crows.size() + k)) = dir;
  }
  CertFit fit;
  fit_certificate(fcols, ncols, c, fit);

  Eigen::VectorXd yfit = Eigen::VectorXd::Zero(m);
  for (std::size_t j = 0; j < zrows.size(); ++j)
    yfit(zrows[j]) = fit.z(static_cast<int>(j));
  for (std::size_t j = 0; j < fit.support.size(); ++j) {
    const int k = fit.support[j];
    if (k < static_cast<int>(crows.size()))
      yfit(crows[k]) = fit.w[j];
    else
      yfit(csocs[k - static_cast<int>(crows.size())].start) = fit.w[j];
  }

  // Pin the zero rows and the certificate support, then settle the set by
  // pivoting: add the first violated row, drop the first row whose multiplier
  // turns negative. First-index rules terminate, and the settled set depends
  // on the program alone rather than on where the solver stopped, which is
  // what keeps re-solves of a degenerate program on one point.
  ActiveSet act;
  std::vector<int> soc_of;  // act.socs entry -> index into allsocs
  std::vector<SocBlock> allsocs;
  std::vector<char> row_pinned(static_cast<std::size_t>(m), 0);
  {
    int pos = 0;
    for (const auto& seg : cones) {
      if (seg.tag == ConeTag::second_order) allsocs.push_back({pos, seg.size});
      pos += seg.size;
    }
  }
  std::vector<char> soc_pinned(allsocs.size(), 0);
  auto soc_index = [&](int start) {
    for (std::size_t i = 0; i < allsocs.size(); ++i)
      if (allsocs[i].start == start) return static_cast<int>(i);
    return -1;
  };
  Eigen::MatrixXd basis(n, n);
  int nb = 0;
  Eigen::VectorXd gsw(n);
  auto rank_add = [&](const Eigen::VectorXd& v) {
    if (nb >= n) return false;
    gsw = v;
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j < nb; ++j) gsw -= basis.col(j).dot(gsw) * basis.col(j);
    const double nv = v.norm();
    if (nv <= 0.0 || gsw.norm() <= 1e-8 * nv) return false;
    basis.col(nb++) = gsw / gsw.norm();
    return true;
  };
  Eigen::VectorXd scur = s;
  auto soc_direction = [&](const SocBlock& blk, Eigen::VectorXd& g) {
    const Eigen::VectorXd s1 = scur.segment(blk.start + 1, blk.size - 1);
    const Eigen::VectorXd d = s1 / s1.norm();
    row_direction(a, blk.start, g);
    for (int rr = 1; rr < blk.size; ++rr) {
      row_direction(a, blk.start + rr, tail);
      g -= d(rr - 1) * tail;
    }
  };
  for (int row : zrows) {
    row_direction(a, row, dir);
    if (rank_add(dir)) {
      act.eq_rows.push_back(row);
      act.droppable.push_back(0);
      row_pinned[row] = 1;
    }
  }
  for (int k : fit.support) {
    if (k < static_cast<int>(crows.size())) {
      const int row = crows[k];
      row_direction(a, row, dir);
      if (rank_add(dir)) {
        act.eq_rows.push_back(row);
        act.droppable.push_back(1);
        row_pinned[row] = 1;
      }
    } else {
      const auto& blk = csocs[k - static_cast<int>(crows.size())];
      soc_direction(blk, dir);
      if (rank_add(dir)) {
        act.socs.push_back(blk);
        const int id = soc_index(blk.start);
        soc_of.push_back(id);
        soc_pinned[static_cast<std::size_t>(id)] = 1;
      }
    }
  }
  if (act.eq_rows.empty() && act.socs.empty()) return out;

  Eigen::VectorXd x = input.x;
  Eigen::VectorXd ymul = yfit;  // multiplier memory across pivots
  Eigen::VectorXd lam, mu;
  bool settled = false;
  for (int outer = 0; outer < 64; ++outer) {
    lam.resize(static_cast<int>(act.eq_rows.size()));
    for (std::size_t j = 0; j < act.eq_rows.size(); ++j)
      lam(static_cast<int>(j)) = ymul(act.eq_rows[j]);
    mu.resize(static_cast<int>(act.socs.size()));
    for (std::size_t k = 0; k < act.socs.size(); ++k)
      mu(static_cast<int>(k)) = std::max(ymul(act.socs[k].start), 0.0);
    if (!newton(a, b, c, act, x, lam, mu)) return out;
    for (std::size_t j = 0; j < act.eq_rows.size(); ++j)
      ymul(act.eq_rows[j]) = lam(static_cast<int>(j));
    for (std::size_t k = 0; k < act.socs.size(); ++k)
      ymul(act.socs[k].start) = mu(static_cast<int>(k));
    scur = b - a * x;

    int drop_eq = -1, drop_soc = -1;
    for (std::size_t j = 0; j < act.eq_rows.size(); ++j)
      if (act.droppable[j] && lam(static_cast<int>(j)) < -1e-9 &&
          (drop_eq < 0 || act.eq_rows[j] < act.eq_rows[drop_eq]))
        drop_eq = static_cast<int>(j);
    for (std::size_t k = 0; k < act.socs.size(); ++k)
      if (mu(static_cast<int>(k)) < -1e-9 &&
          (drop_soc < 0 || act.socs[k].start < act.socs[drop_soc].start))
        drop_soc = static_cast<int>(k);
    if (drop_eq >= 0 && drop_soc >= 0) {
      if (act.eq_rows[drop_eq] < act.socs[drop_soc].start)
        drop_soc = -1;
      else
        drop_eq = -1;
    }
    if (drop_eq >= 0 || drop_soc >= 0) {
      if (drop_eq >= 0) {
        const int row = act.eq_rows[drop_eq];
        row_pinned[row] = 0;
        ymul(row) = 0.0;
        act.eq_rows.erase(act.eq_rows.begin() + drop_eq);
        act.droppable.erase(act.droppable.begin() + drop_eq);
      } else {
        const int id = soc_of[drop_soc];
        soc_pinned[static_cast<std::size_t>(id)] = 0;
        ymul(act.socs[drop_soc].start) = 0.0;
        act.socs.erase(act.socs.begin() + drop_soc);
        soc_of.erase(soc_of.begin() + drop_soc);
      }
      nb = 0;
      for (int row : act.eq_rows) {
        row_direction(a, row, dir);
        rank_add(dir);
      }
      for (const auto& blk : act.socs) {
        soc_direction(blk, dir);
        rank_add(dir);
      }
      continue;
    }

    bool added = false;
    int pos = 0;
    for (const auto& seg : cones) {
      if (seg.tag == ConeTag::nonneg) {
        for (int i = 0; i < seg.size && !added; ++i) {
          const int row = pos + i;
          if (row_pinned[row]) continue;
          if (scur(row) < -1e-10 * (1.0 + rnorm(row) + std::abs(b(row)))) {
            row_direction(a, row, dir);
            if (rank_add(dir)) {
              act.eq_rows.push_back(row);
              act.droppable.push_back(1);
              row_pinned[row] = 1;
              ymul(row) = 0.0;
              added = true;
            }
          }
        }
      } else if (seg.tag == ConeTag::second_order) {
        const int id = soc_index(pos);
        if (!soc_pinned[static_cast<std::size_t>(id)]) {
          const double s0 = scur(pos);
          const double ns1 = scur.segment(pos + 1, seg.size - 1).norm();
          if (ns1 > 1e-14 && ns1 - s0 > 1e-10 * (1.0 + std::abs(s0))) {
            const SocBlock blk{pos, seg.size};
            soc_direction(blk, dir);
            if (rank_add(dir)) {
              act.socs.push_back(blk);
              soc_of.push_back(id);
              soc_pinned[static_cast<std::size_t>(id)] = 1;
              ymul(pos) = 0.0;
              added = true;
            }
          }
        }
      }
      if (added) break;
      pos += seg.size;
    }
    if (!added) {
      settled = true;
      break;
    }
  }
  if (!settled) return out;

  Eigen::VectorXd y(m);
  if (!assemble_dual(a, b, act, x, lam, mu, /*clamp=*/true, y)) return out;
  SolveResult cand = input;
  cand.x = x;
  cand.s = b - a * x;
  cand.y = y;
  cand.objective = c.dot(x);
  cand.primal_residual = (a * cand.x + cand.s - b).norm();
  cand.dual_residual = (a.transpose() * y + c).norm();
  cand.gap = std::abs(cand.objective + b.dot(y));
  cand.polished = true;
  const KktResiduals before =
      normalized_kkt(a, b, c, cones, input.x, input.y, input.s);
  const KktResiduals after = normalized_kkt(a, b, c, cones, cand.x, cand.y, cand.s);
  if (after.max() < before.max()) return cand;
  return out;
}

}  // namespace solver_detail
}  // namespace bdcdn
