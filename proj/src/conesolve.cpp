#include "bdcdn/conesolve.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "bdcdn/netmodel.hpp"

namespace bdcdn {

namespace {

void soc_project_in_place(Eigen::Ref<Eigen::VectorXd> z) {
  const Eigen::Index tail = z.size() - 1;
  const double t = z(0);
  const double nx = z.tail(tail).norm();
  if (nx <= t) return;
  if (nx <= -t) {
    z.setZero();
    return;
  }
  const double a = 0.5 * (t + nx);
  z(0) = a;
  z.tail(tail) *= a / nx;
}

// In-place projection of a stacked slack/dual vector onto K (or K* when
// dual: zero rows become free instead of pinned).
void cone_project_in_place(Eigen::Ref<Eigen::VectorXd> v,
                           const std::vector<ConeSegment>& cones, bool dual) {
  int pos = 0;
  for (const auto& seg : cones) {
    switch (seg.tag) {
      case ConeTag::zero:
        if (!dual) v.segment(pos, seg.size).setZero();
        break;
      case ConeTag::nonneg:
        v.segment(pos, seg.size) = v.segment(pos, seg.size).cwiseMax(0.0);
        break;
      case ConeTag::second_order:
        soc_project_in_place(v.segment(pos, seg.size));
        break;
    }
    pos += seg.size;
  }
}

void validate_settings(const SolverSettings& st, int n, int m) {
  if (!(st.eps_abs > 0.0) || !(st.eps_rel > 0.0))
    throw std::invalid_argument("conic solve: tolerances must be positive");
  if (st.max_iterations < 1)
    throw std::invalid_argument("conic solve: max_iterations must be at least 1");
  if (!(st.over_relaxation >= 1.0 && st.over_relaxation < 2.0))
    throw std::invalid_argument(detail::strf(
        "conic solve: over_relaxation %g outside [1, 2)", st.over_relaxation));
  if (st.check_interval < 1)
    throw std::invalid_argument("conic solve: check_interval must be at least 1");
  auto fit = [](const Eigen::VectorXd& v, int len, const char* what) {
    if (v.size() != 0 && v.size() != len)
      throw std::invalid_argument(detail::strf(
          "conic solve: initial %s has length %d, expected %d or empty", what,
          static_cast<int>(v.size()), len));
  };
  fit(st.initial_x, n, "x");
  fit(st.initial_y, m, "y");
  fit(st.initial_s, m, "s");
}

}  // namespace

const char* to_string(SolveStatus status) {
  switch (status) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::primal_infeasible: return "primal_infeasible";
    case SolveStatus::dual_infeasible: return "dual_infeasible";
    case SolveStatus::iteration_limit: return "iteration_limit";
  }
  return "unknown";
}

Eigen::VectorXd project(const ConeSegment& segment, const Eigen::VectorXd& v) {
  if (v.size() != segment.size)
    throw std::invalid_argument(detail::strf(
        "cone projection: vector length %d does not match segment size %d",
        static_cast<int>(v.size()), segment.size));
  Eigen::VectorXd out = v;
  switch (segment.tag) {
    case ConeTag::zero: out.setZero(); break;
    case ConeTag::nonneg: out = out.cwiseMax(0.0); break;
    case ConeTag::second_order: soc_project_in_place(out); break;
  }
  return out;
}

Eigen::VectorXd project_dual(const ConeSegment& segment, const Eigen::VectorXd& v) {
  if (segment.tag == ConeTag::zero) {
    if (v.size() != segment.size)
      throw std::invalid_argument(detail::strf(
          "cone projection: vector length %d does not match segment size %d",
          static_cast<int>(v.size()), segment.size));
    return v;
  }
  return project(segment, v);
}

void AdmmSolver::load(const ConicProgram& prog) {
  const int n = prog.cols();
  const int m = prog.rows();
  if (n == 0 || m == 0)
    throw std::invalid_argument("conic solve: structurally empty program");
  if (prog.a.rows() != m || prog.a.cols() != n)
    throw std::invalid_argument(detail::strf(
        "conic solve: matrix is %dx%d but b has %d rows and c %d entries",
        static_cast<int>(prog.a.rows()), static_cast<int>(prog.a.cols()), m, n));
  int total = 0;
  for (const auto& seg : prog.cones) {
    if (seg.size <= 0)
      throw std::invalid_argument("conic solve: nonpositive cone segment size");
    total += seg.size;
  }
  if (total != m)
    throw std::invalid_argument(detail::strf(
        "conic solve: cone segments cover %d rows, program has %d", total, m));
  n_ = n;
  m_ = m;
  a_ = prog.a;
  a_.makeCompressed();
  b_ = prog.b;
  c_ = prog.c;
  cones_ = prog.cones;
  norm_b_ = b_.norm();
  norm_c_ = c_.norm();
  loaded_ = true;
  prepared_ = false;
}

void AdmmSolver::prepare(bool scaling) {
  row_scale_ = Eigen::VectorXd::Ones(m_);
  col_scale_ = Eigen::VectorXd::Ones(n_);
  Eigen::SparseMatrix<double, Eigen::RowMajor> ah = a_;
  if (scaling) {
    for (int pass = 0; pass < 10; ++pass) {
      Eigen::VectorXd rmax = Eigen::VectorXd::Zero(m_);
      Eigen::VectorXd cmax = Eigen::VectorXd::Zero(n_);
      for (int r = 0; r < ah.outerSize(); ++r) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(ah, r); it; ++it) {
          const double av = std::abs(it.value());
          rmax(r) = std::max(rmax(r), av);
          cmax(it.col()) = std::max(cmax(it.col()), av);
        }
      }
      Eigen::VectorXd rn = rmax.cwiseSqrt();
      Eigen::VectorXd cn = cmax.cwiseSqrt();
      for (int i = 0; i < m_; ++i)
        if (rn(i) == 0.0) rn(i) = 1.0;
      for (int j = 0; j < n_; ++j)
        if (cn(j) == 0.0) cn(j) = 1.0;
      for (int r = 0; r < ah.outerSize(); ++r)
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(ah, r); it; ++it)
          it.valueRef() /= rn(r) * cn(it.col());
      row_scale_ = row_scale_.cwiseQuotient(rn);
      col_scale_ = col_scale_.cwiseQuotient(cn);
    }
    // Geometric mean per SOC block: a uniform row scale maps the block onto
    // the same cone, so scaled slacks stay members.
    int pos = 0;
    for (const auto& seg : cones_) {
      if (seg.tag == ConeTag::second_order) {
        double acc = 0.0;
        for (int i = 0; i < seg.size; ++i) acc += std::log(row_scale_(pos + i));
        row_scale_.segment(pos, seg.size)
            .setConstant(std::exp(acc / seg.size));
      }
      pos += seg.size;
    }
    ah = a_;
    for (int r = 0; r < ah.outerSize(); ++r)
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(ah, r); it; ++it)
        it.valueRef() *= row_scale_(r) * col_scale_(it.col());
    bh_ = row_scale_.cwiseProduct(b_);
    ch_ = col_scale_.cwiseProduct(c_);
    sb_ = std::max(bh_.norm(), 1e-12);
    sc_ = std::max(ch_.norm(), 1e-12);
    bh_ /= sb_;
    ch_ /= sc_;
  } else {
    bh_ = b_;
    ch_ = c_;
    sb_ = 1.0;
    sc_ = 1.0;
  }

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(n_) + static_cast<size_t>(m_) +
                2 * static_cast<size_t>(ah.nonZeros()));
  for (int j = 0; j < n_; ++j) trips.emplace_back(j, j, 1.0);
  for (int r = 0; r < ah.outerSize(); ++r) {
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(ah, r); it; ++it) {
      trips.emplace_back(n_ + r, static_cast<int>(it.col()), it.value());
      trips.emplace_back(static_cast<int>(it.col()), n_ + r, it.value());
    }
    trips.emplace_back(n_ + r, n_ + r, -1.0);
  }
  Eigen::SparseMatrix<double> kmat(n_ + m_, n_ + m_);
  kmat.setFromTriplets(trips.begin(), trips.end());
  kkt_.compute(kmat);
  if (kkt_.info() != Eigen::Success)
    throw std::runtime_error("conic solve: quasi-definite factorization failed");

  Eigen::VectorXd rhs(n_ + m_);
  rhs.head(n_) = ch_;
  rhs.tail(m_) = -bh_;
  q2_ = kkt_.solve(rhs);
  hq2_ = ch_.dot(q2_.head(n_)) + bh_.dot(q2_.tail(m_));
  prepared_ = true;
  prepared_scaling_ = scaling;
}

SolveResult AdmmSolver::solve(const SolverSettings& settings) {
  if (!loaded_) throw std::logic_error("conic solve: no program loaded");
  validate_settings(settings, n_, m_);
  if (!prepared_ || prepared_scaling_ != settings.scaling)
    prepare(settings.scaling);

  const int n = n_, m = m_, nm = n_ + m_;
  const double alpha = settings.over_relaxation;
  const double cert_eps = settings.eps_abs + settings.eps_rel;

  Eigen::VectorXd u = Eigen::VectorXd::Zero(nm + 1);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(nm + 1);
  u(nm) = 1.0;
  const bool warm = settings.initial_x.size() || settings.initial_y.size() ||
                    settings.initial_s.size();
  if (warm) {
    if (settings.initial_x.size())
      u.head(n) = settings.initial_x.cwiseQuotient(col_scale_) / sb_;
    if (settings.initial_y.size())
      u.segment(n, m) = settings.initial_y.cwiseQuotient(row_scale_) / sc_;
    if (settings.initial_s.size())
      v.segment(n, m) = settings.initial_s.cwiseProduct(row_scale_) / sb_;
    // kappa starts at zero so an optimal triple is an exact fixed point
  } else {
    v(nm) = 1.0;
  }

  Eigen::VectorXd w(nm + 1), rhs(nm), z1(nm), uh(nm + 1), arg(nm + 1), un(nm + 1);
  Eigen::VectorXd x, y, s;
  SolveResult result;
  SolveResult best;
  double best_key = std::numeric_limits<double>::infinity();
  bool done = false;

  int it = 0;
  while (it < settings.max_iterations && !done) {
    ++it;
    w = u + v;
    rhs.head(n) = w.head(n);
    rhs.tail(m) = -w.segment(n, m);
    z1 = kkt_.solve(rhs);
    const double tau_t =
        (w(nm) + ch_.dot(z1.head(n)) + bh_.dot(z1.tail(m))) / (1.0 + hq2_);
    uh.head(nm) = z1 - tau_t * q2_;
    uh(nm) = tau_t;
    uh = alpha * uh + (1.0 - alpha) * u;
    arg = uh - v;
    un = arg;
    cone_project_in_place(un.segment(n, m), cones_, /*dual=*/true);
    un(nm) = std::max(arg(nm), 0.0);
    v += un - uh;
    u.swap(un);

    if (it % settings.check_interval != 0 && it != settings.max_iterations)
      continue;
    const double tau = u(nm);
    if (tau > 1e-8) {
      x = col_scale_.cwiseProduct(u.head(n)) * (sb_ / tau);
      y = row_scale_.cwiseProduct(u.segment(n, m)) * (sc_ / tau);
      s = v.segment(n, m).cwiseQuotient(row_scale_) * (sb_ / tau);
      const double pres = (a_ * x + s - b_).norm();
      const double dres = (a_.transpose() * y + c_).norm();
      const double ctx = c_.dot(x);
      const double bty = b_.dot(y);
      const double gap = std::abs(ctx + bty);
      const double key = std::max({pres / (1.0 + norm_b_), dres / (1.0 + norm_c_),
                                   gap / (1.0 + std::abs(ctx) + std::abs(bty))});
      if (key < best_key) {
        best_key = key;
        best.x = x;
        best.y = y;
        best.s = s;
        best.objective = ctx;
        best.primal_residual = pres;
        best.dual_residual = dres;
        best.gap = gap;
        best.iterations = it;
      }
      if (pres <= settings.eps_abs + settings.eps_rel * norm_b_ &&
          dres <= settings.eps_abs + settings.eps_rel * norm_c_ &&
          gap <= settings.eps_abs +
                     settings.eps_rel * (std::abs(ctx) + std::abs(bty))) {
        result.status = SolveStatus::optimal;
        result.x = std::move(x);
        result.y = std::move(y);
        result.s = std::move(s);
        result.objective = ctx;
        result.primal_residual = pres;
        result.dual_residual = dres;
        result.gap = gap;
        result.iterations = it;
        done = true;
      }
    } else {
      const Eigen::VectorXd xh = col_scale_.cwiseProduct(u.head(n));
      const Eigen::VectorXd yh = row_scale_.cwiseProduct(u.segment(n, m));
      const double bty = b_.dot(yh);
      if (bty < -1e-12) {
        const double datr = (a_.transpose() * yh).norm();
        if (datr <= cert_eps * std::max(1.0, -bty)) {
          result.status = SolveStatus::primal_infeasible;
          result.x = Eigen::VectorXd::Zero(n);
          result.s = Eigen::VectorXd::Zero(m);
          result.y = yh;
          result.dual_residual = datr;
          result.gap = bty;
          result.iterations = it;
          return result;
        }
      }
      const double ctx = c_.dot(xh);
      if (ctx < -1e-12) {
        const Eigen::VectorXd ax = a_ * xh;
        Eigen::VectorXd sx = -ax;
        cone_project_in_place(sx.head(m), cones_, /*dual=*/false);
        const double pray = (ax + sx).norm();
        if (pray <= cert_eps * std::max(1.0, -ctx)) {
          result.status = SolveStatus::dual_infeasible;
          result.x = xh;
          result.s = sx;
          result.y = Eigen::VectorXd::Zero(m);
          result.objective = ctx;
          result.primal_residual = pray;
          result.iterations = it;
          return result;
        }
      }
    }
  }

  if (!done) {
    result.status = SolveStatus::iteration_limit;
    if (best.x.size() == n) {
      result = best;
      result.status = SolveStatus::iteration_limit;
      result.iterations = it;
    } else {
      // tau stayed degenerate and no certificate validated: report the raw
      // descaled iterate so the caller sees the residual magnitudes
      const double tau = std::max(u(nm), 1e-300);
      result.x = col_scale_.cwiseProduct(u.head(n)) * (sb_ / tau);
      result.y = row_scale_.cwiseProduct(u.segment(n, m)) * (sc_ / tau);
      result.s = v.segment(n, m).cwiseQuotient(row_scale_) * (sb_ / tau);
      result.objective = c_.dot(result.x);
      result.primal_residual = (a_ * result.x + result.s - b_).norm();
      result.dual_residual = (a_.transpose() * result.y + c_).norm();
      result.gap = std::abs(c_.dot(result.x) + b_.dot(result.y));
      result.iterations = it;
    }
  }

  if (settings.polish && (result.status == SolveStatus::optimal ||
                          result.status == SolveStatus::iteration_limit) &&
      result.x.size() == n) {
    SolveResult cand = solver_detail::refine(a_, b_, c_, cones_, result);
    if (cand.polished) {
      cand.iterations = result.iterations;
      const KktResiduals after =
          solver_detail::normalized_kkt(a_, b_, c_, cones_, cand.x, cand.y, cand.s);
      cand.status = after.max() <= std::max(settings.eps_abs, settings.eps_rel)
                        ? SolveStatus::optimal
                        : result.status;
      result = cand;
    }
  }
  return result;
}

SolveResult solve(const ConicProgram& prog, const SolverSettings& settings) {
  AdmmSolver backend;
  backend.load(prog);
  return backend.solve(settings);
}

SolveResult refine(const ConicProgram& prog, const SolveResult& result) {
  return solver_detail::refine(prog.a, prog.b, prog.c, prog.cones, result);
}

}  // namespace bdcdn
