#include "bdcdn/stba.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace bdcdn {

namespace {

// product gaps at or below this are treated as exact (covers the no-flow
// W = L = 0 corner and solver noise)
constexpr double kGapDeadband = 1e-8;
constexpr double kClampHalfWidth = 5e-13;
// branch powers below this have no trustworthy direction; sign via Ohm's law
constexpr double kSignAmbiguity = 1e-8;
constexpr double kCertTolerance = 1e-4;

const char* pole_name(int pole) { return pole == 0 ? "+" : "-"; }

double slack_refsq(const NetworkCase& c, int pole) {
  const double u = pole == 0 ? c.slack.u_plus : c.slack.u_minus;
  return u * u;
}

double send_v(const Eigen::VectorXd& x, const VarMap& vars,
              const NetworkCase& c, int pole, int branch) {
  const int from = c.branches[branch].from;
  return from == c.slack.node ? slack_refsq(c, pole) : x(vars.v(pole, from));
}

void check_point(const Eigen::VectorXd& x, const VarMap& vars) {
  if (x.size() != vars.size())
    throw std::invalid_argument(
        detail::strf("point has %d of %d coordinates",
                     static_cast<int>(x.size()), vars.size()));
}

std::pair<std::string, double> binding_family(const ConicProgram& prog,
                                              const Eigen::VectorXd& y) {
  std::vector<RowFamily> fams;
  try {
    fams = row_families(prog);
  } catch (const std::logic_error&) {
    return {"unresolved (nonstandard row layout)", 0.0};
  }
  const double total = y.cwiseAbs().sum();
  if (!(total > 0.0)) return {"unresolved (empty certificate)", 0.0};
  std::string name = "unresolved";
  double best = -1.0;
  for (const RowFamily& f : fams) {
    const double mass = y.segment(f.begin, f.rows).cwiseAbs().sum();
    if (mass > best) {
      best = mass;
      name = f.name;
    }
  }
  return {name, best / total};
}

}  // namespace

double relaxation_error(const Eigen::VectorXd& x, const VarMap& vars,
                        const NetworkCase& snapshot) {
  check_point(x, vars);
  double lam = 0.0;
  if (vars.has_w) {
    for (int br = 0; br < vars.n_branches; ++br)
      for (int pole = 0; pole < 2; ++pole) {
        const double w = x(vars.w(pole, br));
        const double lv =
            x(vars.l(pole, br)) * send_v(x, vars, snapshot, pole, br);
        const double gap = std::abs(w - lv);
        if (gap <= kGapDeadband) continue;
        if (w <= 0.0)
          throw std::domain_error(detail::strf(
              "degenerate relaxation point: flow product %.3e on branch %d "
              "pole %s with gap %.3e",
              w, br, pole_name(pole), gap));
        lam = std::max(lam, gap / w);
      }
  }
  for (int node = 1; node < vars.n_nodes; ++node) {
    const double v = x(vars.vprod(node));
    const double gap = std::abs(v - x(vars.v(0, node)) * x(vars.v(1, node)));
    if (gap <= kGapDeadband) continue;
    if (v <= 0.0)
      throw std::domain_error(detail::strf(
          "degenerate relaxation point: voltage product %.3e at node %d "
          "with gap %.3e",
          v, node, gap));
    lam = std::max(lam, gap / v);
  }
  return lam;
}

BoundsSet tighten(const BoundsSet& bounds, const Eigen::VectorXd& x,
                  const VarMap& vars, double step, int k, bool* clamped) {
  if (!(step > 0.0 && step < 1.0))
    throw std::invalid_argument(detail::strf("step %.3f outside (0, 1)", step));
  if (k < 1)
    throw std::invalid_argument(detail::strf("round index %d below 1", k));
  check_point(x, vars);
  const double f = std::pow(step, k);
  BoundsSet out = bounds;
  bool any_clamp = false;
  const auto shrink = [&](double xi, double cur_lo, double cur_hi,
                          double ini_lo, double ini_hi, double& lo,
                          double& hi) {
    lo = std::min((1.0 - f) * xi, (1.0 + f) * xi);
    hi = std::max((1.0 - f) * xi, (1.0 + f) * xi);
    lo = std::max({lo, ini_lo, cur_lo});
    hi = std::min({hi, ini_hi, cur_hi});
    if (lo > hi) {
      const double mid = std::clamp(xi, ini_lo, ini_hi);
      lo = mid - kClampHalfWidth;
      hi = mid + kClampHalfWidth;
      any_clamp = true;
    }
  };
  for (int node = 1; node < vars.n_nodes; ++node)
    for (int pole = 0; pole < 2; ++pole) {
      const int idx = 2 * (node - 1) + pole;
      shrink(x(vars.v(pole, node)), bounds.v_lo(idx), bounds.v_hi(idx),
             bounds.v_lo_ini(idx), bounds.v_hi_ini(idx), out.v_lo(idx),
             out.v_hi(idx));
    }
  for (int br = 0; br < vars.n_branches; ++br)
    for (int pole = 0; pole < 2; ++pole) {
      const int idx = 2 * br + pole;
      shrink(x(vars.l(pole, br)), bounds.l_lo(idx), bounds.l_hi(idx),
             bounds.l_lo_ini(idx), bounds.l_hi_ini(idx), out.l_lo(idx),
             out.l_hi(idx));
    }
  if (clamped) *clamped = any_clamp;
  return out;
}

Eigen::VectorXd lift_state(const NetworkCase& snapshot, const PfSolution& sol,
                           const VarMap& vars) {
  if (!snapshot.per_unit || !sol.per_unit)
    throw std::invalid_argument("lift requires a per-unit case and state");
  if (sol.voltage.rows() != vars.n_nodes ||
      sol.branch_current.rows() != vars.n_branches)
    throw std::invalid_argument(
        detail::strf("state shape (%d nodes, %d branches) does not match the "
                     "program (%d, %d)",
                     static_cast<int>(sol.voltage.rows()),
                     static_cast<int>(sol.branch_current.rows()), vars.n_nodes,
                     vars.n_branches));
  Eigen::VectorXd x = Eigen::VectorXd::Zero(vars.size());
  for (int node = 0; node < vars.n_nodes; ++node) {
    if (node == snapshot.slack.node) continue;
    const double up = sol.voltage(node, 0);
    const double un = sol.voltage(node, 2);
    x(vars.v(0, node)) = up * up;
    x(vars.v(1, node)) = un * un;
    x(vars.vprod(node)) = (up * up) * (un * un);
  }
  for (int br = 0; br < vars.n_branches; ++br) {
    const int from = snapshot.branches[br].from;
    for (int pole = 0; pole < 2; ++pole) {
      const double u = sol.voltage(from, pole == 0 ? 0 : 2);
      const double i = sol.branch_current(br, pole == 0 ? 0 : 2);
      x(vars.l(pole, br)) = i * i;
      x(vars.p(pole, br)) = u * i;
      if (vars.has_w) x(vars.w(pole, br)) = (i * i) * (u * u);
    }
  }
  return x;
}

Dispatch extract_dispatch(const Eigen::VectorXd& x, const VarMap& vars,
                          const NetworkCase& snapshot) {
  check_point(x, vars);
  Dispatch d;
  d.gen.resize(vars.n_nodes);
  d.dg.reserve(vars.n_dg);
  d.dg_bounds = vars.dg_list;
  for (int k = 0; k < vars.n_dg; ++k) {
    const double val = x(vars.dg(k));
    d.dg.push_back(val);
    d.gen[vars.dg_list[k].node][vars.dg_list[k].port] += val;
  }
  for (std::size_t k = 0; k < vars.vb_nodes.size(); ++k) {
    const int node = vars.vb_nodes[k];
    if (node == snapshot.slack.node) continue;
    d.gen[node][Port::p] += x(vars.vb(static_cast<int>(k), 0));
    d.gen[node][Port::n] += x(vars.vb(static_cast<int>(k), 1));
  }
  return d;
}

Recovery recover(const Eigen::VectorXd& x, const VarMap& vars,
                 const NetworkCase& snapshot, const Dispatch& dispatch,
                 InjectionModel model) {
  check_point(x, vars);
  const int nn = vars.n_nodes;
  const int nb = vars.n_branches;

  // pole voltages in the magnitude frame (both positive)
  Eigen::MatrixX2d umag(nn, 2);
  for (int node = 0; node < nn; ++node) {
    if (node == snapshot.slack.node) {
      umag(node, 0) = snapshot.slack.u_plus;
      umag(node, 1) = -snapshot.slack.u_minus;
      continue;
    }
    for (int pole = 0; pole < 2; ++pole) {
      const double v = x(vars.v(pole, node));
      if (v < -1e-12)
        throw StbaError(detail::strf(
            "recovery failed: squared voltage %.3e at node %d pole %s", v,
            node, pole_name(pole)));
      umag(node, pole) = std::sqrt(std::max(v, 0.0));
    }
  }

  Recovery rec;
  Eigen::MatrixX2d imag(nb, 2);
  for (int br = 0; br < nb; ++br) {
    const Branch& B = snapshot.branches[br];
    bool ohm_here = false;
    for (int pole = 0; pole < 2; ++pole) {
      const double p = x(vars.p(pole, br));
      if (p < -kSignAmbiguity) rec.reverse_flow = true;
      if (p <= kSignAmbiguity) {
        imag(br, pole) =
            (umag(B.from, pole) - umag(B.to, pole)) / B.resistance;
        ohm_here = true;
      } else {
        imag(br, pole) = std::sqrt(std::max(x(vars.l(pole, br)), 0.0));
      }
    }
    if (ohm_here) rec.ohm_signed_branches.push_back(br);
  }

  PfSettings ps;
  ps.tolerance = 1e-11;
  ps.max_iterations = 100;
  ps.model = model;
  PfSolution comp;
  try {
    comp = solve_pf(snapshot, &dispatch, ps);
  } catch (const PfError& e) {
    throw StbaError(
        detail::strf("neutral completion power flow failed: %s", e.what()));
  }

  PfSolution& st = rec.state;
  st.voltage.resize(nn, 3);
  st.branch_current.resize(nb, 3);
  st.branch_power.resize(nb, 3);
  st.per_unit = true;
  st.iterations = comp.iterations;
  st.max_mismatch = comp.max_mismatch;
  for (int node = 0; node < nn; ++node) {
    st.voltage(node, 0) = umag(node, 0);
    st.voltage(node, 1) = comp.voltage(node, 1);
    st.voltage(node, 2) = -umag(node, 1);
  }
  for (int br = 0; br < nb; ++br) {
    const int from = snapshot.branches[br].from;
    st.branch_current(br, 0) = imag(br, 0);
    st.branch_current(br, 1) = comp.branch_current(br, 1);
    st.branch_current(br, 2) = -imag(br, 1);
    st.branch_power(br, 0) = st.voltage(from, 0) * st.branch_current(br, 0);
    st.branch_power(br, 1) = comp.branch_power(br, 1);
    st.branch_power(br, 2) = st.voltage(from, 2) * st.branch_current(br, 2);
  }
  return rec;
}

ExactnessMetrics exactness(const Eigen::VectorXd& x, const VarMap& vars,
                           const NetworkCase& snapshot) {
  check_point(x, vars);
  ExactnessMetrics m;
  for (int br = 0; br < vars.n_branches; ++br)
    for (int pole = 0; pole < 2; ++pole) {
      const double p = x(vars.p(pole, br));
      const double lv =
          x(vars.l(pole, br)) * send_v(x, vars, snapshot, pole, br);
      if (vars.has_w) {
        const double w = x(vars.w(pole, br));
        const double soc = std::abs(p * p - w);
        if (soc > kGapDeadband)
          m.soc_gap = std::max(m.soc_gap, soc / std::max(w, 1e-12));
        const double mc = std::abs(w - lv);
        if (mc > kGapDeadband)
          m.mccormick_w = std::max(m.mccormick_w, mc / std::max(w, 1e-12));
      }
      const double r1 = std::abs(p * p - lv);
      if (r1 > kGapDeadband)
        m.rank1_gap = std::max(m.rank1_gap, r1 / std::max(lv, 1e-12));
    }
  for (int node = 1; node < vars.n_nodes; ++node) {
    const double v = x(vars.vprod(node));
    const double gap = std::abs(v - x(vars.v(0, node)) * x(vars.v(1, node)));
    if (gap > kGapDeadband)
      m.mccormick_v = std::max(m.mccormick_v, gap / std::max(v, 1e-12));
  }
  for (int node = 0; node < vars.n_nodes; ++node) {
    bool curved = false;
    for (const ZipLoad& l : snapshot.loads[node])
      if (l.z > 0.0 || l.i > 0.0) curved = true;
    if (!curved) continue;
    const bool at_slack = node == snapshot.slack.node;
    const double vp = at_slack ? slack_refsq(snapshot, 0) : x(vars.v(0, node));
    const double vn = at_slack ? slack_refsq(snapshot, 1) : x(vars.v(1, node));
    const double vv = at_slack ? vp * vn : x(vars.vprod(node));
    m.taylor_mu = std::max({m.taylor_mu, taylor_error(vp), taylor_error(vn),
                            taylor_error(vv)});
  }
  return m;
}

double dispatch_objective(const NetworkCase& snapshot, const ObjectiveSpec& obj,
                          const Dispatch& dispatch, const PfSolution& pf) {
  if (!snapshot.per_unit || !pf.per_unit)
    throw std::invalid_argument("dispatch objective requires per-unit inputs");
  if (pf.voltage.rows() != snapshot.node_count ||
      pf.branch_current.rows() !=
          static_cast<Eigen::Index>(snapshot.branches.size()))
    throw std::invalid_argument("state shape does not match the case");
  const double s_kw = snapshot.bases.power / 1000.0;

  double dg_total = 0.0;
  for (double g : dispatch.dg) dg_total += g;
  double cost = obj.alpha * obj.c_g * s_kw * dg_total;

  double loss = 0.0;  // outer conductors only, matching the relaxed objective
  for (std::size_t br = 0; br < snapshot.branches.size(); ++br) {
    const double ip = pf.branch_current(static_cast<int>(br), 0);
    const double in = pf.branch_current(static_cast<int>(br), 2);
    loss += snapshot.branches[br].resistance * (ip * ip + in * in);
  }
  cost += obj.beta * obj.c_loss * s_kw * loss;

  for (const VbSpec& vb : snapshot.vbs) {
    double pp = 0.0;
    double pn = 0.0;
    if (vb.node == snapshot.slack.node) {
      // the slack balancer supplies whatever the network draws
      Eigen::RowVector3d inj = Eigen::RowVector3d::Zero();
      for (std::size_t br = 0; br < snapshot.branches.size(); ++br) {
        if (snapshot.branches[br].from == vb.node)
          inj += pf.branch_current.row(static_cast<int>(br));
        else if (snapshot.branches[br].to == vb.node)
          inj -= pf.branch_current.row(static_cast<int>(br));
      }
      const double up = pf.voltage(vb.node, 0) - pf.voltage(vb.node, 1);
      const double un = pf.voltage(vb.node, 1) - pf.voltage(vb.node, 2);
      pp = up * inj(0);
      pn = un * -inj(2);
    } else if (!dispatch.gen.empty()) {
      double dg_p = 0.0;
      double dg_n = 0.0;
      for (std::size_t k = 0;
           k < dispatch.dg.size() && k < dispatch.dg_bounds.size(); ++k) {
        const DgSpec& d = dispatch.dg_bounds[k];
        if (d.node != vb.node) continue;
        if (d.port == Port::p) dg_p += dispatch.dg[k];
        if (d.port == Port::n) dg_n += dispatch.dg[k];
      }
      pp = dispatch.gen[vb.node].p - dg_p;
      pn = dispatch.gen[vb.node].n - dg_n;
    }
    for (const double pw : {pp, pn}) {
      const double kw = s_kw * pw;
      cost += obj.gamma * (obj.a_vb * kw * kw + obj.b_vb * kw + obj.c_vb);
    }
  }
  return cost;
}

StbaResult run(const NetworkCase& snapshot, const ObjectiveSpec& obj,
               const StbaSettings& settings) {
  if (!snapshot.per_unit)
    throw std::invalid_argument("run requires a per-unit snapshot");
  if (!(settings.epsilon > 0.0))
    throw std::invalid_argument("epsilon must be positive");
  if (!(settings.step > 0.0 && settings.step < 1.0))
    throw std::invalid_argument("step must lie in (0, 1)");
  if (settings.max_outer < 1)
    throw std::invalid_argument("max_outer must be at least 1");

  StbaResult out;
  OpfSolution& sol = out.solution;
  BoundsSet bounds = initial_bounds(snapshot);
  SolverSettings solver = settings.solver;
  ConicProgram prog;
  SolveResult res;
  double lam = std::numeric_limits<double>::infinity();
  bool converged = false;

  for (int k = 1; k <= settings.max_outer; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    prog = build_mcsocp(snapshot, bounds, obj);
    res = solve(prog, solver);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (res.status == SolveStatus::primal_infeasible) {
      const auto [family, share] = binding_family(prog, res.y);
      throw InfeasibleError(
          detail::strf("relaxation infeasible in round %d; dominant "
                       "certificate support: %s (%.0f%% of mass)",
                       k, family.c_str(), 100.0 * share),
          family);
    }
    if (res.status == SolveStatus::dual_infeasible)
      throw StbaError(detail::strf(
          "relaxation objective unbounded below in round %d", k));
    if (res.status == SolveStatus::iteration_limit)
      sol.warnings.push_back(detail::strf(
          "solver stopped at its iteration limit in round %d "
          "(primal %.1e, dual %.1e, gap %.1e)",
          k, res.primal_residual, res.dual_residual, res.gap));

    lam = relaxation_error(res.x, prog.vars, snapshot);
    StbaIterate it;
    it.k = k;
    it.lambda = lam;
    it.bound_width =
        (bounds.v_hi - bounds.v_lo).sum() + (bounds.l_hi - bounds.l_lo).sum();
    it.objective = res.objective;
    it.status = res.status;
    it.solver_iterations = res.iterations;
    it.wall_seconds = wall;
    out.trace.iterates.push_back(it);

    if (lam <= settings.epsilon) {
      converged = true;
      break;
    }
    if (k == settings.max_outer) break;

    bool clamped = false;
    bounds = tighten(bounds, res.x, prog.vars, settings.step, k, &clamped);
    if (clamped) {
      out.trace.clamped = true;
      sol.warnings.push_back(detail::strf(
          "tightening clamped a degenerate box to width 1e-12 in round %d",
          k));
    }
    // primal-only: the dual of the previous round misleads the next program
    // (the envelope coefficients change with the boxes)
    if (settings.warm_start) solver.initial_x = res.x;
  }

  const double constant =
      obj.gamma * obj.c_vb * static_cast<double>(prog.vars.n_vb_ports);
  sol.program = std::move(prog);
  sol.relaxed = std::move(res);
  sol.lambda = lam;
  sol.converged = converged;
  sol.objective = sol.relaxed.objective + constant;
  sol.lower_bound = out.trace.iterates.front().objective + constant;
  sol.exactness = exactness(sol.relaxed.x, sol.program.vars, snapshot);
  sol.dispatch = extract_dispatch(sol.relaxed.x, sol.program.vars, snapshot);
  try {
    sol.recovery = recover(sol.relaxed.x, sol.program.vars, snapshot,
                           sol.dispatch, settings.certify_model);
  } catch (const StbaError& e) {
    sol.warnings.push_back(detail::strf("recovery failed: %s", e.what()));
  }
  if (sol.recovery) {
    if (sol.recovery->reverse_flow)
      sol.warnings.push_back(
          "reverse branch flow; direction-based current signs replaced by "
          "Ohm's law on the affected branches");
    sol.residuals = ori_residuals(snapshot, sol.recovery->state, &sol.dispatch,
                                  settings.certify_model);
    sol.oracle_objective =
        dispatch_objective(snapshot, obj, sol.dispatch, sol.recovery->state);
    sol.certified = converged &&
                    sol.residuals.max_violation() <= kCertTolerance &&
                    sol.exactness.rank1_gap <= kCertTolerance;
  }
  if (!converged) {
    std::string label;
    if (sol.recovery)
      label = detail::strf("oracle objective of the recovered point %.6f "
                           "(gap %.3e)",
                           sol.oracle_objective,
                           sol.oracle_objective - sol.lower_bound);
    else
      label = "no recoverable point";
    sol.warnings.push_back(detail::strf(
        "stopped after %d rounds with relaxation error %.3e > %.3e; "
        "relaxation lower bound %.6f; %s",
        out.trace.iterates.back().k, lam, settings.epsilon, sol.lower_bound,
        label.c_str()));
  }
  return out;
}

HorizonResult solve_horizon(const NetworkCase& c, const LoadProfile& profile,
                            const ObjectiveSpec& obj,
                            const StbaSettings& settings) {
  if (profile.steps() < 1)
    throw std::invalid_argument("profile has no timesteps");
  HorizonResult out;
  out.steps.reserve(profile.steps());
  StbaSettings st = settings;
  for (int t = 1; t <= profile.steps(); ++t) {
    HorizonStep step;
    step.t = t;
    try {
      StbaResult r = run(at_time(c, profile, t), obj, st);
      step.solution = std::move(r.solution);
      step.trace = std::move(r.trace);
      step.ok = step.solution.certified;
      if (!step.ok)
        step.error = step.solution.warnings.empty()
                         ? "solution is not certified"
                         : step.solution.warnings.back();
      if (settings.warm_start && step.solution.relaxed.x.size() > 0)
        st.solver.initial_x = step.solution.relaxed.x;
    } catch (const StbaError& e) {
      step.ok = false;
      step.error = e.what();
    }
    if (step.ok) {
      out.total_objective += step.solution.objective;
      const PfSolution& pf = step.solution.recovery->state;
      for (int node = 0; node < pf.voltage.rows(); ++node) {
        out.max_deviation[0] =
            std::max(out.max_deviation[0], std::abs(pf.voltage(node, 0) - 1.0));
        out.max_deviation[1] =
            std::max(out.max_deviation[1], std::abs(pf.voltage(node, 1)));
        out.max_deviation[2] =
            std::max(out.max_deviation[2], std::abs(pf.voltage(node, 2) + 1.0));
        out.max_vuf = std::max(out.max_vuf, vuf(pf, node));
      }
    } else {
      ++out.failures;
    }
    out.steps.push_back(std::move(step));
  }
  return out;
}

}  // namespace bdcdn
