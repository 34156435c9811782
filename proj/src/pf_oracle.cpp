#include "bdcdn/pf_oracle.hpp"

#include <algorithm>
#include <cmath>

namespace bdcdn {

using detail::strf;

namespace {

int state_index(int node, int conductor) { return 3 * (node - 1) + conductor; }

struct NodeDraw {
  // Current extracted from each conductor at one node, plus its partial
  // derivatives with respect to (U+, Uo, U-) of the same node.
  Eigen::Vector3d d = Eigen::Vector3d::Zero();
  Eigen::Matrix3d ddU = Eigen::Matrix3d::Zero();
};

// Port powers and their slopes at the given port voltages, net of generation.
struct PortState {
  double power[3] = {0, 0, 0};   // net draw per port
  double dpower[3] = {0, 0, 0};  // d(draw)/d(port voltage)
  double u[3] = {0, 0, 0};       // port voltages
};

PortState port_state(const NetworkCase& c, const Dispatch* dispatch, int node,
                     double up, double uo, double um) {
  PortState st;
  const PortTriple pv = port_voltages(up, uo, um);
  st.u[0] = pv.p;
  st.u[1] = pv.n;
  st.u[2] = pv.b;
  for (const auto& l : c.loads[node]) {
    const int k = static_cast<int>(l.port);
    st.power[k] += l.power_at(st.u[k]);
    st.dpower[k] += l.dpower_at(st.u[k]);
  }
  if (dispatch && node < static_cast<int>(dispatch->gen.size())) {
    const PortPowers& g = dispatch->gen[node];
    st.power[0] -= g.p;
    st.power[1] -= g.n;
    st.power[2] -= g.b;
  }
  return st;
}

NodeDraw node_draw(const NetworkCase& c, const Dispatch* dispatch,
                   InjectionModel model, int node, double up, double uo,
                   double um) {
  const PortState st = port_state(c, dispatch, node, up, uo, um);
  // Port voltage gradients over (U+, Uo, U-).
  static const Eigen::Vector3d grad_up(1, -1, 0);
  static const Eigen::Vector3d grad_un(0, 1, -1);
  static const Eigen::Vector3d grad_ub(1, 0, -1);

  auto current = [&st](int k) { return st.power[k] / st.u[k]; };
  auto dcurrent = [&st](int k) {
    return (st.dpower[k] * st.u[k] - st.power[k]) / (st.u[k] * st.u[k]);
  };

  NodeDraw out;
  const double ip = current(0), in_ = current(1), ib = current(2);
  const Eigen::Vector3d dip = dcurrent(0) * grad_up;
  const Eigen::Vector3d din = dcurrent(1) * grad_un;
  const Eigen::Vector3d dib = dcurrent(2) * grad_ub;

  // Neutral row is a current balance in both models.
  out.d(1) = in_ - ip;
  out.ddU.row(1) = (din - dip).transpose();

  if (model == InjectionModel::physical) {
    out.d(0) = ip + ib;
    out.ddU.row(0) = (dip + dib).transpose();
    out.d(2) = -in_ - ib;
    out.ddU.row(2) = (-din - dib).transpose();
  } else {
    // Full port powers charged to each touched pole, divided by the pole
    // voltage (signed; U- < 0 yields the mirrored magnitude balance).
    const double netp = st.power[0] + st.power[2];
    const double netn = st.power[1] + st.power[2];
    const Eigen::Vector3d dnetp =
        st.dpower[0] * grad_up + st.dpower[2] * grad_ub;
    const Eigen::Vector3d dnetn =
        st.dpower[1] * grad_un + st.dpower[2] * grad_ub;
    const double sm = model == InjectionModel::pole_power_mirrored ? -1.0 : 1.0;
    out.d(0) = netp / up;
    out.ddU.row(0) = (dnetp / up).transpose();
    out.ddU(0, 0) -= netp / (up * up);
    out.d(2) = sm * netn / um;
    out.ddU.row(2) = (sm * dnetn / um).transpose();
    out.ddU(2, 2) -= sm * netn / (um * um);
  }
  return out;
}

Eigen::MatrixX3d state_to_voltage(const NetworkCase& c,
                                  const Eigen::VectorXd& x) {
  Eigen::MatrixX3d u(c.node_count, 3);
  u.row(0) = Eigen::RowVector3d(c.slack.u_plus, 0.0, c.slack.u_minus);
  for (int node = 1; node < c.node_count; ++node)
    for (int k = 0; k < 3; ++k) u(node, k) = x(state_index(node, k));
  return u;
}

Dispatch scale_dispatch(const Dispatch& d, double s) {
  Dispatch out = d;
  for (auto& g : out.gen) {
    g.p *= s;
    g.n *= s;
    g.b *= s;
  }
  for (auto& v : out.dg) v *= s;
  for (auto& spec : out.dg_bounds) {
    spec.p_min *= s;
    if (!std::isinf(spec.p_max)) spec.p_max *= s;
  }
  return out;
}

}  // namespace

namespace pf_detail {

Eigen::VectorXd flat_state(const NetworkCase& c) {
  Eigen::VectorXd x(3 * (c.node_count - 1));
  for (int node = 1; node < c.node_count; ++node) {
    x(state_index(node, 0)) = c.slack.u_plus;
    x(state_index(node, 1)) = 0.0;
    x(state_index(node, 2)) = c.slack.u_minus;
  }
  return x;
}

Eigen::VectorXd residual(const NetworkCase& c, const Dispatch* dispatch,
                         InjectionModel model, const Eigen::VectorXd& x) {
  const Eigen::MatrixX3d u = state_to_voltage(c, x);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(x.size());
  for (const auto& br : c.branches) {
    const double g = 1.0 / br.resistance;
    for (int k = 0; k < 3; ++k) {
      const double current = g * (u(br.from, k) - u(br.to, k));
      if (br.from != 0) f(state_index(br.from, k)) += current;
      if (br.to != 0) f(state_index(br.to, k)) -= current;
    }
  }
  for (int node = 1; node < c.node_count; ++node) {
    const NodeDraw nd = node_draw(c, dispatch, model, node, u(node, 0),
                                  u(node, 1), u(node, 2));
    for (int k = 0; k < 3; ++k) f(state_index(node, k)) += nd.d(k);
  }
  return f;
}

Eigen::MatrixXd jacobian(const NetworkCase& c, const Dispatch* dispatch,
                         InjectionModel model, const Eigen::VectorXd& x) {
  const Eigen::MatrixX3d u = state_to_voltage(c, x);
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(x.size(), x.size());
  for (const auto& br : c.branches) {
    const double g = 1.0 / br.resistance;
    for (int k = 0; k < 3; ++k) {
      if (br.from != 0) jac(state_index(br.from, k), state_index(br.from, k)) += g;
      if (br.to != 0) jac(state_index(br.to, k), state_index(br.to, k)) += g;
      if (br.from != 0 && br.to != 0) {
        jac(state_index(br.from, k), state_index(br.to, k)) -= g;
        jac(state_index(br.to, k), state_index(br.from, k)) -= g;
      }
    }
  }
  for (int node = 1; node < c.node_count; ++node) {
    const NodeDraw nd = node_draw(c, dispatch, model, node, u(node, 0),
                                  u(node, 1), u(node, 2));
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k)
        jac(state_index(node, r), state_index(node, k)) += nd.ddU(r, k);
  }
  return jac;
}

}  // namespace pf_detail

PfSolution solve_pf(const NetworkCase& snapshot, const Dispatch* dispatch,
                    const PfSettings& settings) {
  const bool was_pu = snapshot.per_unit;
  const NetworkCase c = to_per_unit(snapshot);
  Dispatch scaled;
  const Dispatch* disp = nullptr;
  if (dispatch) {
    scaled = was_pu ? *dispatch : scale_dispatch(*dispatch, 1.0 / c.bases.power);
    disp = &scaled;
  }

  Eigen::VectorXd x = pf_detail::flat_state(c);
  Eigen::VectorXd f = pf_detail::residual(c, disp, settings.model, x);
  double mismatch = x.size() ? f.cwiseAbs().maxCoeff() : 0.0;
  int iterations = 0;

  while (mismatch > settings.tolerance) {
    if (iterations >= settings.max_iterations)
      throw PfError(strf("power flow did not converge in %d iterations "
                         "(last mismatch %.3e pu)",
                         settings.max_iterations, mismatch),
                    mismatch, iterations);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(
        pf_detail::jacobian(c, disp, settings.model, x));
    if (!lu.isInvertible())
      throw PfError(
          strf("voltage collapse: singular Jacobian at iteration %d "
               "(mismatch %.3e pu)",
               iterations, mismatch),
          mismatch, iterations);
    const Eigen::VectorXd step = lu.solve(-f);

    // Halving line search on the mismatch norm.
    double alpha = 1.0;
    Eigen::VectorXd x_next;
    Eigen::VectorXd f_next;
    double m_next = mismatch;
    for (int halvings = 0; halvings < 30; ++halvings) {
      x_next = x + alpha * step;
      f_next = pf_detail::residual(c, disp, settings.model, x_next);
      m_next = f_next.cwiseAbs().maxCoeff();
      if (m_next < mismatch) break;
      alpha *= 0.5;
    }
    if (!(m_next < mismatch))
      throw PfError(strf("power flow stalled at mismatch %.3e pu (iteration %d)",
                         mismatch, iterations),
                    mismatch, iterations);
    x = std::move(x_next);
    f = std::move(f_next);
    mismatch = m_next;
    ++iterations;
  }

  PfSolution sol;
  sol.per_unit = was_pu;
  sol.iterations = iterations;
  sol.max_mismatch = mismatch;
  Eigen::MatrixX3d u = state_to_voltage(c, x);
  const int nb = static_cast<int>(c.branches.size());
  sol.branch_current.resize(nb, 3);
  sol.branch_power.resize(nb, 3);
  for (int k = 0; k < nb; ++k) {
    const Branch& br = c.branches[k];
    for (int pole = 0; pole < 3; ++pole) {
      const double i = (u(br.from, pole) - u(br.to, pole)) / br.resistance;
      sol.branch_current(k, pole) = i;
      sol.branch_power(k, pole) = u(br.from, pole) * i;
    }
  }
  sol.voltage = std::move(u);
  if (!was_pu) {
    sol.voltage *= c.bases.voltage;
    sol.branch_current *= c.bases.power / c.bases.voltage;
    sol.branch_power *= c.bases.power;
  }
  return sol;
}

double vuf(const PfSolution& sol, int node) {
  if (node < 0 || node >= sol.voltage.rows())
    throw std::out_of_range(strf("node %d out of range", node));
  const PortTriple pv =
      port_voltages(sol.voltage(node, 0), sol.voltage(node, 1),
                    sol.voltage(node, 2));
  const double denom = 0.5 * (pv.p + pv.n);
  if (!(denom > 1e-12 * std::max(1.0, std::abs(pv.b))))
    throw std::domain_error(
        strf("degenerate port voltage sum at node %d", node));
  return std::abs(pv.p - pv.n) / denom;
}

double pole_unbalance(const PfSolution& sol, int node) {
  if (node < 0 || node >= sol.voltage.rows())
    throw std::out_of_range(strf("node %d out of range", node));
  const double up = sol.voltage(node, 0);
  const double um = sol.voltage(node, 2);
  const double denom = 0.5 * (up - um);
  if (!(denom > 1e-12 * std::max(1.0, std::abs(up) + std::abs(um))))
    throw std::domain_error(
        strf("degenerate pole voltage spread at node %d", node));
  return std::abs(up + um) / denom;
}

double network_loss(const NetworkCase& snapshot, const PfSolution& sol) {
  const NetworkCase c =
      sol.per_unit ? to_per_unit(snapshot) : from_per_unit(snapshot);
  double loss = 0.0;
  for (int k = 0; k < sol.branch_current.rows(); ++k)
    for (int pole = 0; pole < 3; ++pole)
      loss += sol.branch_current(k, pole) * sol.branch_current(k, pole) *
              c.branches[k].resistance;
  return loss;
}

double OriResiduals::max_violation() const {
  return std::max({ohm, branch_power, balance, injection_map, zip,
                   port_transform, voltage_band, ampacity, vuf, dg_bounds});
}

OriResiduals ori_residuals(const NetworkCase& snapshot, const PfSolution& cand,
                           const Dispatch* dispatch, InjectionModel model) {
  const NetworkCase c = to_per_unit(snapshot);
  Dispatch scaled;
  const Dispatch* disp = nullptr;
  if (dispatch) {
    scaled = snapshot.per_unit
                 ? *dispatch
                 : scale_dispatch(*dispatch, 1.0 / c.bases.power);
    disp = &scaled;
  }
  // Candidate in pu.
  Eigen::MatrixX3d u = cand.voltage;
  Eigen::MatrixX3d cur = cand.branch_current;
  Eigen::MatrixX3d pow = cand.branch_power;
  if (!cand.per_unit) {
    u /= c.bases.voltage;
    cur /= c.bases.power / c.bases.voltage;
    pow /= c.bases.power;
  }

  OriResiduals res;
  const int nb = static_cast<int>(c.branches.size());

  for (int k = 0; k < nb; ++k) {
    const Branch& br = c.branches[k];
    for (int pole = 0; pole < 3; ++pole) {
      const double drop = u(br.from, pole) - u(br.to, pole);
      res.ohm = std::max(res.ohm,
                         std::abs(drop - br.resistance * cur(k, pole)));
      res.branch_power =
          std::max(res.branch_power,
                   std::abs(pow(k, pole) - u(br.from, pole) * cur(k, pole)));
      const double excess =
          std::max(cur(k, pole) - br.current_bounds[pole][1],
                   br.current_bounds[pole][0] - cur(k, pole));
      res.ampacity = std::max(res.ampacity, std::max(0.0, excess));
    }
  }

  for (int node = 1; node < c.node_count; ++node) {
    const PortState st =
        port_state(c, disp, node, u(node, 0), u(node, 1), u(node, 2));

    // Balance rows. Neutral is a current balance in both models; +/- rows
    // are current balances (physical) or full-port power balances
    // (pole_power), matching what the respective model enforces.
    double in_plus_cur = 0, in_minus_cur = 0, in_o = 0;
    double in_plus_pow = 0, in_minus_pow = 0;
    for (int k = 0; k < nb; ++k) {
      const Branch& br = c.branches[k];
      const double rl_p = br.resistance * cur(k, 0) * cur(k, 0);
      const double rl_m = br.resistance * cur(k, 2) * cur(k, 2);
      if (br.to == node) {
        in_plus_cur += cur(k, 0);
        in_minus_cur += cur(k, 2);
        in_o += cur(k, 1);
        in_plus_pow += pow(k, 0) - rl_p;
        in_minus_pow += pow(k, 2) - rl_m;
      }
      if (br.from == node) {
        in_plus_cur -= cur(k, 0);
        in_minus_cur -= cur(k, 2);
        in_o -= cur(k, 1);
        in_plus_pow -= pow(k, 0);
        in_minus_pow -= pow(k, 2);
      }
    }
    const double ip = st.power[0] / st.u[0];
    const double in_ = st.power[1] / st.u[1];
    const double ib = st.power[2] / st.u[2];
    res.balance = std::max(res.balance, std::abs(in_o - (in_ - ip)));
    if (model == InjectionModel::physical) {
      res.balance = std::max(res.balance, std::abs(in_plus_cur - (ip + ib)));
      res.balance =
          std::max(res.balance, std::abs(in_minus_cur - (-in_ - ib)));
    } else {
      const double sm =
          model == InjectionModel::pole_power_mirrored ? -1.0 : 1.0;
      res.balance = std::max(
          res.balance, std::abs(in_plus_pow - (st.power[0] + st.power[2])));
      res.balance = std::max(
          res.balance,
          std::abs(in_minus_pow - sm * (st.power[1] + st.power[2])));
    }

    // Net-load map, evaluated twice (library call vs literal formula).
    PortPowers load{st.power[0], st.power[1], st.power[2]};
    PortPowers zero{};
    if (disp && node < static_cast<int>(disp->gen.size())) {
      load.p += disp->gen[node].p;
      load.n += disp->gen[node].n;
      load.b += disp->gen[node].b;
    }
    const PortPowers gen = disp && node < static_cast<int>(disp->gen.size())
                               ? disp->gen[node]
                               : zero;
    const PoleTriple lib = pole_injections(load, gen);
    const double plus = (load.p + load.b) - (gen.p + gen.b);
    const double neutral = (load.n - load.p) - (gen.n - gen.p);
    const double minus = (gen.n + gen.b) - (load.n + load.b);
    res.injection_map = std::max(
        {res.injection_map, std::abs(lib.plus - plus),
         std::abs(lib.neutral - neutral), std::abs(lib.minus - minus)});

    // ZIP law re-evaluated per load at the candidate port voltages.
    double zip_total[3] = {0, 0, 0};
    for (const auto& l : c.loads[node]) {
      const int k = static_cast<int>(l.port);
      const double ratio = st.u[k] / l.base_voltage;
      zip_total[k] += l.base_power * (l.z * ratio * ratio + l.i * ratio + l.p);
    }
    for (int k = 0; k < 3; ++k)
      res.zip = std::max(res.zip, std::abs(zip_total[k] - load[static_cast<Port>(k)]));

    // Port transform identity.
    const PortTriple pv = port_voltages(u(node, 0), u(node, 1), u(node, 2));
    res.port_transform = std::max(
        {res.port_transform, std::abs(pv.p - (u(node, 0) - u(node, 1))),
         std::abs(pv.n - (u(node, 1) - u(node, 2))),
         std::abs(pv.b - pv.p - pv.n)});

    // Voltage band per outer pole.
    const double ref_p = c.slack.u_plus;
    const double ref_m = std::abs(c.slack.u_minus);
    res.voltage_band = std::max(
        {res.voltage_band,
         std::max(0.0, c.limits.band_lo * ref_p - u(node, 0)),
         std::max(0.0, u(node, 0) - c.limits.band_hi * ref_p),
         std::max(0.0, c.limits.band_lo * ref_m - std::abs(u(node, 2))),
         std::max(0.0, std::abs(u(node, 2)) - c.limits.band_hi * ref_m)});

    // The conductor-level model constrains the port-referenced unbalance
    // (it carries the neutral voltage); the pole-power models constrain the
    // pole-referenced spread, which is what their voltage variables encode.
    double denom, spread;
    if (model == InjectionModel::physical) {
      denom = 0.5 * (pv.p + pv.n);
      spread = std::abs(pv.p - pv.n);
    } else {
      denom = 0.5 * (u(node, 0) - u(node, 2));
      spread = std::abs(u(node, 0) + u(node, 2));
    }
    if (denom > 1e-12) {
      const double unbalance = spread / denom;
      res.vuf = std::max(res.vuf, std::max(0.0, unbalance - c.limits.delta));
    }
  }

  if (disp && !disp->dg.empty()) {
    const std::vector<DgSpec>& specs =
        disp->dg_bounds.empty() ? c.dgs : disp->dg_bounds;
    for (std::size_t k = 0; k < disp->dg.size() && k < specs.size(); ++k) {
      res.dg_bounds = std::max(
          {res.dg_bounds, specs[k].p_min - disp->dg[k],
           std::isinf(specs[k].p_max) ? 0.0 : disp->dg[k] - specs[k].p_max});
    }
    res.dg_bounds = std::max(res.dg_bounds, 0.0);
  }
  return res;
}

}  // namespace bdcdn
