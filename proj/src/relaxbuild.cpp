#include "bdcdn/relaxbuild.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace bdcdn {

using detail::strf;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

int checked(int idx, int count, const char* what) {
  if (idx < 0 || idx >= count)
    throw std::out_of_range(strf("%s index %d outside [0, %d)", what, idx, count));
  return idx;
}

}  // namespace

int VarMap::v(int pole, int node) const {
  checked(pole, 2, "pole");
  if (node <= 0 || node >= n_nodes)
    throw std::out_of_range(strf("node %d has no voltage variable", node));
  return off_v + 2 * (node - 1) + pole;
}

int VarMap::l(int pole, int branch) const {
  checked(pole, 2, "pole");
  return off_l + 2 * checked(branch, n_branches, "branch") + pole;
}

int VarMap::w(int pole, int branch) const {
  if (!has_w) throw std::logic_error("program carries no lifted W variables");
  checked(pole, 2, "pole");
  return off_w + 2 * checked(branch, n_branches, "branch") + pole;
}

int VarMap::p(int pole, int branch) const {
  checked(pole, 2, "pole");
  return off_p + 2 * checked(branch, n_branches, "branch") + pole;
}

int VarMap::vprod(int node) const {
  if (node <= 0 || node >= n_nodes)
    throw std::out_of_range(strf("node %d has no product variable", node));
  return off_vprod + (node - 1);
}

int VarMap::dg(int k) const { return off_dg + checked(k, n_dg, "generator"); }

int VarMap::vb(int k, int port) const {
  checked(port, 2, "balancer port");
  return off_vb + 2 * checked(k, n_vb_ports / 2, "balancer") + port;
}

int VarMap::epi(int k, int port) const {
  if (n_epi == 0) throw std::logic_error("program carries no cost epigraphs");
  checked(port, 2, "balancer port");
  return off_epi + 2 * checked(k, n_epi / 2, "balancer") + port;
}

int VarMap::size() const { return off_epi + n_epi; }

ProgramBuilder::ProgramBuilder(int n_vars) : obj_(n_vars, 0.0) {
  if (n_vars < 0) throw std::invalid_argument("negative variable count");
}

int ProgramBuilder::add_var(double obj_coef) {
  obj_.push_back(obj_coef);
  return static_cast<int>(obj_.size()) - 1;
}

void ProgramBuilder::obj(int var, double coef) {
  obj_.at(static_cast<std::size_t>(var)) += coef;
}

void ProgramBuilder::append_rows(ConeTag tag,
                                 const std::vector<std::vector<Term>>& rows,
                                 const std::vector<double>& rhs) {
  if (rows.size() != rhs.size())
    throw std::logic_error("row/rhs count mismatch");
  if (!cones_.empty() && static_cast<int>(tag) < static_cast<int>(cones_.back().tag))
    throw std::logic_error("cone rows appended out of zero/nonneg/soc order");
  for (std::size_t k = 0; k < rows.size(); ++k) {
    bool live = false;
    const int r = static_cast<int>(b_.size());
    for (const auto& [var, coef] : rows[k]) {
      if (var < 0 || var >= n_vars())
        throw std::out_of_range(strf("row references variable %d of %d", var, n_vars()));
      if (coef != 0.0) {
        trips_.emplace_back(r, var, coef);
        live = true;
      }
    }
    if (!live) throw std::logic_error(strf("all-zero constraint row %d", r));
    b_.push_back(rhs[k]);
  }
  if (tag == ConeTag::second_order) {
    cones_.push_back({tag, static_cast<int>(rows.size())});
  } else if (!cones_.empty() && cones_.back().tag == tag) {
    cones_.back().size += static_cast<int>(rows.size());
  } else {
    cones_.push_back({tag, static_cast<int>(rows.size())});
  }
}

void ProgramBuilder::zero_row(const std::vector<Term>& terms, double rhs) {
  append_rows(ConeTag::zero, {terms}, {rhs});
}

void ProgramBuilder::nonneg_row(const std::vector<Term>& terms, double rhs) {
  append_rows(ConeTag::nonneg, {terms}, {rhs});
}

void ProgramBuilder::soc_block(const std::vector<std::vector<Term>>& rows,
                               const std::vector<double>& rhs) {
  if (rows.size() < 2)
    throw std::logic_error("second-order block needs dimension >= 2");
  append_rows(ConeTag::second_order, rows, rhs);
}

ConicProgram ProgramBuilder::finish(VarMap vars) const {
  const int rows = static_cast<int>(b_.size());
  const int cols = n_vars();
  if (vars.n_nodes > 0 && vars.size() != cols)
    throw std::logic_error(strf("variable map covers %d of %d columns",
                                vars.size(), cols));
  ConicProgram p;
  p.c = Eigen::Map<const Eigen::VectorXd>(obj_.data(), cols);
  p.b = Eigen::Map<const Eigen::VectorXd>(b_.data(), rows);
  p.a.resize(rows, cols);
  p.a.setFromTriplets(trips_.begin(), trips_.end());
  p.a.makeCompressed();
  p.a.prune(0.0, 0.0);
  for (int r = 0; r < rows; ++r)
    if (p.a.outerIndexPtr()[r] == p.a.outerIndexPtr()[r + 1])
      throw std::logic_error(strf("constraint row %d cancelled to zero", r));
  p.cones = cones_;
  p.vars = vars;
  return p;
}

std::array<McRow, 4> mccormick(double x_lo, double x_hi, double y_lo,
                               double y_hi) {
  if (!(x_lo <= x_hi) || !(y_lo <= y_hi))
    throw std::invalid_argument(strf(
        "inverted product box [%g, %g] x [%g, %g]", x_lo, x_hi, y_lo, y_hi));
  return {{
      {-1.0, y_lo, x_lo, x_lo * y_lo},
      {-1.0, y_hi, x_hi, x_hi * y_hi},
      {+1.0, -y_hi, -x_lo, -x_lo * y_hi},
      {+1.0, -y_lo, -x_hi, -x_hi * y_lo},
  }};
}

std::pair<double, double> vuf_cone_constant(double delta) {
  if (!(delta > 0.0) || !(delta < 1.0))
    throw std::invalid_argument(
        strf("unbalance limit %g outside (0, 1)", delta));
  const double a =
      (2.0 + 0.5 * delta * delta) / (1.0 - 0.25 * delta * delta);
  return {a, std::sqrt(a * a - 2.0)};
}

ZipLinearForm linear_zip_rows(const ZipLoad& load, const BuildOptions& opt) {
  const double ub = load.base_voltage;
  if (!(ub > 0.0))
    throw std::invalid_argument(
        strf("load base voltage %g must be positive", ub));
  const double zq = load.z / (ub * ub);
  const double ih = load.i / (2.0 * ub);
  ZipLinearForm f;
  switch (load.port) {
    case Port::p:
      f.v_plus = load.base_power * (zq + ih);
      f.constant = load.base_power * (ih + load.p);
      break;
    case Port::n: {
      const double sign = opt.printed_n_current_sign ? -1.0 : 1.0;
      f.v_minus = load.base_power * (zq + sign * ih);
      f.constant = load.base_power * (sign * ih + load.p);
      break;
    }
    case Port::b:
      f.v_plus = load.base_power * (zq + ih);
      f.v_minus = f.v_plus;
      f.v_prod = load.base_power * zq;
      f.constant = load.base_power * (zq + 2.0 * ih + load.p);
      break;
  }
  return f;
}

double taylor_error(double z) {
  if (z < 0.0)
    throw std::domain_error(strf("squared voltage %g is negative", z));
  return std::abs(0.5 * z + 0.5 - std::sqrt(z));
}

namespace {

int quad_cost_epigraph_at(ProgramBuilder& pb, int x, double a, double b,
                          double weight, double scale, int epi_var) {
  if (a < 0.0)
    throw std::invalid_argument(
        strf("negative quadratic cost coefficient %g", a));
  pb.obj(x, weight * b * scale);
  if (a == 0.0) return -1;
  const int t = epi_var >= 0 ? epi_var : pb.add_var(0.0);
  pb.obj(t, weight);
  const double k = 2.0 * std::sqrt(a) * scale;
  pb.soc_block({{{t, -1.0}}, {{x, -k}}, {{t, -1.0}}}, {1.0, 0.0, -1.0});
  return t;
}

}  // namespace

int quad_cost_epigraph(ProgramBuilder& pb, int x, double a, double b, double c,
                       double weight, double scale) {
  (void)c;  // constant terms stay outside the conic objective
  return quad_cost_epigraph_at(pb, x, a, b, weight, scale, -1);
}

BoundsSet initial_bounds(const NetworkCase& snapshot) {
  if (!snapshot.per_unit)
    throw std::invalid_argument("bounds require a per-unit case");
  const int nn = snapshot.node_count - 1;
  const int nb = static_cast<int>(snapshot.branches.size());
  const double ref[2] = {snapshot.slack.u_plus, std::abs(snapshot.slack.u_minus)};
  BoundsSet bs;
  bs.v_lo.resize(2 * nn);
  bs.v_hi.resize(2 * nn);
  for (int node = 1; node <= nn; ++node) {
    for (int pole = 0; pole < 2; ++pole) {
      const int idx = 2 * (node - 1) + pole;
      const double lo = snapshot.limits.band_lo * ref[pole];
      const double hi = snapshot.limits.band_hi * ref[pole];
      bs.v_lo(idx) = lo * lo;
      bs.v_hi(idx) = hi * hi;
    }
  }
  bs.l_lo = Eigen::ArrayXd::Zero(2 * nb);
  bs.l_hi.resize(2 * nb);
  for (int br = 0; br < nb; ++br) {
    for (int pole = 0; pole < 2; ++pole) {
      // Outer conductors carry the pole currents: rows 0 (+) and 2 (-).
      const auto& cb = snapshot.branches[br].current_bounds[pole == 0 ? 0 : 2];
      bs.l_hi(2 * br + pole) = std::max(cb[0] * cb[0], cb[1] * cb[1]);
    }
  }
  bs.v_lo_ini = bs.v_lo;
  bs.v_hi_ini = bs.v_hi;
  bs.l_lo_ini = bs.l_lo;
  bs.l_hi_ini = bs.l_hi;
  return bs;
}

namespace {

VarMap make_varmap(const NetworkCase& c, const ObjectiveSpec& obj,
                   bool with_w) {
  VarMap m;
  m.n_nodes = c.node_count;
  m.n_branches = static_cast<int>(c.branches.size());
  m.has_w = with_w;
  if (obj.mode == ObjectiveMode::dg_sizing) {
    for (int node = 1; node < c.node_count; ++node)
      for (Port port : {Port::p, Port::n, Port::b})
        m.dg_list.push_back({node, port, 0.0, kInf, obj.c_g});
  } else {
    m.dg_list = c.dgs;
  }
  for (const VbSpec& vb : c.vbs) m.vb_nodes.push_back(vb.node);
  m.n_dg = static_cast<int>(m.dg_list.size());
  m.n_vb_ports = 2 * static_cast<int>(c.vbs.size());
  m.n_epi = obj.a_vb > 0.0 ? m.n_vb_ports : 0;
  const int nn = m.n_nodes - 1;
  const int nb = m.n_branches;
  m.off_v = 0;
  m.off_l = 2 * nn;
  m.off_w = m.off_l + 2 * nb;
  m.off_p = m.off_w + (with_w ? 2 * nb : 0);
  m.off_vprod = m.off_p + 2 * nb;
  m.off_dg = m.off_vprod + nn;
  m.off_vb = m.off_dg + m.n_dg;
  m.off_epi = m.off_vb + m.n_vb_ports;
  return m;
}

void check_build_inputs(const NetworkCase& c, const BoundsSet& bs,
                        const ObjectiveSpec& obj) {
  const auto diagnostics = validate(c);
  if (!diagnostics.empty()) throw SemanticError(diagnostics.front());
  if (!c.per_unit)
    throw std::invalid_argument("builder requires a per-unit case");
  const int nn = c.node_count - 1;
  const int nb = static_cast<int>(c.branches.size());
  if (bs.v_lo.size() != 2 * nn || bs.v_hi.size() != 2 * nn ||
      bs.l_lo.size() != 2 * nb || bs.l_hi.size() != 2 * nb)
    throw std::invalid_argument("bound arrays do not match the topology");
  for (int i = 0; i < bs.v_lo.size(); ++i)
    if (!(bs.v_lo(i) <= bs.v_hi(i)))
      throw std::invalid_argument(strf(
          "voltage box %d inverted: [%g, %g]", i, bs.v_lo(i), bs.v_hi(i)));
  for (int i = 0; i < bs.l_lo.size(); ++i)
    if (!(bs.l_lo(i) <= bs.l_hi(i)))
      throw std::invalid_argument(strf(
          "current box %d inverted: [%g, %g]", i, bs.l_lo(i), bs.l_hi(i)));
  if (obj.alpha < 0 || obj.beta < 0 || obj.gamma < 0)
    throw std::invalid_argument("objective weights must be nonnegative");
  if (obj.a_vb < 0)
    throw std::invalid_argument("quadratic balancer cost must be nonnegative");
}

ConicProgram build_core(const NetworkCase& c, const BoundsSet& bs,
                        const ObjectiveSpec& obj, const BuildOptions& opt,
                        bool with_w) {
  check_build_inputs(c, bs, obj);
  const VarMap m = make_varmap(c, obj, with_w);
  const int nn = c.node_count - 1;
  const int nb = m.n_branches;
  const double s_kw = c.bases.power / 1000.0;
  const double refsq[2] = {c.slack.u_plus * c.slack.u_plus,
                           c.slack.u_minus * c.slack.u_minus};
  ProgramBuilder pb(m.size());

  for (int k = 0; k < m.n_dg; ++k)
    pb.obj(m.dg(k), obj.alpha * obj.c_g * s_kw);
  for (int br = 0; br < nb; ++br)
    for (int pole = 0; pole < 2; ++pole)
      pb.obj(m.l(pole, br),
             obj.beta * obj.c_loss * s_kw * c.branches[br].resistance);

  // Squared-voltage drop along each branch, slack reference folded to rhs.
  for (int br = 0; br < nb; ++br) {
    const Branch& B = c.branches[br];
    const double r = B.resistance;
    for (int pole = 0; pole < 2; ++pole) {
      std::vector<ProgramBuilder::Term> terms;
      double rhs = 0.0;
      if (B.to == 0) {
        rhs -= refsq[pole];
      } else {
        terms.push_back({m.v(pole, B.to), 1.0});
      }
      if (B.from == 0) {
        rhs += refsq[pole];
      } else {
        terms.push_back({m.v(pole, B.from), -1.0});
      }
      terms.push_back({m.p(pole, br), 2.0 * r});
      terms.push_back({m.l(pole, br), -r * r});
      pb.zero_row(terms, rhs);
    }
  }

  // Power balance per node and pole; port loads enter through their affine
  // forms, bridge loads count on both poles.
  for (int node = 1; node <= nn; ++node) {
    for (int pole = 0; pole < 2; ++pole) {
      std::vector<ProgramBuilder::Term> terms;
      double rhs = 0.0;
      for (int br = 0; br < nb; ++br) {
        const Branch& B = c.branches[br];
        if (B.to == node) {
          terms.push_back({m.p(pole, br), 1.0});
          terms.push_back({m.l(pole, br), -B.resistance});
        } else if (B.from == node) {
          terms.push_back({m.p(pole, br), -1.0});
        }
      }
      for (int k = 0; k < m.n_dg; ++k) {
        const DgSpec& d = m.dg_list[k];
        if (d.node != node) continue;
        const bool feeds = d.port == Port::b ||
                           (pole == 0 ? d.port == Port::p : d.port == Port::n);
        if (feeds) terms.push_back({m.dg(k), 1.0});
      }
      for (std::size_t k = 0; k < m.vb_nodes.size(); ++k)
        if (m.vb_nodes[k] == node)
          terms.push_back({m.vb(static_cast<int>(k), pole), 1.0});
      for (const ZipLoad& load : c.loads[node]) {
        const bool draws = load.port == Port::b ||
                           (pole == 0 ? load.port == Port::p
                                      : load.port == Port::n);
        if (!draws) continue;
        const ZipLinearForm f = linear_zip_rows(load, opt);
        if (f.v_plus != 0.0) terms.push_back({m.v(0, node), -f.v_plus});
        if (f.v_minus != 0.0) terms.push_back({m.v(1, node), -f.v_minus});
        if (f.v_prod != 0.0) terms.push_back({m.vprod(node), -f.v_prod});
        rhs += f.constant;
      }
      pb.zero_row(terms, rhs);
    }
  }

  // The slack balancer sources exactly the net feeder export per pole.
  const VbSpec* svb = c.slack_vb();
  if (svb) {
    int k0 = -1;
    for (std::size_t k = 0; k < m.vb_nodes.size(); ++k)
      if (m.vb_nodes[k] == c.slack.node) k0 = static_cast<int>(k);
    for (int pole = 0; pole < 2; ++pole) {
      std::vector<ProgramBuilder::Term> terms;
      for (int br = 0; br < nb; ++br) {
        const Branch& B = c.branches[br];
        if (B.from == c.slack.node) {
          terms.push_back({m.p(pole, br), 1.0});
        } else if (B.to == c.slack.node) {
          terms.push_back({m.p(pole, br), -1.0});
          terms.push_back({m.l(pole, br), B.resistance});
        }
      }
      terms.push_back({m.vb(k0, pole), -1.0});
      pb.zero_row(terms, 0.0);
    }
  }

  // Box rows.
  for (int node = 1; node <= nn; ++node) {
    for (int pole = 0; pole < 2; ++pole) {
      const int idx = 2 * (node - 1) + pole;
      pb.nonneg_row({{m.v(pole, node), -1.0}}, -bs.v_lo(idx));
      pb.nonneg_row({{m.v(pole, node), 1.0}}, bs.v_hi(idx));
    }
  }
  for (int br = 0; br < nb; ++br) {
    for (int pole = 0; pole < 2; ++pole) {
      const int idx = 2 * br + pole;
      pb.nonneg_row({{m.l(pole, br), -1.0}}, -bs.l_lo(idx));
      pb.nonneg_row({{m.l(pole, br), 1.0}}, bs.l_hi(idx));
    }
  }

  // Envelope of W = L * V_send plus its interval box.
  if (with_w) {
    for (int br = 0; br < nb; ++br) {
      const Branch& B = c.branches[br];
      for (int pole = 0; pole < 2; ++pole) {
        const int idx = 2 * br + pole;
        const bool slack_end = B.from == c.slack.node;
        const int vidx = slack_end ? 0 : 2 * (B.from - 1) + pole;
        const double ylo = slack_end ? refsq[pole] : bs.v_lo(vidx);
        const double yhi = slack_end ? refsq[pole] : bs.v_hi(vidx);
        for (const McRow& row :
             mccormick(bs.l_lo(idx), bs.l_hi(idx), ylo, yhi)) {
          std::vector<ProgramBuilder::Term> terms = {
              {m.w(pole, br), row.w}, {m.l(pole, br), row.x}};
          double rhs = row.rhs;
          if (slack_end) {
            rhs -= row.y * refsq[pole];
          } else {
            terms.push_back({m.v(pole, B.from), row.y});
          }
          pb.nonneg_row(terms, rhs);
        }
        pb.nonneg_row({{m.w(pole, br), -1.0}}, -bs.l_lo(idx) * ylo);
        pb.nonneg_row({{m.w(pole, br), 1.0}}, bs.l_hi(idx) * yhi);
      }
    }
  }

  // Envelope of v = V+ * V- plus its interval box.
  for (int node = 1; node <= nn; ++node) {
    const int ip = 2 * (node - 1);
    for (const McRow& row :
         mccormick(bs.v_lo(ip), bs.v_hi(ip), bs.v_lo(ip + 1), bs.v_hi(ip + 1)))
      pb.nonneg_row({{m.vprod(node), row.w},
                     {m.v(0, node), row.x},
                     {m.v(1, node), row.y}},
                    row.rhs);
    pb.nonneg_row({{m.vprod(node), -1.0}}, -bs.v_lo(ip) * bs.v_lo(ip + 1));
    pb.nonneg_row({{m.vprod(node), 1.0}}, bs.v_hi(ip) * bs.v_hi(ip + 1));
  }

  for (int k = 0; k < m.n_dg; ++k) {
    const DgSpec& d = m.dg_list[k];
    pb.nonneg_row({{m.dg(k), -1.0}}, -d.p_min);
    if (std::isfinite(d.p_max)) pb.nonneg_row({{m.dg(k), 1.0}}, d.p_max);
  }
  for (std::size_t k = 0; k < c.vbs.size(); ++k) {
    for (int port = 0; port < 2; ++port) {
      const double cap = port == 0 ? c.vbs[k].cap_p : c.vbs[k].cap_n;
      pb.nonneg_row({{m.vb(static_cast<int>(k), port), -1.0}}, 0.0);
      if (std::isfinite(cap))
        pb.nonneg_row({{m.vb(static_cast<int>(k), port), 1.0}}, cap);
    }
  }

  // Power cones per branch and pole.
  for (int br = 0; br < nb; ++br) {
    const Branch& B = c.branches[br];
    for (int pole = 0; pole < 2; ++pole) {
      if (with_w) {
        pb.soc_block({{{m.w(pole, br), -1.0}},
                      {{m.p(pole, br), -2.0}},
                      {{m.w(pole, br), -1.0}}},
                     {1.0, 0.0, -1.0});
      } else if (B.from == c.slack.node) {
        pb.soc_block({{{m.l(pole, br), -1.0}},
                      {{m.p(pole, br), -2.0}},
                      {{m.l(pole, br), -1.0}}},
                     {refsq[pole], 0.0, -refsq[pole]});
      } else {
        pb.soc_block({{{m.l(pole, br), -1.0}, {m.v(pole, B.from), -1.0}},
                      {{m.p(pole, br), -2.0}},
                      {{m.l(pole, br), -1.0}, {m.v(pole, B.from), 1.0}}},
                     {0.0, 0.0, 0.0});
      }
    }
  }

  // Unbalance cones tie the pole voltages to their product variable.
  const double k2s = vuf_cone_constant(c.limits.delta).second;
  for (int node = 1; node <= nn; ++node) {
    pb.soc_block({{{m.vprod(node), -1.0}},
                  {{m.v(0, node), -2.0 / k2s}},
                  {{m.v(1, node), -2.0 / k2s}},
                  {{m.vprod(node), -1.0}}},
                 {1.0, 0.0, 0.0, -1.0});
  }

  // Balancer port costs.
  for (std::size_t k = 0; k < c.vbs.size(); ++k) {
    for (int port = 0; port < 2; ++port) {
      const int x = m.vb(static_cast<int>(k), port);
      const int epi =
          m.n_epi > 0 ? m.epi(static_cast<int>(k), port) : -1;
      quad_cost_epigraph_at(pb, x, obj.a_vb, obj.b_vb, obj.gamma, s_kw, epi);
    }
  }

  return pb.finish(m);
}

}  // namespace

ConicProgram build_mcsocp(const NetworkCase& snapshot, const BoundsSet& bounds,
                          const ObjectiveSpec& objective,
                          const BuildOptions& options) {
  return build_core(snapshot, bounds, objective, options, true);
}

ConicProgram build_socp(const NetworkCase& snapshot,
                        const ObjectiveSpec& objective,
                        const BuildOptions& options) {
  return build_core(snapshot, initial_bounds(snapshot), objective, options,
                    false);
}

ProgramCensus census(const NetworkCase& snapshot,
                     const ObjectiveSpec& objective, bool with_w) {
  const int nn = snapshot.node_count - 1;
  const int nb = static_cast<int>(snapshot.branches.size());
  const VarMap m = make_varmap(snapshot, objective, with_w);
  ProgramCensus cs;
  cs.zero_rows = 2 * nb + 2 * nn + (snapshot.slack_vb() ? 2 : 0);
  int dg_rows = m.n_dg;
  for (const DgSpec& d : m.dg_list)
    if (std::isfinite(d.p_max)) ++dg_rows;
  int vb_rows = 0;
  for (const VbSpec& vb : snapshot.vbs) {
    vb_rows += 2;
    if (std::isfinite(vb.cap_p)) ++vb_rows;
    if (std::isfinite(vb.cap_n)) ++vb_rows;
  }
  cs.nonneg_rows = 4 * nn + 4 * nb + (with_w ? 12 * nb : 0) + 6 * nn +
                   dg_rows + vb_rows;
  cs.power_cones = 2 * nb;
  cs.unbalance_cones = nn;
  cs.epigraph_cones = m.n_epi;
  cs.soc_blocks_dim3 = cs.power_cones + cs.epigraph_cones;
  cs.soc_blocks_dim4 = cs.unbalance_cones;
  cs.w_mccormick_sets = with_w ? 2 * nb : 0;
  cs.v_mccormick_sets = nn;
  cs.variables = m.size();
  return cs;
}

ProgramCensus census(const ConicProgram& program) {
  ProgramCensus cs;
  for (const ConeSegment& seg : program.cones) {
    switch (seg.tag) {
      case ConeTag::zero:
        cs.zero_rows += seg.size;
        break;
      case ConeTag::nonneg:
        cs.nonneg_rows += seg.size;
        break;
      case ConeTag::second_order:
        if (seg.size == 3)
          ++cs.soc_blocks_dim3;
        else if (seg.size == 4)
          ++cs.soc_blocks_dim4;
        break;
    }
  }
  const VarMap& m = program.vars;
  cs.power_cones = 2 * m.n_branches;
  cs.unbalance_cones = m.n_nodes - 1;
  cs.epigraph_cones = m.n_epi;
  cs.w_mccormick_sets = m.has_w ? 2 * m.n_branches : 0;
  cs.v_mccormick_sets = m.n_nodes - 1;
  cs.variables = program.cols();
  return cs;
}

std::vector<RowFamily> row_families(const ConicProgram& program) {
  const VarMap& m = program.vars;
  const int nn = m.n_nodes - 1;
  const int nb = m.n_branches;
  int zero_total = 0;
  int nonneg_total = 0;
  std::vector<int> soc_sizes;
  for (const ConeSegment& seg : program.cones) {
    switch (seg.tag) {
      case ConeTag::zero: zero_total += seg.size; break;
      case ConeTag::nonneg: nonneg_total += seg.size; break;
      case ConeTag::second_order: soc_sizes.push_back(seg.size); break;
    }
  }

  int dg_rows = m.n_dg;
  for (const DgSpec& d : m.dg_list)
    if (std::isfinite(d.p_max)) ++dg_rows;
  // balancer nonneg rows (2..4 per unit: lower bounds plus finite caps) and
  // slack export rows (0 or 2) are inferred from the leftover counts
  const int slack_rows = zero_total - 2 * nb - 2 * nn;
  const int w_rows = m.has_w ? 12 * nb : 0;
  const int vb_rows = nonneg_total - 4 * nn - 4 * nb - w_rows - 6 * nn - dg_rows;
  if (slack_rows < 0 || slack_rows > 2 || slack_rows % 2 != 0 ||
      vb_rows < m.n_vb_ports || vb_rows > 2 * m.n_vb_ports)
    throw std::logic_error(
        strf("row layout does not tile: %d leftover zero rows, %d leftover "
             "nonnegative rows",
             slack_rows, vb_rows));
  const int n_power = 2 * nb;
  if (static_cast<int>(soc_sizes.size()) != n_power + nn + m.n_epi)
    throw std::logic_error(strf("expected %d cone blocks, found %d",
                                n_power + nn + m.n_epi,
                                static_cast<int>(soc_sizes.size())));
  for (int k = 0; k < static_cast<int>(soc_sizes.size()); ++k) {
    const int want = (k >= n_power && k < n_power + nn) ? 4 : 3;
    if (soc_sizes[k] != want)
      throw std::logic_error(
          strf("cone block %d has dimension %d, expected %d", k, soc_sizes[k],
               want));
  }

  std::vector<RowFamily> out;
  int row = 0;
  const auto push = [&](const char* name, int rows) {
    if (rows > 0) out.push_back({name, row, rows});
    row += rows;
  };
  push("voltage-drop rows", 2 * nb);
  push("power-balance rows", 2 * nn);
  push("slack-export rows", slack_rows);
  push("voltage box rows", 4 * nn);
  push("current box rows", 4 * nb);
  push("flow-product envelope rows", w_rows);
  push("voltage-product envelope rows", 6 * nn);
  push("source capacity rows", dg_rows);
  push("balancer capacity rows", vb_rows);
  push("power cone rows", 3 * n_power);
  push("unbalance cone rows", 4 * nn);
  push("cost epigraph rows", 3 * m.n_epi);
  if (row != program.rows())
    throw std::logic_error(strf("family tiling covers %d of %d rows", row,
                                program.rows()));
  return out;
}

RowViolation max_violation(const ConicProgram& program,
                           const Eigen::VectorXd& x) {
  if (x.size() != program.cols())
    throw std::invalid_argument(strf("point has %d of %d coordinates",
                                     static_cast<int>(x.size()),
                                     program.cols()));
  const Eigen::VectorXd s = program.b - program.a * x;
  RowViolation rv;
  int row = 0;
  for (const ConeSegment& seg : program.cones) {
    switch (seg.tag) {
      case ConeTag::zero:
        rv.zero = std::max(rv.zero,
                           s.segment(row, seg.size).cwiseAbs().maxCoeff());
        break;
      case ConeTag::nonneg:
        rv.nonneg = std::max(rv.nonneg,
                             -s.segment(row, seg.size).minCoeff());
        break;
      case ConeTag::second_order:
        rv.soc = std::max(rv.soc,
                          s.segment(row + 1, seg.size - 1).norm() - s(row));
        break;
    }
    row += seg.size;
  }
  rv.nonneg = std::max(rv.nonneg, 0.0);
  rv.soc = std::max(rv.soc, 0.0);
  return rv;
}

std::string dump_program(const ConicProgram& program) {
  std::string out = strf("conic-program rows=%d cols=%d\n", program.rows(),
                         program.cols());
  out += "cones";
  for (const ConeSegment& seg : program.cones) {
    const char tag = seg.tag == ConeTag::zero      ? 'Z'
                     : seg.tag == ConeTag::nonneg ? 'N'
                                                  : 'S';
    out += strf(" %c:%d", tag, seg.size);
  }
  out += "\nobj";
  for (int j = 0; j < program.cols(); ++j)
    if (program.c(j) != 0.0) out += strf(" %d:%.17g", j, program.c(j));
  out += "\n";
  int row = 0;
  for (const ConeSegment& seg : program.cones) {
    for (int k = 0; k < seg.size; ++k, ++row) {
      switch (seg.tag) {
        case ConeTag::zero:
          out += "Z";
          break;
        case ConeTag::nonneg:
          out += "N";
          break;
        case ConeTag::second_order:
          out += strf("S%d:%d", seg.size, k);
          break;
      }
      for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
               program.a, row);
           it; ++it)
        out += strf(" %d:%.17g", static_cast<int>(it.col()), it.value());
      out += strf(" = %.17g\n", program.b(row));
    }
  }
  return out;
}

}  // namespace bdcdn
