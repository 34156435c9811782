#include <cmath>
#include <fstream>
#include <sstream>

#include "bdcdn/netmodel.hpp"

// Bundled test networks. The 5-node feeder is fully synthetic; the 33-node
// feeder reuses the classic radial test-system resistances, which ship as a
// data file so they can be swapped out.

namespace bdcdn {

namespace {

constexpr double kCplVoltagePn = 400.0;

ZipLoad cpl(Port port, double watts, double base_voltage) {
  ZipLoad l;
  l.port = port;
  l.base_power = watts;
  l.z = 0.0;
  l.i = 0.0;
  l.p = 1.0;
  l.base_voltage = base_voltage;
  return l;
}

NetworkCase make_feeder5() {
  NetworkCase c;
  c.name = "feeder5";
  c.node_count = 5;
  c.slack = {0, 400.0, -400.0};
  for (int k = 0; k < 4; ++k) {
    Branch b;
    b.from = k;
    b.to = k + 1;
    b.resistance = 0.1;
    b.current_bounds[0] = {-150.0, 150.0};
    b.current_bounds[1] = {-75.0, 75.0};
    b.current_bounds[2] = {-150.0, 150.0};
    c.branches.push_back(b);
  }
  c.loads.assign(5, {});
  const double p[4] = {500.0, 1000.0, 800.0, 900.0};
  const double n[4] = {1000.0, 600.0, 700.0, 400.0};
  const double b[4] = {1200.0, 1500.0, 1200.0, 1000.0};
  for (int node = 1; node <= 4; ++node) {
    c.loads[node].push_back(cpl(Port::p, p[node - 1], kCplVoltagePn));
    c.loads[node].push_back(cpl(Port::n, n[node - 1], kCplVoltagePn));
    c.loads[node].push_back(cpl(Port::b, b[node - 1], 2 * kCplVoltagePn));
  }
  VbSpec vb;
  vb.node = 0;
  vb.cap_p = 1000.0;
  vb.cap_n = 1000.0;
  vb.cost_a = 8e-5;
  vb.cost_b = 0.08;
  vb.cost_c = 0.0;
  vb.u_ps = 400.0;
  vb.u_ns = 400.0;
  c.vbs.push_back(vb);
  c.limits = {0.95, 1.05, 0.03};
  c.bases = {400.0, 10000.0};

  // Daily shape peaking at hour 15 with the heavy-unbalance multipliers
  // (p x6, n x2.6, b x3.5).
  LoadProfile prof;
  const double pk[24] = {1.0, 1.0, 1.0, 1.2, 1.5, 2.0, 2.5, 3.0,
                         3.5, 4.0, 4.5, 5.0, 5.2, 5.6, 6.0, 5.5,
                         5.0, 4.5, 4.0, 3.2, 2.5, 2.0, 1.5, 1.2};
  for (double mp : pk) {
    const double mn = 1.0 + (mp - 1.0) * 0.32;
    const double mb = 1.0 + (mp - 1.0) * 0.5;
    prof.mult.push_back({mp, mn, mb});
  }
  c.profile = std::move(prof);
  return c;
}

std::vector<Branch> load_resistances(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw SemanticError(
        detail::strf("cannot open resistance data file '%s'", path.c_str()));
  std::string line;
  if (!std::getline(in, line) || line.rfind("from,to,resistance", 0) != 0)
    throw SemanticError(
        detail::strf("'%s': expected header 'from,to,resistance'", path.c_str()));
  std::vector<Branch> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '\r') continue;
    Branch b;
    if (std::sscanf(line.c_str(), "%d,%d,%lf", &b.from, &b.to, &b.resistance) != 3)
      throw SemanticError(
          detail::strf("'%s' line %d: expected 'from,to,resistance'",
                       path.c_str(), lineno));
    b.current_bounds[0] = {-400.0, 400.0};
    b.current_bounds[1] = {-200.0, 200.0};
    b.current_bounds[2] = {-400.0, 400.0};
    out.push_back(b);
  }
  return out;
}

// Fraction of the classic test system's MW-scale loads carried over to the
// bipolar variant; sized so the unoptimized peak sits near the voltage band
// edge while the balancers/DG can restore it.
constexpr double kIeee33LoadScale = 0.04;
// Positive-port share of each node's load; positive loads 20% above negative.
constexpr double kIeee33PositiveShare = 1.2 / 2.2;

NetworkCase make_ieee33() {
  NetworkCase c;
  c.name = "ieee33_bipolar";
  c.node_count = 33;
  c.slack = {0, 3000.0, -3000.0};
  c.branches = load_resistances(data_dir() + "/ieee33_resistances.csv");

  // Classic 33-node feeder active loads, kW, nodes 1..32.
  const double p_kw[32] = {100, 90,  120, 60,  60,  200, 200, 60,
                           60,  45,  60,  60,  120, 60,  60,  60,
                           90,  90,  90,  90,  90,  90,  420, 420,
                           60,  60,  60,  120, 200, 150, 210, 60};
  c.loads.assign(33, {});
  for (int node = 1; node < 33; ++node) {
    const double total = p_kw[node - 1] * 1000.0 * kIeee33LoadScale;
    c.loads[node].push_back(
        cpl(Port::p, total * kIeee33PositiveShare, 3000.0));
    c.loads[node].push_back(
        cpl(Port::n, total * (1.0 - kIeee33PositiveShare), 3000.0));
  }

  for (Port port : {Port::p, Port::n}) {
    DgSpec d;
    d.node = 22;
    d.port = port;
    d.p_min = 0.0;
    d.p_max = 500e3;
    d.unit_cost = 0.8;
    c.dgs.push_back(d);
  }
  for (int node : {1, 14, 31}) {
    VbSpec vb;
    vb.node = node;
    vb.cap_p = 500e3;
    vb.cap_n = 500e3;
    vb.cost_a = 8e-5;
    vb.cost_b = 0.08;
    vb.cost_c = 0.0;
    vb.u_ps = 3000.0;
    vb.u_ns = 3000.0;
    c.vbs.push_back(vb);
  }
  c.limits = {0.95, 1.05, 0.03};
  c.bases = {3000.0, 1e6};

  LoadProfile prof;
  const double shape[24] = {0.62, 0.58, 0.55, 0.55, 0.58, 0.62, 0.70, 0.78,
                            0.85, 0.90, 0.93, 0.95, 0.96, 0.98, 1.00, 0.99,
                            0.97, 0.95, 0.92, 0.88, 0.82, 0.75, 0.70, 0.65};
  for (double m : shape) prof.mult.push_back({m, m, m});
  c.profile = std::move(prof);
  return c;
}

}  // namespace

NetworkCase builtin_case(const std::string& name) {
  if (name == "feeder5") return make_feeder5();
  if (name == "ieee33_bipolar") return make_ieee33();
  throw SemanticError(detail::strf(
      "unknown builtin case '%s' (available: feeder5, ieee33_bipolar)",
      name.c_str()));
}

}  // namespace bdcdn
