#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "bdcdn/netmodel.hpp"
#include "bdcdn/pf_oracle.hpp"
#include "bdcdn/relaxbuild.hpp"

using namespace bdcdn;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

NetworkCase feeder5_pu(int t) {
  NetworkCase c = builtin_case("feeder5");
  return to_per_unit(at_time(c, *c.profile, t));
}

ZipLoad cpl(Port port, double watts, double volts) {
  ZipLoad l;
  l.port = port;
  l.base_power = watts;
  l.z = 0.0;
  l.i = 0.0;
  l.p = 1.0;
  l.base_voltage = volts;
  return l;
}

// Feasible w interval implied by the four envelope rows at a fixed (x, y).
std::pair<double, double> w_interval(const std::array<McRow, 4>& rows,
                                     double x, double y) {
  double lo = -1e300, hi = 1e300;
  for (const McRow& r : rows) {
    const double slack = r.rhs - r.x * x - r.y * y;
    if (r.w < 0.0)
      lo = std::max(lo, -slack);
    else
      hi = std::min(hi, slack);
  }
  return {lo, hi};
}

// Maps a converged power-flow state onto the lifted variable vector:
// V = U^2, L = I^2, W = L * V_send, v = V+ V-, P as solved, balancer ports
// set to the slack export, epigraphs tight.
Eigen::VectorXd lift_point(const ConicProgram& prog, const NetworkCase& c,
                           const PfSolution& sol,
                           const std::vector<double>& dg, double a_vb) {
  const VarMap& m = prog.vars;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(prog.cols());
  for (int node = 1; node < m.n_nodes; ++node) {
    const double vp = sol.voltage(node, 0) * sol.voltage(node, 0);
    const double vm = sol.voltage(node, 2) * sol.voltage(node, 2);
    x(m.v(0, node)) = vp;
    x(m.v(1, node)) = vm;
    x(m.vprod(node)) = vp * vm;
  }
  for (int br = 0; br < m.n_branches; ++br) {
    const Branch& B = c.branches[br];
    for (int pole = 0; pole < 2; ++pole) {
      const int col = pole == 0 ? 0 : 2;
      const double amp = sol.branch_current(br, col);
      const double vsend =
          sol.voltage(B.from, col) * sol.voltage(B.from, col);
      x(m.l(pole, br)) = amp * amp;
      if (m.has_w) x(m.w(pole, br)) = amp * amp * vsend;
      x(m.p(pole, br)) = sol.branch_power(br, col);
    }
  }
  for (int k = 0; k < m.n_dg && k < static_cast<int>(dg.size()); ++k)
    x(m.dg(k)) = dg[k];
  const double s_kw = c.bases.power / 1000.0;
  for (std::size_t k = 0; k < m.vb_nodes.size(); ++k) {
    if (m.vb_nodes[k] != 0) continue;
    for (int pole = 0; pole < 2; ++pole) {
      const int col = pole == 0 ? 0 : 2;
      double fed = 0.0;
      for (int br = 0; br < m.n_branches; ++br) {
        const Branch& B = c.branches[br];
        const double amp = sol.branch_current(br, col);
        if (B.from == 0)
          fed += sol.branch_power(br, col);
        else if (B.to == 0)
          fed -= sol.branch_power(br, col) - B.resistance * amp * amp;
      }
      x(m.vb(static_cast<int>(k), pole)) = fed;
      if (m.n_epi > 0) {
        const double pkw = fed * s_kw;
        x(m.epi(static_cast<int>(k), pole)) = a_vb * pkw * pkw;
      }
    }
  }
  return x;
}

NetworkCase random_radial(std::mt19937& rng) {
  std::uniform_int_distribution<int> nodes(2, 8);
  std::uniform_real_distribution<double> ohms(0.05, 0.3);
  std::uniform_real_distribution<double> watts(50.0, 250.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  NetworkCase c;
  c.name = "random-radial";
  c.node_count = nodes(rng);
  c.slack = {0, 400.0, -400.0};
  for (int node = 1; node < c.node_count; ++node) {
    Branch b;
    b.from = node == 1
                 ? 0
                 : std::uniform_int_distribution<int>(0, node - 1)(rng);
    b.to = node;
    b.resistance = ohms(rng);
    b.current_bounds = {{{-150.0, 150.0}, {-75.0, 75.0}, {-150.0, 150.0}}};
    c.branches.push_back(b);
  }
  c.loads.assign(c.node_count, {});
  for (int node = 1; node < c.node_count; ++node) {
    const double base = watts(rng);
    c.loads[node].push_back(cpl(Port::p, base, 400.0));
    // Keep the poles nearly balanced so every draw stays inside the
    // unbalance limit and certifies.
    c.loads[node].push_back(
        cpl(Port::n, base * (0.85 + 0.3 * unit(rng)), 400.0));
    if (unit(rng) < 0.5)
      c.loads[node].push_back(cpl(Port::b, 0.8 * watts(rng), 800.0));
  }
  c.limits = {0.95, 1.05, 0.03};
  c.bases = {400.0, 10000.0};
  return to_per_unit(c);
}

}  // namespace

TEST_CASE("unbalance cone constant follows the limit formula") {
  const auto [a3, s3] = vuf_cone_constant(0.03);
  CHECK(a3 == doctest::Approx(2.0009002).epsilon(1e-7));
  CHECK(s3 == doctest::Approx(1.415486).epsilon(1e-6));
  CHECK(s3 == doctest::Approx(std::sqrt(a3 * a3 - 2.0)));

  const auto [a5, s5] = vuf_cone_constant(0.5);
  CHECK(a5 == doctest::Approx(2.125 / 0.9375).epsilon(1e-12));
  CHECK(s5 > std::sqrt(2.0));

  const auto [a0, s0] = vuf_cone_constant(1e-9);
  CHECK(a0 == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s0 == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  CHECK_THROWS_AS((void)vuf_cone_constant(0.0), std::invalid_argument);
  CHECK_THROWS_AS((void)vuf_cone_constant(1.0), std::invalid_argument);
  CHECK_THROWS_AS((void)vuf_cone_constant(-0.1), std::invalid_argument);
}

TEST_CASE("sqrt linearization error is zero at nominal and peaks at the band edge") {
  CHECK(taylor_error(1.0) == 0.0);
  CHECK(taylor_error(1.1) == doctest::Approx(0.0011912).epsilon(1e-4));
  CHECK(taylor_error(0.9025) == doctest::Approx(0.00125).epsilon(1e-12));
  CHECK(taylor_error(1.1025) == doctest::Approx(0.00125).epsilon(1e-12));

  double worst = 0.0;
  for (int k = 0; k <= 4000; ++k) {
    const double z = 0.9025 + k * (1.1025 - 0.9025) / 4000.0;
    worst = std::max(worst, taylor_error(z));
  }
  CHECK(worst == doctest::Approx(0.00125).epsilon(1e-12));
  CHECK_THROWS_AS((void)taylor_error(-1e-9), std::domain_error);
}

TEST_CASE("product envelope rows reproduce the analytic intervals") {
  const auto unit_box = mccormick(0.0, 2.0, 0.0, 2.0);
  const auto [lo1, hi1] = w_interval(unit_box, 1.0, 1.0);
  CHECK(lo1 == doctest::Approx(0.0));
  CHECK(hi1 == doctest::Approx(2.0));

  // Degenerate x box pins w to a*y for every y.
  const auto point = mccormick(0.7, 0.7, -1.0, 3.0);
  for (double y : {-1.0, 0.25, 3.0}) {
    const auto [lo, hi] = w_interval(point, 0.7, y);
    CHECK(lo == doctest::Approx(0.7 * y).epsilon(1e-12));
    CHECK(hi == doctest::Approx(0.7 * y).epsilon(1e-12));
  }

  // Squared voltage band box evaluated at nominal.
  const auto band = mccormick(0.9025, 1.1025, 0.9025, 1.1025);
  const auto [lo2, hi2] = w_interval(band, 1.0, 1.0);
  CHECK(lo2 == doctest::Approx(0.99049375).epsilon(1e-12));
  CHECK(hi2 == doctest::Approx(1.00999375).epsilon(1e-12));

  CHECK_THROWS_AS((void)mccormick(1.0, 0.9, 0.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS((void)mccormick(0.0, 1.0, 2.0, 1.0), std::invalid_argument);
}

TEST_CASE("product envelope is exact at every box corner") {
  std::mt19937 rng(20240818);
  std::uniform_real_distribution<double> span(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    double xl = span(rng), xh = span(rng), yl = span(rng), yh = span(rng);
    if (xl > xh) std::swap(xl, xh);
    if (yl > yh) std::swap(yl, yh);
    const auto rows = mccormick(xl, xh, yl, yh);
    for (double x : {xl, xh}) {
      for (double y : {yl, yh}) {
        const auto [lo, hi] = w_interval(rows, x, y);
        CHECK(lo == doctest::Approx(x * y).epsilon(1e-10));
        CHECK(hi == doctest::Approx(x * y).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("affine load rows match the device laws at the expansion point") {
  // Constant power: one constant row, no voltage coupling.
  const ZipLinearForm f0 = linear_zip_rows(cpl(Port::p, 2.5, 1.0));
  CHECK(f0.constant == 2.5);
  CHECK(f0.v_plus == 0.0);
  CHECK(f0.v_minus == 0.0);
  CHECK(f0.v_prod == 0.0);

  // Pure impedance at nominal voltage draws exactly the base power.
  ZipLoad zload = cpl(Port::p, 1.7, 1.0);
  zload.z = 1.0;
  zload.p = 0.0;
  const ZipLinearForm fz = linear_zip_rows(zload);
  CHECK(fz.constant + fz.v_plus * 1.0 == doctest::Approx(1.7).epsilon(1e-15));

  // Pure current at U = 1.05 (V = 1.1025): linearized 1.05125 vs exact 1.05.
  ZipLoad iload = cpl(Port::p, 1.0, 1.0);
  iload.i = 1.0;
  iload.p = 0.0;
  const ZipLinearForm fi = linear_zip_rows(iload);
  const double lin = fi.constant + fi.v_plus * 1.1025;
  CHECK(lin == doctest::Approx(1.05125).epsilon(1e-12));
  CHECK(lin - 1.05 == doctest::Approx(taylor_error(1.1025)).epsilon(1e-9));

  // Negative-port row mirrors the positive one onto V-.
  ZipLoad nload = cpl(Port::n, 1.0, 1.0);
  nload.i = 1.0;
  nload.p = 0.0;
  const ZipLinearForm fn = linear_zip_rows(nload);
  CHECK(fn.v_minus == fi.v_plus);
  CHECK(fn.v_plus == 0.0);
  CHECK(fn.constant == fi.constant);

  // The alternative published sign convention flips the current term.
  BuildOptions printed;
  printed.printed_n_current_sign = true;
  const ZipLinearForm fp = linear_zip_rows(nload, printed);
  CHECK(fp.v_minus == -fn.v_minus);
  CHECK(fp.constant == -fn.constant);

  // Bridge port: mixed ZIP, exact at nominal, near-exact off nominal.
  ZipLoad bload = cpl(Port::b, 3.0, 2.0);
  bload.z = 0.4;
  bload.i = 0.3;
  bload.p = 0.3;
  const ZipLinearForm fb = linear_zip_rows(bload);
  const double nominal =
      fb.constant + fb.v_plus * 1.0 + fb.v_minus * 1.0 + fb.v_prod * 1.0;
  CHECK(nominal == doctest::Approx(3.0).epsilon(1e-15));
  // U = 1.05 per pole: V = 1.1025, v = V^2; exact = 3 (0.4 V + 0.3 U + 0.3).
  const double v = 1.1025;
  const double off =
      fb.constant + (fb.v_plus + fb.v_minus) * v + fb.v_prod * v * v;
  const double exact = 3.0 * (0.4 * v + 0.3 * 1.05 + 0.3);
  CHECK(off == doctest::Approx(3.172276875).epsilon(1e-12));
  CHECK(std::abs(off - exact) < 3.0 * 2.0 * taylor_error(v) + 1e-12);

  ZipLoad bad = cpl(Port::p, 1.0, 0.0);
  CHECK_THROWS_AS((void)linear_zip_rows(bad), std::invalid_argument);
}

TEST_CASE("quadratic cost epigraph encodes t >= a p^2 tightly") {
  // Fix x = 2 with a zero row, then the cone admits t exactly down to 4.
  ProgramBuilder pb(1);
  pb.zero_row({{0, 1.0}}, 2.0);
  const int t = quad_cost_epigraph(pb, 0, 1.0, 0.0, 0.0, 1.0, 1.0);
  CHECK(t == 1);
  const ConicProgram prog = pb.finish(VarMap{});
  Eigen::VectorXd x(2);
  x << 2.0, 4.0;
  CHECK(max_violation(prog, x).max() <= 1e-12);
  x(1) = 3.999;
  CHECK(max_violation(prog, x).soc > 1e-4);
  x(1) = 4.5;  // above the epigraph is feasible
  CHECK(max_violation(prog, x).max() <= 1e-12);

  // a = 0 emits no cone and only the linear objective term.
  ProgramBuilder pl(1);
  pl.zero_row({{0, 1.0}}, 2.0);
  CHECK(quad_cost_epigraph(pl, 0, 0.0, 0.08, 0.0, 1.0, 1.0) == -1);
  const ConicProgram lprog = pl.finish(VarMap{});
  CHECK(lprog.cols() == 1);
  CHECK(lprog.cones.size() == 1);
  CHECK(lprog.c(0) == doctest::Approx(0.08));

  ProgramBuilder pn(1);
  CHECK_THROWS_AS(
      (void)quad_cost_epigraph(pn, 0, -1e-9, 0.0, 0.0, 1.0, 1.0),
      std::invalid_argument);

  // Tight epigraph value reproduces the scalar cost formula.
  const double a = 8e-5, b = 0.08, p = 552.5e-3;
  ProgramBuilder pc(1);
  pc.zero_row({{0, 1.0}}, p);
  const int tc = quad_cost_epigraph(pc, 0, a, b, 0.0, 1.0, 1.0);
  const ConicProgram cprog = pc.finish(VarMap{});
  Eigen::VectorXd xc(2);
  xc << p, a * p * p;
  CHECK(max_violation(cprog, xc).max() <= 1e-12);
  const double embedded = cprog.c(tc) * xc(tc) + cprog.c(0) * xc(0);
  CHECK(std::abs(embedded - (a * p * p + b * p)) < 1e-9);
}

TEST_CASE("initial boxes square the band and the ampacity") {
  const NetworkCase c = feeder5_pu(1);
  const BoundsSet bs = initial_bounds(c);
  REQUIRE(bs.v_lo.size() == 8);
  REQUIRE(bs.l_hi.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(bs.v_lo(i) == doctest::Approx(0.9025).epsilon(1e-15));
    CHECK(bs.v_hi(i) == doctest::Approx(1.1025).epsilon(1e-15));
    CHECK(bs.l_lo(i) == 0.0);
    // 150 A on a 25 A base = 6 pu, squared.
    CHECK(bs.l_hi(i) == doctest::Approx(36.0).epsilon(1e-12));
    CHECK(bs.v_lo_ini(i) == bs.v_lo(i));
    CHECK(bs.l_hi_ini(i) == bs.l_hi(i));
  }

  NetworkCase skew = c;  // bounds below are pu amperes (case is per-unit)
  skew.branches[2].current_bounds[0] = {-2.0, 1.0};
  const BoundsSet bsk = initial_bounds(skew);
  CHECK(bsk.l_hi(4) == doctest::Approx(4.0).epsilon(1e-12));

  NetworkCase flat = c;
  flat.limits.band_lo = flat.limits.band_hi = 1.0;
  const BoundsSet bf = initial_bounds(flat);
  CHECK(bf.v_lo(3) == bf.v_hi(3));

  CHECK_THROWS_AS((void)initial_bounds(builtin_case("feeder5")),
                  std::invalid_argument);
}

TEST_CASE("variable map is a bijection onto the columns") {
  const NetworkCase c = feeder5_pu(1);
  const ObjectiveSpec obj;
  for (bool with_w : {true, false}) {
    const ConicProgram prog =
        with_w ? build_mcsocp(c, initial_bounds(c), obj) : build_socp(c, obj);
    const VarMap& m = prog.vars;
    std::vector<int> hits(prog.cols(), 0);
    for (int node = 1; node < m.n_nodes; ++node) {
      ++hits[m.v(0, node)];
      ++hits[m.v(1, node)];
      ++hits[m.vprod(node)];
    }
    for (int br = 0; br < m.n_branches; ++br) {
      for (int pole = 0; pole < 2; ++pole) {
        ++hits[m.l(pole, br)];
        ++hits[m.p(pole, br)];
        if (m.has_w) ++hits[m.w(pole, br)];
      }
    }
    for (int k = 0; k < m.n_dg; ++k) ++hits[m.dg(k)];
    for (int k = 0; k < m.n_vb_ports / 2; ++k) {
      ++hits[m.vb(k, 0)];
      ++hits[m.vb(k, 1)];
    }
    for (int k = 0; k < m.n_epi / 2; ++k) {
      ++hits[m.epi(k, 0)];
      ++hits[m.epi(k, 1)];
    }
    CHECK(std::all_of(hits.begin(), hits.end(),
                      [](int h) { return h == 1; }));
    if (!with_w) CHECK_THROWS_AS((void)m.w(0, 0), std::logic_error);
    CHECK_THROWS_AS((void)m.v(0, 0), std::out_of_range);
    CHECK_THROWS_AS((void)m.l(2, 0), std::out_of_range);
    CHECK_THROWS_AS((void)m.p(0, m.n_branches), std::out_of_range);
  }
}

TEST_CASE("five-node feeder census matches the topology count") {
  const NetworkCase c = feeder5_pu(1);
  const ObjectiveSpec obj;  // sizing mode
  const ConicProgram prog = build_mcsocp(c, initial_bounds(c), obj);

  const ProgramCensus predicted = census(c, obj, true);
  const ProgramCensus counted = census(prog);
  CHECK(predicted.power_cones == 8);
  CHECK(predicted.unbalance_cones == 4);
  CHECK(predicted.w_mccormick_sets == 8);
  CHECK(predicted.v_mccormick_sets == 4);
  CHECK(predicted.epigraph_cones == 2);
  CHECK(predicted.zero_rows == 18);
  CHECK(predicted.nonneg_rows == 120);
  CHECK(predicted.variables == 52);

  CHECK(counted.zero_rows == predicted.zero_rows);
  CHECK(counted.nonneg_rows == predicted.nonneg_rows);
  CHECK(counted.soc_blocks_dim3 ==
        predicted.power_cones + predicted.epigraph_cones);
  CHECK(counted.soc_blocks_dim4 == predicted.unbalance_cones);
  CHECK(counted.variables == predicted.variables);
  CHECK(prog.rows() == 18 + 120 + 3 * 10 + 4 * 4);
  CHECK(prog.cols() == 52);

  // Diagnostic variant drops exactly the eight W columns.
  const ConicProgram socp = build_socp(c, obj);
  CHECK(prog.cols() - socp.cols() == 8);
  CHECK(census(socp).soc_blocks_dim3 == 10);
  CHECK(census(socp).zero_rows == 18);

  // Operation mode keeps the case's own generator list (none here).
  ObjectiveSpec op;
  op.mode = ObjectiveMode::operation;
  const ConicProgram oprog = build_mcsocp(c, initial_bounds(c), op);
  CHECK(oprog.cols() == 40);
  CHECK(census(c, op, true).variables == 40);
}

TEST_CASE("thirty-three node case census agrees between prediction and build") {
  const NetworkCase c = to_per_unit(builtin_case("ieee33_bipolar"));
  ObjectiveSpec op;
  op.mode = ObjectiveMode::operation;
  const ConicProgram prog = build_mcsocp(c, initial_bounds(c), op);
  const ProgramCensus predicted = census(c, op, true);
  const ProgramCensus counted = census(prog);
  CHECK(counted.zero_rows == predicted.zero_rows);
  CHECK(counted.nonneg_rows == predicted.nonneg_rows);
  CHECK(counted.soc_blocks_dim3 == predicted.soc_blocks_dim3);
  CHECK(counted.soc_blocks_dim4 == predicted.soc_blocks_dim4);
  CHECK(counted.variables == predicted.variables);
  CHECK(predicted.power_cones == 64);
  CHECK(predicted.unbalance_cones == 32);
}

TEST_CASE("program assembly is bit-reproducible") {
  const NetworkCase c = feeder5_pu(15);
  const ObjectiveSpec obj;
  const std::string d1 = dump_program(build_mcsocp(c, initial_bounds(c), obj));
  const std::string d2 = dump_program(build_mcsocp(c, initial_bounds(c), obj));
  CHECK(d1 == d2);
  CHECK(d1.rfind("conic-program rows=184 cols=52", 0) == 0);
  CHECK(d1.find("\ncones Z:18 N:120 S:3") != std::string::npos);
}

TEST_CASE("power and unbalance cones encode the intended quadratics") {
  // (W+1, 2P, W-1) in the cone iff P^2 <= W, by the algebraic identity
  // ((W+1)^2 - (2P)^2 - (W-1)^2) / 4 = W - P^2.
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> span(-4.0, 4.0);
  for (int k = 0; k < 10000; ++k) {
    const double p = span(rng), w = span(rng);
    const double s0 = w + 1.0, s1 = 2.0 * p, s2 = w - 1.0;
    CHECK(((s0 * s0 - s1 * s1 - s2 * s2) / 4.0) ==
          doctest::Approx(w - p * p).epsilon(1e-12));
    const bool in_cone = s0 >= 0.0 && s0 * s0 >= s1 * s1 + s2 * s2;
    if (w >= 0.0)
      CHECK(in_cone == (p * p <= w));
  }

  const auto [a, k2s] = vuf_cone_constant(0.03);
  std::uniform_real_distribution<double> vband(0.5, 1.5);
  for (int k = 0; k < 10000; ++k) {
    const double vp = vband(rng), vm = vband(rng), v = vband(rng);
    const double s0 = v + 1.0;
    const double s1 = 2.0 * vp / k2s, s2 = 2.0 * vm / k2s, s3 = v - 1.0;
    const double lhs = (s0 * s0 - s1 * s1 - s2 * s2 - s3 * s3) / 4.0;
    const double rhs = v - (vp * vp + vm * vm) / (a * a - 2.0);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("balanced-limit voltages always lie inside the unbalance cone") {
  const double delta = 0.03;
  const auto [a, k2s] = vuf_cone_constant(delta);
  std::mt19937 rng(4242);
  std::uniform_real_distribution<double> mag(0.95, 1.05);
  int admitted = 0;
  for (int k = 0; k < 10000; ++k) {
    const double up = mag(rng), un = mag(rng);
    const double unbalance = std::abs(up - un) / (0.5 * (up + un));
    if (unbalance > delta) continue;
    ++admitted;
    const double vp = up * up, vm = un * un, v = vp * vm;
    CHECK(vp * vp + vm * vm <= (a * a - 2.0) * v * (1.0 + 1e-12));
    (void)k2s;
  }
  CHECK(admitted > 1000);
}

TEST_CASE("certified power-flow states lift inside the relaxation") {
  // Dispatch most of the load locally so the slack balancer stays inside its
  // rating (part of the feasible set the program encodes; the oracle's
  // residual vector does not police converter ratings).
  const NetworkCase c = feeder5_pu(1);
  const ObjectiveSpec obj;
  const ConicProgram prog = build_mcsocp(c, initial_bounds(c), obj);
  const VarMap& m = prog.vars;

  Dispatch disp;
  disp.dg_bounds = m.dg_list;
  disp.dg.assign(m.n_dg, 0.0);
  disp.gen.assign(c.node_count, PortPowers{});
  for (int k = 0; k < m.n_dg; ++k) {
    const DgSpec& d = m.dg_list[k];
    double covered = 0.0;
    for (const ZipLoad& l : c.loads[d.node])
      if (l.port == d.port) covered += 0.9 * l.base_power;
    disp.dg[k] = covered;
    disp.gen[d.node][d.port] += covered;
  }

  PfSettings st;
  st.model = InjectionModel::pole_power;
  st.tolerance = 1e-11;
  const PfSolution sol = solve_pf(c, &disp, st);
  const OriResiduals res =
      ori_residuals(c, sol, &disp, InjectionModel::pole_power);
  REQUIRE(res.max_violation() <= 1e-8);

  const Eigen::VectorXd x = lift_point(prog, c, sol, disp.dg, obj.a_vb);
  const RowViolation rv = max_violation(prog, x);
  CHECK(rv.zero <= 1e-8);
  CHECK(rv.nonneg <= 1e-8);
  CHECK(rv.soc <= 1e-8);
}

TEST_CASE("random radial feeders lift inside the relaxation") {
  std::mt19937 rng(20240819);
  ObjectiveSpec obj;  // sizing mode; these cases carry no balancers
  int lifted = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const NetworkCase c = random_radial(rng);
    PfSettings st;
    st.model = InjectionModel::pole_power;
    st.tolerance = 1e-11;
    const PfSolution sol = solve_pf(c, nullptr, st);
    REQUIRE(ori_residuals(c, sol, nullptr, InjectionModel::pole_power)
                .max_violation() <= 1e-8);
    const ConicProgram prog = build_mcsocp(c, initial_bounds(c), obj);
    const Eigen::VectorXd x = lift_point(prog, c, sol, {}, obj.a_vb);
    CHECK(max_violation(prog, x).max() <= 1e-8);
    ++lifted;
  }
  CHECK(lifted == 20);
}

TEST_CASE("builder rejects malformed inputs") {
  const NetworkCase c = feeder5_pu(1);
  const ObjectiveSpec obj;

  BoundsSet inverted = initial_bounds(c);
  inverted.v_lo(2) = inverted.v_hi(2) + 0.1;
  CHECK_THROWS_AS((void)build_mcsocp(c, inverted, obj), std::invalid_argument);

  BoundsSet short_arrays = initial_bounds(c);
  short_arrays.l_hi.conservativeResize(3);
  CHECK_THROWS_AS((void)build_mcsocp(c, short_arrays, obj),
                  std::invalid_argument);

  CHECK_THROWS_AS(
      (void)build_mcsocp(builtin_case("feeder5"), initial_bounds(c), obj),
      std::invalid_argument);

  ObjectiveSpec bad = obj;
  bad.gamma = -0.1;
  CHECK_THROWS_AS((void)build_mcsocp(c, initial_bounds(c), bad),
                  std::invalid_argument);

  NetworkCase broken = c;
  broken.branches[0].from = broken.branches[0].to;
  CHECK_THROWS_AS((void)build_mcsocp(broken, initial_bounds(c), obj),
                  SemanticError);
}

TEST_CASE("program builder enforces cone order and live rows") {
  ProgramBuilder pb(2);
  pb.nonneg_row({{0, 1.0}}, 1.0);
  CHECK_THROWS_AS(pb.zero_row({{1, 1.0}}, 0.0), std::logic_error);
  CHECK_THROWS_AS(pb.soc_block({{{0, 1.0}}}, {0.0}), std::logic_error);

  ProgramBuilder dead(1);
  CHECK_THROWS_AS(dead.zero_row({{0, 0.0}}, 1.0), std::logic_error);
  CHECK_THROWS_AS(dead.zero_row({}, 1.0), std::logic_error);

  ProgramBuilder cancel(1);
  cancel.zero_row({{0, 1.0}, {0, -1.0}}, 0.0);
  CHECK_THROWS_AS((void)cancel.finish(VarMap{}), std::logic_error);

  ProgramBuilder bounds(1);
  CHECK_THROWS_AS(bounds.zero_row({{1, 1.0}}, 0.0), std::out_of_range);
}

TEST_CASE("row families tile the program and match the census") {
  const NetworkCase c = feeder5_pu(1);
  for (const bool with_w : {true, false}) {
    const ObjectiveSpec obj;
    const ConicProgram prog =
        with_w ? build_mcsocp(c, initial_bounds(c), obj) : build_socp(c, obj);
    const std::vector<RowFamily> fams = row_families(prog);
    int row = 0;
    for (const RowFamily& f : fams) {
      CHECK(f.begin == row);
      CHECK(f.rows > 0);
      CHECK_FALSE(f.name.empty());
      row += f.rows;
    }
    CHECK(row == prog.rows());

    const ProgramCensus cs = census(prog);
    const auto rows_of = [&](const char* name) {
      for (const RowFamily& f : fams)
        if (f.name == name) return f.rows;
      return 0;
    };
    CHECK(rows_of("power cone rows") == 3 * cs.power_cones);
    CHECK(rows_of("unbalance cone rows") == 4 * cs.unbalance_cones);
    CHECK(rows_of("cost epigraph rows") == 3 * cs.epigraph_cones);
    CHECK(rows_of("flow-product envelope rows") == 6 * cs.w_mccormick_sets);
    CHECK(rows_of("voltage-product envelope rows") == 6 * cs.v_mccormick_sets);
  }

  // operation mode adds finite generator caps, two rows per generator
  NetworkCase op = feeder5_pu(1);
  DgSpec d;
  d.node = 2;
  d.port = Port::b;
  d.p_min = 0.0;
  d.p_max = 0.5;
  op.dgs.push_back(d);
  ObjectiveSpec obj;
  obj.mode = ObjectiveMode::operation;
  const ConicProgram prog = build_mcsocp(op, initial_bounds(op), obj);
  for (const RowFamily& f : row_families(prog))
    if (f.name == "source capacity rows") CHECK(f.rows == 2);
}
