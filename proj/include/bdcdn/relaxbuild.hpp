// Conic relaxation builder: assembles the multi-cone second-order-cone
// program (and a diagnostic SOCP variant) for bipolar DC optimal power flow
// in the standard embedding  min c'x  s.t.  A x + s = b,  s in K,
// where K is an ordered product of zero, nonnegative, and second-order cones.
#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <array>
#include <string>
#include <vector>

#include "bdcdn/netmodel.hpp"

namespace bdcdn {

enum class ConeTag { zero, nonneg, second_order };

struct ConeSegment {
  ConeTag tag;
  int size = 0;
};

enum class ObjectiveMode { dg_sizing, operation };

// Prices are in $ per kW (or kWh); powers inside the program are per-unit,
// so builders scale by bases.power / 1000 where costs are applied.
struct ObjectiveSpec {
  ObjectiveMode mode = ObjectiveMode::dg_sizing;
  double alpha = 1.0 / 3.0;
  double beta = 1.0 / 3.0;
  double gamma = 1.0 / 3.0;
  double c_g = 603.19;
  double c_loss = 0.5;
  double a_vb = 8e-5;
  double b_vb = 0.08;
  double c_vb = 0.0;
};

struct BuildOptions {
  // Flip the sign of the current-dependent term in the negative-port load
  // linearization (an alternative published convention). Off by default;
  // the default sign is the one consistent with the injection map.
  bool printed_n_current_sign = false;
};

// Variable layout of one program instance. Nodes are case indices (slack 0
// excluded everywhere); poles are 0 (+) and 1 (-); branches are case order.
struct VarMap {
  int n_nodes = 0;     // total nodes including slack
  int n_branches = 0;
  int off_v = 0, off_l = 0, off_w = 0, off_p = 0, off_vprod = 0;
  int off_dg = 0, off_vb = 0, off_epi = 0;
  int n_dg = 0, n_vb_ports = 0, n_epi = 0;
  std::vector<DgSpec> dg_list;        // per dg variable, in variable order
  std::vector<int> vb_nodes;          // per VB unit; ports p,n interleaved
  bool has_w = true;                  // false in the SOCP variant

  int v(int pole, int node) const;      // squared pole voltage
  int l(int pole, int branch) const;    // squared branch current
  int w(int pole, int branch) const;    // lifted L * V_send product
  int p(int pole, int branch) const;    // sending-end branch power
  int vprod(int node) const;            // lifted V+ * V- product
  int dg(int k) const;
  int vb(int k, int port) const;        // port 0 = p, 1 = n
  int epi(int k, int port) const;       // VB cost epigraph variable
  int size() const;
};

// Box bounds on the lifted voltage/current variables, indexed like VarMap
// (v: 2*(node-1)+pole, l: 2*branch+pole). The *_ini copies freeze the
// initial envelope; tightening never escapes it.
struct BoundsSet {
  Eigen::ArrayXd v_lo, v_hi, l_lo, l_hi;
  Eigen::ArrayXd v_lo_ini, v_hi_ini, l_lo_ini, l_hi_ini;
};

struct ConicProgram {
  Eigen::VectorXd c;
  Eigen::SparseMatrix<double, Eigen::RowMajor> a;
  Eigen::VectorXd b;
  std::vector<ConeSegment> cones;
  VarMap vars;
  int rows() const { return static_cast<int>(b.size()); }
  int cols() const { return static_cast<int>(c.size()); }
};

// Incremental program assembly. Rows must be appended in cone-group order
// (all zero rows, then nonnegative, then second-order blocks); violating the
// order or finishing with an all-zero row throws std::logic_error.
class ProgramBuilder {
 public:
  explicit ProgramBuilder(int n_vars);
  int add_var(double obj_coef = 0.0);
  void obj(int var, double coef);

  using Term = std::pair<int, double>;
  // a'x = rhs
  void zero_row(const std::vector<Term>& terms, double rhs);
  // a'x <= rhs
  void nonneg_row(const std::vector<Term>& terms, double rhs);
  // s_i = rhs_i - a_i'x stacked into one second-order block, s0 >= ||s1..||
  void soc_block(const std::vector<std::vector<Term>>& rows,
                 const std::vector<double>& rhs);

  int n_vars() const { return static_cast<int>(obj_.size()); }
  ConicProgram finish(VarMap vars) const;

 private:
  void append_rows(ConeTag tag, const std::vector<std::vector<Term>>& rows,
                   const std::vector<double>& rhs);
  std::vector<double> obj_;
  std::vector<Eigen::Triplet<double>> trips_;
  std::vector<double> b_;
  std::vector<ConeSegment> cones_;
};

// Four inequality rows cw*w + cx*x + cy*y <= rhs whose intersection is the
// convex envelope of w = x*y over the box; exact at the box corners.
struct McRow {
  double w, x, y, rhs;
};
std::array<McRow, 4> mccormick(double x_lo, double x_hi, double y_lo,
                               double y_hi);

// Unbalance cone constant for limit delta in (0,1): returns (a, sqrt(a^2-2))
// with a = (2 + delta^2/2) / (1 - delta^2/4).
std::pair<double, double> vuf_cone_constant(double delta);

// Affine load model P = constant + v_plus*V+ + v_minus*V- + v_prod*v,
// the first-order expansion of the ZIP law in squared voltages about 1 pu.
// Expects the load in per-unit.
struct ZipLinearForm {
  double constant = 0.0;
  double v_plus = 0.0;
  double v_minus = 0.0;
  double v_prod = 0.0;
};
ZipLinearForm linear_zip_rows(const ZipLoad& load, const BuildOptions& opt = {});

// Linearization error |z/2 + 1/2 - sqrt(z)| of the sqrt expansion at z.
double taylor_error(double z);

// Emits cost a*(scale*x)^2 + b*(scale*x) + c for variable x: with a > 0 adds
// an epigraph variable t with ||(2 sqrt(a) scale x, t-1)|| <= t+1 and
// objective weight*(t + b*scale*x); with a = 0 only the linear term. The
// constant c is not embedded (callers account for weight*c outside).
// Returns the epigraph variable index or -1 when no cone was emitted.
int quad_cost_epigraph(ProgramBuilder& pb, int x, double a, double b, double c,
                       double weight, double scale);

// Initial box envelope: V in [band_lo^2, band_hi^2] per pole and node,
// L in [0, max(lo^2, hi^2)] from the pole ampacities. Case must be per-unit.
BoundsSet initial_bounds(const NetworkCase& snapshot);

// Multi-cone SOC relaxation with lifted products W = L*V_send and v = V+*V-.
ConicProgram build_mcsocp(const NetworkCase& snapshot, const BoundsSet& bounds,
                          const ObjectiveSpec& objective,
                          const BuildOptions& options = {});

// Diagnostic variant: power cones ||(2P, L - V_send)|| <= L + V_send keep V
// directly and no W variables exist; everything else matches build_mcsocp.
// Uses the initial box envelope (it is not part of the tightening loop).
ConicProgram build_socp(const NetworkCase& snapshot,
                        const ObjectiveSpec& objective,
                        const BuildOptions& options = {});

// Structural counts used for cross-checking a built program.
struct ProgramCensus {
  int zero_rows = 0;
  int nonneg_rows = 0;
  int soc_blocks_dim3 = 0;
  int soc_blocks_dim4 = 0;
  int power_cones = 0;
  int unbalance_cones = 0;
  int epigraph_cones = 0;
  int w_mccormick_sets = 0;
  int v_mccormick_sets = 0;
  int variables = 0;
};
// Predicted from the topology and objective mode.
ProgramCensus census(const NetworkCase& snapshot, const ObjectiveSpec& objective,
                     bool with_w = true);
// Counted from the assembled program (cone segments and variable map).
ProgramCensus census(const ConicProgram& program);

// Contiguous row range occupied by one constraint family, in emission order.
struct RowFamily {
  std::string name;
  int begin = 0;
  int rows = 0;
};
// Tiles [0, program.rows()) into named families derived from the variable
// map and cone segments; throws std::logic_error when the program's layout
// cannot be reconciled with the builder's emission order.
std::vector<RowFamily> row_families(const ConicProgram& program);

// Worst violation of each row group at a point: zero rows |a'x - b|,
// nonnegative rows max(a'x - b, 0), second-order blocks ||s_1..|| - s_0
// clamped at zero.
struct RowViolation {
  double zero = 0.0;
  double nonneg = 0.0;
  double soc = 0.0;
  double max() const { return std::max({zero, nonneg, soc}); }
};
RowViolation max_violation(const ConicProgram& program,
                           const Eigen::VectorXd& x);

// Deterministic text dump: dimensions, objective, then one row per line with
// cone tag, sparse indices, coefficients, and right-hand side.
std::string dump_program(const ConicProgram& program);

}  // namespace bdcdn
