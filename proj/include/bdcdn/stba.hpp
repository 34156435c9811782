// Sequential bound-tightening optimal power flow: solves the multi-cone
// relaxation, measures the relaxation error, shrinks the product boxes
// around the iterate, and repeats until the error falls below tolerance.
// Converged points are recovered to a physical state and certified against
// the nonconvex oracle.
#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bdcdn/conesolve.hpp"
#include "bdcdn/netmodel.hpp"
#include "bdcdn/pf_oracle.hpp"
#include "bdcdn/relaxbuild.hpp"

namespace bdcdn {

struct StbaSettings {
  double epsilon = 1e-6;  // relaxation-error tolerance
  double step = 0.02;     // box half-width shrinks as step^k around iterates
  int max_outer = 20;
  SolverSettings solver;  // conic backend settings
  // warm-start each outer round (and horizon timestep) from the previous
  // solution; final answers are pinned by refinement either way
  bool warm_start = true;
  InjectionModel certify_model = InjectionModel::pole_power;

  StbaSettings() {
    // feeder-class programs need a long dual tail at 1e-9 tolerances
    solver.max_iterations = 400000;
  }
};

struct StbaIterate {
  int k = 0;
  double lambda = 0.0;
  double bound_width = 0.0;  // sum of voltage and current box widths
  double objective = 0.0;
  SolveStatus status = SolveStatus::optimal;
  int solver_iterations = 0;
  double wall_seconds = 0.0;
};

struct StbaTrace {
  std::vector<StbaIterate> iterates;
  bool clamped = false;  // some tightened box degenerated to the 1e-12 floor
};

struct ExactnessMetrics {
  double soc_gap = 0.0;      // max |P^2 - W| / max(W, 1e-12)
  double mccormick_w = 0.0;  // max |W - L V_send| / W
  double mccormick_v = 0.0;  // max |v - V+ V-| / v
  double rank1_gap = 0.0;    // max |P^2 - V_send L| / max(V_send L, 1e-12)
  double taylor_mu = 0.0;    // sqrt-expansion remainder, 0 on pure-CPL cases
};

// Physical state reconstructed from a relaxed point: pole voltages from
// square roots, branch currents from the flow direction (or Ohm's law where
// the direction is ambiguous), neutral completed by one oracle solve with
// the dispatch held fixed.
struct Recovery {
  PfSolution state;
  std::vector<int> ohm_signed_branches;
  bool reverse_flow = false;
};

struct OpfSolution {
  ConicProgram program;  // final program, reusable for re-solves and export
  SolveResult relaxed;
  double objective = 0.0;  // program objective plus constant cost terms
  double lambda = 0.0;
  ExactnessMetrics exactness;
  Dispatch dispatch;
  std::optional<Recovery> recovery;
  OriResiduals residuals;  // of the recovered state, when recovery succeeded
  bool converged = false;  // lambda <= epsilon
  bool certified = false;  // converged and oracle residuals within 1e-4
  double lower_bound = 0.0;       // first-round relaxation objective
  double oracle_objective = 0.0;  // dispatch cost evaluated on the recovery
  std::vector<std::string> warnings;
};

struct StbaResult {
  OpfSolution solution;
  StbaTrace trace;
};

struct HorizonStep {
  int t = 0;
  bool ok = false;
  std::string error;
  OpfSolution solution;
  StbaTrace trace;
};

struct HorizonResult {
  std::vector<HorizonStep> steps;
  double total_objective = 0.0;              // over successful steps
  std::array<double, 3> max_deviation{};     // per conductor vs +1 / 0 / -1
  double max_vuf = 0.0;
  int failures = 0;
};

class StbaError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Relaxation declared infeasible; carries the constraint family holding the
// largest share of the infeasibility certificate.
class InfeasibleError : public StbaError {
 public:
  InfeasibleError(const std::string& what, std::string family)
      : StbaError(what), family_(std::move(family)) {}
  const std::string& binding_family() const { return family_; }

 private:
  std::string family_;
};

// Max normalized product gap max(|W - L V_send| / W, |v - V+ V-| / v) over
// branches and nodes. Gaps below 1e-8 count as zero (covers the no-flow
// W = L = 0 corner); beyond that a nonpositive denominator throws
// std::domain_error.
double relaxation_error(const Eigen::VectorXd& x, const VarMap& vars,
                        const NetworkCase& snapshot);

// One tightening round: boxes (1 +- step^k) x iterate, floored at half-width
// 1e-5, intersected with both the current and the initial envelope (so
// widths never grow). An empty intersection collapses to a 1e-12-wide box
// around the clamped iterate and sets *clamped.
BoundsSet tighten(const BoundsSet& bounds, const Eigen::VectorXd& x,
                  const VarMap& vars, double step, int k,
                  bool* clamped = nullptr);

// Relaxation-frame image of a physical state: V = U^2, L = I^2, W = L V_send,
// v = V+ V-, P = U_send I per outer pole; dispatch-side variables are zero.
Eigen::VectorXd lift_state(const NetworkCase& snapshot, const PfSolution& sol,
                           const VarMap& vars);

// Generator and balancer injections encoded in a relaxed point, keyed per
// node and port. Slack-node balancers are omitted (the slack floats).
Dispatch extract_dispatch(const Eigen::VectorXd& x, const VarMap& vars,
                          const NetworkCase& snapshot);

Recovery recover(const Eigen::VectorXd& x, const VarMap& vars,
                 const NetworkCase& snapshot, const Dispatch& dispatch,
                 InjectionModel model = InjectionModel::pole_power);

ExactnessMetrics exactness(const Eigen::VectorXd& x, const VarMap& vars,
                           const NetworkCase& snapshot);

// Objective of a concrete dispatch evaluated on an oracle state with the
// same prices the relaxation uses (generation, outer-pole loss, balancer).
double dispatch_objective(const NetworkCase& snapshot, const ObjectiveSpec& obj,
                          const Dispatch& dispatch, const PfSolution& pf);

StbaResult run(const NetworkCase& snapshot, const ObjectiveSpec& obj,
               const StbaSettings& settings = {});

// Independent per-timestep solves (the horizon objective has no coupling
// terms); a failed timestep is reported in place and the rest still solve.
HorizonResult solve_horizon(const NetworkCase& c, const LoadProfile& profile,
                            const ObjectiveSpec& obj,
                            const StbaSettings& settings = {});

}  // namespace bdcdn
