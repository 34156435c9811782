#pragma once

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdcdn/netmodel.hpp"

// Newton-Raphson power flow on the three-conductor network, used as the
// nonconvex ground truth against which relaxed optima are certified.

namespace bdcdn {

// How port powers are charged to conductors when forming nodal balances.
//   physical:   each port's current is injected at both of its terminals
//               (circuit-exact Kirchhoff balance).
//   pole_power: the +/- conductors each absorb the full power of every port
//               they touch (b-port power counted on both), matching the
//               net-load aggregation the convex model optimizes; the neutral
//               row stays a current balance. Both pole magnitudes sag under
//               load, mirroring each other.
//   pole_power_mirrored: pole_power with load and generation roles swapped
//               on the negative-pole row, so the pole magnitudes diverge
//               under load. Comparison-only variant for cross-checking
//               externally reported unbalance profiles; not used for
//               certification.
enum class InjectionModel { physical, pole_power, pole_power_mirrored };

struct PfSettings {
  double tolerance = 1e-8;  // max nodal current mismatch, pu
  int max_iterations = 50;
  InjectionModel model = InjectionModel::physical;
};

// Source dispatch. `gen` is the net generation per node and port (same units
// as the snapshot) covering DGs and non-slack balancers; the slack node
// floats. `dg` optionally carries the per-unit-of-`dg_bounds` breakdown used
// for capacity-bound residuals.
struct Dispatch {
  std::vector<PortPowers> gen;
  std::vector<double> dg;
  std::vector<DgSpec> dg_bounds;
};

struct PfSolution {
  Eigen::MatrixX3d voltage;        // node x (U+, Uo, U-)
  Eigen::MatrixX3d branch_current; // branch x conductor, sending direction
  Eigen::MatrixX3d branch_power;   // branch x conductor, sending end
  int iterations = 0;
  double max_mismatch = 0.0;       // final nodal current mismatch, pu
  bool per_unit = false;
};

class PfError : public std::runtime_error {
 public:
  PfError(const std::string& what, double last_mismatch, int iterations)
      : std::runtime_error(what),
        last_mismatch_(last_mismatch),
        iterations_(iterations) {}
  double last_mismatch() const { return last_mismatch_; }
  int iterations() const { return iterations_; }

 private:
  double last_mismatch_;
  int iterations_;
};

PfSolution solve_pf(const NetworkCase& snapshot,
                    const Dispatch* dispatch = nullptr,
                    const PfSettings& settings = {});

// Voltage unbalance |U_p - U_n| / (0.5 (U_p + U_n)) at a node.
double vuf(const PfSolution& sol, int node);

// Pole-referenced unbalance |U+ + U-| / (0.5 (U+ - U-)): magnitude spread of
// the outer poles, ignoring the neutral shift. Reported alongside vuf().
double pole_unbalance(const PfSolution& sol, int node);

// Total conductor loss, same units as the solution.
double network_loss(const NetworkCase& snapshot, const PfSolution& sol);

// Max absolute violation (pu) of each constraint family of the original
// nonconvex model, evaluated on a candidate state under the given injection
// model.
struct OriResiduals {
  double ohm = 0.0;            // U_i - U_j = r I
  double branch_power = 0.0;   // P = U_send I
  double balance = 0.0;        // nodal balance per conductor
  double injection_map = 0.0;  // port->pole net-load map (double evaluation)
  double zip = 0.0;            // load power vs ZIP law at solved voltage
  double port_transform = 0.0; // port voltages vs pole differences
  double voltage_band = 0.0;
  double ampacity = 0.0;
  double vuf = 0.0;            // excess over the unbalance limit
  double dg_bounds = 0.0;

  double max_violation() const;
};

OriResiduals ori_residuals(const NetworkCase& snapshot, const PfSolution& cand,
                           const Dispatch* dispatch = nullptr,
                           InjectionModel model = InjectionModel::physical);

namespace pf_detail {

// Mismatch vector and analytic Jacobian over the stacked non-slack state
// [U+, Uo, U-] per node; exposed for finite-difference validation.
Eigen::VectorXd residual(const NetworkCase& pu_snapshot,
                         const Dispatch* dispatch, InjectionModel model,
                         const Eigen::VectorXd& state);
Eigen::MatrixXd jacobian(const NetworkCase& pu_snapshot,
                         const Dispatch* dispatch, InjectionModel model,
                         const Eigen::VectorXd& state);
Eigen::VectorXd flat_state(const NetworkCase& pu_snapshot);

}  // namespace pf_detail

}  // namespace bdcdn
