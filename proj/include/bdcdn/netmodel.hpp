#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Data model for bipolar DC distribution networks: three conductors
// (positive, neutral, negative), loads and sources attached across the
// three possible ports (p: +~o, n: o~-, b: +~-).

namespace bdcdn {

enum class Pole : int { positive = 0, neutral = 1, negative = 2 };
enum class Port : int { p = 0, n = 1, b = 2 };

inline constexpr std::array<Pole, 3> kPoles{Pole::positive, Pole::neutral,
                                            Pole::negative};
inline constexpr std::array<Port, 3> kPorts{Port::p, Port::n, Port::b};

const char* to_string(Pole pole);
const char* to_string(Port port);
Port port_from_string(const std::string& s);

// Static load: constant-impedance (z) / constant-current (i) /
// constant-power (p) mix, coefficients summing to one.
struct ZipLoad {
  Port port = Port::p;
  double base_power = 0.0;    // W, or pu when the case is per-unit
  double z = 0.0;
  double i = 0.0;
  double p = 1.0;
  double base_voltage = 0.0;  // V across the port at nominal conditions

  // Load power drawn at port voltage u (same units as base_voltage).
  double power_at(double u) const {
    const double r = u / base_voltage;
    return base_power * (z * r * r + i * r + p);
  }
  // d(power)/du at port voltage u.
  double dpower_at(double u) const {
    return base_power * (2.0 * z * u / (base_voltage * base_voltage) +
                         i / base_voltage);
  }
};

struct Branch {
  int from = 0;
  int to = 0;
  double resistance = 0.0;  // ohm per conductor, identical for +, o, -
  // [pole][0] = lower, [pole][1] = upper current bound, amperes.
  std::array<std::array<double, 2>, 3> current_bounds{};
};

struct DgSpec {
  int node = 0;
  Port port = Port::p;
  double p_min = 0.0;  // W
  double p_max = 0.0;  // W; may be +inf for sizing candidates
  double unit_cost = 0.0;  // $/kW
};

// Voltage balancer. At the slack node it is the symmetric source fixing the
// pole references; elsewhere it is a pair of dispatchable p/n injections.
// Either way its per-port power is capacity-bounded and quadratically costed.
struct VbSpec {
  int node = 0;
  double cap_p = 0.0;  // W per port
  double cap_n = 0.0;
  double cost_a = 0.0;  // $/kW^2 h
  double cost_b = 0.0;  // $/kWh
  double cost_c = 0.0;  // $
  double u_ps = 0.0;    // output voltage of the p side, V
  double u_ns = 0.0;    // output voltage of the n side, V
};

struct SlackSpec {
  int node = 0;
  double u_plus = 0.0;   // V, > 0
  double u_minus = 0.0;  // V, < 0; reference requires u_minus = -u_plus
};

struct Limits {
  double band_lo = 0.95;  // fraction of nominal pole voltage
  double band_hi = 1.05;
  double delta = 0.03;    // voltage unbalance limit
};

struct Bases {
  double voltage = 0.0;  // V, pole-to-neutral nominal
  double power = 0.0;    // W, case rating
};

// Per-timestep multiplicative load scaling, one multiplier per port.
struct LoadProfile {
  std::vector<std::array<double, 3>> mult;  // [t][port]
  int steps() const { return static_cast<int>(mult.size()); }
};

struct NetworkCase {
  std::string name;
  int node_count = 0;
  SlackSpec slack;
  std::vector<Branch> branches;
  std::vector<std::vector<ZipLoad>> loads;  // indexed by node
  std::vector<DgSpec> dgs;
  std::vector<VbSpec> vbs;
  Limits limits;
  Bases bases;
  bool per_unit = false;
  std::optional<LoadProfile> profile;

  const VbSpec* slack_vb() const;
};

struct SourcePos {
  int line = 0;
  int col = 0;
};

// Malformed case text (bad JSON, wrong types, missing keys).
class ParseError : public std::runtime_error {
 public:
  ParseError(SourcePos pos, const std::string& what)
      : std::runtime_error(what), pos_(pos) {}
  SourcePos pos() const { return pos_; }

 private:
  SourcePos pos_;
};

// Well-formed text describing an invalid network.
class SemanticError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

NetworkCase parse_case(const std::string& text);
std::string serialize_case(const NetworkCase& c);

// Empty iff every NetworkCase invariant holds; otherwise one diagnostic per
// violation, naming the location.
std::vector<std::string> validate(const NetworkCase& c);

NetworkCase to_per_unit(const NetworkCase& c);
NetworkCase from_per_unit(const NetworkCase& c);

struct PortPowers {
  double p = 0.0;
  double n = 0.0;
  double b = 0.0;
  double& operator[](Port port);
  double operator[](Port port) const;
};

struct PoleTriple {
  double plus = 0.0;
  double neutral = 0.0;
  double minus = 0.0;
};

// Net load power seen by each conductor given per-port load and generation:
//   plus    = (L.p + L.b) - (G.p + G.b)
//   neutral = (L.n - L.p) - (G.n - G.p)
//   minus   = (G.n + G.b) - (L.n + L.b)
PoleTriple pole_injections(const PortPowers& load, const PortPowers& gen);

struct PortTriple {
  double p = 0.0;
  double n = 0.0;
  double b = 0.0;
};

// Port voltages from pole voltages: U_p = U+ - Uo, U_n = Uo - U-,
// U_b = U+ - U-; U_b = U_p + U_n holds exactly.
PortTriple port_voltages(double u_plus, double u_neutral, double u_minus);

// Bundled cases: "feeder5" (5-node feeder, slack balancer, constant-power
// loads) and "ieee33_bipolar" (33-node feeder, resistances loaded from the
// data directory). Both carry a 24-step profile.
NetworkCase builtin_case(const std::string& name);

// Multiplies every load's base power by the profile entry for its port at
// timestep t (1-based). Throws std::out_of_range for t outside [1, T].
NetworkCase at_time(const NetworkCase& c, const LoadProfile& profile, int t);

LoadProfile parse_profile(const std::string& csv_text);
std::string serialize_profile(const LoadProfile& profile);

// Directory holding bundled data files (ieee33 resistances, profiles).
// Compiled-in default, overridable with the BDCDN_DATA_DIR environment
// variable.
std::string data_dir();

namespace detail {
std::string strf(const char* fmt, ...);
}

}  // namespace bdcdn
