#include "bdcdn/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace bdcdn {

using json = nlohmann::ordered_json;

namespace detail {

std::string strf(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

}  // namespace detail

using detail::strf;

const char* to_string(Pole pole) {
  switch (pole) {
    case Pole::positive: return "positive";
    case Pole::neutral: return "neutral";
    case Pole::negative: return "negative";
  }
  return "?";
}

const char* to_string(Port port) {
  switch (port) {
    case Port::p: return "p";
    case Port::n: return "n";
    case Port::b: return "b";
  }
  return "?";
}

Port port_from_string(const std::string& s) {
  if (s == "p") return Port::p;
  if (s == "n") return Port::n;
  if (s == "b") return Port::b;
  throw SemanticError(strf("unknown port '%s' (expected p, n or b)", s.c_str()));
}

double& PortPowers::operator[](Port port) {
  switch (port) {
    case Port::p: return p;
    case Port::n: return n;
    case Port::b: return b;
  }
  return p;
}

double PortPowers::operator[](Port port) const {
  return const_cast<PortPowers&>(*this)[port];
}

const VbSpec* NetworkCase::slack_vb() const {
  for (const auto& vb : vbs)
    if (vb.node == slack.node) return &vb;
  return nullptr;
}

PoleTriple pole_injections(const PortPowers& load, const PortPowers& gen) {
  PoleTriple out;
  out.plus = (load.p + load.b) - (gen.p + gen.b);
  out.neutral = (load.n - load.p) - (gen.n - gen.p);
  out.minus = (gen.n + gen.b) - (load.n + load.b);
  return out;
}

PortTriple port_voltages(double u_plus, double u_neutral, double u_minus) {
  PortTriple out;
  out.p = u_plus - u_neutral;
  out.n = u_neutral - u_minus;
  out.b = u_plus - u_minus;
  return out;
}

namespace {

SourcePos pos_from_offset(const std::string& text, std::size_t offset) {
  SourcePos pos{1, 1};
  for (std::size_t k = 0; k < offset && k < text.size(); ++k) {
    if (text[k] == '\n') {
      ++pos.line;
      pos.col = 1;
    } else {
      ++pos.col;
    }
  }
  return pos;
}

double num(const json& j, const char* key) {
  if (!j.contains(key))
    throw ParseError({0, 0}, strf("missing key '%s'", key));
  if (!j.at(key).is_number())
    throw ParseError({0, 0}, strf("key '%s' must be a number", key));
  return j.at(key).get<double>();
}

int integer(const json& j, const char* key) {
  if (!j.contains(key))
    throw ParseError({0, 0}, strf("missing key '%s'", key));
  if (!j.at(key).is_number_integer())
    throw ParseError({0, 0}, strf("key '%s' must be an integer", key));
  return j.at(key).get<int>();
}

const json& arr(const json& j, const char* key) {
  if (!j.contains(key))
    throw ParseError({0, 0}, strf("missing key '%s'", key));
  if (!j.at(key).is_array())
    throw ParseError({0, 0}, strf("key '%s' must be an array", key));
  return j.at(key);
}

}  // namespace

NetworkCase parse_case(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    // nlohmann reports a byte offset; convert to line/column.
    SourcePos pos = pos_from_offset(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ParseError(pos, strf("line %d column %d: %s", pos.line, pos.col,
                               e.what()));
  }
  if (!doc.is_object()) throw ParseError({1, 1}, "top level must be an object");

  NetworkCase c;
  const std::string format = doc.value("format", "");
  if (format != "bdcdn-1")
    throw ParseError({0, 0},
                     strf("unsupported format '%s' (expected \"bdcdn-1\")",
                          format.c_str()));
  c.name = doc.value("name", "");
  c.node_count = integer(doc, "nodes");
  c.per_unit = doc.value("units", "si") == std::string("pu");

  if (!doc.contains("slack") || !doc.at("slack").is_object())
    throw ParseError({0, 0}, "missing object 'slack'");
  const json& sl = doc.at("slack");
  c.slack.node = integer(sl, "node");
  c.slack.u_plus = num(sl, "u_plus");
  c.slack.u_minus = num(sl, "u_minus");

  for (const json& jb : arr(doc, "branches")) {
    Branch b;
    b.from = integer(jb, "from");
    b.to = integer(jb, "to");
    b.resistance = num(jb, "resistance");
    if (!jb.contains("ampacity") || !jb.at("ampacity").is_object())
      throw ParseError({0, 0}, "branch missing object 'ampacity'");
    const json& amp = jb.at("ampacity");
    static const char* pole_keys[3] = {"plus", "neutral", "minus"};
    for (int k = 0; k < 3; ++k) {
      const json& pair = arr(amp, pole_keys[k]);
      if (pair.size() != 2)
        throw ParseError({0, 0}, strf("ampacity '%s' must be [lo, hi]",
                                      pole_keys[k]));
      b.current_bounds[k][0] = pair[0].get<double>();
      b.current_bounds[k][1] = pair[1].get<double>();
    }
    c.branches.push_back(b);
  }

  c.loads.assign(std::max(c.node_count, 0), {});
  for (const json& jl : arr(doc, "loads")) {
    const int node = integer(jl, "node");
    if (node < 0 || node >= c.node_count)
      throw SemanticError(strf("load references unknown node %d", node));
    ZipLoad l;
    if (!jl.contains("port") || !jl.at("port").is_string())
      throw ParseError({0, 0}, "load missing string 'port'");
    l.port = port_from_string(jl.at("port").get<std::string>());
    l.base_power = num(jl, "power");
    const json& zip = arr(jl, "zip");
    if (zip.size() != 3) throw ParseError({0, 0}, "'zip' must be [z, i, p]");
    l.z = zip[0].get<double>();
    l.i = zip[1].get<double>();
    l.p = zip[2].get<double>();
    l.base_voltage = num(jl, "base_voltage");
    c.loads[node].push_back(l);
  }

  if (doc.contains("dgs")) {
    for (const json& jd : doc.at("dgs")) {
      DgSpec d;
      d.node = integer(jd, "node");
      d.port = port_from_string(jd.at("port").get<std::string>());
      const json& bounds = arr(jd, "bounds");
      if (bounds.size() != 2) throw ParseError({0, 0}, "'bounds' must be [lo, hi]");
      d.p_min = bounds[0].get<double>();
      d.p_max = bounds[1].is_null() ? std::numeric_limits<double>::infinity()
                                    : bounds[1].get<double>();
      d.unit_cost = num(jd, "cost");
      c.dgs.push_back(d);
    }
  }

  if (doc.contains("vbs")) {
    for (const json& jv : doc.at("vbs")) {
      VbSpec v;
      v.node = integer(jv, "node");
      if (!jv.contains("capacity") || !jv.at("capacity").is_object())
        throw ParseError({0, 0}, "vb missing object 'capacity'");
      v.cap_p = num(jv.at("capacity"), "p");
      v.cap_n = num(jv.at("capacity"), "n");
      const json& cost = arr(jv, "cost");
      if (cost.size() != 3) throw ParseError({0, 0}, "'cost' must be [a, b, c]");
      v.cost_a = cost[0].get<double>();
      v.cost_b = cost[1].get<double>();
      v.cost_c = cost[2].get<double>();
      const json& sp = arr(jv, "setpoint");
      if (sp.size() != 2) throw ParseError({0, 0}, "'setpoint' must be [u_ps, u_ns]");
      v.u_ps = sp[0].get<double>();
      v.u_ns = sp[1].get<double>();
      c.vbs.push_back(v);
    }
  }

  if (!doc.contains("limits") || !doc.at("limits").is_object())
    throw ParseError({0, 0}, "missing object 'limits'");
  const json& lim = doc.at("limits");
  const json& band = arr(lim, "voltage_band");
  if (band.size() != 2) throw ParseError({0, 0}, "'voltage_band' must be [lo, hi]");
  c.limits.band_lo = band[0].get<double>();
  c.limits.band_hi = band[1].get<double>();
  c.limits.delta = num(lim, "delta");

  if (!doc.contains("bases") || !doc.at("bases").is_object())
    throw ParseError({0, 0}, "missing object 'bases'");
  c.bases.voltage = num(doc.at("bases"), "voltage");
  c.bases.power = num(doc.at("bases"), "power");

  if (doc.contains("profile")) {
    LoadProfile prof;
    for (const json& row : doc.at("profile")) {
      if (!row.is_array() || row.size() != 3)
        throw ParseError({0, 0}, "profile rows must be [p, n, b]");
      prof.mult.push_back({row[0].get<double>(), row[1].get<double>(),
                           row[2].get<double>()});
    }
    c.profile = std::move(prof);
  }

  auto diagnostics = validate(c);
  if (!diagnostics.empty()) {
    std::ostringstream msg;
    for (std::size_t k = 0; k < diagnostics.size(); ++k)
      msg << (k ? "; " : "") << diagnostics[k];
    throw SemanticError(msg.str());
  }
  return c;
}

std::string serialize_case(const NetworkCase& c) {
  json doc;
  doc["format"] = "bdcdn-1";
  doc["name"] = c.name;
  doc["units"] = c.per_unit ? "pu" : "si";
  doc["nodes"] = c.node_count;
  doc["slack"] = {{"node", c.slack.node},
                  {"u_plus", c.slack.u_plus},
                  {"u_minus", c.slack.u_minus}};
  json branches = json::array();
  static const char* pole_keys[3] = {"plus", "neutral", "minus"};
  for (const auto& b : c.branches) {
    json amp;
    for (int k = 0; k < 3; ++k)
      amp[pole_keys[k]] = {b.current_bounds[k][0], b.current_bounds[k][1]};
    branches.push_back({{"from", b.from},
                        {"to", b.to},
                        {"resistance", b.resistance},
                        {"ampacity", amp}});
  }
  doc["branches"] = std::move(branches);
  json loads = json::array();
  for (int node = 0; node < c.node_count; ++node) {
    for (const auto& l : c.loads[node]) {
      loads.push_back({{"node", node},
                       {"port", to_string(l.port)},
                       {"power", l.base_power},
                       {"zip", {l.z, l.i, l.p}},
                       {"base_voltage", l.base_voltage}});
    }
  }
  doc["loads"] = std::move(loads);
  json dgs = json::array();
  for (const auto& d : c.dgs) {
    json bounds = json::array();
    bounds.push_back(d.p_min);
    if (std::isinf(d.p_max))
      bounds.push_back(nullptr);
    else
      bounds.push_back(d.p_max);
    dgs.push_back({{"node", d.node},
                   {"port", to_string(d.port)},
                   {"bounds", bounds},
                   {"cost", d.unit_cost}});
  }
  doc["dgs"] = std::move(dgs);
  json vbs = json::array();
  for (const auto& v : c.vbs) {
    vbs.push_back({{"node", v.node},
                   {"capacity", {{"p", v.cap_p}, {"n", v.cap_n}}},
                   {"cost", {v.cost_a, v.cost_b, v.cost_c}},
                   {"setpoint", {v.u_ps, v.u_ns}}});
  }
  doc["vbs"] = std::move(vbs);
  doc["limits"] = {{"voltage_band", {c.limits.band_lo, c.limits.band_hi}},
                   {"delta", c.limits.delta}};
  doc["bases"] = {{"voltage", c.bases.voltage}, {"power", c.bases.power}};
  if (c.profile) {
    json prof = json::array();
    for (const auto& row : c.profile->mult)
      prof.push_back({row[0], row[1], row[2]});
    doc["profile"] = std::move(prof);
  }
  return doc.dump(2) + "\n";
}

std::vector<std::string> validate(const NetworkCase& c) {
  std::vector<std::string> out;
  auto fail = [&out](std::string msg) { out.push_back(std::move(msg)); };

  if (c.node_count < 1) fail("node count must be at least 1");
  if (c.slack.node != 0) fail(strf("slack node must be 0, got %d", c.slack.node));
  if (c.slack.u_plus <= 0.0)
    fail(strf("slack u_plus must be positive, got %g", c.slack.u_plus));
  if (std::abs(c.slack.u_plus + c.slack.u_minus) >
      1e-9 * std::max(1.0, std::abs(c.slack.u_plus)))
    fail(strf("asymmetric slack reference: u_plus %g, u_minus %g",
              c.slack.u_plus, c.slack.u_minus));

  for (std::size_t k = 0; k < c.branches.size(); ++k) {
    const Branch& b = c.branches[k];
    if (b.from < 0 || b.from >= c.node_count)
      fail(strf("branch %zu references unknown node %d", k, b.from));
    if (b.to < 0 || b.to >= c.node_count)
      fail(strf("branch %zu references unknown node %d", k, b.to));
    if (b.from == b.to) fail(strf("branch %zu is a self-loop", k));
    if (!(b.resistance > 0.0))
      fail(strf("branch %zu: resistance must be positive, got %g", k,
                b.resistance));
    for (int pole = 0; pole < 3; ++pole)
      if (b.current_bounds[pole][0] > b.current_bounds[pole][1])
        fail(strf("branch %zu: inverted %s ampacity bounds", k,
                  to_string(static_cast<Pole>(pole))));
  }

  // Radial tree: exactly n-1 branches and connected.
  if (static_cast<int>(c.branches.size()) != c.node_count - 1) {
    fail(strf("graph not radial: %zu branches for %d nodes",
              c.branches.size(), c.node_count));
  }
  {
    std::vector<std::vector<int>> adj(std::max(c.node_count, 1));
    bool endpoints_ok = true;
    for (const auto& b : c.branches) {
      if (b.from < 0 || b.from >= c.node_count || b.to < 0 ||
          b.to >= c.node_count) {
        endpoints_ok = false;
        continue;
      }
      adj[b.from].push_back(b.to);
      adj[b.to].push_back(b.from);
    }
    if (endpoints_ok && c.node_count >= 1) {
      std::vector<char> seen(c.node_count, 0);
      std::vector<int> stack{0};
      seen[0] = 1;
      while (!stack.empty()) {
        int u = stack.back();
        stack.pop_back();
        for (int v : adj[u])
          if (!seen[v]) {
            seen[v] = 1;
            stack.push_back(v);
          }
      }
      if (std::count(seen.begin(), seen.end(), 1) != c.node_count)
        fail("graph not connected");
    }
  }

  if (static_cast<int>(c.loads.size()) != c.node_count)
    fail("loads container size does not match node count");
  for (int node = 0; node < std::min<int>(c.node_count, c.loads.size());
       ++node) {
    for (const auto& l : c.loads[node]) {
      const double sum = l.z + l.i + l.p;
      if (std::abs(sum - 1.0) > 1e-9)
        fail(strf("node %d port %s: ZIP coefficients sum %g", node,
                  to_string(l.port), sum));
      if (l.base_power < 0.0)
        fail(strf("node %d port %s: negative base power", node,
                  to_string(l.port)));
      if (!(l.base_voltage > 0.0))
        fail(strf("node %d port %s: base voltage must be positive", node,
                  to_string(l.port)));
    }
  }

  for (const auto& d : c.dgs) {
    if (d.node < 0 || d.node >= c.node_count)
      fail(strf("dg references unknown node %d", d.node));
    if (!(0.0 <= d.p_min && d.p_min <= d.p_max))
      fail(strf("dg at node %d: invalid bounds [%g, %g]", d.node, d.p_min,
                d.p_max));
  }
  for (const auto& v : c.vbs) {
    if (v.node < 0 || v.node >= c.node_count)
      fail(strf("vb references unknown node %d", v.node));
    if (v.cap_p < 0.0 || v.cap_n < 0.0)
      fail(strf("vb at node %d: negative capacity", v.node));
    if (v.cost_a < 0.0)
      fail(strf("vb at node %d: quadratic cost coefficient must be >= 0",
                v.node));
  }

  if (!(0.0 < c.limits.band_lo && c.limits.band_lo <= c.limits.band_hi))
    fail("invalid voltage band");
  if (!(0.0 < c.limits.delta && c.limits.delta < 1.0))
    fail(strf("unbalance limit delta must be in (0, 1), got %g",
              c.limits.delta));
  if (!(c.bases.voltage > 0.0) || !(c.bases.power > 0.0))
    fail("per-unit bases must be positive");

  if (c.profile) {
    if (c.profile->steps() < 1) fail("profile must have at least one step");
    for (int t = 0; t < c.profile->steps(); ++t)
      for (int k = 0; k < 3; ++k)
        if (!(c.profile->mult[t][k] > 0.0))
          fail(strf("profile step %d: multiplier for port %s must be positive",
                    t + 1, to_string(static_cast<Port>(k))));
  }
  return out;
}

namespace {

NetworkCase scale_case(const NetworkCase& c, bool to_pu) {
  if (!(c.bases.voltage > 0.0) || !(c.bases.power > 0.0))
    throw SemanticError("per-unit bases must be positive");
  const double vb = c.bases.voltage;
  const double sb = c.bases.power;
  const double zb = vb * vb / sb;
  const double ib = sb / vb;
  const double v = to_pu ? 1.0 / vb : vb;
  const double s = to_pu ? 1.0 / sb : sb;
  const double z = to_pu ? 1.0 / zb : zb;
  const double i = to_pu ? 1.0 / ib : ib;

  NetworkCase out = c;
  out.per_unit = to_pu;
  out.slack.u_plus *= v;
  out.slack.u_minus *= v;
  for (auto& b : out.branches) {
    b.resistance *= z;
    for (auto& pair : b.current_bounds) {
      pair[0] *= i;
      pair[1] *= i;
    }
  }
  for (auto& node_loads : out.loads)
    for (auto& l : node_loads) {
      l.base_power *= s;
      l.base_voltage *= v;
    }
  for (auto& d : out.dgs) {
    d.p_min *= s;
    if (!std::isinf(d.p_max)) d.p_max *= s;
  }
  for (auto& vbspec : out.vbs) {
    vbspec.cap_p *= s;
    vbspec.cap_n *= s;
    vbspec.u_ps *= v;
    vbspec.u_ns *= v;
  }
  // Dimensionless data (ZIP coefficients, band fractions, delta, profile
  // multipliers, $ prices) passes through untouched.
  return out;
}

}  // namespace

NetworkCase to_per_unit(const NetworkCase& c) {
  if (c.per_unit) return c;
  return scale_case(c, true);
}

NetworkCase from_per_unit(const NetworkCase& c) {
  if (!c.per_unit) return c;
  return scale_case(c, false);
}

NetworkCase at_time(const NetworkCase& c, const LoadProfile& profile, int t) {
  if (t < 1 || t > profile.steps())
    throw std::out_of_range(strf("profile step %d out of range [1, %d]", t,
                                 profile.steps()));
  NetworkCase out = c;
  const auto& mult = profile.mult[t - 1];
  for (auto& node_loads : out.loads)
    for (auto& l : node_loads)
      l.base_power *= mult[static_cast<int>(l.port)];
  return out;
}

LoadProfile parse_profile(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line))
    throw ParseError({1, 1}, "empty profile file");
  // Tolerate trailing carriage returns from CRLF files.
  auto strip = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    return s;
  };
  if (strip(line) != "t,p,n,b")
    throw ParseError({1, 1},
                     strf("profile header must be 't,p,n,b', got '%s'",
                          strip(line).c_str()));
  LoadProfile prof;
  int lineno = 1;
  int expected_t = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty()) continue;
    int t = 0;
    double p = 0, n = 0, b = 0;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &t, &p, &n, &b) != 4)
      throw ParseError({lineno, 1},
                       strf("line %d: expected 't,p,n,b' row", lineno));
    if (t != expected_t)
      throw ParseError({lineno, 1},
                       strf("line %d: timestep %d out of order (expected %d)",
                            lineno, t, expected_t));
    if (!(p > 0.0 && n > 0.0 && b > 0.0))
      throw SemanticError(strf("profile step %d: multipliers must be positive", t));
    prof.mult.push_back({p, n, b});
    ++expected_t;
  }
  if (prof.steps() < 1) throw SemanticError("profile must have at least one step");
  return prof;
}

std::string serialize_profile(const LoadProfile& profile) {
  std::ostringstream out;
  out << "t,p,n,b\n";
  for (int t = 0; t < profile.steps(); ++t)
    out << strf("%d,%.17g,%.17g,%.17g\n", t + 1, profile.mult[t][0],
                profile.mult[t][1], profile.mult[t][2]);
  return out.str();
}

std::string data_dir() {
  if (const char* env = std::getenv("BDCDN_DATA_DIR"); env && *env)
    return env;
#ifdef BDCDN_DATA_DIR
  return BDCDN_DATA_DIR;
#else
  return "data";
#endif
}

}  // namespace bdcdn
