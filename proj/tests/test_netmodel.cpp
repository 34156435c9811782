#include <doctest.h>

#include <cmath>
#include <string>

#include "bdcdn/netmodel.hpp"

using namespace bdcdn;

TEST_CASE("port voltages transform") {
  auto pv = port_voltages(400, 0, -400);
  CHECK(pv.p == 400.0);
  CHECK(pv.n == 400.0);
  CHECK(pv.b == 800.0);

  pv = port_voltages(404, 0, -396);
  CHECK(pv.p == 404.0);
  CHECK(pv.n == 396.0);
  CHECK(pv.b == 800.0);

  pv = port_voltages(1, 1, 1);
  CHECK(pv.p == 0.0);
  CHECK(pv.n == 0.0);
  CHECK(pv.b == 0.0);

  // U_b = U_p + U_n exactly for arbitrary triples.
  for (double up : {393.7, 401.2})
    for (double uo : {-2.5, 0.0, 3.1})
      for (double um : {-405.9, -396.4}) {
        auto v = port_voltages(up, uo, um);
        CHECK(v.b == v.p + v.n);
      }
}

TEST_CASE("pole injections") {
  PortPowers load{500, 1000, 1200};
  PortPowers none{};
  auto inj = pole_injections(load, none);
  CHECK(inj.plus == doctest::Approx(1700).epsilon(1e-12));
  CHECK(inj.neutral == doctest::Approx(500).epsilon(1e-12));
  CHECK(inj.minus == doctest::Approx(-2200).epsilon(1e-12));

  auto zero = pole_injections(none, none);
  CHECK(zero.plus == 0.0);
  CHECK(zero.neutral == 0.0);
  CHECK(zero.minus == 0.0);

  // Symmetric p = n with matching generation cancels the neutral row.
  PortPowers sym_load{800, 800, 50};
  PortPowers sym_gen{30, 30, 0};
  CHECK(pole_injections(sym_load, sym_gen).neutral == 0.0);
}

TEST_CASE("pole injections literal re-evaluation") {
  PortPowers l{123.5, 77.25, 19.0};
  PortPowers g{10.0, 44.0, 3.5};
  auto inj = pole_injections(l, g);
  CHECK(inj.plus == (l.p + l.b) - (g.p + g.b));
  CHECK(inj.neutral == (l.n - l.p) - (g.n - g.p));
  CHECK(inj.minus == (g.n + g.b) - (l.n + l.b));
}

TEST_CASE("builtin feeder5 shape") {
  NetworkCase c = builtin_case("feeder5");
  CHECK(c.node_count == 5);
  CHECK(c.branches.size() == 4);
  for (const auto& b : c.branches) CHECK(b.resistance == 0.1);
  CHECK(c.limits.delta == 0.03);
  CHECK(c.limits.band_lo == 0.95);
  CHECK(c.limits.band_hi == 1.05);
  CHECK(c.slack.u_plus == 400.0);
  CHECK(c.slack.u_minus == -400.0);

  const double p[4] = {500, 1000, 800, 900};
  const double n[4] = {1000, 600, 700, 400};
  const double b[4] = {1200, 1500, 1200, 1000};
  for (int node = 1; node <= 4; ++node) {
    REQUIRE(c.loads[node].size() == 3);
    CHECK(c.loads[node][0].base_power == p[node - 1]);
    CHECK(c.loads[node][1].base_power == n[node - 1]);
    CHECK(c.loads[node][2].base_power == b[node - 1]);
    for (const auto& l : c.loads[node]) {
      CHECK(l.z == 0.0);
      CHECK(l.i == 0.0);
      CHECK(l.p == 1.0);
    }
  }
  REQUIRE(c.vbs.size() == 1);
  CHECK(c.vbs[0].node == 0);
  CHECK(c.vbs[0].cap_p == 1000.0);
  CHECK(validate(c).empty());
  REQUIRE(c.profile.has_value());
  CHECK(c.profile->steps() == 24);
  // Peak hour carries the heavy-unbalance multipliers.
  CHECK(c.profile->mult[14][0] == 6.0);
  CHECK(c.profile->mult[14][1] == 2.6);
  CHECK(c.profile->mult[14][2] == 3.5);
}

TEST_CASE("builtin ieee33 shape") {
  NetworkCase c = builtin_case("ieee33_bipolar");
  CHECK(c.node_count == 33);
  CHECK(c.branches.size() == 32);
  CHECK(c.branches[0].resistance == doctest::Approx(0.0922));
  CHECK(c.slack.u_plus == 3000.0);
  REQUIRE(c.dgs.size() == 2);
  CHECK(c.dgs[0].node == 22);
  CHECK(c.dgs[0].p_max == 500e3);
  REQUIRE(c.vbs.size() == 3);
  CHECK(c.vbs[0].node == 1);
  CHECK(c.vbs[1].node == 14);
  CHECK(c.vbs[2].node == 31);
  CHECK(validate(c).empty());
  REQUIRE(c.profile.has_value());
  CHECK(c.profile->steps() == 24);
  // Positive-port load runs 20% above negative.
  for (int node = 1; node < 33; ++node) {
    REQUIRE(c.loads[node].size() == 2);
    CHECK(c.loads[node][0].base_power ==
          doctest::Approx(1.2 * c.loads[node][1].base_power).epsilon(1e-12));
  }
}

TEST_CASE("builtin unknown name") {
  CHECK_THROWS_AS(builtin_case("feeder6"), SemanticError);
}

TEST_CASE("per-unit round trip") {
  for (const char* name : {"feeder5", "ieee33_bipolar"}) {
    NetworkCase c = builtin_case(name);
    NetworkCase pu = to_per_unit(c);
    CHECK(pu.slack.u_plus == doctest::Approx(1.0).epsilon(1e-15));
    NetworkCase back = from_per_unit(pu);
    CHECK(back.slack.u_plus ==
          doctest::Approx(c.slack.u_plus).epsilon(1e-12));
    for (std::size_t k = 0; k < c.branches.size(); ++k)
      CHECK(back.branches[k].resistance ==
            doctest::Approx(c.branches[k].resistance).epsilon(1e-12));
    for (int node = 0; node < c.node_count; ++node)
      for (std::size_t k = 0; k < c.loads[node].size(); ++k) {
        CHECK(back.loads[node][k].base_power ==
              doctest::Approx(c.loads[node][k].base_power).epsilon(1e-12));
        // Dimensionless quantities survive bit-exactly.
        CHECK(pu.loads[node][k].z == c.loads[node][k].z);
        CHECK(pu.loads[node][k].i == c.loads[node][k].i);
        CHECK(pu.loads[node][k].p == c.loads[node][k].p);
      }
    CHECK(pu.limits.delta == c.limits.delta);
    CHECK(pu.limits.band_lo == c.limits.band_lo);
    if (c.profile)
      for (int t = 0; t < c.profile->steps(); ++t)
        for (int k = 0; k < 3; ++k)
          CHECK(pu.profile->mult[t][k] == c.profile->mult[t][k]);
  }
}

TEST_CASE("per-unit resistance example") {
  NetworkCase c = builtin_case("feeder5");
  NetworkCase pu = to_per_unit(c);
  // 0.1 ohm against Z_base = 400^2 / 10000 = 16 ohm.
  CHECK(pu.branches[0].resistance == doctest::Approx(0.00625).epsilon(1e-12));
}

TEST_CASE("case serialization round trip") {
  for (const char* name : {"feeder5", "ieee33_bipolar"}) {
    NetworkCase c = builtin_case(name);
    const std::string text = serialize_case(c);
    NetworkCase parsed = parse_case(text);
    CHECK(serialize_case(parsed) == text);
    CHECK(validate(parsed).empty());
    CHECK(parsed.node_count == c.node_count);
    CHECK(parsed.branches.size() == c.branches.size());
  }
}

TEST_CASE("parse rejects bad ZIP sum") {
  NetworkCase c = builtin_case("feeder5");
  c.loads[1][0].z = 0.5;
  c.loads[1][0].i = 0.5;
  c.loads[1][0].p = 0.2;
  const std::string text = serialize_case(c);
  try {
    parse_case(text);
    FAIL("expected SemanticError");
  } catch (const SemanticError& e) {
    CHECK(std::string(e.what()).find("ZIP coefficients sum 1.2") !=
          std::string::npos);
  }
}

TEST_CASE("parse rejects unknown node") {
  NetworkCase c = builtin_case("feeder5");
  c.branches[2].to = 99;
  const std::string text = serialize_case(c);
  try {
    parse_case(text);
    FAIL("expected SemanticError");
  } catch (const SemanticError& e) {
    CHECK(std::string(e.what()).find("unknown node") != std::string::npos);
  }
}

TEST_CASE("parse reports syntax position") {
  try {
    parse_case("{\n  \"format\": \"bdcdn-1\",\n  broken\n}");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.pos().line == 3);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("validate flags asymmetric slack") {
  NetworkCase c = builtin_case("feeder5");
  c.slack.u_minus = -390.0;
  auto diags = validate(c);
  REQUIRE(!diags.empty());
  bool found = false;
  for (const auto& d : diags)
    if (d.find("asymmetric slack reference") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("validate flags disconnected graph") {
  NetworkCase c = builtin_case("feeder5");
  // Reroute branch 3-4 into a 2-3 parallel edge: node 4 becomes unreachable.
  c.branches[3].from = 2;
  c.branches[3].to = 3;
  auto diags = validate(c);
  bool found = false;
  for (const auto& d : diags)
    if (d.find("graph not connected") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("validate flags non-radial graph") {
  NetworkCase c = builtin_case("feeder5");
  Branch extra = c.branches[0];
  extra.from = 0;
  extra.to = 4;
  c.branches.push_back(extra);
  auto diags = validate(c);
  bool found = false;
  for (const auto& d : diags)
    if (d.find("not radial") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("at_time extreme snapshot") {
  NetworkCase c = builtin_case("feeder5");
  LoadProfile extreme;
  extreme.mult.push_back({6.0, 2.6, 3.5});
  NetworkCase snap = at_time(c, extreme, 1);
  CHECK(snap.loads[1][0].base_power == doctest::Approx(3000).epsilon(1e-12));
  CHECK(snap.loads[1][1].base_power == doctest::Approx(2600).epsilon(1e-12));
  CHECK(snap.loads[1][2].base_power == doctest::Approx(4200).epsilon(1e-12));

  LoadProfile identity;
  identity.mult.push_back({1.0, 1.0, 1.0});
  NetworkCase same = at_time(c, identity, 1);
  for (int node = 1; node <= 4; ++node)
    for (std::size_t k = 0; k < c.loads[node].size(); ++k)
      CHECK(same.loads[node][k].base_power == c.loads[node][k].base_power);

  CHECK_THROWS_AS(at_time(c, *c.profile, c.profile->steps() + 1),
                  std::out_of_range);
  CHECK_THROWS_AS(at_time(c, *c.profile, 0), std::out_of_range);
}

TEST_CASE("profile csv round trip") {
  NetworkCase c = builtin_case("feeder5");
  const std::string csv = serialize_profile(*c.profile);
  LoadProfile parsed = parse_profile(csv);
  REQUIRE(parsed.steps() == c.profile->steps());
  for (int t = 0; t < parsed.steps(); ++t)
    for (int k = 0; k < 3; ++k)
      CHECK(parsed.mult[t][k] == c.profile->mult[t][k]);

  CHECK_THROWS_AS(parse_profile("x,y\n1,2\n"), ParseError);
}
