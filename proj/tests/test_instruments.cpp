#include "catch_amalgamated.hpp"
#include "cesrace/instruments.hpp"
#include "instrument_toy.hpp"

using namespace cesrace;
using namespace cesrace::testing;
using Catch::Matchers::WithinAbs;

TEST_CASE("bartik matches a nested-loop evaluation", "[instruments]") {
  auto toy = bartik_toy();
  auto panel = toy.panel();
  for (const auto& target : standard_targets()) {
    auto series = bartik(panel, target, 2);
    REQUIRE(series.size() == 3 * 2 * 2);  // countries x sectors x years {2002, 2003}
    for (const auto& s : series) REQUIRE(s.value == toy.oracle(target.mask, s.country, s.sector, s.year, 2));
  }
}

TEST_CASE("bartik special cases", "[instruments]") {
  SECTION("single source industry gives its leave-one-out growth") {
    auto toy = bartik_toy();
    toy.industries = 1;
    auto panel = toy.panel();
    auto s = bartik(panel, standard_targets()[0], 1);
    for (const auto& b : s) {
      double now = 0, then = 0;
      for (int j = 0; j < 3; ++j) {
        if (toy.country(j) == b.country) continue;
        now += toy.z(j, other(b.sector), 0, b.year - 2000, Factor::Ki);
        then += toy.z(j, other(b.sector), 0, b.year - 2001, Factor::Ki);
      }
      CHECK_THAT(b.value, WithinAbs(std::log(now / then), 1e-14));
    }
  }
  SECTION("homogeneous growth everywhere") {
    auto toy = bartik_toy();
    toy.common_growth = 0.037;
    auto panel = toy.panel();
    for (const auto& b : bartik(panel, standard_targets()[1], 3)) CHECK_THAT(b.value, WithinAbs(3 * 0.037, 1e-13));
  }
  SECTION("shares sum to one") {
    auto panel = bartik_toy().panel();
    for (const auto& target : standard_targets())
      for (const char* c : {"aa", "bb", "cc"})
        for (Sector n : kAllSectors) {
          auto sh = bartik_shares(panel, target, c, n);
          double s = 0;
          for (const auto& [d, v] : sh) s += v;
          REQUIRE_THAT(s, WithinAbs(1.0, 1e-12));
        }
  }
  SECTION("leave-one-out is wired") {
    auto panel = bartik_toy().panel();
    auto loo = bartik(panel, standard_targets()[2], 2);
    auto full = bartik(panel, standard_targets()[2], 2, {.leave_one_out = false});
    REQUIRE(loo.size() == full.size());
    bool differ = false;
    for (std::size_t i = 0; i < loo.size(); ++i) differ = differ || loo[i].value != full[i].value;
    CHECK(differ);
  }
  SECTION("own-sector quantities never enter") {
    auto toy = bartik_toy();
    auto base = bartik(toy.panel(), standard_targets()[3], 2);
    auto panel = toy.panel();
    for (auto& o : panel.observations)
      if (o.country == "bb" && o.sector == Sector::Goods)
        for (auto& q : o.quantity) q *= 3.5;
    auto scaled = bartik(panel, standard_targets()[3], 2);
    for (std::size_t i = 0; i < base.size(); ++i)
      if (base[i].country == "bb" && base[i].sector == Sector::Goods) CHECK(scaled[i].value == base[i].value);
  }
  SECTION("zero share denominator excludes the country-sector") {
    auto panel = bartik_toy().panel();
    for (auto& o : panel.observations)
      if (o.country == "aa" && o.sector == Sector::Service && o.year == 2000) o.quantity[idx(Factor::Lfh)] = 0.0;
    std::vector<std::string> log;
    auto s = bartik(panel, standard_targets()[1], 2, {}, &log);
    for (const auto& b : s) CHECK_FALSE((b.country == "aa" && b.sector == Sector::Goods));
    CHECK_FALSE(log.empty());
  }
}

TEST_CASE("aggregate instruments", "[instruments]") {
  SECTION("degenerate and arithmetic weights") {
    InstrumentTable t;
    t.add({"ki", "aa", Sector::Goods, 2005, 0.2});
    t.add({"lfh", "aa", Sector::Goods, 2005, 0.1});
    t.add({"lmh", "aa", Sector::Goods, 2005, 0.3});
    t.add({"lfu", "aa", Sector::Goods, 2005, -0.1});
    GammaTable g{{{"aa", Sector::Goods}, GammaWeights{0.5, 0.4, 0.25}}};
    auto s = bartik_ces_aggregates(t, g);
    REQUIRE(s.size() == 3);
    CHECK_THAT(s[0].value, WithinAbs(0.15, 1e-15));
    // Direct substitution through the chain.
    double d = 0.15, c = 0.6 * d + 0.4 * 0.3, b = 0.75 * c + 0.25 * -0.1;
    CHECK_THAT(s[1].value, WithinAbs(c, 1e-15));
    CHECK_THAT(s[2].value, WithinAbs(b, 1e-15));
    g.begin()->second.fh = 1.0;
    CHECK(bartik_ces_aggregates(t, g)[0].value == 0.1);
  }
  SECTION("missing constituent propagates exclusion") {
    InstrumentTable t;
    t.add({"ki", "aa", Sector::Goods, 2005, 0.2});
    t.add({"lfh", "aa", Sector::Goods, 2005, 0.1});
    GammaTable g{{{"aa", Sector::Goods}, GammaWeights{}}};
    CHECK(bartik_ces_aggregates(t, g).empty());
  }
}
