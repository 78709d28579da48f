#include <random>

#include "catch_amalgamated.hpp"
#include "cesrace/decompose.hpp"
#include "cesrace/estimate.hpp"
#include "cesrace/simulate.hpp"
#include "support.hpp"

using namespace cesrace;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

EconomySpec benchmark_economy(double eta) {
  EconomySpec e;
  e.eta = eta;
  e.theta_c = {0.45, 0.55};
  e.techs = {VariantTechnology::from(testing::benchmark_goods()), VariantTechnology::from(testing::benchmark_service())};
  e.techs[1].alpha = 0.25;
  e.endowments = {0.6, 0.8, 1.1, 1.3, 1.9, 1.2};
  return e;
}

std::vector<DecompositionReport> all_reports(const EconomySpec& spec, const EquilibriumState& base,
                                             const FactorChanges& ch) {
  auto point = economy_point(base, spec.eta);
  std::vector<DecompositionReport> out;
  for (Target t : {Target::Wages, Target::Demand, Target::Shares}) {
    auto r = decompose_point(point, spec.techs, ch, t);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

double max_residual(const std::vector<DecompositionReport>& reports) {
  double m = 0.0;
  for (const auto& r : reports) m = std::max(m, std::abs(r.residual));
  return m;
}

// Residuals after moving endowments by h along `dir`.
std::vector<double> residual_path(const EconomySpec& spec, const FactorArray& dir, const std::vector<double>& hs) {
  auto base = solve(spec);
  std::vector<double> out;
  for (double h : hs) {
    EconomySpec p = spec;
    for (std::size_t f = 0; f < kFactors; ++f) p.endowments[f] *= std::exp(h * dir[f]);
    auto moved = solve(p);
    out.push_back(max_residual(all_reports(spec, base, state_changes(base, moved))));
  }
  return out;
}

}  // namespace

TEST_CASE("equal elasticities collapse relative wages to a single slope", "[decompose]") {
  ElasticityMatrix prod;
  prod.side = Side::Production;
  const double e = 1.7;
  for (std::size_t f = 0; f < kFactors; ++f)
    for (std::size_t g = 0; g < kFactors; ++g)
      if (f != g) prod.values(f, g) = e;
  FactorChanges ch;
  ch.quantity_tilde[idx(Factor::Lmh)] = 0.3;
  ch.quantity_tilde[idx(Factor::Lfh)] = -0.2;
  ch.price[idx(Factor::Lmh)] = 0.1;
  const std::uint32_t all = (1u << kFactors) - 1u;
  auto r = decompose_wages(prod, ch, Factor::Lmh, Factor::Lfh, all);
  CHECK(r.target == "ln(w_mh/w_fh)");
  CHECK_THAT(r.model_change, WithinAbs(-(0.3 - (-0.2)) / e, 1e-15));
  CHECK_THAT(r.residual, WithinAbs(0.1 - r.model_change, 1e-15));
  CHECK(r.contribution("ki") == 0.0);

  SECTION("zero changes give zero contributions") {
    FactorChanges none;
    for (const auto& [c, v] : decompose_wages(prod, none, Factor::Lmh, Factor::Lfh, all).contributions) CHECK(v == 0.0);
    for (const auto& [c, v] : decompose_demand(prod, none, Factor::Lmh, Factor::Lfh, all).contributions) CHECK(v == 0.0);
  }
  SECTION("errors") {
    CHECK_THROWS_AS(decompose_wages(prod, ch, Factor::Lmh, Factor::Lmh, all), std::invalid_argument);
    CHECK_THROWS_AS(decompose_wages(prod, ch, Factor::Lmh, Factor::Ko, all & ~(1u << idx(Factor::Ko))),
                    std::invalid_argument);
    CHECK_THROWS_AS(
        [&] {
          DecompositionReport r0;
          return r0.contribution("nope");
        }(),
        std::out_of_range);
  }
}

TEST_CASE("decompositions are additive", "[decompose]") {
  auto spec = benchmark_economy(0.2);
  auto base = solve(spec);
  EconomySpec p = spec;
  p.endowments[idx(Factor::Ki)] *= 1.4;
  p.endowments[idx(Factor::Lfh)] *= 1.2;
  auto moved = solve(p);
  for (const auto& r : all_reports(spec, base, state_changes(base, moved))) {
    double sum = 0.0;
    for (const auto& [c, v] : r.contributions) sum += v;
    CHECK(r.model_change == sum);
    CHECK(r.residual == r.data_change - r.model_change);
    CHECK(r.contributions.size() == kFactors);
  }
}

TEST_CASE("decomposition residuals vanish at second order", "[decompose]") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  const std::vector<double> hs{1e-2, 1e-3, 1e-4};
  std::vector<EconomySpec> economies{benchmark_economy(0.2), benchmark_economy(-0.4)};
  for (int k = 0; k < 3; ++k) economies.push_back(testing::random_economy(rng));
  for (const auto& spec : economies) {
    FactorArray dir;
    double norm = 0.0;
    for (auto& d : dir) {
      d = nd(rng);
      norm += d * d;
    }
    for (auto& d : dir) d /= std::sqrt(norm);
    auto res = residual_path(spec, dir, hs);
    for (std::size_t i = 0; i + 1 < hs.size(); ++i) {
      double order = std::log(res[i] / res[i + 1]) / std::log(hs[i] / hs[i + 1]);
      INFO("residuals " << res[i] << " -> " << res[i + 1]);
      CHECK(order >= 1.8);
    }
  }
}

TEST_CASE("a single-factor perturbation matches the share change", "[decompose]") {
  auto spec = benchmark_economy(0.1);
  auto base = solve(spec);
  auto point = economy_point(base, spec.eta);
  auto psi = psi_matrices(share_price_derivatives(spec.techs, point), point);
  const double h = 1e-5;
  EconomySpec up = spec, down = spec;
  up.endowments[idx(Factor::Ki)] *= std::exp(h);
  down.endowments[idx(Factor::Ki)] *= std::exp(-h);
  auto ch = state_changes(solve(down), solve(up));
  for (Factor f : kLaborFactors) {
    auto r = decompose_shares(psi, ch, f, ShareRoute::Quantity);
    CHECK_THAT(r.model_change, WithinAbs(r.data_change, 1e-9));
    auto q = decompose_shares(psi, ch, f, ShareRoute::Price);
    CHECK_THAT(q.model_change, WithinAbs(q.data_change, 1e-9));
  }
}

TEST_CASE("Cobb-Douglas economies have constant shares", "[decompose]") {
  auto spec = benchmark_economy(0.0);
  for (auto& t : spec.techs) t.sigma = {0.0, 0.0, 0.0, 0.0};
  auto base = solve(spec);
  EconomySpec p = spec;
  p.endowments[idx(Factor::Ki)] *= 2.0;
  p.endowments[idx(Factor::Lmu)] *= 0.7;
  auto ch = state_changes(base, solve(p));
  auto point = economy_point(base, spec.eta);
  auto psi = psi_matrices(share_price_derivatives(spec.techs, point), point);
  CHECK(psi.psi_w.cwiseAbs().maxCoeff() < 1e-12);
  CHECK(psi.psi_l.cwiseAbs().maxCoeff() < 1e-12);
  for (Factor f : kLaborFactors) {
    auto r = decompose_shares(psi, ch, f, ShareRoute::Quantity);
    CHECK(std::abs(r.data_change) < 1e-10);
    for (const auto& [c, v] : r.contributions) CHECK(std::abs(v) < 1e-12);
  }
}

TEST_CASE("labor-share split", "[decompose]") {
  SECTION("published fixture") {
    // Weights and growth in factor order: fh, mh, fu, mu.
    auto s = labor_share_split({0.064, 0.162, 0.258, 0.517}, {1.247, 0.464, -0.102, -0.391});
    CHECK_THAT(s.terms[1], WithinAbs(0.075, 1e-3));
    CHECK_THAT(s.terms[0], WithinAbs(0.079, 1e-3));
    CHECK_THAT(s.terms[3], WithinAbs(-0.202, 1e-3));
    CHECK_THAT(s.terms[2], WithinAbs(-0.026, 1e-3));
    CHECK_THAT(s.total, WithinAbs(-0.074, 1e-3));
    auto r = s.report();
    CHECK(r.model_change == s.total);
  }
  SECTION("equal growth returns the growth rate") {
    auto s = labor_share_split({0.1, 0.2, 0.3, 0.4}, {0.05, 0.05, 0.05, 0.05});
    CHECK_THAT(s.total, WithinAbs(0.05, 1e-15));
  }
  SECTION("panel window") {
    SimulationSpec spec;
    spec.economy = benchmark_economy(0.1);
    auto panel = synth_panel(spec, 5, 26, ShockConfig::noise_free(), 2);
    auto cells = aggregate_sectors(panel);
    auto s = labor_share_split(cells, 1980, 2005);
    double sum = 0.0;
    for (double w : s.weights) sum += w;
    CHECK_THAT(sum, WithinAbs(1.0, 1e-12));
    // The weighted split differs from the exact change by a second-order term.
    double second = 0.0;
    for (double g : s.growth) second = std::max(second, g * g);
    CHECK(std::abs(s.total - s.exact) < second);
    auto r = s.report();
    CHECK(r.data_change == s.exact);
    CHECK_THAT(r.residual, WithinAbs(s.exact - s.total, 1e-15));
  }
}

TEST_CASE("panel windows", "[decompose]") {
  SimulationSpec spec;
  spec.economy = benchmark_economy(0.05);
  spec.economy.techs[1].sigma = {-0.444, 0.321, 0.555, 0.844};
  auto world = simulate_world(spec, 4, 12, ShockConfig::noise_free(), 6);
  auto cells = aggregate_sectors(world.panel);
  DecompositionInputs in{{spec.economy.techs[0].sigma, spec.economy.techs[1].sigma}, spec.economy.eta};

  SECTION("log changes of a single country match the equilibrium states") {
    SectorTable one;
    for (const auto& [k, c] : cells)
      if (k.country == "c02") one.emplace(k, c);
    auto ch = panel_changes(one, 1981, 1990);
    auto st = state_changes(world.cells[12 + 1].state, world.cells[12 + 10].state);
    for (std::size_t f = 0; f < kFactors; ++f) {
      CHECK_THAT(ch.quantity[f], WithinAbs(st.quantity[f], 1e-10));
      CHECK_THAT(ch.price[f], WithinAbs(st.price[f], 1e-10));
      CHECK_THAT(ch.share[f], WithinAbs(st.share[f], 1e-10));
    }
    CHECK_THAT(ch.labor_share, WithinAbs(st.labor_share, 1e-10));
  }
  SECTION("pooled and averaged changes agree for a single country") {
    SectorTable one;
    for (const auto& [k, c] : cells)
      if (k.country == "c03") one.emplace(k, c);
    auto a = panel_changes(one, 1980, 1991), b = panel_changes(one, 1980, 1991, CrossCountry::Pooled);
    for (std::size_t f = 0; f < kFactors; ++f) CHECK_THAT(a.quantity_tilde[f], WithinAbs(b.quantity_tilde[f], 1e-12));
  }
  SECTION("a one-year chained window equals the fixed-point window") {
    for (Target t : {Target::Wages, Target::Demand, Target::Shares}) {
      auto fixed = decompose_window(cells, in, t, {1984, 1985, false});
      auto chained = decompose_window(cells, in, t, {1984, 1985, true});
      REQUIRE(fixed.size() == chained.size());
      for (std::size_t k = 0; k < fixed.size(); ++k) CHECK_THAT(chained[k].model_change, WithinAbs(fixed[k].model_change, 1e-14));
    }
  }
  SECTION("chained windows track the data more closely over long spans") {
    auto fixed = decompose_window(cells, in, Target::Wages, {1980, 1991, false});
    auto chained = decompose_window(cells, in, Target::Wages, {1980, 1991, true});
    CHECK(max_residual(chained) < max_residual(fixed));
  }
  SECTION("errors") {
    CHECK_THROWS_AS(decompose_window(cells, in, Target::Wages, {1990, 1985}), std::invalid_argument);
    CHECK_THROWS_AS(panel_changes(cells, 1970, 1985), std::invalid_argument);
    CHECK(parse_target("labor-share") == Target::LaborShare);
    CHECK_FALSE(parse_target("other").has_value());
  }
}

TEST_CASE("simulated ICT growth shows the expected dominance patterns", "[decompose]") {
  SimulationSpec spec;
  spec.economy.techs = {VariantTechnology::from(testing::benchmark_goods()),
                        VariantTechnology::from(testing::benchmark_service())};
  spec.economy.eta = 0.02;
  auto cells = aggregate_sectors(synth_panel(spec, 11, 26, ShockConfig::noise_free(), 3));
  DecompositionInputs in{{testing::benchmark_goods().sigma, testing::benchmark_service().sigma}, 0.02};
  auto demand = decompose_window(cells, in, Target::Demand, {1980, 2005});
  const auto& fh_fu = demand[3];
  REQUIRE(fh_fu.target == "ln(l_fh/l_fu)");
  double ict = std::abs(fh_fu.contribution("ki"));
  for (const auto& [c, v] : fh_fu.contributions)
    if (c != "ki") CHECK(ict > std::abs(v));

  auto shares = decompose_window(cells, in, Target::Shares, {1980, 2005});
  for (const auto& r : shares) {
    if (r.target.find("quantity") == std::string::npos) continue;
    bool skilled = r.target.find("h)") != std::string::npos;
    INFO(r.target);
    CHECK((skilled ? r.contribution("ki") > 0.0 : r.contribution("ki") < 0.0));
  }
}

TEST_CASE("cluster bootstrap", "[decompose][bootstrap]") {
  SimulationSpec spec;
  spec.economy = benchmark_economy(0.1);
  auto panel = synth_panel(spec, 6, 14, ShockConfig{}, 4);
  // Mean of a country-level statistic, which the bootstrap should treat as
  // an average over independent clusters.
  BootstrapPipeline mean_wage = [](const Panel& p) {
    std::map<std::string, double> sum, count;
    for (const auto& o : p.observations) {
      sum[o.country] += std::log(o.price[idx(Factor::Lmh)]);
      count[o.country] += 1.0;
    }
    double m = 0.0;
    for (const auto& [c, s] : sum) m += s / count[c];
    return std::map<std::string, double>{{"mean", m / static_cast<double>(sum.size())}};
  };

  SECTION("fixed seeds are bit-reproducible across worker counts") {
    auto a = cluster_bootstrap(mean_wage, panel, 60, 42, 1);
    auto b = cluster_bootstrap(mean_wage, panel, 60, 42, 4);
    auto c = cluster_bootstrap(mean_wage, panel, 60, 43, 1);
    CHECK(a.se.at("mean") == b.se.at("mean"));
    CHECK(a.se.at("mean") != c.se.at("mean"));
    CHECK(a.se.at("mean") > 0.0);
  }
  SECTION("standard error of a cluster mean") {
    // Oracle: the plug-in standard deviation of country means over sqrt(G).
    std::map<std::string, double> sum, count;
    for (const auto& o : panel.observations) {
      sum[o.country] += std::log(o.price[idx(Factor::Lmh)]);
      count[o.country] += 1.0;
    }
    std::vector<double> means;
    for (const auto& [c, s] : sum) means.push_back(s / count[c]);
    double mu = 0.0, var = 0.0;
    for (double m : means) mu += m / means.size();
    for (double m : means) var += (m - mu) * (m - mu) / means.size();
    double oracle = std::sqrt(var / means.size());
    auto r = cluster_bootstrap(mean_wage, panel, 2000, 7);
    CHECK_THAT(r.se.at("mean"), WithinRel(oracle, 0.1));
  }
  SECTION("resampled countries become distinct clusters") {
    auto p = resample_countries(panel, {"c01", "c02"}, {0, 0, 1});
    std::set<std::string> names;
    for (const auto& o : p.observations) names.insert(o.country);
    CHECK(names == std::set<std::string>{"c01", "c01~1", "c02"});
    CHECK(p.observations.size() == 3u * panel.observations.size() / 6u);
  }
  SECTION("failed replications are redrawn and logged") {
    BootstrapPipeline flaky = [&](const Panel& p) {
      bool has_c01 = false;
      for (const auto& o : p.observations) has_c01 = has_c01 || o.country == "c01~2";
      if (has_c01) throw GmmError("rank deficient");
      return mean_wage(p);
    };
    auto r = cluster_bootstrap(flaky, panel, 200, 3, 1);
    CHECK(r.redraws > 0);
    CHECK(r.redraws <= 20);
    CHECK(r.log.size() <= static_cast<std::size_t>(r.redraws));
  }
  SECTION("too many failures abort") {
    // Only resamples that happen to start with the first country succeed.
    BootstrapPipeline bad = [&](const Panel& p) -> std::map<std::string, double> {
      if (p.observations.front().country != panel.observations.front().country) throw GmmError("rank deficient");
      return {{"x", 1.0}};
    };
    CHECK_THROWS_WITH(cluster_bootstrap(bad, panel, 50, 1, 1), Catch::Matchers::ContainsSubstring("10%"));
  }
}
