#pragma once

#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cesrace/equilibrium.hpp"
#include "cesrace/panel.hpp"
#include "cesrace/parallel.hpp"

namespace cesrace {

// Standard deviations of the stochastic components of a synthetic panel.
struct ShockConfig {
  double country_level = 0.2;   // log endowment level per country-factor
  double country_trend = 0.004; // per-year growth deviation per country-factor
  double global_walk = 0.025;   // common random-walk innovation per factor-year
  double country_walk = 0.01;   // country random-walk innovation per factor-year
  double tfp_walk = 0.01;       // sector TFP random walk per country
  double share_noise = 0.03;    // i.i.d. log-odds shocks to technology weights
  double demand_noise = 0.02;   // i.i.d. log shocks to consumer weights
  double industry_spread = 0.3; // dispersion of mean industry logits
  double industry_global = 0.03;
  double industry_country = 0.02;
  double industry_persistence = 0.8;

  static ShockConfig none() {
    return {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  }
  // Endowment and industry variation only: the estimating equations hold exactly.
  static ShockConfig noise_free() {
    ShockConfig s;
    s.share_noise = 0.0;
    return s;
  }
};

struct SimulationSpec {
  EconomySpec economy;
  FactorArray growth{0.07, 0.045, 0.02, 0.01, -0.015, 0.025};       // per-year log growth of endowments
  FactorArray trend_spread{0.01, 0.008, 0.006, 0.006, 0.006, 0.004}; // deterministic country growth dispersion
  std::array<double, 2> investment_growth{-0.06, 0.01};              // log growth of investment prices
  int start_year = 1980;
  int industries = 3;
  // Optional country-year covariate shifting technology log-odds by the loadings.
  std::map<std::pair<std::string, int>, double> covariate;
  NestParams covariate_loading{0.0, 0.0, 0.0, 0.0};

  static SimulationSpec from(const Config& c);
};

inline std::string country_code(int j) {
  std::string n = std::to_string(j + 1);
  return "c" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

namespace detail {

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline NestParams shift_odds(const NestParams& th, const std::array<double, 4>& e) {
  return {logistic(logit(th.fh) + e[0]), logistic(logit(th.mh) + e[1]), logistic(logit(th.fu) + e[2]),
          logistic(logit(th.mu) + e[3])};
}

// Every random draw of a panel, taken in a fixed order before any solve.
struct Draws {
  std::vector<FactorArray> level, trend;                        // [country]
  std::vector<FactorArray> global;                              // [year] cumulative walk
  std::vector<std::vector<FactorArray>> walk;                   // [country][year] cumulative
  std::vector<std::vector<std::array<double, kSectors>>> tfp;   // [country][year] cumulative
  std::vector<std::vector<std::array<std::array<double, 4>, kSectors>>> odds;  // [country][year][sector]
  std::vector<std::vector<std::array<double, kSectors>>> demand;
  // industry logits [country][year][sector][industry]
  std::vector<std::vector<std::array<std::vector<double>, kSectors>>> industry;
};

inline Draws draw_all(const SimulationSpec& spec, const ShockConfig& sh, int countries, int years,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto z = [&](double sd) { return sd == 0.0 ? 0.0 : sd * nd(rng); };
  const int D = spec.industries;
  Draws d;
  d.level.resize(countries);
  d.trend.resize(countries);
  for (int j = 0; j < countries; ++j)
    for (std::size_t f = 0; f < kFactors; ++f) {
      d.level[j][f] = z(sh.country_level);
      d.trend[j][f] = z(sh.country_trend);
    }
  d.global.assign(years, filled(0.0));
  for (int t = 1; t < years; ++t)
    for (std::size_t f = 0; f < kFactors; ++f) d.global[t][f] = d.global[t - 1][f] + z(sh.global_walk);
  std::vector<std::array<std::vector<double>, kSectors>> industry_common(years);
  std::array<std::vector<double>, kSectors> common_now;
  for (auto& v : common_now) v.assign(D, 0.0);
  for (int t = 0; t < years; ++t) {
    if (t > 0)
      for (auto& v : common_now)
        for (auto& x : v) x = sh.industry_persistence * x + z(sh.industry_global);
    industry_common[t] = common_now;
  }
  d.walk.assign(countries, std::vector<FactorArray>(years, filled(0.0)));
  d.tfp.assign(countries, std::vector<std::array<double, kSectors>>(years, {0.0, 0.0}));
  d.odds.assign(countries, std::vector<std::array<std::array<double, 4>, kSectors>>(years));
  d.demand.assign(countries, std::vector<std::array<double, kSectors>>(years, {0.0, 0.0}));
  d.industry.assign(countries, std::vector<std::array<std::vector<double>, kSectors>>(years));
  for (int j = 0; j < countries; ++j) {
    std::array<std::vector<double>, kSectors> mean, own;
    for (std::size_t n = 0; n < kSectors; ++n) {
      mean[n].resize(D);
      own[n].assign(D, 0.0);
      for (auto& m : mean[n]) m = z(sh.industry_spread);
    }
    for (int t = 0; t < years; ++t) {
      for (std::size_t f = 0; f < kFactors; ++f)
        d.walk[j][t][f] = (t > 0 ? d.walk[j][t - 1][f] : 0.0) + (t > 0 ? z(sh.country_walk) : 0.0);
      for (std::size_t n = 0; n < kSectors; ++n) {
        d.tfp[j][t][n] = (t > 0 ? d.tfp[j][t - 1][n] + z(sh.tfp_walk) : 0.0);
        for (auto& e : d.odds[j][t][n]) e = z(sh.share_noise);
        d.demand[j][t][n] = z(sh.demand_noise);
        d.industry[j][t][n].resize(D);
        for (int k = 0; k < D; ++k) {
          if (t > 0) own[n][k] = sh.industry_persistence * own[n][k] + z(sh.industry_country);
          d.industry[j][t][n][k] = mean[n][k] + industry_common[t][n][k] + own[n][k];
        }
      }
    }
  }
  return d;
}

}  // namespace detail

struct SimulatedCell {
  std::string country;
  int year = 0;
  EconomySpec spec;
  EquilibriumState state;
};

struct SimulatedWorld {
  Panel panel;
  std::vector<SimulatedCell> cells;  // per country-year, in country then year order
};

// Country-year equilibria with industry detail. Industries within a sector use
// the sector technology, so each holds a fixed fraction of every sector input.
inline SimulatedWorld simulate_world(const SimulationSpec& spec, int countries, int years, const ShockConfig& shocks,
                                     std::uint64_t seed) {
  if (countries < 1 || years < 1) throw std::invalid_argument("simulate: need at least one country and year");
  if (spec.industries < 1) throw std::invalid_argument("simulate: need at least one industry");
  auto draws = detail::draw_all(spec, shocks, countries, years, seed);
  SimulatedWorld world;
  world.cells.resize(static_cast<std::size_t>(countries) * years);

  parallel_for(static_cast<std::size_t>(countries), [&](std::size_t jj) {
    const int j = static_cast<int>(jj);
    const std::string code = country_code(j);
    FactorArray start = filled(kNaN);
    for (int t = 0; t < years; ++t) {
      EconomySpec e = spec.economy;
      for (std::size_t f = 0; f < kFactors; ++f) {
        double spread = spec.trend_spread[f] * std::cos(1.7 * j + 2.3 * f) * (countries > 1 ? 1.0 : 0.0);
        double g = spec.growth[f] + spread + draws.trend[j][f];
        e.endowments[f] = spec.economy.endowments[f] *
                          std::exp(draws.level[j][f] + g * t + draws.global[t][f] + draws.walk[j][t][f]);
      }
      double cov = 0.0;
      if (auto it = spec.covariate.find({code, spec.start_year + t}); it != spec.covariate.end()) cov = it->second;
      const auto& cl = spec.covariate_loading;
      for (std::size_t n = 0; n < kSectors; ++n) {
        auto& tech = e.techs[n];
        tech.tfp *= std::exp(draws.tfp[j][t][n]);
        auto odds = draws.odds[j][t][n];
        odds[0] += cl.fh * cov;
        odds[1] += cl.mh * cov;
        odds[2] += cl.fu * cov;
        odds[3] += cl.mu * cov;
        tech.theta = detail::shift_odds(tech.theta, odds);
        e.theta_c[n] *= std::exp(draws.demand[j][t][n]);
      }
      SolverOptions opt;
      opt.start = start;
      auto& cell = world.cells[static_cast<std::size_t>(j) * years + t];
      cell.country = code;
      cell.year = spec.start_year + t;
      cell.spec = e;
      try {
        cell.state = solve(e, opt);
      } catch (const std::exception& ex) {
        std::ostringstream os;
        os << "simulate: equilibrium failed for " << code << " in " << cell.year << ": " << ex.what();
        throw std::runtime_error(os.str());
      }
      start = cell.state.factor_prices;
    }
  });

  auto& obs = world.panel.observations;
  world.panel.base_year = spec.start_year;
  for (int j = 0; j < countries; ++j)
    for (std::size_t n = 0; n < kSectors; ++n)
      for (int k = 0; k < spec.industries; ++k)
        for (int t = 0; t < years; ++t) {
          const auto& cell = world.cells[static_cast<std::size_t>(j) * years + t];
          const auto& logits = draws.industry[j][t][n];
          double m = *std::max_element(logits.begin(), logits.end()), s = 0.0;
          for (double l : logits) s += std::exp(l - m);
          double share = std::exp(logits[k] - m) / s;
          PanelObservation o;
          o.country = cell.country;
          o.sector = kAllSectors[n];
          o.industry = std::string(sector_name(o.sector)).substr(0, 1) + std::to_string(k + 1);
          o.year = cell.year;
          for (std::size_t f = 0; f < kFactors; ++f) {
            o.quantity[f] = share * cell.state.allocations[n][f];
            o.price[f] = cell.state.factor_prices[f];
          }
          o.investment_price = {std::exp(spec.investment_growth[0] * t), std::exp(spec.investment_growth[1] * t)};
          o.output_quantity = share * cell.state.outputs[n];
          o.output_deflator = cell.state.goods_prices[n];
          obs.push_back(std::move(o));
        }
  return world;
}

inline Panel synth_panel(const SimulationSpec& spec, int countries, int years, const ShockConfig& shocks,
                         std::uint64_t seed) {
  return simulate_world(spec, countries, years, shocks, seed).panel;
}

namespace detail {

inline VariantTechnology read_tech(const Config& c, const std::string& p, const VariantTechnology& base) {
  VariantTechnology t = base;
  int level = c.integer(p + ".level", static_cast<int>(t.level));
  if (level < 1 || level > 4) throw SchemaError("config", 0, p + ".level", "expected 1..4");
  t.level = static_cast<NestLevel>(level);
  t.tfp = c.number(p + ".tfp", t.tfp);
  t.alpha = c.number(p + ".alpha", t.alpha);
  t.theta.fh = c.number(p + ".theta.fh", t.theta.fh);
  t.theta.mh = c.number(p + ".theta.mh", t.theta.mh);
  t.theta.fu = c.number(p + ".theta.fu", t.theta.fu);
  t.theta.mu = c.number(p + ".theta.mu", t.theta.mu);
  t.sigma.fh = c.number(p + ".sigma.fh", t.sigma.fh);
  t.sigma.mh = c.number(p + ".sigma.mh", t.sigma.mh);
  t.sigma.fu = c.number(p + ".sigma.fu", t.sigma.fu);
  t.sigma.mu = c.number(p + ".sigma.mu", t.sigma.mu);
  return t;
}

}  // namespace detail

// Keys: eta, theta_c.<sector>, <sector>.{level,tfp,alpha,theta.*,sigma.*},
// endowment.<factor>, growth.<factor>, start_year, industries.
inline SimulationSpec SimulationSpec::from(const Config& c) {
  SimulationSpec s;
  s.economy.eta = c.number("eta", s.economy.eta);
  for (Sector n : kAllSectors) {
    std::string name(sector_name(n));
    s.economy.theta_c[idx(n)] = c.number("theta_c." + name, s.economy.theta_c[idx(n)]);
    s.economy.techs[idx(n)] = detail::read_tech(c, name, s.economy.techs[idx(n)]);
  }
  for (Factor f : kAllFactors) {
    std::string name(factor_name(f));
    s.economy.endowments[idx(f)] = c.number("endowment." + name, s.economy.endowments[idx(f)]);
    s.growth[idx(f)] = c.number("growth." + name, s.growth[idx(f)]);
  }
  s.start_year = c.integer("start_year", s.start_year);
  s.industries = c.integer("industries", s.industries);
  return s;
}

inline ShockConfig shocks_from(const Config& c, ShockConfig s = {}) {
  s.country_level = c.number("shocks.country_level", s.country_level);
  s.country_trend = c.number("shocks.country_trend", s.country_trend);
  s.global_walk = c.number("shocks.global_walk", s.global_walk);
  s.country_walk = c.number("shocks.country_walk", s.country_walk);
  s.tfp_walk = c.number("shocks.tfp_walk", s.tfp_walk);
  s.share_noise = c.number("shocks.share_noise", s.share_noise);
  s.demand_noise = c.number("shocks.demand_noise", s.demand_noise);
  s.industry_spread = c.number("shocks.industry_spread", s.industry_spread);
  s.industry_global = c.number("shocks.industry_global", s.industry_global);
  s.industry_country = c.number("shocks.industry_country", s.industry_country);
  s.industry_persistence = c.number("shocks.industry_persistence", s.industry_persistence);
  return s;
}

}  // namespace cesrace
