#pragma once

#include <random>

#include "cesrace/equilibrium.hpp"

namespace cesrace::testing {

inline SectorTechnology random_technology(std::mt19937_64& rng, double alpha = -1.0) {
  std::uniform_real_distribution<double> th(0.15, 0.85), sg(-1.5, 0.85), al(0.1, 0.4), a(0.5, 2.0);
  SectorTechnology t;
  t.tfp = a(rng);
  t.alpha = alpha < 0.0 ? al(rng) : alpha;
  t.theta = {th(rng), th(rng), th(rng), th(rng)};
  t.sigma = {sg(rng), sg(rng), sg(rng), sg(rng)};
  return t;
}

inline EconomySpec random_economy(std::mt19937_64& rng, double alpha = -1.0) {
  std::uniform_real_distribution<double> eta(-1.0, 0.6), tc(0.2, 0.8), en(0.3, 3.0);
  EconomySpec s;
  s.eta = eta(rng);
  s.theta_c = {tc(rng), tc(rng)};
  s.techs = {VariantTechnology::from(random_technology(rng, alpha)),
             VariantTechnology::from(random_technology(rng, alpha))};
  for (auto& e : s.endowments) e = en(rng);
  return s;
}

inline SectorTechnology benchmark_goods() {
  SectorTechnology t;
  t.alpha = 0.3;
  t.theta = {0.5, 0.5, 0.5, 0.5};
  t.sigma = {-0.793, 0.353, 0.591, 0.797};
  return t;
}

inline SectorTechnology benchmark_service() {
  SectorTechnology t;
  t.alpha = 0.3;
  t.theta = {0.5, 0.5, 0.5, 0.5};
  t.sigma = {-0.444, 0.321, 0.555, 0.844};
  return t;
}

}  // namespace cesrace::testing
