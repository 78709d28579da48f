#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "cesrace/ces.hpp"

namespace cesrace {

struct EconomySpec {
  double eta = 0.0;
  std::array<double, kSectors> theta_c{0.5, 0.5};
  std::array<VariantTechnology, kSectors> techs{};
  FactorArray endowments = filled(1.0);
};

struct EquilibriumState {
  FactorArray factor_prices = filled(kNaN);
  std::array<double, kSectors> goods_prices{};
  std::array<FactorArray, kSectors> allocations{};
  std::array<double, kSectors> outputs{};
  double aggregate_price = 1.0;
  double aggregate_output = 0.0;
  std::array<double, kSectors> expenditure_shares{};
  std::array<FactorArray, kSectors> income_shares{};
  std::uint32_t active = 0;  // bitmask of factors some sector uses
  int iterations = 0;
  double residual = 0.0;

  bool is_active(Factor f) const { return (active >> idx(f)) & 1u; }
};

struct SolverOptions {
  int max_iterations = 200;
  double tolerance = 1e-12;
  double damping = 0.5;
  int max_halvings = 40;
  double jacobian_step = 1e-6;
  FactorArray start = filled(kNaN);  // factor prices to start from; equal prices when unset
};

class Economy {
 public:
  explicit Economy(const EconomySpec& spec) : spec_(spec) {
    if (!(spec.eta < 1.0)) throw std::invalid_argument("economy: eta must be < 1");
    double tc = 0.0;
    for (std::size_t n = 0; n < kSectors; ++n) {
      if (!(spec.theta_c[n] > 0.0)) throw std::invalid_argument("economy: theta_c must be positive");
      tc += spec.theta_c[n];
      trees_[n] = make_tree(spec.techs[n]);
      for (Factor f : kAllFactors)
        if (trees_[n].uses(f)) active_ |= 1u << idx(f);
    }
    for (std::size_t n = 0; n < kSectors; ++n) log_theta_[n] = std::log(spec.theta_c[n] / tc);
    for (Factor f : kAllFactors)
      if (is_active(f)) {
        if (!(spec.endowments[idx(f)] > 0.0)) throw std::invalid_argument("economy: endowments must be positive");
        order_[count_++] = idx(f);
      }
  }

  const EconomySpec& spec() const { return spec_; }
  const NestTree& tree(Sector s) const { return trees_[idx(s)]; }
  bool is_active(Factor f) const { return (active_ >> idx(f)) & 1u; }
  std::uint32_t active() const { return active_; }
  bool cobb_douglas_consumer() const { return std::abs(spec_.eta) < kCobbDouglasBand; }
  double consumer_elasticity() const { return 1.0 / (1.0 - spec_.eta); }

  struct Prices {
    std::array<double, kSectors> log_p{};
    std::array<FactorArray, kSectors> lambda{};
    std::array<double, kSectors> zeta{};
    double log_P = 0.0;
  };

  // Sector prices from zero profit, expenditure shares and the consumer price index.
  Prices price_block(const FactorArray& w) const {
    Prices out;
    for (std::size_t n = 0; n < kSectors; ++n) {
      auto c = trees_[n].cost(w);
      out.log_p[n] = c.log_cost;
      out.lambda[n] = c.shares;
    }
    if (cobb_douglas_consumer()) {
      out.log_P = 0.0;
      for (std::size_t n = 0; n < kSectors; ++n) {
        out.zeta[n] = std::exp(log_theta_[n]);
        out.log_P += out.zeta[n] * (out.log_p[n] - log_theta_[n]);
      }
      return out;
    }
    double e = consumer_elasticity();
    std::array<double, kSectors> a{};
    double m = -1e300;
    for (std::size_t n = 0; n < kSectors; ++n) {
      a[n] = e * log_theta_[n] + (1.0 - e) * out.log_p[n];
      m = std::max(m, a[n]);
    }
    double s = 0.0;
    for (std::size_t n = 0; n < kSectors; ++n) s += std::exp(a[n] - m);
    double lse = m + std::log(s);
    for (std::size_t n = 0; n < kSectors; ++n) out.zeta[n] = std::exp(a[n] - lse);
    out.log_P = lse / (1.0 - e);
    return out;
  }

  EquilibriumState solve(const SolverOptions& opt = {}) const {
    const int k = count_;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(k);
    for (int j = 0; j < k; ++j)
      if (opt.start[order_[j]] > 0.0) x[j] = std::log(opt.start[order_[j]]);
    Eigen::VectorXd r = residual(x);
    int it = 0;
    for (; it < opt.max_iterations && r.cwiseAbs().maxCoeff() >= opt.tolerance; ++it) {
      Eigen::MatrixXd J(k + 1, k);
      for (int j = 0; j < k; ++j) {
        Eigen::VectorXd up = x, dn = x;
        up[j] += opt.jacobian_step;
        dn[j] -= opt.jacobian_step;
        J.col(j) = (residual(up) - residual(dn)) / (2.0 * opt.jacobian_step);
      }
      Eigen::VectorXd dx = J.colPivHouseholderQr().solve(-r);
      double merit = r.squaredNorm();
      double t = 1.0;
      Eigen::VectorXd xn, rn;
      bool accepted = false;
      for (int h = 0; h <= opt.max_halvings; ++h, t *= opt.damping) {
        xn = x + t * dx;
        // Overlong steps can push prices to zero or infinity; shorten them.
        try {
          rn = residual(xn);
        } catch (const std::domain_error&) {
          continue;
        }
        if (rn.allFinite() && rn.squaredNorm() < merit) {
          accepted = true;
          break;
        }
      }
      if (!accepted) break;
      x = xn;
      r = rn;
    }
    double res = r.cwiseAbs().maxCoeff();
    if (!(res < opt.tolerance)) {
      std::ostringstream os;
      os << "equilibrium: no convergence after " << it << " iterations, residual " << res;
      throw std::runtime_error(os.str());
    }
    return state(x, it, res);
  }

 private:
  EconomySpec spec_;
  std::array<NestTree, kSectors> trees_{};
  std::array<double, kSectors> log_theta_{};
  std::uint32_t active_ = 0;
  std::array<std::size_t, kFactors> order_{};
  int count_ = 0;

  FactorArray prices_from(const Eigen::VectorXd& x) const {
    FactorArray w = filled(kNaN);
    for (int j = 0; j < count_; ++j) w[order_[j]] = std::exp(x[j]);
    return w;
  }

  // Log excess demand for every active factor, plus the numeraire. One market
  // is redundant by Walras's law; keeping it rules out roots where the dropped
  // factor's price runs off to zero.
  Eigen::VectorXd residual(const Eigen::VectorXd& x) const {
    FactorArray w = prices_from(x);
    Prices p = price_block(w);
    double income = 0.0;
    for (int j = 0; j < count_; ++j) income += w[order_[j]] * spec_.endowments[order_[j]];
    Eigen::VectorXd r(count_ + 1);
    for (int j = 0; j < count_; ++j) {
      std::size_t f = order_[j];
      double demand_share = 0.0;
      for (std::size_t n = 0; n < kSectors; ++n) demand_share += p.zeta[n] * p.lambda[n][f];
      r[j] = std::log(demand_share) - std::log(w[f] * spec_.endowments[f] / income);
    }
    r[count_] = p.log_P;
    return r;
  }

  EquilibriumState state(const Eigen::VectorXd& x, int it, double res) const {
    EquilibriumState s;
    s.active = active_;
    s.iterations = it;
    s.residual = res;
    s.factor_prices = prices_from(x);
    Prices p = price_block(s.factor_prices);
    double income = 0.0;
    for (int j = 0; j < count_; ++j) income += s.factor_prices[order_[j]] * spec_.endowments[order_[j]];
    s.aggregate_price = std::exp(p.log_P);
    s.aggregate_output = income / s.aggregate_price;
    for (std::size_t n = 0; n < kSectors; ++n) {
      s.goods_prices[n] = std::exp(p.log_p[n]);
      s.expenditure_shares[n] = p.zeta[n];
      s.income_shares[n] = p.lambda[n];
      s.outputs[n] = p.zeta[n] * income / s.goods_prices[n];
      for (std::size_t f = 0; f < kFactors; ++f)
        s.allocations[n][f] = ((active_ >> f) & 1u) ? p.lambda[n][f] * p.zeta[n] * income / s.factor_prices[f] : 0.0;
    }
    return s;
  }
};

inline EquilibriumState solve(const EconomySpec& spec, const SolverOptions& opt = {}) {
  return Economy(spec).solve(opt);
}

struct EquilibriumResiduals {
  double clearing = 0.0;     // max relative factor-market gap
  double zero_profit = 0.0;  // max relative gap of p y against factor payments
  double goods = 0.0;        // max relative gap between primal output and recorded output
  double walras = 0.0;       // value of excess demand relative to income
};

inline EquilibriumResiduals check_equilibrium(const EconomySpec& spec, const EquilibriumState& s) {
  Economy econ(spec);
  EquilibriumResiduals r;
  double income = s.aggregate_output * s.aggregate_price, walras = 0.0;
  for (Factor f : kAllFactors) {
    if (!s.is_active(f)) continue;
    double used = s.allocations[0][idx(f)] + s.allocations[1][idx(f)];
    double e = spec.endowments[idx(f)];
    r.clearing = std::max(r.clearing, std::abs(used - e) / e);
    walras += s.factor_prices[idx(f)] * (used - e);
  }
  r.walras = std::abs(walras) / income;
  for (Sector n : kAllSectors) {
    double pay = 0.0;
    for (Factor f : kAllFactors)
      if (s.is_active(f)) pay += s.factor_prices[idx(f)] * s.allocations[idx(n)][idx(f)];
    double value = s.goods_prices[idx(n)] * s.outputs[idx(n)];
    r.zero_profit = std::max(r.zero_profit, std::abs(value - pay) / value);
    FactorArray x = s.allocations[idx(n)];
    for (auto& v : x)
      if (!(v > 0.0)) v = 1.0;  // unused entries are ignored by the tree
    double y = econ.tree(n).output(x);
    r.goods = std::max(r.goods, std::abs(y - s.outputs[idx(n)]) / s.outputs[idx(n)]);
  }
  return r;
}

// Production-side Morishima elasticity by re-solving under endowment changes.
inline double aggregate_production_oracle(const EconomySpec& spec, Factor f, Factor g, double step) {
  if (f == g) throw std::invalid_argument("oracle: factors must differ");
  auto ratio = [&](double s) {
    EconomySpec p = spec;
    p.endowments[idx(g)] *= std::exp(s);
    auto st = solve(p);
    return std::log(st.factor_prices[idx(f)] / st.factor_prices[idx(g)]);
  };
  double inverse = (ratio(step) - ratio(-step)) / (2.0 * step);
  return 1.0 / inverse;
}

// Cost-minimizing aggregate input demands for one unit of aggregate output at
// factor prices w: the consumer's CES over sector outputs priced at unit cost.
inline FactorArray aggregate_conditional_demands(const Economy& econ, const FactorArray& w) {
  auto p = econ.price_block(w);
  double P = std::exp(p.log_P);
  FactorArray d{};
  for (std::size_t n = 0; n < kSectors; ++n) {
    double pn = std::exp(p.log_p[n]);
    double yn = p.zeta[n] * P / pn;
    for (std::size_t f = 0; f < kFactors; ++f)
      if (econ.is_active(kAllFactors[f])) d[f] += yn * p.lambda[n][f] * pn / w[f];
  }
  return d;
}

// Sector outputs of the same cost-minimizing plan.
inline std::array<double, kSectors> aggregate_conditional_outputs(const Economy& econ, const FactorArray& w) {
  auto p = econ.price_block(w);
  double P = std::exp(p.log_P);
  std::array<double, kSectors> y{};
  for (std::size_t n = 0; n < kSectors; ++n) y[n] = p.zeta[n] * P / std::exp(p.log_p[n]);
  return y;
}

// Cost-side Morishima elasticity: demand-ratio response to the price of g.
inline double aggregate_cost_oracle(const EconomySpec& spec, Factor f, Factor g, double step) {
  if (f == g) throw std::invalid_argument("oracle: factors must differ");
  Economy econ(spec);
  auto base = econ.solve();
  auto ratio = [&](double s) {
    FactorArray w = base.factor_prices;
    w[idx(g)] *= std::exp(s);
    auto d = aggregate_conditional_demands(econ, w);
    return std::log(d[idx(f)] / d[idx(g)]);
  };
  return (ratio(step) - ratio(-step)) / (2.0 * step);
}

}  // namespace cesrace
