#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cesrace/aggregate.hpp"
#include "cesrace/panel.hpp"
#include "cesrace/parallel.hpp"

namespace cesrace {

struct DecompositionReport {
  std::string target;
  double data_change = 0.0;
  double model_change = 0.0;
  double residual = 0.0;
  std::vector<std::pair<std::string, double>> contributions;  // ordered columns
  std::map<std::string, double> se;                          // bootstrap, by column

  double contribution(const std::string& column) const {
    for (const auto& [c, v] : contributions)
      if (c == column) return v;
    throw std::out_of_range("decomposition: no column " + column);
  }
  // Restores the additive identities after contributions change.
  void close() {
    model_change = 0.0;
    for (const auto& [c, v] : contributions) model_change += v;
    residual = data_change - model_change;
  }
};

// Log changes between two points, per factor. Quantities are normalized by
// real aggregate output and prices by the aggregate price.
struct FactorChanges {
  FactorArray quantity_tilde = filled(0.0);
  FactorArray price_tilde = filled(0.0);
  FactorArray quantity = filled(0.0);
  FactorArray price = filled(0.0);
  FactorArray share = filled(0.0);  // factor income over aggregate income
  double labor_share = 0.0;
  std::uint32_t active = 0;
};

inline FactorChanges state_changes(const EquilibriumState& from, const EquilibriumState& to) {
  FactorChanges c;
  c.active = from.active & to.active;
  double y0 = from.aggregate_output, y1 = to.aggregate_output;
  double p0 = from.aggregate_price, p1 = to.aggregate_price;
  double lab0 = 0.0, lab1 = 0.0;
  for (Factor f : kAllFactors) {
    std::size_t i = idx(f);
    if (!((c.active >> i) & 1u)) continue;
    double q0 = from.allocations[0][i] + from.allocations[1][i];
    double q1 = to.allocations[0][i] + to.allocations[1][i];
    double w0 = from.factor_prices[i], w1 = to.factor_prices[i];
    c.quantity[i] = std::log(q1 / q0);
    c.price[i] = std::log(w1 / w0);
    c.quantity_tilde[i] = c.quantity[i] - std::log(y1 / y0);
    c.price_tilde[i] = c.price[i] - std::log(p1 / p0);
    c.share[i] = std::log((w1 * q1) / (p1 * y1)) - std::log((w0 * q0) / (p0 * y0));
    if (f != Factor::Ki && f != Factor::Ko) {
      lab0 += w0 * q0;
      lab1 += w1 * q1;
    }
  }
  c.labor_share = std::log(lab1 / (p1 * y1)) - std::log(lab0 / (p0 * y0));
  return c;
}

// ---------------------------------------------------------------------------
// Decompositions

inline std::string factor_column(Factor f) { return std::string(factor_name(f)); }

// "mh" for male skilled labor; capital keeps its factor name.
inline std::string group_label(Factor f) {
  std::string n(factor_name(f));
  return f == Factor::Ki || f == Factor::Ko ? n : n.substr(1);
}

inline void check_pair(Factor f, Factor g, std::uint32_t active) {
  if (f == g) throw std::invalid_argument("decompose: factors must differ");
  if (!((active >> idx(f)) & 1u) || !((active >> idx(g)) & 1u))
    throw std::invalid_argument("decompose: inactive factor in target");
}

// Relative wage of f to g from normalized quantity changes and production-side
// elasticities.
inline DecompositionReport decompose_wages(const ElasticityMatrix& prod, const FactorChanges& ch, Factor f, Factor g,
                                           std::uint32_t active) {
  check_pair(f, g, active);
  DecompositionReport r;
  r.target = "ln(w_" + group_label(f) + "/w_" + group_label(g) + ")";
  r.data_change = ch.price[idx(f)] - ch.price[idx(g)];
  for (Factor h : kAllFactors) {
    if (!((active >> idx(h)) & 1u)) continue;
    double coef;
    if (h == f) coef = -1.0 / prod(g, f);
    else if (h == g) coef = 1.0 / prod(f, g);
    else coef = 1.0 / prod(f, h) - 1.0 / prod(g, h);
    r.contributions.push_back({factor_column(h), coef * ch.quantity_tilde[idx(h)]});
  }
  r.close();
  return r;
}

// Relative quantity of f to g from normalized price changes and cost-side
// elasticities.
inline DecompositionReport decompose_demand(const ElasticityMatrix& cost, const FactorChanges& ch, Factor f, Factor g,
                                            std::uint32_t active) {
  check_pair(f, g, active);
  DecompositionReport r;
  r.target = "ln(l_" + group_label(f) + "/l_" + group_label(g) + ")";
  r.data_change = ch.quantity[idx(f)] - ch.quantity[idx(g)];
  for (Factor h : kAllFactors) {
    if (!((active >> idx(h)) & 1u)) continue;
    double coef;
    if (h == f) coef = -cost(g, f);
    else if (h == g) coef = cost(f, g);
    else coef = cost(f, h) - cost(g, h);
    r.contributions.push_back({factor_column(h), coef * ch.price_tilde[idx(h)]});
  }
  r.close();
  return r;
}

enum class ShareRoute { Quantity, Price };

inline std::string_view share_route_name(ShareRoute r) { return r == ShareRoute::Quantity ? "quantity" : "price"; }

// Income share of f from normalized quantity or price changes.
inline DecompositionReport decompose_shares(const PsiMatrices& psi, const FactorChanges& ch, Factor f, ShareRoute route) {
  if (!((psi.active >> idx(f)) & 1u)) throw std::invalid_argument("decompose: inactive factor in target");
  DecompositionReport r;
  r.target = "ln(share_" + group_label(f) + ")|" + std::string(share_route_name(route));
  r.data_change = ch.share[idx(f)];
  const FactorMatrix& m = route == ShareRoute::Quantity ? psi.psi_l : psi.psi_w;
  const FactorArray& d = route == ShareRoute::Quantity ? ch.quantity_tilde : ch.price_tilde;
  for (Factor g : kAllFactors) {
    if (!((psi.active >> idx(g)) & 1u)) continue;
    r.contributions.push_back({factor_column(g), m(idx(f), idx(g)) * d[idx(g)]});
  }
  r.close();
  return r;
}

inline const std::vector<std::pair<Factor, Factor>>& decomposition_pairs() {
  static const std::vector<std::pair<Factor, Factor>> p{
      {Factor::Lmh, Factor::Lfh}, {Factor::Lmu, Factor::Lfu}, {Factor::Lmh, Factor::Lmu}, {Factor::Lfh, Factor::Lfu}};
  return p;
}

// ---------------------------------------------------------------------------
// Labor share

struct LaborShareSplit {
  std::array<double, 4> weights{};  // labor groups in factor order
  std::array<double, 4> growth{};
  std::array<double, 4> terms{};
  double total = 0.0;
  double exact = kNaN;  // observed change of the labor share when known

  DecompositionReport report() const {
    DecompositionReport r;
    r.target = "ln(labor share)";
    for (std::size_t k = 0; k < 4; ++k) r.contributions.push_back({factor_column(kLaborFactors[k]), terms[k]});
    r.data_change = std::isnan(exact) ? total : exact;
    r.close();
    return r;
  }
};

// Weighted sum of the growth of each labor group's income share. Weights are
// used as given; the panel route normalizes them.
inline LaborShareSplit labor_share_split(const std::array<double, 4>& weights, const std::array<double, 4>& growth) {
  LaborShareSplit s;
  s.weights = weights;
  s.growth = growth;
  for (std::size_t k = 0; k < 4; ++k) {
    s.terms[k] = weights[k] * growth[k];
    s.total += s.terms[k];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Panel aggregates

struct CountryTotals {
  FactorArray quantity = filled(0.0);
  FactorArray bill = filled(0.0);
  std::array<double, kSectors> value{};
  std::array<double, kSectors> real{};
  std::array<FactorArray, kSectors> sector_bill{};

  double total_value() const { return value[0] + value[1]; }
  double total_real() const { return real[0] + real[1]; }
  double labor_bill() const {
    double s = 0.0;
    for (Factor f : kLaborFactors) s += bill[idx(f)];
    return s;
  }
};

using CountryYear = std::pair<std::string, int>;

inline std::map<CountryYear, CountryTotals> country_totals(const SectorTable& cells) {
  std::map<CountryYear, CountryTotals> out;
  for (const auto& [key, cell] : cells) {
    auto& t = out[{key.country, key.year}];
    std::size_t n = idx(key.sector);
    for (Factor f : kAllFactors) {
      t.quantity[idx(f)] += cell.quantity[idx(f)];
      t.bill[idx(f)] += cell.bill(f);
      t.sector_bill[n][idx(f)] += cell.bill(f);
    }
    t.value[n] += cell.output_value;
    t.real[n] += cell.real_output;
  }
  return out;
}

enum class CrossCountry { MeanOfChanges, Pooled };

namespace detail {

inline FactorChanges totals_changes(const CountryTotals& a, const CountryTotals& b) {
  FactorChanges c;
  double dy = std::log(b.total_real() / a.total_real());
  double dp = std::log(b.total_value() / b.total_real()) - std::log(a.total_value() / a.total_real());
  for (Factor f : kAllFactors) {
    std::size_t i = idx(f);
    if (!(a.quantity[i] > 0.0) || !(b.quantity[i] > 0.0)) continue;
    c.active |= 1u << i;
    c.quantity[i] = std::log(b.quantity[i] / a.quantity[i]);
    c.price[i] = std::log(b.bill[i] / b.quantity[i]) - std::log(a.bill[i] / a.quantity[i]);
    c.quantity_tilde[i] = c.quantity[i] - dy;
    c.price_tilde[i] = c.price[i] - dp;
    c.share[i] = std::log(b.bill[i] / b.total_value()) - std::log(a.bill[i] / a.total_value());
  }
  c.labor_share = std::log(b.labor_bill() / b.total_value()) - std::log(a.labor_bill() / a.total_value());
  return c;
}

}  // namespace detail

// Changes from `from` to `to`: the cross-country mean of country log changes,
// or the log change of totals pooled over countries.
inline FactorChanges panel_changes(const SectorTable& cells, int from, int to,
                                   CrossCountry mode = CrossCountry::MeanOfChanges) {
  auto totals = country_totals(cells);
  std::set<std::string> countries;
  for (const auto& [k, t] : totals) countries.insert(k.first);
  std::vector<std::pair<const CountryTotals*, const CountryTotals*>> ends;
  for (const auto& c : countries) {
    auto a = totals.find({c, from}), b = totals.find({c, to});
    if (a != totals.end() && b != totals.end()) ends.push_back({&a->second, &b->second});
  }
  if (ends.empty()) throw std::invalid_argument("decompose: no country observed in both window years");
  if (mode == CrossCountry::Pooled) {
    CountryTotals a, b;
    for (const auto& [x, y] : ends)
      for (auto [src, dst] : {std::pair{x, &a}, std::pair{y, &b}}) {
        for (std::size_t i = 0; i < kFactors; ++i) {
          dst->quantity[i] += src->quantity[i];
          dst->bill[i] += src->bill[i];
        }
        for (std::size_t n = 0; n < kSectors; ++n) {
          dst->value[n] += src->value[n];
          dst->real[n] += src->real[n];
        }
      }
    return detail::totals_changes(a, b);
  }
  FactorChanges mean;
  mean.active = ~0u;
  const double k = static_cast<double>(ends.size());
  for (const auto& [a, b] : ends) {
    auto c = detail::totals_changes(*a, *b);
    mean.active &= c.active;
    for (std::size_t i = 0; i < kFactors; ++i) {
      mean.quantity_tilde[i] += c.quantity_tilde[i] / k;
      mean.price_tilde[i] += c.price_tilde[i] / k;
      mean.quantity[i] += c.quantity[i] / k;
      mean.price[i] += c.price[i] / k;
      mean.share[i] += c.share[i] / k;
    }
    mean.labor_share += c.labor_share / k;
  }
  mean.active &= (1u << kFactors) - 1u;
  return mean;
}

// Evaluation point from means of sector expenditure shares and factor cost
// shares over every country observed in years from..to with priced capital.
inline EconomyPoint panel_point(const SectorTable& cells, int from, int to, double eta) {
  std::array<double, kSectors> zeta{};
  std::array<FactorArray, kSectors> lambda{filled(0.0), filled(0.0)};
  int n = 0;
  for (const auto& [k, t] : country_totals(cells)) {
    if (k.second < from || k.second > to || !std::isfinite(t.total_value())) continue;
    bool priced = true;
    for (const auto& bills : t.sector_bill)
      for (double b : bills) priced = priced && std::isfinite(b);
    if (!priced) continue;
    ++n;
    for (std::size_t s = 0; s < kSectors; ++s) {
      zeta[s] += t.value[s] / t.total_value();
      double cost = 0.0;
      for (double b : t.sector_bill[s]) cost += b;
      for (std::size_t f = 0; f < kFactors; ++f) lambda[s][f] += t.sector_bill[s][f] / cost;
    }
  }
  if (n == 0)
    throw std::invalid_argument("decompose: no priced observations in " + std::to_string(from) +
                                (from == to ? std::string() : ":" + std::to_string(to)));
  for (std::size_t s = 0; s < kSectors; ++s) {
    zeta[s] /= n;
    for (double& l : lambda[s]) l /= n;
  }
  return EconomyPoint::from_shares(zeta, lambda, eta);
}

inline EconomyPoint panel_point(const SectorTable& cells, int year, double eta) {
  return panel_point(cells, year, year, eta);
}

// Labor-share split over a window: weights are labor-bill shares averaged over
// every country and year in the window, growth is the cross-country mean.
inline LaborShareSplit labor_share_split(const SectorTable& cells, int from, int to) {
  auto totals = country_totals(cells);
  std::array<double, 4> w{};
  double count = 0.0;
  for (const auto& [k, t] : totals) {
    if (k.second < from || k.second > to) continue;
    double lab = t.labor_bill();
    for (std::size_t j = 0; j < 4; ++j) w[j] += t.bill[idx(kLaborFactors[j])] / lab;
    count += 1.0;
  }
  if (count == 0.0) throw std::invalid_argument("decompose: empty labor-share window");
  double sum = 0.0;
  for (double& v : w) sum += v;
  for (double& v : w) v /= sum;
  auto ch = panel_changes(cells, from, to);
  std::array<double, 4> g{};
  for (std::size_t j = 0; j < 4; ++j) g[j] = ch.share[idx(kLaborFactors[j])];
  auto s = labor_share_split(w, g);
  s.exact = ch.labor_share;
  return s;
}

// ---------------------------------------------------------------------------
// Window decomposition

struct DecompositionInputs {
  std::array<NestParams, kSectors> sigma;
  double eta = 0.0;
};

struct WindowOptions {
  int from = 1980;
  int to = 2005;
  bool chained = false;  // re-evaluate the point every year and sum the yearly terms
  CrossCountry cross = CrossCountry::MeanOfChanges;
};

enum class Target { Wages, Demand, Shares, LaborShare };

inline std::optional<Target> parse_target(std::string_view s) {
  if (s == "wages") return Target::Wages;
  if (s == "demand") return Target::Demand;
  if (s == "shares") return Target::Shares;
  if (s == "labor-share") return Target::LaborShare;
  return std::nullopt;
}

inline std::array<VariantTechnology, kSectors> techs_from_sigma(const std::array<NestParams, kSectors>& sigma) {
  std::array<VariantTechnology, kSectors> t;
  for (std::size_t n = 0; n < kSectors; ++n) t[n].sigma = sigma[n];
  return t;
}

inline std::vector<DecompositionReport> decompose_point(const EconomyPoint& point,
                                                        const std::array<VariantTechnology, kSectors>& techs,
                                                        const FactorChanges& ch, Target target) {
  std::vector<DecompositionReport> out;
  auto psi = psi_matrices(share_price_derivatives(techs, point), point);
  auto [prod, cost] = morishima(psi);
  const std::uint32_t active = psi.active & ch.active;
  switch (target) {
    case Target::Wages:
      for (auto [f, g] : decomposition_pairs()) out.push_back(decompose_wages(prod, ch, f, g, active));
      break;
    case Target::Demand:
      for (auto [f, g] : decomposition_pairs()) out.push_back(decompose_demand(cost, ch, f, g, active));
      break;
    case Target::Shares:
      for (ShareRoute route : {ShareRoute::Quantity, ShareRoute::Price})
        for (Factor f : {Factor::Lmh, Factor::Lfh, Factor::Lmu, Factor::Lfu})
          out.push_back(decompose_shares(psi, ch, f, route));
      break;
    case Target::LaborShare:
      throw std::invalid_argument("decompose: labor share is split from panel data");
  }
  return out;
}

inline std::vector<DecompositionReport> decompose_window(const SectorTable& cells, const DecompositionInputs& in,
                                                         Target target, const WindowOptions& opt) {
  if (opt.to <= opt.from) throw std::invalid_argument("decompose: window must run forward");
  if (target == Target::LaborShare) return {labor_share_split(cells, opt.from, opt.to).report()};
  auto techs = techs_from_sigma(in.sigma);
  if (!opt.chained)
    return decompose_point(panel_point(cells, opt.from, in.eta), techs, panel_changes(cells, opt.from, opt.to, opt.cross),
                           target);
  std::vector<DecompositionReport> sum;
  for (int t = opt.from; t < opt.to; ++t) {
    auto step = decompose_point(panel_point(cells, t, in.eta), techs, panel_changes(cells, t, t + 1, opt.cross), target);
    if (sum.empty()) {
      sum = std::move(step);
      continue;
    }
    for (std::size_t k = 0; k < sum.size(); ++k) {
      sum[k].data_change += step[k].data_change;
      for (std::size_t c = 0; c < sum[k].contributions.size(); ++c)
        sum[k].contributions[c].second += step[k].contributions[c].second;
    }
  }
  for (auto& r : sum) r.close();
  return sum;
}

// Named values of a set of reports for resampling: "target/column".
inline std::map<std::string, double> flatten(const std::vector<DecompositionReport>& reports) {
  std::map<std::string, double> out;
  for (const auto& r : reports) {
    out[r.target + "/data"] = r.data_change;
    out[r.target + "/model"] = r.model_change;
    for (const auto& [c, v] : r.contributions) out[r.target + "/" + c] = v;
  }
  return out;
}

inline void attach_se(std::vector<DecompositionReport>& reports, const std::map<std::string, double>& se) {
  for (auto& r : reports) {
    for (const char* extra : {"data", "model"})
      if (auto it = se.find(r.target + "/" + extra); it != se.end()) r.se[extra] = it->second;
    for (const auto& [c, v] : r.contributions)
      if (auto it = se.find(r.target + "/" + c); it != se.end()) r.se[c] = it->second;
  }
}

// ---------------------------------------------------------------------------
// Cluster bootstrap

struct BootstrapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using BootstrapPipeline = std::function<std::map<std::string, double>(const Panel&)>;

struct BootstrapResult {
  std::map<std::string, double> estimate;  // on the original panel
  std::map<std::string, double> se;
  int reps = 0;
  int redraws = 0;
  std::vector<std::string> log;
};

// Panel made of whole countries drawn with replacement. Repeated draws of a
// country become distinct clusters.
inline Panel resample_countries(const Panel& panel, const std::vector<std::string>& countries,
                                const std::vector<std::size_t>& draw) {
  std::map<std::string, std::vector<const PanelObservation*>> by_country;
  for (const auto& o : panel.observations) by_country[o.country].push_back(&o);
  Panel out;
  out.base_year = panel.base_year;
  std::map<std::string, int> copies;
  for (std::size_t d : draw) {
    const std::string& c = countries[d];
    int k = copies[c]++;
    std::string name = k == 0 ? c : c + "~" + std::to_string(k);
    for (const auto* o : by_country[c]) {
      out.observations.push_back(*o);
      out.observations.back().country = name;
    }
  }
  return out;
}

inline BootstrapResult cluster_bootstrap(const BootstrapPipeline& pipeline, const Panel& panel, int reps,
                                         std::uint64_t seed, unsigned workers = 0) {
  if (reps < 2) throw std::invalid_argument("bootstrap: need at least two replications");
  std::vector<std::string> countries;
  {
    std::set<std::string> s;
    for (const auto& o : panel.observations) s.insert(o.country);
    countries.assign(s.begin(), s.end());
  }
  if (countries.empty()) throw std::invalid_argument("bootstrap: empty panel");
  BootstrapResult out;
  out.reps = reps;
  out.estimate = pipeline(panel);

  const int max_redraws = reps / 10;
  std::vector<std::map<std::string, double>> values(static_cast<std::size_t>(reps));
  std::vector<int> attempts(static_cast<std::size_t>(reps), 0);
  std::vector<std::string> last_error(static_cast<std::size_t>(reps));
  std::atomic<int> redraws{0};
  const std::size_t G = countries.size();
  parallel_for(
      static_cast<std::size_t>(reps),
      [&](std::size_t r) {
        for (int attempt = 0;; ++attempt) {
          std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                            static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(attempt)};
          std::mt19937_64 rng(seq);
          std::uniform_int_distribution<std::size_t> pick(0, G - 1);
          std::vector<std::size_t> draw(G);
          for (auto& d : draw) d = pick(rng);
          try {
            values[r] = pipeline(resample_countries(panel, countries, draw));
            attempts[r] = attempt;
            return;
          } catch (const std::exception& e) {
            last_error[r] = e.what();
            if (redraws.fetch_add(1) + 1 > max_redraws)
              throw BootstrapError("bootstrap: more than 10% of replications failed; last error: " + last_error[r]);
          }
        }
      },
      workers);
  out.redraws = redraws.load();
  for (int r = 0; r < reps; ++r)
    if (attempts[r] > 0)
      out.log.push_back("bootstrap: replication " + std::to_string(r) + " redrawn " + std::to_string(attempts[r]) +
                        " time(s): " + last_error[r]);

  for (const auto& [name, v0] : out.estimate) {
    double mean = 0.0, ss = 0.0;
    int n = 0;
    for (const auto& m : values) {
      auto it = m.find(name);
      if (it == m.end()) continue;
      ++n;
      double d = it->second - mean;
      mean += d / n;
      ss += d * (it->second - mean);
    }
    out.se[name] = n > 1 ? std::sqrt(ss / (n - 1)) : kNaN;
  }
  return out;
}

}  // namespace cesrace
