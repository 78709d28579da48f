#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "cesrace/ces.hpp"
#include "cesrace/panel.hpp"

namespace cesrace {

// A quantity to instrument: the sum of the factors in the mask.
struct BartikTarget {
  std::string name;
  std::uint32_t mask = 0;
};

inline std::uint32_t factor_bit(Factor f) { return 1u << idx(f); }

inline const std::vector<BartikTarget>& standard_targets() {
  static const std::vector<BartikTarget> t{
      {"ki", factor_bit(Factor::Ki)},
      {"lfh", factor_bit(Factor::Lfh)},
      {"lmh", factor_bit(Factor::Lmh)},
      {"lfu", factor_bit(Factor::Lfu)},
      {"lmu", factor_bit(Factor::Lmu)},
      {"m", factor_bit(Factor::Lmh) | factor_bit(Factor::Lmu)},
      {"f", factor_bit(Factor::Lfh) | factor_bit(Factor::Lfu)},
      {"h", factor_bit(Factor::Lfh) | factor_bit(Factor::Lmh)},
      {"u", factor_bit(Factor::Lfu) | factor_bit(Factor::Lmu)},
  };
  return t;
}

struct BartikSeries {
  std::string target;
  std::string country;
  Sector sector = Sector::Goods;
  int year = 0;
  double value = 0.0;
};

class InstrumentTable {
 public:
  using Key = std::tuple<std::string, std::string, Sector, int>;

  void add(const BartikSeries& s) { values_[{s.target, s.country, s.sector, s.year}] = s.value; }
  void add(const std::vector<BartikSeries>& v) {
    for (const auto& s : v) add(s);
  }
  std::optional<double> get(const std::string& target, const std::string& country, Sector sector, int year) const {
    auto it = values_.find({target, country, sector, year});
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }
  std::vector<BartikSeries> series() const {
    std::vector<BartikSeries> out;
    for (const auto& [k, v] : values_) out.push_back({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), v});
    return out;
  }
  std::size_t size() const { return values_.size(); }

 private:
  std::map<Key, double> values_;
};

struct BartikOptions {
  bool leave_one_out = true;
};

namespace detail {

struct IndustryQuantities {
  // (country, sector, industry) -> year -> quantity
  std::map<RunKey, std::map<int, double>> z;
  std::map<std::string, std::map<Sector, int>> first_year;
  std::set<int> years;
};

inline IndustryQuantities industry_quantities(const Panel& panel, std::uint32_t mask) {
  IndustryQuantities q;
  for (const auto& o : panel.observations) {
    double v = 0.0;
    for (Factor f : kAllFactors)
      if (mask & factor_bit(f)) v += o.quantity[idx(f)];
    q.z[o.run()][o.year] = v;
    auto& fy = q.first_year[o.country];
    auto it = fy.find(o.sector);
    if (it == fy.end() || o.year < it->second) fy[o.sector] = o.year;
    q.years.insert(o.year);
  }
  return q;
}

}  // namespace detail

// Base-year industry shares of the other sector for one country; empty when
// the denominator vanishes.
inline std::map<std::string, double> bartik_shares(const Panel& panel, const BartikTarget& target,
                                                   const std::string& country, Sector sector) {
  auto q = detail::industry_quantities(panel, target.mask);
  std::map<std::string, double> shares;
  Sector src = other(sector);
  auto fy = q.first_year.find(country);
  if (fy == q.first_year.end() || !fy->second.count(src)) return shares;
  int t0 = fy->second.at(src);
  double total = 0.0;
  for (const auto& [run, series] : q.z) {
    if (run.country != country || run.sector != src) continue;
    auto it = series.find(t0);
    if (it == series.end()) continue;
    shares[run.industry] = it->second;
    total += it->second;
  }
  if (!(total > 0.0)) return {};
  for (auto& [d, s] : shares) s /= total;
  return shares;
}

// Shift-share instrument for the log change of target quantities in each
// sector, built from the other sector's industries: base-year local industry
// shares times the leave-one-out growth of industry totals. Countries enter an
// industry total only when observed at both ends of the difference.
inline std::vector<BartikSeries> bartik(const Panel& panel, const BartikTarget& target, int horizon,
                                        const BartikOptions& opt = {}, std::vector<std::string>* log = nullptr) {
  auto note = [&](const std::string& s) {
    if (log) log->push_back(s);
  };
  auto q = detail::industry_quantities(panel, target.mask);
  std::vector<BartikSeries> out;
  for (const auto& [country, sectors] : q.first_year) {
    for (Sector n : kAllSectors) {
      Sector src = other(n);
      if (!sectors.count(n) || !sectors.count(src)) continue;
      auto shares = bartik_shares(panel, target, country, n);
      if (shares.empty()) {
        note(country + "/" + std::string(sector_name(n)) + ": zero base-year share denominator for " + target.name);
        continue;
      }
      int t0 = sectors.at(src);
      for (int t : q.years) {
        if (t - horizon < t0) continue;
        double value = 0.0;
        bool ok = true;
        for (const auto& [industry, share] : shares) {
          double now = 0.0, then = 0.0;
          for (const auto& [run, series] : q.z) {
            if (run.sector != src || run.industry != industry) continue;
            if (opt.leave_one_out && run.country == country) continue;
            auto a = series.find(t), b = series.find(t - horizon);
            if (a == series.end() || b == series.end()) continue;
            now += a->second;
            then += b->second;
          }
          if (!(now > 0.0) || !(then > 0.0)) {
            ok = false;
            break;
          }
          value += share * (std::log(now) - std::log(then));
        }
        if (!ok) {
          note(country + "/" + std::string(sector_name(n)) + "/" + std::to_string(t) +
               ": empty leave-one-out total for " + target.name);
          continue;
        }
        out.push_back({target.name, country, n, t, value});
      }
    }
  }
  return out;
}

inline InstrumentTable bartik_all(const Panel& panel, int horizon, const BartikOptions& opt = {},
                                  std::vector<std::string>* log = nullptr) {
  InstrumentTable t;
  for (const auto& target : standard_targets()) t.add(bartik(panel, target, horizon, opt, log));
  return t;
}

using GammaTable = std::map<std::pair<std::string, Sector>, GammaWeights>;

// Mean weights per country-sector over years with complete prices.
inline GammaTable gamma_table(const SectorTable& cells) {
  std::map<std::pair<std::string, Sector>, std::vector<FactorArray>> bills;
  for (const auto& [k, c] : cells)
    if (c.rental_available) bills[{k.country, k.sector}].push_back(c.bills());
  GammaTable out;
  for (const auto& [k, b] : bills) out[k] = gamma_weights(b);
  return out;
}

// Instruments for the nest aggregates D, C, B from the factor instruments.
inline std::vector<BartikSeries> bartik_ces_aggregates(const InstrumentTable& bartiks, const GammaTable& gammas) {
  std::vector<BartikSeries> out;
  for (const auto& s : bartiks.series()) {
    if (s.target != "ki") continue;
    auto g = gammas.find({s.country, s.sector});
    if (g == gammas.end()) continue;
    auto fh = bartiks.get("lfh", s.country, s.sector, s.year);
    auto mh = bartiks.get("lmh", s.country, s.sector, s.year);
    auto fu = bartiks.get("lfu", s.country, s.sector, s.year);
    if (!fh || !mh || !fu) continue;
    FactorArray d = filled(0.0);
    d[idx(Factor::Ki)] = s.value;
    d[idx(Factor::Lfh)] = *fh;
    d[idx(Factor::Lmh)] = *mh;
    d[idx(Factor::Lfu)] = *fu;
    auto a = loglin_deltas(g->second, d);
    out.push_back({"D", s.country, s.sector, s.year, a.D});
    out.push_back({"C", s.country, s.sector, s.year, a.C});
    out.push_back({"B", s.country, s.sector, s.year, a.B});
  }
  return out;
}

inline void write_bartik_csv(const std::vector<BartikSeries>& series, std::ostream& out) {
  out << "target,country,sector,year,value\n";
  for (const auto& s : series)
    out << s.target << "," << s.country << "," << sector_name(s.sector) << "," << s.year << "," << detail::fmt(s.value)
        << "\n";
}

inline void write_bartik_csv(const std::vector<BartikSeries>& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_bartik_csv(series, out);
}

}  // namespace cesrace
