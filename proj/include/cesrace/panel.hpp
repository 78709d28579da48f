#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <compare>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "cesrace/factor.hpp"

namespace cesrace {

inline constexpr double kPanelNaN = std::numeric_limits<double>::quiet_NaN();

enum class AgeGroup { Young, Middle, Old };
enum class EduGroup { High, Medium, Low };

inline std::string_view age_name(AgeGroup a) {
  static constexpr std::array<std::string_view, 3> n{"young", "middle", "old"};
  return n[static_cast<std::size_t>(a)];
}
inline std::string_view edu_name(EduGroup e) {
  static constexpr std::array<std::string_view, 3> n{"high", "medium", "low"};
  return n[static_cast<std::size_t>(e)];
}
inline std::optional<AgeGroup> parse_age(std::string_view s) {
  for (AgeGroup a : {AgeGroup::Young, AgeGroup::Middle, AgeGroup::Old})
    if (age_name(a) == s) return a;
  return std::nullopt;
}
inline std::optional<EduGroup> parse_edu(std::string_view s) {
  for (EduGroup e : {EduGroup::High, EduGroup::Medium, EduGroup::Low})
    if (edu_name(e) == s) return e;
  return std::nullopt;
}

struct GroupCell {
  AgeGroup age = AgeGroup::Middle;
  EduGroup edu = EduGroup::High;
  double hours = 0.0;
  double wage = 0.0;

  bool same_group(const GroupCell& o) const { return age == o.age && edu == o.edu; }
};

// Slot of a labor factor in per-labor arrays (Lfh, Lmh, Lfu, Lmu).
constexpr std::size_t labor_slot(Factor f) { return idx(f) - 1; }

struct CellKey {
  std::string country;
  Sector sector = Sector::Goods;
  std::string industry;
  int year = 0;

  auto operator<=>(const CellKey&) const = default;
};

struct RunKey {
  std::string country;
  Sector sector = Sector::Goods;
  std::string industry;

  auto operator<=>(const RunKey&) const = default;
};

struct PanelObservation {
  std::string country;
  Sector sector = Sector::Goods;
  std::string industry;
  int year = 0;
  FactorArray quantity = filled(kPanelNaN);
  FactorArray price = filled(kPanelNaN);
  std::array<double, 2> investment_price{kPanelNaN, kPanelNaN};  // ki, ko
  std::array<std::vector<GroupCell>, 4> groups{};
  double output_quantity = kPanelNaN;  // real output, NaN when not supplied
  double output_deflator = 1.0;
  bool rental_available = true;

  CellKey key() const { return {country, sector, industry, year}; }
  RunKey run() const { return {country, sector, industry}; }
  bool has_output() const { return std::isfinite(output_quantity); }
  double bill(Factor f) const { return price[idx(f)] * quantity[idx(f)]; }
  double labor_bill() const {
    double s = 0.0;
    for (Factor f : kLaborFactors) s += bill(f);
    return s;
  }
  double output_value() const {
    if (has_output()) return output_quantity * output_deflator;
    double s = 0.0;
    for (Factor f : kAllFactors) s += bill(f);
    return s;
  }
};

struct Panel {
  std::vector<PanelObservation> observations;
  int base_year = 0;
};

struct SchemaError : std::runtime_error {
  std::string file;
  std::size_t row = 0;
  std::string column;
  SchemaError(std::string f, std::size_t r, std::string c, const std::string& msg)
      : std::runtime_error(f + ":" + std::to_string(r) + ": column '" + c + "': " + msg),
        file(std::move(f)),
        row(r),
        column(std::move(c)) {}
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

class CsvReader {
 public:
  CsvReader(const std::string& path, const std::vector<std::string>& required) : path_(path), in_(path) {
    if (!in_) throw SchemaError(path, 0, "", "cannot open file");
    std::string line;
    if (!std::getline(in_, line)) throw SchemaError(path, 1, "", "missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    header_ = split_csv(line);
    for (const auto& r : required)
      if (column(r) < 0) throw SchemaError(path, 1, r, "required column missing");
  }

  bool next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++row_;
      if (line.empty() || line == "\r") continue;
      fields_ = split_csv(line);
      if (fields_.size() != header_.size())
        throw SchemaError(path_, row_, "", "expected " + std::to_string(header_.size()) + " fields");
      return true;
    }
    return false;
  }

  int column(std::string_view name) const {
    for (std::size_t i = 0; i < header_.size(); ++i)
      if (header_[i] == name) return static_cast<int>(i);
    return -1;
  }
  bool has(std::string_view name) const { return column(name) >= 0; }
  const std::string& text(std::string_view name) const { return fields_[static_cast<std::size_t>(column(name))]; }
  std::size_t row() const { return row_; }
  const std::string& path() const { return path_; }

  double number(std::string_view name, bool allow_empty = false) const {
    const std::string& s = text(name);
    if (s.empty()) {
      if (allow_empty) return kPanelNaN;
      throw SchemaError(path_, row(), std::string(name), "empty value");
    }
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw SchemaError(path_, row(), std::string(name), "not a number: '" + s + "'");
    return v;
  }
  int integer(std::string_view name) const {
    const std::string& s = text(name);
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw SchemaError(path_, row(), std::string(name), "not an integer: '" + s + "'");
    return v;
  }
  Sector sector(std::string_view name) const {
    auto s = parse_sector(text(name));
    if (!s) throw SchemaError(path_, row(), std::string(name), "unknown sector '" + text(name) + "'");
    return *s;
  }

 private:
  std::string path_;
  std::ifstream in_;
  std::vector<std::string> header_;
  std::vector<std::string> fields_;
  std::size_t row_ = 1;
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::array<char, 32> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), p);
}

}  // namespace detail

inline std::map<RunKey, std::vector<std::size_t>> runs(const Panel& panel) {
  std::map<RunKey, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < panel.observations.size(); ++i) out[panel.observations[i].run()].push_back(i);
  for (auto& [k, v] : out)
    std::sort(v.begin(), v.end(),
              [&](std::size_t a, std::size_t b) { return panel.observations[a].year < panel.observations[b].year; });
  return out;
}

// panel.csv rows carry one factor each; the optional factor "output" gives real
// output (quantity) and its deflator (price).
inline Panel read_panel(const std::string& panel_path, const std::optional<std::string>& groups_path = std::nullopt) {
  detail::CsvReader r(panel_path, {"country", "sector", "industry", "year", "factor", "quantity", "price"});
  const bool has_inv = r.has("investment_price");
  std::map<CellKey, PanelObservation> cells;
  std::map<CellKey, std::uint32_t> seen;
  while (r.next()) {
    CellKey key{r.text("country"), r.sector("sector"), r.text("industry"), r.integer("year")};
    if (key.country.empty()) throw SchemaError(panel_path, r.row(), "country", "empty value");
    auto& o = cells[key];
    o.country = key.country;
    o.sector = key.sector;
    o.industry = key.industry;
    o.year = key.year;
    const std::string& fname = r.text("factor");
    std::uint32_t bit = 0;
    if (fname == "output") {
      o.output_quantity = r.number("quantity");
      o.output_deflator = r.number("price");
      bit = 1u << kFactors;
    } else {
      auto f = parse_factor(fname);
      if (!f) throw SchemaError(panel_path, r.row(), "factor", "unknown factor '" + fname + "'");
      o.quantity[idx(*f)] = r.number("quantity");
      o.price[idx(*f)] = r.number("price", !is_labor(*f));
      if (has_inv && !is_labor(*f)) o.investment_price[*f == Factor::Ki ? 0 : 1] = r.number("investment_price", true);
      bit = 1u << idx(*f);
    }
    if (seen[key] & bit) throw SchemaError(panel_path, r.row(), "factor", "duplicate row for " + fname);
    seen[key] |= bit;
  }
  for (const auto& [key, mask] : seen)
    for (Factor f : kAllFactors)
      if (!(mask & (1u << idx(f))))
        throw SchemaError(panel_path, 0, "factor",
                          "cell " + key.country + "/" + std::string(sector_name(key.sector)) + "/" + key.industry + "/" +
                              std::to_string(key.year) + " lacks factor " + std::string(factor_name(f)));
  if (groups_path) {
    detail::CsvReader g(*groups_path,
                        {"country", "sector", "industry", "year", "factor", "age_group", "edu_group", "hours", "wage"});
    while (g.next()) {
      CellKey key{g.text("country"), g.sector("sector"), g.text("industry"), g.integer("year")};
      auto it = cells.find(key);
      if (it == cells.end()) throw SchemaError(*groups_path, g.row(), "country", "group row without panel cell");
      auto f = parse_factor(g.text("factor"));
      if (!f || !is_labor(*f)) throw SchemaError(*groups_path, g.row(), "factor", "not a labor factor");
      auto a = parse_age(g.text("age_group"));
      if (!a) throw SchemaError(*groups_path, g.row(), "age_group", "unknown age group");
      auto e = parse_edu(g.text("edu_group"));
      if (!e) throw SchemaError(*groups_path, g.row(), "edu_group", "unknown education group");
      if (is_skilled(*f) != (*e == EduGroup::High))
        throw SchemaError(*groups_path, g.row(), "edu_group", "education group inconsistent with skill type");
      GroupCell c{*a, *e, g.number("hours"), g.number("wage")};
      if (c.hours < 0.0) throw SchemaError(*groups_path, g.row(), "hours", "negative hours");
      if (!(c.wage > 0.0) && c.hours > 0.0) throw SchemaError(*groups_path, g.row(), "wage", "non-positive wage");
      it->second.groups[labor_slot(*f)].push_back(c);
    }
  }
  Panel p;
  p.observations.reserve(cells.size());
  for (auto& [k, o] : cells) {
    if (std::isnan(o.price[idx(Factor::Ki)]) || std::isnan(o.price[idx(Factor::Ko)])) o.rental_available = false;
    p.observations.push_back(std::move(o));
  }
  p.base_year = p.observations.empty() ? 0 : p.observations.front().year;
  for (const auto& o : p.observations) p.base_year = std::min(p.base_year, o.year);
  return p;
}

inline void write_panel(const Panel& panel, std::ostream& out) {
  out << "country,sector,industry,year,factor,quantity,price,investment_price\n";
  for (const auto& o : panel.observations) {
    std::string head = o.country + "," + std::string(sector_name(o.sector)) + "," + o.industry + "," +
                       std::to_string(o.year) + ",";
    for (Factor f : kAllFactors) {
      out << head << factor_name(f) << "," << detail::fmt(o.quantity[idx(f)]) << "," << detail::fmt(o.price[idx(f)])
          << ",";
      if (f == Factor::Ki) out << detail::fmt(o.investment_price[0]);
      if (f == Factor::Ko) out << detail::fmt(o.investment_price[1]);
      out << "\n";
    }
    if (o.has_output())
      out << head << "output," << detail::fmt(o.output_quantity) << "," << detail::fmt(o.output_deflator) << ",\n";
  }
}

inline void write_groups(const Panel& panel, std::ostream& g) {
  g << "country,sector,industry,year,factor,age_group,edu_group,hours,wage\n";
  for (const auto& o : panel.observations)
    for (Factor f : kLaborFactors)
      for (const auto& c : o.groups[labor_slot(f)])
        g << o.country << "," << sector_name(o.sector) << "," << o.industry << "," << o.year << "," << factor_name(f)
          << "," << age_name(c.age) << "," << edu_name(c.edu) << "," << detail::fmt(c.hours) << ","
          << detail::fmt(c.wage) << "\n";
}

inline void write_panel(const Panel& panel, const std::string& panel_path,
                        const std::optional<std::string>& groups_path = std::nullopt) {
  std::ofstream out(panel_path);
  if (!out) throw std::runtime_error("cannot write " + panel_path);
  write_panel(panel, out);
  if (!groups_path) return;
  std::ofstream g(*groups_path);
  if (!g) throw std::runtime_error("cannot write " + *groups_path);
  write_groups(panel, g);
}


struct SectorKey {
  std::string country;
  Sector sector = Sector::Goods;
  int year = 0;

  auto operator<=>(const SectorKey&) const = default;
};

// Country-sector-year totals over industries: quantities add up, prices are
// unit values (payments over quantity).
struct SectorCell {
  FactorArray quantity = filled(0.0);
  FactorArray price = filled(0.0);
  double output_value = 0.0;
  double real_output = 0.0;
  bool rental_available = true;
  int industries = 0;

  double bill(Factor f) const { return price[idx(f)] * quantity[idx(f)]; }
  FactorArray bills() const {
    FactorArray b;
    for (Factor f : kAllFactors) b[idx(f)] = bill(f);
    return b;
  }
  double deflator() const { return output_value / real_output; }
};

using SectorTable = std::map<SectorKey, SectorCell>;

inline SectorTable aggregate_sectors(const Panel& panel) {
  SectorTable out;
  std::map<SectorKey, FactorArray> pay;
  for (const auto& o : panel.observations) {
    SectorKey k{o.country, o.sector, o.year};
    auto& c = out[k];
    auto& b = pay.try_emplace(k, filled(0.0)).first->second;
    ++c.industries;
    c.rental_available = c.rental_available && o.rental_available;
    for (Factor f : kAllFactors) {
      c.quantity[idx(f)] += o.quantity[idx(f)];
      b[idx(f)] += o.bill(f);
    }
    c.output_value += o.output_value();
    c.real_output += o.has_output() ? o.output_quantity : o.output_value();
  }
  for (auto& [k, c] : out)
    for (Factor f : kAllFactors) c.price[idx(f)] = pay[k][idx(f)] / c.quantity[idx(f)];
  return out;
}

struct ValidationOptions {
  bool require_capital_prices = true;
  bool markup = false;  // when false, factor payments must exhaust output value
  double accounting_tolerance = 1e-6;
};

inline void validate(const Panel& panel, const ValidationOptions& opt = {}) {
  auto where = [](const PanelObservation& o) {
    return o.country + "/" + std::string(sector_name(o.sector)) + "/" + o.industry + "/" + std::to_string(o.year);
  };
  for (const auto& o : panel.observations) {
    for (Factor f : kAllFactors) {
      if (!(o.quantity[idx(f)] > 0.0))
        throw ValidationError(where(o) + ": non-positive quantity for " + std::string(factor_name(f)));
      bool need = is_labor(f) || (opt.require_capital_prices && o.rental_available);
      if (need && !(o.price[idx(f)] > 0.0))
        throw ValidationError(where(o) + ": non-positive price for " + std::string(factor_name(f)));
    }
    for (double q : o.investment_price)
      if (!std::isnan(q) && !(q > 0.0)) throw ValidationError(where(o) + ": non-positive investment price");
    if (o.has_output()) {
      if (!(o.output_quantity > 0.0) || !(o.output_deflator > 0.0))
        throw ValidationError(where(o) + ": non-positive output or deflator");
      bool priced = std::isfinite(o.price[idx(Factor::Ki)]) && std::isfinite(o.price[idx(Factor::Ko)]);
      if (!opt.markup && priced) {
        double pay = 0.0;
        for (Factor f : kAllFactors) pay += o.bill(f);
        double v = o.output_value();
        if (std::abs(pay - v) > opt.accounting_tolerance * v)
          throw ValidationError(where(o) + ": factor payments do not exhaust output value");
      }
    }
  }
  for (const auto& [k, ix] : runs(panel))
    for (std::size_t i = 1; i < ix.size(); ++i) {
      int a = panel.observations[ix[i - 1]].year, b = panel.observations[ix[i]].year;
      if (a == b) throw ValidationError(where(panel.observations[ix[i]]) + ": duplicate cell");
      if (b != a + 1) throw ValidationError(where(panel.observations[ix[i]]) + ": years not contiguous");
    }
}

struct CompositionOptions {
  GroupCell skilled_base{AgeGroup::Middle, EduGroup::High};
  GroupCell unskilled_base{AgeGroup::Middle, EduGroup::Medium};
};

// Fixed-composition wages and efficiency-weighted hours from group detail.
// Means are taken over each (country, sector, industry) run. Labor factors
// without group detail pass through unchanged.
inline Panel adjust_composition(const Panel& raw, const CompositionOptions& opt = {},
                                std::vector<std::string>* log = nullptr) {
  auto note = [&](const std::string& s) {
    if (log) log->push_back(s);
  };
  Panel out = raw;
  std::vector<bool> reject(raw.observations.size(), false);
  for (const auto& [key, ix] : runs(raw)) {
    for (Factor f : kLaborFactors) {
      const std::size_t s = labor_slot(f);
      const GroupCell& base = is_skilled(f) ? opt.skilled_base : opt.unskilled_base;
      bool any = false;
      for (std::size_t i : ix) any = any || !raw.observations[i].groups[s].empty();
      if (!any) continue;
      // Distinct groups in order of first appearance.
      std::vector<GroupCell> kinds;
      for (std::size_t i : ix)
        for (const auto& c : raw.observations[i].groups[s])
          if (std::none_of(kinds.begin(), kinds.end(), [&](const GroupCell& k) { return k.same_group(c); }))
            kinds.push_back(c);
      const std::size_t G = kinds.size();
      std::vector<double> share_sum(G, 0.0), wage_sum(G, 0.0);
      std::vector<int> wage_n(G, 0);
      int periods = 0;
      for (std::size_t i : ix) {
        const auto& cells = raw.observations[i].groups[s];
        double total = 0.0;
        for (const auto& c : cells) total += c.hours;
        if (!(total > 0.0)) continue;
        ++periods;
        for (const auto& c : cells) {
          std::size_t g = static_cast<std::size_t>(
              std::find_if(kinds.begin(), kinds.end(), [&](const GroupCell& k) { return k.same_group(c); }) -
              kinds.begin());
          share_sum[g] += c.hours / total;
          if (c.hours > 0.0) {
            wage_sum[g] += c.wage;
            ++wage_n[g];
          }
        }
      }
      auto bit = std::find_if(kinds.begin(), kinds.end(), [&](const GroupCell& k) { return k.same_group(base); });
      std::size_t b = static_cast<std::size_t>(bit - kinds.begin());
      if (b == G || wage_n[b] == 0 || periods == 0) {
        for (std::size_t i : ix) reject[i] = true;
        note(key.country + "/" + std::string(sector_name(key.sector)) + "/" + key.industry + ": no base group for " +
             std::string(factor_name(f)) + ", run rejected");
        continue;
      }
      std::vector<double> mean_share(G), efficiency(G);
      double wbase = wage_sum[b] / wage_n[b];
      for (std::size_t g = 0; g < G; ++g) {
        mean_share[g] = share_sum[g] / periods;
        efficiency[g] = wage_n[g] > 0 ? (wage_sum[g] / wage_n[g]) / wbase : 0.0;
      }
      for (std::size_t i : ix) {
        const auto& cells = raw.observations[i].groups[s];
        double w = 0.0, wsh = 0.0, hours = 0.0;
        bool has_base = false;
        for (const auto& c : cells) {
          std::size_t g = static_cast<std::size_t>(
              std::find_if(kinds.begin(), kinds.end(), [&](const GroupCell& k) { return k.same_group(c); }) -
              kinds.begin());
          if (!(c.hours > 0.0)) {
            note(raw.observations[i].country + "/" + std::to_string(raw.observations[i].year) + ": zero-hour group " +
                 std::string(age_name(c.age)) + "/" + std::string(edu_name(c.edu)) + " dropped");
            continue;
          }
          has_base = has_base || g == b;
          w += mean_share[g] * c.wage;
          wsh += mean_share[g];
          hours += efficiency[g] * c.hours;
        }
        if (!has_base) {
          reject[i] = true;
          note(raw.observations[i].country + "/" + std::to_string(raw.observations[i].year) + ": base group missing for " +
               std::string(factor_name(f)) + ", observation rejected");
          continue;
        }
        out.observations[i].price[idx(f)] = w / wsh;
        out.observations[i].quantity[idx(f)] = hours;
      }
    }
  }
  std::vector<PanelObservation> kept;
  for (std::size_t i = 0; i < out.observations.size(); ++i)
    if (!reject[i]) kept.push_back(std::move(out.observations[i]));
  out.observations = std::move(kept);
  return out;
}

struct Depreciation {
  double ki = 0.0;
  double ko = 0.0;
  double of(std::size_t slot) const { return slot == 0 ? ki : ko; }
};

inline constexpr std::array<Factor, 2> kCapitalFactors{Factor::Ki, Factor::Ko};

// Rental prices with the return rate that makes capital payments exhaust
// capital income (output value less labor payments).
inline Panel rental_price_internal(const Panel& panel, const Depreciation& dep) {
  Panel out = panel;
  for (const auto& [key, ix] : runs(panel)) {
    out.observations[ix[0]].rental_available = false;
    for (Factor f : kCapitalFactors) out.observations[ix[0]].price[idx(f)] = kPanelNaN;
    for (std::size_t t = 1; t < ix.size(); ++t) {
      const auto& now = panel.observations[ix[t]];
      const auto& prev = panel.observations[ix[t - 1]];
      if (!now.has_output()) throw std::invalid_argument("rental_price_internal: output value required");
      double income = now.output_value() - now.labor_bill();
      double num = income, den = 0.0;
      for (std::size_t s = 0; s < 2; ++s) {
        double k = now.quantity[idx(kCapitalFactors[s])];
        double q1 = now.investment_price[s], q0 = prev.investment_price[s];
        num += -dep.of(s) * q1 * k + (q1 - q0) * k;
        den += q0 * k;
      }
      if (!(std::abs(den) > 0.0) || !std::isfinite(den)) throw std::domain_error("degenerate capital stock");
      double iota = num / den;
      auto& o = out.observations[ix[t]];
      for (std::size_t s = 0; s < 2; ++s) {
        double q1 = now.investment_price[s], q0 = prev.investment_price[s];
        o.price[idx(kCapitalFactors[s])] = dep.of(s) * q1 + iota * q0 - (q1 - q0);
      }
    }
  }
  return out;
}

using CpiSeries = std::map<std::string, std::map<int, double>>;

inline CpiSeries read_cpi(const std::string& path) {
  detail::CsvReader r(path, {"country", "year", "cpi"});
  CpiSeries out;
  while (r.next()) {
    double v = r.number("cpi");
    if (!(v > 0.0)) throw SchemaError(path, r.row(), "cpi", "non-positive value");
    out[r.text("country")][r.integer("year")] = v;
  }
  return out;
}

// 0.04 plus the centered five-year mean of CPI inflation; nullopt when the
// window t-3..t+2 is incomplete.
inline std::optional<double> external_rate(const std::map<int, double>& cpi, int t) {
  double s = 0.0;
  for (int tau = -2; tau <= 2; ++tau) {
    auto a = cpi.find(t - tau), b = cpi.find(t - tau - 1);
    if (a == cpi.end() || b == cpi.end()) return std::nullopt;
    s += (a->second - b->second) / b->second;
  }
  return 0.04 + s / 5.0;
}

inline Panel rental_price_external(const Panel& panel, const Depreciation& dep, const CpiSeries& cpi) {
  Panel out = panel;
  for (const auto& [key, ix] : runs(panel)) {
    auto c = cpi.find(key.country);
    for (std::size_t t = 0; t < ix.size(); ++t) {
      auto& o = out.observations[ix[t]];
      std::optional<double> iota;
      if (t >= 2 && c != cpi.end()) iota = external_rate(c->second, o.year);
      if (!iota) {
        o.rental_available = false;
        for (Factor f : kCapitalFactors) o.price[idx(f)] = kPanelNaN;
        continue;
      }
      const auto& p1 = panel.observations[ix[t - 1]];
      const auto& p2 = panel.observations[ix[t - 2]];
      for (std::size_t s = 0; s < 2; ++s) {
        double q = o.investment_price[s], q1 = p1.investment_price[s], q2 = p2.investment_price[s];
        o.price[idx(kCapitalFactors[s])] = dep.of(s) * q + *iota * q1 - 0.5 * (std::log(q) - std::log(q2)) * q1;
      }
    }
  }
  return out;
}

// Divides every monetary column by the output deflator.
inline Panel deflate(const Panel& panel) {
  Panel out = panel;
  for (auto& o : out.observations) {
    double d = o.output_deflator;
    if (d == 1.0) continue;
    for (auto& p : o.price) p /= d;
    for (auto& q : o.investment_price) q /= d;
    for (auto& g : o.groups)
      for (auto& c : g) c.wage /= d;
    o.output_deflator = 1.0;
  }
  return out;
}

struct InstitutionRow {
  double bargaining_coverage = kPanelNaN;
  double epl = kPanelNaN;
  double minwage_present = 0.0;
  double minwage_level = 0.0;
};

using InstitutionTable = std::map<std::pair<std::string, int>, InstitutionRow>;

inline InstitutionTable read_institutions(const std::string& path) {
  detail::CsvReader r(path, {"country", "year", "bargaining_coverage", "epl", "minwage_present", "minwage_level"});
  InstitutionTable out;
  while (r.next()) {
    InstitutionRow row{r.number("bargaining_coverage"), r.number("epl"), r.number("minwage_present"),
                       r.number("minwage_level", true)};
    if (!(row.bargaining_coverage > 0.0)) throw SchemaError(path, r.row(), "bargaining_coverage", "must be positive");
    if (!(row.epl > 0.0)) throw SchemaError(path, r.row(), "epl", "must be positive");
    if (std::isnan(row.minwage_level)) row.minwage_level = 0.0;
    out[{r.text("country"), r.integer("year")}] = row;
  }
  return out;
}

// Key-value configuration: "key = value" per line, '#' starts a comment.
class Config {
 public:
  Config() = default;

  static Config parse(std::istream& in, const std::string& name = "config") {
    Config c;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
      ++row;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto trim = [](std::string s) {
        auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw SchemaError(name, row, "", "expected key = value");
      std::string k = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
      if (k.empty()) throw SchemaError(name, row, "", "empty key");
      c.values_[k] = v;
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError(path, 0, "", "cannot open file");
    return parse(in, path);
  }

  void set(const std::string& k, const std::string& v) { values_[k] = v; }
  bool has(const std::string& k) const { return values_.count(k) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string text(const std::string& k, const std::string& fallback) const {
    auto it = values_.find(k);
    return it == values_.end() ? fallback : it->second;
  }
  double number(const std::string& k, double fallback) const {
    auto it = values_.find(k);
    if (it == values_.end()) return fallback;
    double v = 0.0;
    const std::string& s = it->second;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw SchemaError("config", 0, k, "not a number: '" + s + "'");
    return v;
  }
  int integer(const std::string& k, int fallback) const {
    double v = number(k, fallback);
    if (v != std::floor(v)) throw SchemaError("config", 0, k, "not an integer");
    return static_cast<int>(v);
  }

  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

enum class RateOfReturn { Internal, External, Given };

struct PanelConfig {
  int base_year = 0;
  Depreciation depreciation{0.12, 0.05};
  RateOfReturn rate_of_return = RateOfReturn::Internal;
  int diff_horizon = 5;

  static PanelConfig from(const Config& c) {
    PanelConfig p;
    p.base_year = c.integer("base_year", 0);
    p.depreciation.ki = c.number("depreciation.ki", p.depreciation.ki);
    p.depreciation.ko = c.number("depreciation.ko", p.depreciation.ko);
    std::string r = c.text("rate_of_return", "internal");
    if (r == "internal") p.rate_of_return = RateOfReturn::Internal;
    else if (r == "external") p.rate_of_return = RateOfReturn::External;
    else if (r == "given") p.rate_of_return = RateOfReturn::Given;
    else throw SchemaError("config", 0, "rate_of_return", "expected internal|external|given");
    p.diff_horizon = c.integer("diff_horizon", 5);
    if (p.diff_horizon != 5 && p.diff_horizon != 10) throw SchemaError("config", 0, "diff_horizon", "expected 5 or 10");
    return p;
  }
};

}  // namespace cesrace
