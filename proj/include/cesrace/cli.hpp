#pragma once

// Batch front-end: subcommand runners, staged artifact writing, manifests and
// table rendering. Argument parsing lives in tools/ces_race.cpp.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "cesrace/decompose.hpp"
#include "cesrace/estimate.hpp"
#include "cesrace/simulate.hpp"
#include "json.hpp"

namespace cesrace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitSchema = 2;
inline constexpr int kExitEstimation = 3;
inline constexpr int kExitInternal = 4;

// Bad flag values and missing input directories; reported like schema errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError(path, 0, "", "cannot open file");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string num(double v) { return detail::fmt(v == 0.0 ? 0.0 : v); }

// Files are held in memory and written only by commit(), each through a
// temporary name, so a failed run leaves nothing behind.
class Artifacts {
 public:
  void add(const std::string& path, std::string content) { files_.emplace_back(path, std::move(content)); }
  const std::vector<std::pair<std::string, std::string>>& files() const { return files_; }

  void commit() const {
    std::vector<std::string> staged;
    try {
      for (const auto& [path, content] : files_) {
        std::string tmp = path + ".tmp";
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        staged.push_back(tmp);
        out << content;
        out.close();
        if (!out) throw std::runtime_error("cannot write " + tmp);
      }
      for (std::size_t i = 0; i < files_.size(); ++i) std::filesystem::rename(staged[i], files_[i].first);
    } catch (...) {
      std::error_code ec;
      for (const auto& t : staged) std::filesystem::remove(t, ec);
      throw;
    }
  }

 private:
  std::vector<std::pair<std::string, std::string>> files_;
};

// Flags win over config-file values; the merged config is what gets hashed.
struct RunContext {
  std::string subcommand;
  Config config;
  std::uint64_t seed = 1;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, sha256
  std::vector<std::string> log;

  void note(const std::string& s) {
    log.push_back(s);
    std::cerr << s << "\n";
  }
  std::string read_input(const std::string& path) {
    std::string data = read_file(path);
    inputs.emplace_back(path, sha256_hex(data));
    return data;
  }
  void track_input(const std::string& path) { read_input(path); }
};

inline std::string config_hash(const RunContext& ctx) {
  return sha256_hex("subcommand = " + ctx.subcommand + "\nseed = " + std::to_string(ctx.seed) + "\n" +
                    ctx.config.serialize());
}

// Adds <stem>.manifest.json next to the primary artifact. Must be called
// after every other artifact has been added.
inline void add_manifest(Artifacts& art, const RunContext& ctx, const std::string& primary) {
  nlohmann::ordered_json m;
  m["tool"] = "ces_race";
  m["subcommand"] = ctx.subcommand;
  m["seed"] = ctx.seed;
  m["config_hash"] = config_hash(ctx);
  m["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : ctx.config.values()) m["config"][k] = v;
  m["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [p, h] : ctx.inputs) m["inputs"][p] = h;
  m["artifacts"] = nlohmann::ordered_json::object();
  for (const auto& [p, c] : art.files()) m["artifacts"][std::filesystem::path(p).filename().string()] = sha256_hex(c);
  m["log"] = ctx.log;
  std::filesystem::path p(primary);
  art.add((p.parent_path() / (p.stem().string() + ".manifest.json")).string(), m.dump(2) + "\n");
}

inline std::string sibling(const std::string& primary, const std::string& name) {
  return (std::filesystem::path(primary).parent_path() / name).string();
}

inline std::string with_extension(const std::string& primary, const std::string& ext) {
  return std::filesystem::path(primary).replace_extension(ext).string();
}

// ---------------------------------------------------------------------------
// Tables

struct TableCell {
  double estimate = kNaN;
  double se = kNaN;
};

struct Table {
  std::string title;
  std::string note;
  std::vector<std::string> rows, cols;
  std::map<std::pair<std::string, std::string>, TableCell> cells;

  void put(const std::string& row, const std::string& col, TableCell c) {
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
    cells[{row, col}] = c;
  }
  const TableCell* at(const std::string& row, const std::string& col) const {
    auto it = cells.find({row, col});
    return it == cells.end() ? nullptr : &it->second;
  }
};

inline std::string fixed3(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string md_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += '\\';
    out += c;
  }
  return out;
}

// Estimate rows followed by parenthesized standard-error rows.
inline std::string render_markdown(const std::vector<Table>& tables) {
  std::ostringstream os;
  bool first = true;
  for (const auto& t : tables) {
    if (!first) os << "\n";
    first = false;
    os << "## " << t.title << "\n\n";
    if (!t.note.empty()) os << t.note << "\n\n";
    os << "|  |";
    for (const auto& c : t.cols) os << " " << md_escape(c) << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < t.cols.size(); ++i) os << "---:|";
    os << "\n";
    for (const auto& r : t.rows) {
      bool any_se = false;
      os << "| " << md_escape(r) << " |";
      for (const auto& c : t.cols) {
        const TableCell* x = t.at(r, c);
        os << " " << (x ? fixed3(x->estimate) : "") << " |";
        any_se = any_se || (x && !std::isnan(x->se));
      }
      os << "\n";
      if (!any_se) continue;
      os << "|  |";
      for (const auto& c : t.cols) {
        const TableCell* x = t.at(r, c);
        os << " " << (x && !std::isnan(x->se) ? "(" + fixed3(x->se) + ")" : "") << " |";
      }
      os << "\n";
    }
  }
  return os.str();
}

inline std::string render_csv(const std::vector<Table>& tables) {
  std::ostringstream os;
  os << "table,row,column,estimate,se\n";
  for (const auto& t : tables)
    for (const auto& r : t.rows)
      for (const auto& c : t.cols)
        if (const TableCell* x = t.at(r, c))
          os << t.title << "," << r << "," << c << "," << num(x->estimate) << "," << num(x->se) << "\n";
  return os.str();
}

inline std::vector<Table> parse_report_csv(const std::string& path) {
  detail::CsvReader r(path, {"table", "row", "column", "estimate", "se"});
  std::vector<Table> out;
  while (r.next()) {
    const std::string& title = r.text("table");
    if (out.empty() || out.back().title != title) out.push_back({title, "", {}, {}, {}});
    out.back().put(r.text("row"), r.text("column"), {r.number("estimate", true), r.number("se", true)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Result artifacts

struct ResultRow {
  std::string sector, param;
  double estimate = kNaN, se = kNaN;
  std::string moments;
  int horizon = 5;
};

struct TestRow {
  std::string sector, test;
  double statistic = kNaN;
  int df = 0;
  double pvalue = kNaN, f_pvalue = kNaN;
  std::string moments;
  int horizon = 5;
};

struct ElasticityRow {
  std::string side, f, g;
  double estimate = kNaN, se = kNaN;
};

struct DecompRow {
  std::string target, column;
  double estimate = kNaN, se = kNaN;
};

inline std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "sector,param,estimate,se,moments,horizon\n";
  for (const auto& r : rows)
    os << r.sector << "," << r.param << "," << num(r.estimate) << "," << num(r.se) << "," << r.moments << ","
       << r.horizon << "\n";
  return os.str();
}

inline std::string tests_csv(const std::vector<TestRow>& rows) {
  std::ostringstream os;
  os << "sector,test,statistic,df,pvalue,f_pvalue,moments,horizon\n";
  for (const auto& r : rows)
    os << r.sector << "," << r.test << "," << num(r.statistic) << "," << r.df << "," << num(r.pvalue) << ","
       << num(r.f_pvalue) << "," << r.moments << "," << r.horizon << "\n";
  return os.str();
}

inline std::string elasticities_csv(const std::vector<ElasticityRow>& rows) {
  std::ostringstream os;
  os << "side,f,g,estimate,se\n";
  for (const auto& r : rows) os << r.side << "," << r.f << "," << r.g << "," << num(r.estimate) << "," << num(r.se) << "\n";
  return os.str();
}

inline std::string decomp_csv(const std::vector<DecompRow>& rows) {
  std::ostringstream os;
  os << "target,column,estimate,se\n";
  for (const auto& r : rows) os << r.target << "," << r.column << "," << num(r.estimate) << "," << num(r.se) << "\n";
  return os.str();
}

inline std::string spec_label(const std::string& sector, const std::string& moments, int horizon) {
  return sector + " " + moments + " " + std::to_string(horizon) + "y";
}

inline Table results_table(const std::vector<ResultRow>& rows) {
  Table t{"Substitution parameters", "Standard errors in parentheses.", {}, {}, {}};
  for (const auto& r : rows) t.put(r.param, spec_label(r.sector, r.moments, r.horizon), {r.estimate, r.se});
  return t;
}

inline Table tests_table(const std::vector<TestRow>& rows) {
  Table t{"Specification tests", "Wald statistics; p-values in parentheses.", {}, {}, {}};
  for (const auto& r : rows) t.put(r.test, spec_label(r.sector, r.moments, r.horizon), {r.statistic, r.pvalue});
  return t;
}

inline std::vector<Table> elasticity_tables(const std::vector<ElasticityRow>& rows) {
  std::vector<Table> out;
  for (const auto& r : rows) {
    std::string title = "Aggregate " + r.side + " elasticities";
    if (out.empty() || out.back().title != title)
      out.push_back({title, "Row factor f, column factor g; bootstrap standard errors in parentheses.", {}, {}, {}});
    out.back().put(r.f, r.g, {r.estimate, r.se});
  }
  return out;
}

inline Table decomp_table(const std::vector<DecompRow>& rows) {
  Table t{"Decomposition", "Contributions by column; bootstrap standard errors in parentheses.", {}, {}, {}};
  for (const auto& r : rows) t.put(r.target, r.column, {r.estimate, r.se});
  return t;
}

inline std::vector<ResultRow> read_results(const std::string& path) {
  detail::CsvReader r(path, {"sector", "param", "estimate", "se", "moments", "horizon"});
  std::vector<ResultRow> out;
  while (r.next())
    out.push_back({r.text("sector"), r.text("param"), r.number("estimate", true), r.number("se", true),
                   r.text("moments"), r.integer("horizon")});
  return out;
}

inline std::vector<TestRow> read_tests(const std::string& path) {
  detail::CsvReader r(path, {"sector", "test", "statistic", "df", "pvalue", "f_pvalue", "moments", "horizon"});
  std::vector<TestRow> out;
  while (r.next())
    out.push_back({r.text("sector"), r.text("test"), r.number("statistic", true), r.integer("df"),
                   r.number("pvalue", true), r.number("f_pvalue", true), r.text("moments"), r.integer("horizon")});
  return out;
}

inline std::vector<ElasticityRow> read_elasticities(const std::string& path) {
  detail::CsvReader r(path, {"side", "f", "g", "estimate", "se"});
  std::vector<ElasticityRow> out;
  while (r.next())
    out.push_back({r.text("side"), r.text("f"), r.text("g"), r.number("estimate", true), r.number("se", true)});
  return out;
}

inline std::vector<DecompRow> read_decomp(const std::string& path) {
  detail::CsvReader r(path, {"target", "column", "estimate", "se"});
  std::vector<DecompRow> out;
  while (r.next()) out.push_back({r.text("target"), r.text("column"), r.number("estimate", true), r.number("se", true)});
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct InputPaths {
  std::string panel, groups, cpi, institutions;
};

inline Panel load_panel(const InputPaths& in, const PanelConfig& pc, RunContext& ctx) {
  if (in.panel.empty()) throw UsageError("--panel is required");
  ctx.track_input(in.panel);
  std::optional<std::string> groups;
  if (!in.groups.empty()) {
    ctx.track_input(in.groups);
    groups = in.groups;
  }
  Panel p = read_panel(in.panel, groups);
  if (groups) {
    std::vector<std::string> log;
    p = adjust_composition(p, {}, &log);
    for (const auto& s : log) ctx.note(s);
  }
  switch (pc.rate_of_return) {
    case RateOfReturn::Internal:
      p = rental_price_internal(p, pc.depreciation);
      break;
    case RateOfReturn::External: {
      if (in.cpi.empty()) throw UsageError("rate_of_return = external requires --cpi");
      ctx.track_input(in.cpi);
      p = rental_price_external(p, pc.depreciation, read_cpi(in.cpi));
      break;
    }
    case RateOfReturn::Given:
      break;
  }
  validate(p);
  if (pc.base_year != 0) p.base_year = pc.base_year;
  return p;
}

struct Prepared {
  int horizon = 5;
  SectorTable cells;
  GammaTable gammas;
  InstrumentTable bartiks;
};

inline Prepared prepare(const Panel& panel, int horizon) {
  Prepared p;
  p.horizon = horizon;
  p.cells = aggregate_sectors(panel);
  p.gammas = gamma_table(p.cells);
  p.bartiks = bartik_all(panel, horizon);
  p.bartiks.add(bartik_ces_aggregates(p.bartiks, p.gammas));
  return p;
}

enum class Robustness { None, Institutions, ExternalReturn, Trends };

inline Robustness parse_robustness(const std::string& s) {
  if (s == "none") return Robustness::None;
  if (s == "institutions") return Robustness::Institutions;
  if (s == "external-return") return Robustness::ExternalReturn;
  if (s == "trends") return Robustness::Trends;
  throw UsageError("robustness: expected none|institutions|external-return|trends, got '" + s + "'");
}

inline MomentKind parse_moments(const std::string& s) {
  if (s == "most-relevant") return MomentKind::MostRelevant;
  if (s == "full") return MomentKind::Full;
  throw UsageError("moments: expected most-relevant|full, got '" + s + "'");
}

inline std::vector<Sector> parse_sectors(const std::string& s) {
  if (s == "both") return {kAllSectors.begin(), kAllSectors.end()};
  if (auto v = parse_sector(s)) return {*v};
  throw UsageError("sector: expected goods|service|both, got '" + s + "'");
}

inline std::vector<Side> parse_sides(const std::string& s) {
  if (s == "both") return {Side::Production, Side::Cost};
  if (s == "production") return {Side::Production};
  if (s == "cost") return {Side::Cost};
  throw UsageError("side: expected production|cost|both, got '" + s + "'");
}

struct Model {
  std::array<NestParams, kSectors> sigma;
  double eta = 0.0;
};

// Both sectors on the most relevant moments plus the consumption elasticity,
// unless eta is fixed by the caller.
inline Model fit_model(const Prepared& p, std::optional<double> eta) {
  Model m;
  for (Sector s : kAllSectors)
    m.sigma[idx(s)] = estimate_gmm(build_sample(p.cells, p.bartiks, p.gammas, s, {p.horizon}), MomentKind::MostRelevant).sigma;
  if (eta) {
    m.eta = *eta;
  } else {
    double e = consumption_elasticity(p.cells, p.horizon).elasticity;
    if (!(e > 0.0)) throw GmmError("consumption elasticity: non-positive estimate " + num(e));
    m.eta = 1.0 - 1.0 / e;
  }
  return m;
}

inline std::optional<double> eta_override(const Config& c) {
  if (!c.has("eta")) return std::nullopt;
  return c.number("eta", 0.0);
}

inline int horizon_of(const Config& c) { return PanelConfig::from(c).diff_horizon; }

// ---------------------------------------------------------------------------
// Subcommands

struct SimulateArgs {
  std::string spec, out = "panel.csv";
  int countries = 11, years = 26;
};

inline void run_simulate(const SimulateArgs& a, RunContext& ctx) {
  Config c;
  if (!a.spec.empty()) {
    ctx.track_input(a.spec);
    c = Config::load(a.spec);
  }
  for (const auto& [k, v] : ctx.config.values()) c.set(k, v);
  ctx.config = c;
  ctx.config.set("countries", std::to_string(a.countries));
  ctx.config.set("years", std::to_string(a.years));
  auto spec = SimulationSpec::from(ctx.config);
  auto shocks = shocks_from(ctx.config);
  if (a.countries < 1 || a.years < 1) throw UsageError("simulate: --countries and --years must be positive");
  Panel p = synth_panel(spec, a.countries, a.years, shocks, ctx.seed);

  std::ostringstream body;
  write_panel(p, body);

  Artifacts art;
  art.add(a.out, body.str());
  Table t{"Planted parameters", "", {}, {}, {}};
  for (Sector s : kAllSectors) {
    const auto& g = spec.economy.techs[idx(s)].sigma;
    std::array v{g.fh, g.mh, g.fu, g.mu};
    for (std::size_t i = 0; i < 4; ++i) t.put(kSigmaNames[i], std::string(sector_name(s)), {v[i], kNaN});
  }
  t.put("eta", "goods", {spec.economy.eta, kNaN});
  art.add(with_extension(a.out, ".md"), render_markdown({t}));
  add_manifest(art, ctx, a.out);
  art.commit();
}

struct IngestArgs {
  InputPaths in;
  std::string out = "panel_clean.csv";
};

inline void run_ingest(const IngestArgs& a, RunContext& ctx) {
  auto pc = PanelConfig::from(ctx.config);
  Panel p = load_panel(a.in, pc, ctx);
  if (ctx.config.text("deflate", "false") == "true") p = deflate(p);
  std::ostringstream body, bartik;
  write_panel(p, body);
  write_bartik_csv(bartik_all(p, pc.diff_horizon).series(), bartik);

  std::set<std::string> countries;
  std::set<int> years;
  for (const auto& o : p.observations) {
    countries.insert(o.country);
    years.insert(o.year);
  }
  Table t{"Panel", "", {}, {}, {}};
  t.put("observations", "count", {static_cast<double>(p.observations.size()), kNaN});
  t.put("countries", "count", {static_cast<double>(countries.size()), kNaN});
  t.put("years", "count", {static_cast<double>(years.size()), kNaN});

  Artifacts art;
  art.add(a.out, body.str());
  art.add(sibling(a.out, "bartik.csv"), bartik.str());
  art.add(with_extension(a.out, ".md"), render_markdown({t}));
  add_manifest(art, ctx, a.out);
  art.commit();
}

struct EstimateArgs {
  InputPaths in;
  std::string out = "results.csv";
};

inline void run_estimate(const EstimateArgs& a, RunContext& ctx) {
  auto sectors = parse_sectors(ctx.config.text("sector", "both"));
  auto kind = parse_moments(ctx.config.text("moments", "most-relevant"));
  auto robust = parse_robustness(ctx.config.text("robustness", "none"));
  if (robust == Robustness::ExternalReturn) ctx.config.set("rate_of_return", "external");
  auto pc = PanelConfig::from(ctx.config);
  InstitutionTable inst;
  if (robust == Robustness::Institutions) {
    if (a.in.institutions.empty()) throw UsageError("robustness = institutions requires --institutions");
    ctx.track_input(a.in.institutions);
    inst = read_institutions(a.in.institutions);
  }
  Panel panel = load_panel(a.in, pc, ctx);
  Prepared prep = prepare(panel, pc.diff_horizon);
  const std::string mname(moment_kind_name(kind));
  const int h = pc.diff_horizon;

  std::vector<ResultRow> results;
  std::vector<TestRow> tests;
  for (Sector s : sectors) {
    const std::string sname(sector_name(s));
    Sample smp = build_sample(prep.cells, prep.bartiks, prep.gammas, s, {h});
    if (robust == Robustness::Institutions) {
      auto dropped = add_institution_extras(smp, inst);
      if (dropped) ctx.note("estimate: " + sname + ": dropped " + std::to_string(dropped) + " rows without institutions");
    } else if (robust == Robustness::Trends) {
      add_trend_extras(smp, panel.base_year);
    }
    auto r = estimate_gmm(smp, kind);
    for (std::size_t i = 0; i < 4; ++i) results.push_back({sname, kSigmaNames[i], r.value(i), r.stderr_(i), mname, h});
    tests.push_back({sname, "overid", r.overid.stat, r.overid.df, r.overid.pvalue, r.overid.f_pvalue, mname, h});
    if (robust == Robustness::None) {
      for (const auto& lv : specification_ladder(smp)) {
        std::string lname = "L" + std::to_string(lv.level);
        if (!lv.restriction.name.empty()) {
          const auto& w = lv.restriction.wald;
          std::string name = lv.restriction.name;
          std::replace(name.begin(), name.end(), ',', ';');
          tests.push_back({sname, lname + ":" + name, w.stat, w.df, w.pvalue, w.f_pvalue, mname, h});
        }
        for (const auto& t : lv.pairwise)
          tests.push_back(
              {sname, lname + "/" + t.name, t.wald.stat, t.wald.df, t.wald.pvalue, t.wald.f_pvalue, mname, h});
      }
    }
  }
  if (sectors.size() == kSectors) {
    auto c = consumption_elasticity(prep.cells, h);
    results.push_back({"all", "consumption_elasticity", c.elasticity, c.se, "iv", h});
  }

  Artifacts art;
  art.add(a.out, results_csv(results));
  art.add(sibling(a.out, "tests.csv"), tests_csv(tests));
  art.add(with_extension(a.out, ".md"), render_markdown({results_table(results), tests_table(tests)}));
  add_manifest(art, ctx, a.out);
  art.commit();
}

inline std::map<std::string, double> elasticity_values(const Prepared& p, const std::vector<Side>& sides,
                                                       std::optional<double> eta) {
  Model m = fit_model(p, eta);
  int last = 0, first = std::numeric_limits<int>::max();
  for (const auto& [k, c] : p.cells) {
    first = std::min(first, k.year);
    last = std::max(last, k.year);
  }
  auto point = panel_point(p.cells, first, last, m.eta);
  auto techs = techs_from_sigma(m.sigma);
  auto psi = psi_matrices(share_price_derivatives(techs, point), point);
  auto [prod, cost] = morishima(psi);
  std::map<std::string, double> out;
  for (Side side : sides) {
    const auto& e = side == Side::Production ? prod : cost;
    for (Factor f : kAllFactors)
      for (Factor g : kAllFactors) {
        if (f == g || std::isnan(e(f, g))) continue;
        out[std::string(side_name(side)) + "/" + std::string(factor_name(f)) + "/" + std::string(factor_name(g))] =
            e(f, g);
      }
  }
  return out;
}

struct ElasticitiesArgs {
  InputPaths in;
  std::string out = "elasticities.csv";
};

inline BootstrapResult bootstrap_or_point(const BootstrapPipeline& pipeline, const Panel& panel, int reps,
                                          RunContext& ctx) {
  if (reps == 0) {
    BootstrapResult r;
    r.estimate = pipeline(panel);
    for (const auto& [k, v] : r.estimate) r.se[k] = kNaN;
    return r;
  }
  if (reps < 2) throw UsageError("bootstrap: need 0 or at least 2 replications");
  auto r = cluster_bootstrap(pipeline, panel, reps, ctx.seed);
  for (const auto& s : r.log) ctx.note(s);
  return r;
}

inline void run_elasticities(const ElasticitiesArgs& a, RunContext& ctx) {
  auto sides = parse_sides(ctx.config.text("side", "both"));
  int reps = ctx.config.integer("bootstrap", 0);
  auto pc = PanelConfig::from(ctx.config);
  auto eta = eta_override(ctx.config);
  Panel panel = load_panel(a.in, pc, ctx);
  BootstrapPipeline pipeline = [&](const Panel& p) {
    return elasticity_values(prepare(p, pc.diff_horizon), sides, eta);
  };
  auto boot = bootstrap_or_point(pipeline, panel, reps, ctx);

  std::vector<ElasticityRow> rows;
  for (Side side : sides)
    for (Factor f : kAllFactors)
      for (Factor g : kAllFactors) {
        std::string key =
            std::string(side_name(side)) + "/" + std::string(factor_name(f)) + "/" + std::string(factor_name(g));
        auto it = boot.estimate.find(key);
        if (it == boot.estimate.end()) continue;
        rows.push_back({std::string(side_name(side)), std::string(factor_name(f)), std::string(factor_name(g)),
                        it->second, boot.se[key]});
      }
  Artifacts art;
  art.add(a.out, elasticities_csv(rows));
  art.add(with_extension(a.out, ".md"), render_markdown(elasticity_tables(rows)));
  add_manifest(art, ctx, a.out);
  art.commit();
}

inline std::pair<int, int> parse_window(const std::string& s) {
  auto colon = s.find(':');
  try {
    if (colon == std::string::npos) throw std::invalid_argument("");
    std::size_t n1 = 0, n2 = 0;
    std::string a = s.substr(0, colon), b = s.substr(colon + 1);
    int from = std::stoi(a, &n1), to = std::stoi(b, &n2);
    if (n1 != a.size() || n2 != b.size()) throw std::invalid_argument("");
    return {from, to};
  } catch (const std::exception&) {
    throw UsageError("window: expected FROM:TO, got '" + s + "'");
  }
}

// Target rows in report order with data, model and residual columns first.
inline std::map<std::string, double> decomposition_values(const Prepared& p, Target target, const WindowOptions& w,
                                                          std::optional<double> eta,
                                                          std::vector<DecompositionReport>* reports = nullptr) {
  DecompositionInputs in;
  if (target != Target::LaborShare) {
    Model m = fit_model(p, eta);
    in.sigma = m.sigma;
    in.eta = m.eta;
  }
  auto r = decompose_window(p.cells, in, target, w);
  auto out = flatten(r);
  for (const auto& x : r) out[x.target + "/residual"] = x.residual;
  if (reports) *reports = std::move(r);
  return out;
}

struct DecomposeArgs {
  InputPaths in;
  std::string out = "decomp.csv";
};

inline void run_decompose(const DecomposeArgs& a, RunContext& ctx) {
  auto target = parse_target(ctx.config.text("target", "wages"));
  if (!target) throw UsageError("target: expected wages|demand|shares|labor-share");
  auto [from, to] = parse_window(ctx.config.text("window", "1980:2005"));
  WindowOptions w;
  w.from = from;
  w.to = to;
  w.chained = ctx.config.text("chained", "false") == "true";
  std::string cross = ctx.config.text("cross_country", "mean");
  if (cross == "pooled") w.cross = CrossCountry::Pooled;
  else if (cross != "mean") throw UsageError("cross_country: expected mean|pooled");
  int reps = ctx.config.integer("bootstrap", 0);
  auto pc = PanelConfig::from(ctx.config);
  auto eta = eta_override(ctx.config);
  Panel panel = load_panel(a.in, pc, ctx);

  std::vector<DecompositionReport> reports;
  decomposition_values(prepare(panel, pc.diff_horizon), *target, w, eta, &reports);
  BootstrapPipeline pipeline = [&](const Panel& p) {
    return decomposition_values(prepare(p, pc.diff_horizon), *target, w, eta);
  };
  auto boot = bootstrap_or_point(pipeline, panel, reps, ctx);
  auto se = [&](const std::string& k) {
    auto it = boot.se.find(k);
    return it == boot.se.end() ? kNaN : it->second;
  };
  std::vector<DecompRow> rows;
  for (const auto& r : reports) {
    rows.push_back({r.target, "data", r.data_change, se(r.target + "/data")});
    rows.push_back({r.target, "model", r.model_change, se(r.target + "/model")});
    rows.push_back({r.target, "residual", r.residual, se(r.target + "/residual")});
    for (const auto& [c, v] : r.contributions) rows.push_back({r.target, c, v, se(r.target + "/" + c)});
  }
  Artifacts art;
  art.add(a.out, decomp_csv(rows));
  art.add(with_extension(a.out, ".md"), render_markdown({decomp_table(rows)}));
  add_manifest(art, ctx, a.out);
  art.commit();
}

enum class ArtifactKind { Results, Tests, Elasticities, Decomposition, Unknown };

inline ArtifactKind classify(const std::string& path) {
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header == "sector,param,estimate,se,moments,horizon") return ArtifactKind::Results;
  if (header == "sector,test,statistic,df,pvalue,f_pvalue,moments,horizon") return ArtifactKind::Tests;
  if (header == "side,f,g,estimate,se") return ArtifactKind::Elasticities;
  if (header == "target,column,estimate,se") return ArtifactKind::Decomposition;
  return ArtifactKind::Unknown;
}

// Tables for every recognised CSV artifact in dir, grouped by kind and then
// by file name. Titles carry the file stem so tables stay distinct.
inline std::vector<Table> collect_tables(const std::string& dir, RunContext* ctx = nullptr) {
  if (!std::filesystem::is_directory(dir)) throw UsageError("report: not a directory: " + dir);
  std::vector<std::pair<ArtifactKind, std::string>> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv")
      if (auto kind = classify(e.path().string()); kind != ArtifactKind::Unknown)
        files.emplace_back(kind, e.path().string());
  std::sort(files.begin(), files.end());
  std::vector<Table> out;
  for (const auto& [kind, f] : files) {
    if (ctx) ctx->track_input(f);
    std::vector<Table> ts;
    switch (kind) {
      case ArtifactKind::Results:
        ts.push_back(results_table(read_results(f)));
        break;
      case ArtifactKind::Tests:
        ts.push_back(tests_table(read_tests(f)));
        break;
      case ArtifactKind::Elasticities:
        ts = elasticity_tables(read_elasticities(f));
        break;
      case ArtifactKind::Decomposition:
        ts.push_back(decomp_table(read_decomp(f)));
        break;
      case ArtifactKind::Unknown:
        break;
    }
    const std::string stem = std::filesystem::path(f).stem().string();
    for (auto& t : ts) {
      t.title += " [" + stem + "]";
      out.push_back(std::move(t));
    }
  }
  return out;
}

struct ReportArgs {
  std::string dir = ".";
  std::string out;  // defaults to <dir>/report.md
};

inline void run_report(const ReportArgs& a, RunContext& ctx) {
  auto tables = collect_tables(a.dir, &ctx);
  if (tables.empty()) throw UsageError("report: no result artifacts in " + a.dir);
  std::string md = a.out.empty() ? (std::filesystem::path(a.dir) / "report.md").string() : a.out;
  Artifacts art;
  art.add(md, render_markdown(tables));
  art.add(with_extension(md, ".csv"), render_csv(tables));
  add_manifest(art, ctx, md);
  art.commit();
}

// Exit status for an exception escaping a subcommand.
inline int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const SchemaError& x) {
    std::cerr << "schema error: " << x.what() << "\n";
    return kExitSchema;
  } catch (const ValidationError& x) {
    std::cerr << "validation error: " << x.what() << "\n";
    return kExitSchema;
  } catch (const UsageError& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kExitSchema;
  } catch (const BootstrapError& x) {
    std::cerr << "estimation error: " << x.what() << "\n";
    return kExitEstimation;
  } catch (const GmmError& x) {
    std::cerr << "estimation error: " << x.what() << "\n";
    return kExitEstimation;
  } catch (const std::invalid_argument& x) {
    std::cerr << "estimation error: " << x.what() << "\n";
    return kExitEstimation;
  } catch (const std::domain_error& x) {
    std::cerr << "estimation error: " << x.what() << "\n";
    return kExitEstimation;
  } catch (const std::exception& x) {
    std::cerr << "internal error: " << x.what() << "\n";
    return kExitInternal;
  } catch (...) {
    std::cerr << "internal error: unknown exception\n";
    return kExitInternal;
  }
}

}  // namespace cesrace::cli
