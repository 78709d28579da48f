#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cesrace/ces.hpp"
#include "cesrace/gmm.hpp"
#include "cesrace/instruments.hpp"
#include "cesrace/panel.hpp"

namespace cesrace {

// ---------------------------------------------------------------------------
// Estimation sample

enum class AggregateMethod { SatoVartia, MeanShare };

struct SampleOptions {
  int horizon = 5;
  AggregateMethod aggregates = AggregateMethod::SatoVartia;
};

// One long difference for a country-sector ending in `year`.
struct SampleRow {
  std::string country;
  Sector sector = Sector::Goods;
  int year = 0;
  int cluster = 0;
  FactorArray q = filled(kNaN), w = filled(kNaN);    // levels at t
  FactorArray q0 = filled(kNaN), w0 = filled(kNaN);  // levels at t - h
  FactorArray dq = filled(kNaN), dw = filled(kNaN);  // log changes
  AggregateDeltas agg;                               // log changes of D, C, B
  FactorArray zq = filled(kNaN);                     // instrument log changes (ki and labor)
  AggregateDeltas zagg;
  std::vector<double> extra;
};

// Exogenous covariate partialled out of the equations in `equations` (bit mask).
struct ExtraColumn {
  std::string name;
  std::uint32_t equations = ~0u;
};

struct Sample {
  Sector sector = Sector::Goods;
  int horizon = 5;
  std::vector<SampleRow> rows;
  std::vector<ExtraColumn> extras;
  std::vector<std::string> clusters;  // country per cluster id

  std::size_t size() const { return rows.size(); }
};

inline constexpr std::array<Factor, 5> kInstrumented{Factor::Ki, Factor::Lfh, Factor::Lmh, Factor::Lfu, Factor::Lmu};

// Rows for every country-sector-year with priced cells at both ends of the
// difference and a complete set of instruments.
inline Sample build_sample(const SectorTable& cells, const InstrumentTable& bartiks, const GammaTable& gammas,
                           Sector sector, const SampleOptions& opt = {}) {
  Sample s;
  s.sector = sector;
  s.horizon = opt.horizon;
  std::map<std::string, int> cluster_of;
  for (const auto& [key, cell] : cells) {
    if (key.sector != sector || !cell.rental_available) continue;
    auto then = cells.find({key.country, sector, key.year - opt.horizon});
    if (then == cells.end() || !then->second.rental_available) continue;
    auto g = gammas.find({key.country, sector});
    if (g == gammas.end()) continue;
    SampleRow r;
    r.country = key.country;
    r.sector = sector;
    r.year = key.year;
    bool ok = true;
    for (Factor f : kInstrumented) {
      auto v = bartiks.get(std::string(factor_name(f)), key.country, sector, key.year);
      if (!v) {
        ok = false;
        break;
      }
      r.zq[idx(f)] = *v;
    }
    if (!ok) continue;
    r.zagg = loglin_deltas(g->second, r.zq);
    for (Factor f : kAllFactors) {
      std::size_t i = idx(f);
      r.q[i] = cell.quantity[i];
      r.w[i] = cell.price[i];
      r.q0[i] = then->second.quantity[i];
      r.w0[i] = then->second.price[i];
      r.dq[i] = std::log(r.q[i] / r.q0[i]);
      r.dw[i] = std::log(r.w[i] / r.w0[i]);
    }
    if (opt.aggregates == AggregateMethod::SatoVartia)
      r.agg = sato_vartia_deltas(cell.bills(), then->second.bills(), r.dq);
    else
      r.agg = loglin_deltas(g->second, r.dq);
    auto [it, fresh] = cluster_of.try_emplace(key.country, static_cast<int>(cluster_of.size()));
    if (fresh) s.clusters.push_back(key.country);
    r.cluster = it->second;
    s.rows.push_back(std::move(r));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Moment systems. Parameters are the slopes 1 - sigma.

enum class MomentKind { MostRelevant, Full };

inline std::string_view moment_kind_name(MomentKind k) { return k == MomentKind::MostRelevant ? "most-relevant" : "full"; }

namespace detail {

inline double fq(const SampleRow& r, Factor f) { return r.dq[idx(f)]; }
inline double fw(const SampleRow& r, Factor f) { return r.dw[idx(f)]; }
inline double fz(const SampleRow& r, Factor f) { return r.zq[idx(f)]; }

using RowFn = std::function<double(const SampleRow&)>;

struct EquationSpec {
  std::string name;
  RowFn y;
  std::vector<std::pair<std::string, RowFn>> terms;  // parameter -> regressor
};

struct MomentSpec {
  std::string name;
  int equation = 0;
  RowFn z;
};

inline LinearSystem assemble(const Sample& s, const std::vector<std::string>& params,
                             const std::vector<EquationSpec>& eqs, const std::vector<MomentSpec>& moms) {
  const Eigen::Index N = static_cast<Eigen::Index>(s.rows.size()), P = static_cast<Eigen::Index>(params.size());
  LinearSystem sys;
  sys.params = params;
  for (const auto& e : eqs) {
    GmmEquation g{e.name, Eigen::VectorXd(N), Eigen::MatrixXd::Zero(N, P)};
    for (Eigen::Index i = 0; i < N; ++i) {
      const auto& r = s.rows[i];
      g.y(i) = e.y(r);
      for (const auto& [p, fn] : e.terms) {
        auto at = std::find(params.begin(), params.end(), p);
        g.x(i, at - params.begin()) += fn(r);
      }
    }
    sys.equations.push_back(std::move(g));
  }
  for (const auto& m : moms) {
    GmmMoment g{m.name, m.equation, Eigen::VectorXd(N)};
    for (Eigen::Index i = 0; i < N; ++i) g.z(i) = m.z(s.rows[i]);
    sys.moments.push_back(std::move(g));
  }
  for (const auto& r : s.rows) sys.cluster.push_back(r.cluster);
  return sys;
}

inline Eigen::VectorXd residualize(const Eigen::MatrixXd& X, const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>& cod,
                                   const Eigen::VectorXd& v) {
  return v - X * cod.solve(v);
}

}  // namespace detail

// Projects the extra covariates out of y, x and the instruments of each
// equation they enter; the covariates act as their own instruments.
inline void partial_out_extras(LinearSystem& sys, const Sample& s) {
  if (s.extras.empty()) return;
  const Eigen::Index N = static_cast<Eigen::Index>(s.rows.size());
  for (std::size_t e = 0; e < sys.equations.size(); ++e) {
    std::vector<std::size_t> cols;
    for (std::size_t c = 0; c < s.extras.size(); ++c)
      if (e < 32 && ((s.extras[c].equations >> e) & 1u)) cols.push_back(c);
    if (cols.empty()) continue;
    Eigen::MatrixXd X(N, static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index i = 0; i < N; ++i)
      for (std::size_t c = 0; c < cols.size(); ++c) X(i, static_cast<Eigen::Index>(c)) = s.rows[i].extra[cols[c]];
    if (X.cwiseAbs().maxCoeff() == 0.0) continue;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(X);
    cod.setThreshold(1e-10);
    auto& eq = sys.equations[e];
    eq.y = detail::residualize(X, cod, eq.y);
    for (Eigen::Index p = 0; p < eq.x.cols(); ++p) eq.x.col(p) = detail::residualize(X, cod, eq.x.col(p));
    for (auto& m : sys.moments)
      if (m.equation == static_cast<int>(e)) m.z = detail::residualize(X, cod, m.z);
  }
}

inline constexpr std::array<const char*, 5> kFourLevelEquations{"fh/ri", "mh/fh", "fh/fu", "mu/fu", "mh/mu"};

// The four-level system. With split_mu the two equations for the outer nest
// carry separate slopes ("mu1", "mu2"), giving a just-identified five-parameter
// system under the most relevant moments.
inline LinearSystem four_level_system(const Sample& s, MomentKind kind, bool split_mu = false) {
  using detail::fq, detail::fw, detail::fz;
  using F = Factor;
  auto D = [](const SampleRow& r) { return r.agg.D; };
  auto C = [](const SampleRow& r) { return r.agg.C; };
  auto B = [](const SampleRow& r) { return r.agg.B; };
  std::string mu1 = split_mu ? "mu1" : "mu", mu2 = split_mu ? "mu2" : "mu";
  std::vector<std::string> params{"fh", "mh", "fu"};
  if (split_mu) params.insert(params.end(), {"mu1", "mu2"});
  else params.push_back("mu");

  std::vector<detail::EquationSpec> eqs{
      {kFourLevelEquations[0],
       [](const SampleRow& r) { return fw(r, F::Lfh) - fw(r, F::Ki); },
       {{"fh", [](const SampleRow& r) { return -(fq(r, F::Lfh) - fq(r, F::Ki)); }}}},
      {kFourLevelEquations[1],
       [](const SampleRow& r) { return fw(r, F::Lmh) - fw(r, F::Lfh); },
       {{"mh", [=](const SampleRow& r) { return D(r) - fq(r, F::Lmh); }},
        {"fh", [=](const SampleRow& r) { return -(D(r) - fq(r, F::Lfh)); }}}},
      {kFourLevelEquations[2],
       [](const SampleRow& r) { return fw(r, F::Lfh) - fw(r, F::Lfu); },
       {{"fh", [=](const SampleRow& r) { return D(r) - fq(r, F::Lfh); }},
        {"fu", [=](const SampleRow& r) { return -(C(r) - fq(r, F::Lfu)); }},
        {"mh", [=](const SampleRow& r) { return C(r) - D(r); }}}},
      {kFourLevelEquations[3],
       [](const SampleRow& r) { return fw(r, F::Lmu) - fw(r, F::Lfu); },
       {{mu1, [=](const SampleRow& r) { return B(r) - fq(r, F::Lmu); }},
        {"fu", [=](const SampleRow& r) { return -(B(r) - fq(r, F::Lfu)); }}}},
      {kFourLevelEquations[4],
       [](const SampleRow& r) { return fw(r, F::Lmh) - fw(r, F::Lmu); },
       {{"mh", [=](const SampleRow& r) { return C(r) - fq(r, F::Lmh); }},
        {mu2, [=](const SampleRow& r) { return -(B(r) - fq(r, F::Lmu)); }},
        {"fu", [=](const SampleRow& r) { return B(r) - C(r); }}}},
  };

  auto zD = [](const SampleRow& r) { return r.zagg.D; };
  auto zC = [](const SampleRow& r) { return r.zagg.C; };
  auto zB = [](const SampleRow& r) { return r.zagg.B; };
  std::vector<detail::MomentSpec> moms{
      {"fh/ri:lfh/ki", 0, [](const SampleRow& r) { return fz(r, F::Lfh) - fz(r, F::Ki); }},
      {"mh/fh:D/lmh", 1, [=](const SampleRow& r) { return zD(r) - fz(r, F::Lmh); }},
      {"fh/fu:C/lfu", 2, [=](const SampleRow& r) { return zC(r) - fz(r, F::Lfu); }},
      {"mu/fu:B/lmu", 3, [=](const SampleRow& r) { return zB(r) - fz(r, F::Lmu); }},
      {"mh/mu:B/lmu", 4, [=](const SampleRow& r) { return zB(r) - fz(r, F::Lmu); }},
  };
  if (kind == MomentKind::Full) {
    moms.push_back({"mh/fh:D/lfh", 1, [=](const SampleRow& r) { return zD(r) - fz(r, F::Lfh); }});
    moms.push_back({"fh/fu:D/lfh", 2, [=](const SampleRow& r) { return zD(r) - fz(r, F::Lfh); }});
    moms.push_back({"fh/fu:C/D", 2, [=](const SampleRow& r) { return zC(r) - zD(r); }});
    moms.push_back({"mu/fu:B/lfu", 3, [=](const SampleRow& r) { return zB(r) - fz(r, F::Lfu); }});
    moms.push_back({"mh/mu:C/lmh", 4, [=](const SampleRow& r) { return zC(r) - fz(r, F::Lmh); }});
    moms.push_back({"mh/mu:B/C", 4, [=](const SampleRow& r) { return zB(r) - zC(r); }});
  }
  auto sys = detail::assemble(s, params, eqs, moms);
  partial_out_extras(sys, s);
  return sys;
}

// ---------------------------------------------------------------------------
// Results

inline NestParams slopes_to_sigma(const Eigen::VectorXd& b) { return {1.0 - b(0), 1.0 - b(1), 1.0 - b(2), 1.0 - b(3)}; }

struct GmmResult {
  Sector sector = Sector::Goods;
  MomentKind moments = MomentKind::MostRelevant;
  int horizon = 5;
  NestParams sigma;
  NestParams se;
  Eigen::Matrix4d vcov = Eigen::Matrix4d::Zero();  // of sigma (equal to that of the slopes)
  WaldTest overid;
  GmmFit fit;
  int n_obs = 0;
  int n_clusters = 0;
  bool boundary = false;  // some sigma >= 1
  bool ordered = false;   // sigma_fh < sigma_mh < sigma_fu < sigma_mu

  double value(std::size_t i) const { return std::array{sigma.fh, sigma.mh, sigma.fu, sigma.mu}[i]; }
  double stderr_(std::size_t i) const { return std::array{se.fh, se.mh, se.fu, se.mu}[i]; }
};

inline constexpr std::array<const char*, 4> kSigmaNames{"sigma_fh", "sigma_mh", "sigma_fu", "sigma_mu"};

// Two-step GMM on the four-level system. The over-identification statistic is
// the Wald test of equal outer-nest slopes in the just-identified split system
// for the most relevant moments and Hansen's J for the full set.
inline GmmResult estimate_gmm(const Sample& s, MomentKind kind, const GmmOptions& opt = {}) {
  if (s.clusters.size() < 2) throw GmmError("gmm: at least two clusters required");
  GmmResult out;
  out.sector = s.sector;
  out.moments = kind;
  out.horizon = s.horizon;
  out.fit = fit_gmm(four_level_system(s, kind), opt);
  out.sigma = slopes_to_sigma(out.fit.b);
  out.vcov = out.fit.vcov.topLeftCorner<4, 4>();
  out.se = {out.fit.se(0), out.fit.se(1), out.fit.se(2), out.fit.se(3)};
  out.n_obs = out.fit.n_obs;
  out.n_clusters = out.fit.n_clusters;
  if (kind == MomentKind::MostRelevant) {
    auto split = fit_gmm(four_level_system(s, kind, true), opt);
    out.overid = wald_equal(split, {{"mu1", "mu2"}});
  } else {
    out.overid.stat = out.fit.j_stat;
    out.overid.df = out.fit.j_df;
    // With no more clusters than moments the clustered weight matrix is
    // singular and J equals the cluster count regardless of the data.
    bool degenerate = static_cast<int>(out.fit.gbar.size()) >= out.fit.n_clusters;
    out.overid.pvalue = degenerate ? kNaN : out.fit.j_pvalue;
    out.overid.f_pvalue = out.overid.pvalue;
  }
  const auto& g = out.sigma;
  out.boundary = g.fh >= 1.0 || g.mh >= 1.0 || g.fu >= 1.0 || g.mu >= 1.0;
  out.ordered = g.fh < g.mh && g.mh < g.fu && g.fu < g.mu;
  return out;
}

struct SequentialResult {
  double fh = kNaN, mh = kNaN, fu = kNaN;
  double mu_first = kNaN;   // from the mu/fu equation
  double mu_second = kNaN;  // from the mh/mu equation
  GmmResult joint;
};

// Plug-in instrumental-variable estimates one nest at a time, inner to outer.
inline SequentialResult sequential_identify(const Sample& s) {
  auto sys = four_level_system(s, MomentKind::MostRelevant, true);
  // Each moment is scalar: sum z (y - x b) = 0 with earlier slopes fixed.
  std::vector<double> b(5, 0.0);
  auto solve_for = [&](int moment, int param) {
    const auto& m = sys.moments[moment];
    const auto& eq = sys.equations[m.equation];
    Eigen::VectorXd rest = eq.y;
    for (int p = 0; p < 5; ++p)
      if (p != param) rest -= eq.x.col(p) * b[p];
    double den = m.z.dot(eq.x.col(param));
    if (den == 0.0) throw GmmError("sequential: moment " + m.name + " does not identify " + sys.params[param]);
    b[param] = m.z.dot(rest) / den;
  };
  solve_for(0, 0);
  solve_for(1, 1);
  solve_for(2, 2);
  solve_for(3, 3);
  solve_for(4, 4);
  SequentialResult out;
  out.fh = 1.0 - b[0];
  out.mh = 1.0 - b[1];
  out.fu = 1.0 - b[2];
  out.mu_first = 1.0 - b[3];
  out.mu_second = 1.0 - b[4];
  out.joint = estimate_gmm(s, MomentKind::MostRelevant);
  return out;
}

// ---------------------------------------------------------------------------
// Specification ladder

struct LadderTest {
  std::string name;
  WaldTest wald;
};

struct LadderLevel {
  int level = 4;
  std::vector<std::string> params;
  Eigen::VectorXd sigma;
  Eigen::VectorXd se;
  LadderTest restriction;  // the restriction implied by this level itself
  std::vector<LadderTest> pairwise;
  GmmFit fit;
};

inline LinearSystem ladder_system(const Sample& s, int level) {
  using detail::fq, detail::fw, detail::fz;
  using F = Factor;
  using detail::EquationSpec, detail::MomentSpec;
  auto fh_ri_eq = EquationSpec{"fh/ri", [](const SampleRow& r) { return fw(r, F::Lfh) - fw(r, F::Ki); },
                               {{"fh", [](const SampleRow& r) { return -(fq(r, F::Lfh) - fq(r, F::Ki)); }}}};
  auto fh_ri_mom = MomentSpec{"fh/ri:lfh/ki", 0, [](const SampleRow& r) { return fz(r, F::Lfh) - fz(r, F::Ki); }};
  std::vector<std::string> params;
  std::vector<EquationSpec> eqs;
  std::vector<MomentSpec> moms;
  const std::array<std::pair<const char*, F>, 3> outer{{{"mh", F::Lmh}, {"fu", F::Lfu}, {"mu", F::Lmu}}};
  switch (level) {
    case 1: {
      params = {"fh", "mh", "fu", "mu"};
      eqs.push_back(fh_ri_eq);
      moms.push_back(fh_ri_mom);
      for (const auto& [name, f] : outer) {
        const F x = f;
        int e = static_cast<int>(eqs.size());
        eqs.push_back({std::string(name) + "/ri", [x](const SampleRow& r) { return fw(r, x) - fw(r, F::Ki); },
                       {{name, [x](const SampleRow& r) { return -(fq(r, x) - fq(r, F::Ki)); }}}});
        moms.push_back({std::string(name) + "/ri:" + std::string(factor_name(x)) + "/ki", e,
                        [x](const SampleRow& r) { return fz(r, x) - fz(r, F::Ki); }});
      }
      break;
    }
    case 2: {
      params = {"fh", "mh", "fu", "mu"};
      eqs.push_back(fh_ri_eq);
      moms.push_back(fh_ri_mom);
      for (const auto& [name, f] : outer) {
        const F x = f;
        int e = static_cast<int>(eqs.size());
        eqs.push_back({std::string(name) + "/fh", [x](const SampleRow& r) { return fw(r, x) - fw(r, F::Lfh); },
                       {{name, [x](const SampleRow& r) { return -(fq(r, x) - r.agg.D); }},
                        {"fh", [](const SampleRow& r) { return fq(r, F::Lfh) - r.agg.D; }}}});
        moms.push_back({std::string(name) + "/fh:" + std::string(factor_name(x)) + "/D", e,
                        [x](const SampleRow& r) { return fz(r, x) - r.zagg.D; }});
      }
      break;
    }
    case 3: {
      params = {"fh", "mh", "fu", "mu"};
      eqs.push_back(fh_ri_eq);
      moms.push_back(fh_ri_mom);
      eqs.push_back({"mh/fh", [](const SampleRow& r) { return fw(r, F::Lmh) - fw(r, F::Lfh); },
                     {{"mh", [](const SampleRow& r) { return -(fq(r, F::Lmh) - r.agg.D); }},
                      {"fh", [](const SampleRow& r) { return fq(r, F::Lfh) - r.agg.D; }}}});
      moms.push_back({"mh/fh:lmh/D", 1, [](const SampleRow& r) { return fz(r, F::Lmh) - r.zagg.D; }});
      for (std::size_t k = 1; k < 3; ++k) {
        const F x = outer[k].second;
        const std::string name = outer[k].first;
        int e = static_cast<int>(eqs.size());
        eqs.push_back({name + "/fh", [x](const SampleRow& r) { return fw(r, x) - fw(r, F::Lfh); },
                       {{name, [x](const SampleRow& r) { return -(fq(r, x) - r.agg.C); }},
                        {"fh", [](const SampleRow& r) { return fq(r, F::Lfh) - r.agg.D; }},
                        {"mh", [](const SampleRow& r) { return -(r.agg.C - r.agg.D); }}}});
        moms.push_back({name + "/fh:" + std::string(factor_name(x)) + "/C", e,
                        [x](const SampleRow& r) { return fz(r, x) - r.zagg.C; }});
      }
      break;
    }
    case 4:
      return four_level_system(s, MomentKind::MostRelevant);
    default:
      throw std::invalid_argument("ladder: level must be 1..4");
  }
  return detail::assemble(s, params, eqs, moms);
}

inline LadderLevel ladder_level(const Sample& s, int level, const GmmOptions& opt = {}) {
  LadderLevel out;
  out.level = level;
  out.fit = fit_gmm(ladder_system(s, level), opt);
  out.params = out.fit.params;
  out.sigma = Eigen::VectorXd::Ones(out.fit.b.size()) - out.fit.b;
  out.se = out.fit.vcov.diagonal().cwiseMax(0.0).cwiseSqrt();
  using Pairs = std::vector<std::pair<std::string, std::string>>;
  Pairs joint, pairs;
  switch (level) {
    case 1:
      joint = {{"fh", "mh"}, {"mh", "fu"}, {"fu", "mu"}};
      pairs = joint;
      break;
    case 2:
      joint = {{"mh", "fu"}, {"fu", "mu"}};
      pairs = {{"fh", "mh"}, {"fh", "fu"}, {"fh", "mu"}, {"mh", "fu"}, {"fu", "mu"}};
      break;
    case 3:
      joint = {{"fu", "mu"}};
      pairs = {{"fh", "mh"}, {"mh", "fu"}, {"mh", "mu"}, {"fu", "mu"}};
      break;
    default:
      pairs = {{"fh", "mh"}, {"mh", "fu"}, {"fu", "mu"}};
  }
  if (!joint.empty()) {
    std::string name;
    for (const auto& [a, b] : joint) name += (name.empty() ? "" : ",") + a + "=" + b;
    out.restriction = {name, wald_equal(out.fit, joint)};
  }
  for (const auto& p : pairs) out.pairwise.push_back({p.first + "=" + p.second, wald_equal(out.fit, {p})});
  return out;
}

inline std::vector<LadderLevel> specification_ladder(const Sample& s, const GmmOptions& opt = {}) {
  std::vector<LadderLevel> out;
  for (int level = 1; level <= 4; ++level) out.push_back(ladder_level(s, level, opt));
  return out;
}

// ---------------------------------------------------------------------------
// Robustness covariates

inline double trend_bic(const std::vector<double>& t, const std::vector<double>& y, int order) {
  const Eigen::Index n = static_cast<Eigen::Index>(t.size());
  Eigen::MatrixXd X(n, order + 1);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Y(i) = y[i];
    for (int k = 0; k <= order; ++k) X(i, k) = std::pow(t[i], k);
  }
  Eigen::VectorXd beta = X.colPivHouseholderQr().solve(Y);
  double rss = (Y - X * beta).squaredNorm();
  double dn = static_cast<double>(n);
  return dn * std::log(std::max(rss, 1e-300) / dn) + (order + 1) * std::log(dn);
}

inline double four_level_lhs_level(const SampleRow& r, std::size_t eq) {
  auto lw = [&](Factor f) { return std::log(r.w[idx(f)]); };
  switch (eq) {
    case 0: return lw(Factor::Lfh) - lw(Factor::Ki);
    case 1: return lw(Factor::Lmh) - lw(Factor::Lfh);
    case 2: return lw(Factor::Lfh) - lw(Factor::Lfu);
    case 3: return lw(Factor::Lmu) - lw(Factor::Lfu);
    default: return lw(Factor::Lmh) - lw(Factor::Lmu);
  }
}

// Country-specific trend polynomials for each four-level equation. The order
// per (country, equation) minimizes BIC over 0..max_order on the level series;
// columns are long differences of (year - base)/10 raised to each power.
inline std::map<std::pair<std::string, std::size_t>, int> add_trend_extras(Sample& s, int base_year,
                                                                           int max_order = 3) {
  std::map<std::pair<std::string, std::size_t>, int> orders;
  auto tau = [&](int year) { return (year - base_year) / 10.0; };
  for (const auto& country : s.clusters)
    for (std::size_t e = 0; e < kFourLevelEquations.size(); ++e) {
      std::vector<double> t, y;
      for (const auto& r : s.rows)
        if (r.country == country) {
          t.push_back(tau(r.year));
          y.push_back(four_level_lhs_level(r, e));
        }
      int best = 0;
      double best_bic = std::numeric_limits<double>::infinity();
      for (int k = 0; k <= max_order && k + 2 <= static_cast<int>(t.size()); ++k) {
        double b = trend_bic(t, y, k);
        if (b < best_bic) {
          best_bic = b;
          best = k;
        }
      }
      orders[{country, e}] = best;
      for (int k = 1; k <= best; ++k) {
        s.extras.push_back({"trend." + country + "." + kFourLevelEquations[e] + "." + std::to_string(k), 1u << e});
        for (auto& r : s.rows)
          r.extra.push_back(r.country == country ? std::pow(tau(r.year), k) - std::pow(tau(r.year - s.horizon), k)
                                                 : 0.0);
      }
    }
  return orders;
}

// Long differences of institutional covariates in every equation. Rows whose
// country lacks either end of the difference are dropped.
inline std::size_t add_institution_extras(Sample& s, const InstitutionTable& table) {
  std::vector<SampleRow> kept;
  for (auto& r : s.rows) {
    auto a = table.find({r.country, r.year}), b = table.find({r.country, r.year - s.horizon});
    if (a == table.end() || b == table.end()) continue;
    const auto& x = a->second;
    const auto& y = b->second;
    r.extra.push_back(std::log(x.bargaining_coverage / y.bargaining_coverage));
    r.extra.push_back(std::log(x.epl / y.epl));
    r.extra.push_back(x.minwage_present - y.minwage_present);
    r.extra.push_back(x.minwage_present * x.minwage_level - y.minwage_present * y.minwage_level);
    kept.push_back(std::move(r));
  }
  std::size_t dropped = s.rows.size() - kept.size();
  s.rows = std::move(kept);
  for (const char* n : {"inst.coverage", "inst.epl", "inst.minwage_present", "inst.minwage_level"})
    s.extras.push_back({n, ~0u});
  return dropped;
}

// ---------------------------------------------------------------------------
// Single-equation instrumental variables

struct IvData {
  std::vector<double> y, x, z;
  std::vector<int> cluster;
  std::vector<int> absorb;  // group ids whose means are removed; empty for none
};

struct IvResult {
  double beta = kNaN;
  double se = kNaN;
  double first_stage_f = kNaN;
  double elasticity_at_means = kNaN;
  int n_obs = 0;
  int n_clusters = 0;
  bool weak = false;  // first-stage F below one
};

namespace detail {

inline Eigen::VectorXd demean_groups(const std::vector<double>& v, const std::vector<int>& g) {
  Eigen::VectorXd out = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  if (g.empty()) return out;
  std::map<int, std::pair<double, int>> m;
  for (std::size_t i = 0; i < v.size(); ++i) {
    auto& a = m[g[i]];
    a.first += v[i];
    ++a.second;
  }
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) -= m[g[i]].first / m[g[i]].second;
  return out;
}

inline GmmFit single_iv(const Eigen::VectorXd& y, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                        const std::vector<int>& cluster) {
  LinearSystem sys;
  sys.params = {"beta"};
  sys.equations = {{"iv", y, x}};
  sys.moments = {{"z", 0, z}};
  sys.cluster = cluster;
  return fit_gmm(sys);
}

}  // namespace detail

// Just-identified IV with clustered errors; the first-stage F is the squared
// clustered t statistic of the instrument.
inline IvResult iv_regression(const IvData& d) {
  if (d.y.size() != d.x.size() || d.y.size() != d.z.size() || d.y.size() != d.cluster.size())
    throw std::invalid_argument("iv: inconsistent lengths");
  Eigen::VectorXd y = detail::demean_groups(d.y, d.absorb), x = detail::demean_groups(d.x, d.absorb),
                  z = detail::demean_groups(d.z, d.absorb);
  auto fit = detail::single_iv(y, x, z, d.cluster);
  auto first = detail::single_iv(x, z, z, d.cluster);
  IvResult r;
  r.beta = fit.b(0);
  r.se = fit.se(0);
  r.first_stage_f = first.vcov(0, 0) > 0.0 ? first.b(0) * first.b(0) / first.vcov(0, 0)
                                           : std::numeric_limits<double>::infinity();
  r.weak = r.first_stage_f < 1.0;
  r.n_obs = fit.n_obs;
  r.n_clusters = fit.n_clusters;
  return r;
}

enum class Gap { Gender, Skill };

inline std::string_view gap_name(Gap g) { return g == Gap::Gender ? "gender" : "skill"; }

// Grouped-labor regressions: the log wage gap plus the log relative quantity
// on the change in ICT capital per worker of the reference group.
inline IvResult preliminary_iv(const SectorTable& cells, const InstrumentTable& bartiks, Sector sector, Gap gap,
                               int horizon, std::vector<std::string>* log = nullptr) {
  using F = Factor;
  // Numerator and denominator groups, and the group dividing k_i.
  std::array<F, 2> top = gap == Gap::Gender ? std::array{F::Lmh, F::Lmu} : std::array{F::Lfh, F::Lmh};
  std::array<F, 2> bottom = gap == Gap::Gender ? std::array{F::Lfh, F::Lfu} : std::array{F::Lfu, F::Lmu};
  const std::string ref = gap == Gap::Gender ? "m" : "u";
  const std::array<F, 2> ref_group = gap == Gap::Gender ? top : bottom;
  auto group = [](const SectorCell& c, const std::array<F, 2>& g) {
    double q = c.quantity[idx(g[0])] + c.quantity[idx(g[1])];
    double b = c.bill(g[0]) + c.bill(g[1]);
    return std::pair{q, b / q};
  };
  IvData d;
  std::map<std::string, int> clusters;
  double sum_k = 0.0, sum_l = 0.0;
  for (const auto& [key, cell] : cells) {
    if (key.sector != sector) continue;
    auto then = cells.find({key.country, sector, key.year - horizon});
    if (then == cells.end()) continue;
    auto zk = bartiks.get("ki", key.country, sector, key.year);
    auto zl = bartiks.get(ref, key.country, sector, key.year);
    if (!zk || !zl) continue;
    auto [qt1, wt1] = group(cell, top);
    auto [qb1, wb1] = group(cell, bottom);
    auto [qt0, wt0] = group(then->second, top);
    auto [qb0, wb0] = group(then->second, bottom);
    double lref1 = cell.quantity[idx(ref_group[0])] + cell.quantity[idx(ref_group[1])];
    double lref0 = then->second.quantity[idx(ref_group[0])] + then->second.quantity[idx(ref_group[1])];
    double k1 = cell.quantity[idx(F::Ki)], k0 = then->second.quantity[idx(F::Ki)];
    d.y.push_back(std::log(wt1 / wb1) - std::log(wt0 / wb0) + std::log(qt1 / qb1) - std::log(qt0 / qb0));
    d.x.push_back(k1 / lref1 - k0 / lref0);
    d.z.push_back(*zk - *zl);
    auto [it, fresh] = clusters.try_emplace(key.country, static_cast<int>(clusters.size()));
    d.cluster.push_back(it->second);
    sum_k += k1;
    sum_l += lref1;
  }
  if (d.y.empty()) throw GmmError("preliminary iv: empty sample");
  auto r = iv_regression(d);
  r.elasticity_at_means = r.beta * sum_k / sum_l;
  if (r.weak && log) log->push_back("preliminary iv (" + std::string(gap_name(gap)) + "/" +
                                    std::string(sector_name(sector)) + "): weak instrument, first-stage F < 1");
  return r;
}

struct ConsumptionResult {
  IvResult iv;               // slope 1 - elasticity
  double elasticity = kNaN;  // 1 / (1 - eta)
  double se = kNaN;
};

// Long-difference regression of log expenditure shares on log sector prices,
// instrumented by the change in the sector's labor-cost-weighted log wage.
// Country effects in differences absorb country-specific linear trends.
inline ConsumptionResult consumption_elasticity(const SectorTable& cells, int horizon) {
  std::map<std::pair<std::string, int>, double> total;
  for (const auto& [key, cell] : cells) total[{key.country, key.year}] += cell.output_value;
  IvData d;
  std::map<std::pair<std::string, Sector>, int> clusters;
  std::map<std::string, int> countries;
  auto wage_index = [](const SectorCell& c) {
    double bill = 0.0, s = 0.0;
    for (Factor f : kLaborFactors) bill += c.bill(f);
    for (Factor f : kLaborFactors) s += c.bill(f) / bill * std::log(c.price[idx(f)]);
    return s;
  };
  for (const auto& [key, cell] : cells) {
    auto then = cells.find({key.country, key.sector, key.year - horizon});
    if (then == cells.end()) continue;
    double z1 = cell.output_value / total[{key.country, key.year}];
    double z0 = then->second.output_value / total[{key.country, key.year - horizon}];
    d.y.push_back(std::log(z1 / z0));
    d.x.push_back(std::log(cell.deflator() / then->second.deflator()));
    d.z.push_back(wage_index(cell) - wage_index(then->second));
    auto [ci, f1] = clusters.try_emplace({key.country, key.sector}, static_cast<int>(clusters.size()));
    auto [gi, f2] = countries.try_emplace(key.country, static_cast<int>(countries.size()));
    d.cluster.push_back(ci->second);
    d.absorb.push_back(gi->second);
  }
  if (d.y.empty()) throw GmmError("consumption elasticity: empty sample");
  ConsumptionResult out;
  out.iv = iv_regression(d);
  out.elasticity = 1.0 - out.iv.beta;
  out.se = out.iv.se;
  return out;
}

}  // namespace cesrace
