#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cesrace/ces.hpp"
#include "cesrace/equilibrium.hpp"

namespace cesrace {

// Evaluation point. Aggregate shares and quantity shares are derived from the
// expenditure and sector income shares so the identities hold by construction.
struct EconomyPoint {
  std::array<double, kSectors> zeta{};
  std::array<FactorArray, kSectors> lambda{};
  FactorArray Lambda{};
  std::array<FactorArray, kSectors> qshare{};
  double eta = 0.0;
  std::uint32_t active = 0;

  bool is_active(Factor f) const { return (active >> idx(f)) & 1u; }
  double consumer_term() const { return 1.0 - 1.0 / (1.0 - eta); }

  static EconomyPoint from_shares(const std::array<double, kSectors>& zeta,
                                  const std::array<FactorArray, kSectors>& lambda, double eta) {
    if (!(eta < 1.0)) throw std::invalid_argument("economy point: eta must be < 1");
    EconomyPoint p;
    p.eta = eta;
    double zs = zeta[0] + zeta[1];
    for (std::size_t n = 0; n < kSectors; ++n) {
      p.zeta[n] = zeta[n] / zs;
      double ls = 0.0;
      for (double v : lambda[n]) ls += v;
      for (std::size_t f = 0; f < kFactors; ++f) p.lambda[n][f] = lambda[n][f] / ls;
    }
    for (std::size_t f = 0; f < kFactors; ++f) {
      p.Lambda[f] = p.zeta[0] * p.lambda[0][f] + p.zeta[1] * p.lambda[1][f];
      if (p.Lambda[f] > 0.0) {
        p.active |= 1u << f;
        for (std::size_t n = 0; n < kSectors; ++n) p.qshare[n][f] = p.zeta[n] * p.lambda[n][f] / p.Lambda[f];
      }
    }
    return p;
  }
};

inline EconomyPoint economy_point(const EquilibriumState& s, double eta) {
  return EconomyPoint::from_shares(s.expenditure_shares, s.income_shares, eta);
}

using ShareDerivatives = std::array<FactorMatrix, kSectors>;

inline ShareDerivatives share_price_derivatives(const std::array<NestTree, kSectors>& trees,
                                                const EconomyPoint& point) {
  return {trees[0].share_derivatives(point.lambda[0]), trees[1].share_derivatives(point.lambda[1])};
}

inline ShareDerivatives share_price_derivatives(const std::array<VariantTechnology, kSectors>& techs,
                                                const EconomyPoint& point) {
  return share_price_derivatives(std::array<NestTree, kSectors>{make_tree(techs[0]), make_tree(techs[1])}, point);
}

inline constexpr double kConditionFlag = 1e10;

struct PsiMatrices {
  FactorMatrix psi_w = FactorMatrix::Constant(kNaN);
  FactorMatrix psi_l = FactorMatrix::Constant(kNaN);
  std::uint32_t active = 0;
  double condition = 0.0;
  bool ill_conditioned = false;
};

namespace detail {

inline std::vector<std::size_t> active_index(std::uint32_t active) {
  std::vector<std::size_t> ix;
  for (std::size_t f = 0; f < kFactors; ++f)
    if ((active >> f) & 1u) ix.push_back(f);
  return ix;
}

}  // namespace detail

inline PsiMatrices psi_matrices(const ShareDerivatives& d, const EconomyPoint& point) {
  PsiMatrices out;
  out.active = point.active;
  auto ix = detail::active_index(point.active);
  const Eigen::Index k = static_cast<Eigen::Index>(ix.size());
  const double c = point.consumer_term();
  Eigen::MatrixXd pw = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) {
      std::size_t f = ix[a], g = ix[b];
      double v = 0.0;
      for (std::size_t n = 0; n < kSectors; ++n)
        v += point.qshare[n][f] * (d[n](f, g) + c * point.lambda[n][g]);
      pw(a, b) = v;
    }
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(k, k) - pw;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  auto sv = svd.singularValues();
  out.condition = sv(0) / sv(k - 1);
  out.ill_conditioned = !(out.condition <= kConditionFlag);
  Eigen::MatrixXd pl = -m.fullPivLu().solve(pw);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) {
      out.psi_w(ix[a], ix[b]) = pw(a, b);
      out.psi_l(ix[a], ix[b]) = pl(a, b);
    }
  return out;
}

enum class Side { Production, Cost };

inline std::string_view side_name(Side s) { return s == Side::Production ? "production" : "cost"; }

struct ElasticityMatrix {
  Side side = Side::Cost;
  FactorMatrix values = FactorMatrix::Constant(kNaN);
  std::optional<FactorMatrix> se;

  double operator()(Factor f, Factor g) const { return values(idx(f), idx(g)); }
};

inline std::pair<ElasticityMatrix, ElasticityMatrix> morishima(const PsiMatrices& psi) {
  ElasticityMatrix prod, cost;
  prod.side = Side::Production;
  for (std::size_t f = 0; f < kFactors; ++f)
    for (std::size_t g = 0; g < kFactors; ++g) {
      if (f == g || !((psi.active >> f) & 1u) || !((psi.active >> g) & 1u)) continue;
      prod.values(f, g) = 1.0 / (psi.psi_l(f, g) - psi.psi_l(g, g) + 1.0);
      cost.values(f, g) = psi.psi_w(f, g) - psi.psi_w(g, g) + 1.0;
    }
  return {prod, cost};
}

struct WithinBetween {
  double within = 0.0;
  double between = 0.0;
};

inline WithinBetween within_between(const EconomyPoint& point, const ShareDerivatives& d, Factor f, Factor g) {
  const std::size_t a = idx(f), b = idx(g);
  const double c = point.consumer_term();
  WithinBetween out;
  for (std::size_t n = 0; n < kSectors; ++n) {
    double sector = d[n](a, b) - d[n](b, b) + 1.0;
    out.within += point.qshare[n][b] * sector;
    out.between += (point.qshare[n][a] - point.qshare[n][b]) * (d[n](a, b) + c * point.lambda[n][b]);
  }
  return out;
}

// Weights on each substitution parameter in the (ki, lfh) cost-side elasticity.
struct MuWeights {
  double fh = 0.0;
  double mh = 0.0;
  double fu = 0.0;
  double mu = 0.0;
  double ko = 0.0;
  double consumer = 0.0;

  double sum() const { return fh + mh + fu + mu + ko + consumer; }
};

struct WeightedAverage {
  double value = 0.0;
  std::array<MuWeights, kSectors> mu{};
};

inline WeightedAverage weighted_average_form(const EconomyPoint& point,
                                             const std::array<SectorTechnology, kSectors>& techs) {
  WeightedAverage out;
  const double ec = 1.0 / (1.0 - point.eta);
  auto inv = [](double s) { return 1.0 / (1.0 - s); };
  for (std::size_t n = 0; n < kSectors; ++n) {
    const auto& l = point.lambda[n];
    double s1 = l[idx(Factor::Ki)] + l[idx(Factor::Lfh)];
    double s2 = s1 + l[idx(Factor::Lmh)];
    double s3 = s2 + l[idx(Factor::Lfu)];
    double s4 = s3 + l[idx(Factor::Lmu)];
    double lfh = l[idx(Factor::Lfh)], lko = l[idx(Factor::Ko)];
    double qk = point.qshare[n][idx(Factor::Ki)], qf = point.qshare[n][idx(Factor::Lfh)];
    double gap = qf - qk;
    MuWeights& m = out.mu[n];
    m.fh = qf * (1.0 - lfh / s1) + qk * (lfh / s1);
    m.mh = gap * (lfh / s1) * (1.0 - s1 / s2);
    m.fu = gap * (lfh / s2) * (1.0 - s2 / s3);
    m.mu = gap * (lfh / s3) * (1.0 - s3 / s4);
    m.ko = gap * (lfh / s4) * lko;
    m.consumer = gap * (lfh / s4) * (1.0 - lko);
    const auto& sg = techs[n].sigma;
    out.value += m.fh * inv(sg.fh) + m.mh * inv(sg.mh) + m.fu * inv(sg.fu) + m.mu * inv(sg.mu) + m.ko +
                 m.consumer * ec;
  }
  return out;
}

}  // namespace cesrace
