#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>

#include "cesrace/factor.hpp"

namespace cesrace {

inline constexpr double kCobbDouglasBand = 1e-9;
inline constexpr double kLogSpaceRatio = 1e6;
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// One value per nest, named by the labor input entering that nest.
struct NestParams {
  double fh = 0.5;
  double mh = 0.5;
  double fu = 0.5;
  double mu = 0.5;
};

struct SectorTechnology {
  double tfp = 1.0;
  double alpha = 0.3;
  NestParams theta{};
  NestParams sigma{0.0, 0.0, 0.0, 0.0};

  void validate() const {
    auto in01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!(tfp > 0.0)) throw std::invalid_argument("technology: tfp must be positive");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("technology: alpha outside [0,1)");
    for (double t : {theta.fh, theta.mh, theta.fu, theta.mu})
      if (!in01(t)) throw std::invalid_argument("technology: theta outside (0,1)");
    for (double s : {sigma.fh, sigma.mh, sigma.fu, sigma.mu})
      if (!(s < 1.0)) throw std::invalid_argument("technology: sigma must be < 1");
  }
};

enum class NestLevel { One = 1, Two = 2, Three = 3, Four = 4 };

// Shallower technologies of the specification ladder. Nests that do not exist
// at a level are ignored; the outermost labor nest always reads sigma.mu.
//   One:   sigma.mu over (ki, lfh, lmh, lfu, lmu)
//   Two:   sigma.fh inside D, sigma.mu over (D, lmh, lfu, lmu)
//   Three: sigma.fh, sigma.mh inside C, sigma.mu over (C, lfu, lmu)
//   Four:  the full technology
struct VariantTechnology {
  NestLevel level = NestLevel::Four;
  double tfp = 1.0;
  double alpha = 0.3;
  NestParams theta{0.2, 0.2, 0.2, 0.2};
  NestParams sigma{0.0, 0.0, 0.0, 0.0};

  static VariantTechnology from(const SectorTechnology& t) {
    return {NestLevel::Four, t.tfp, t.alpha, t.theta, t.sigma};
  }
};

struct NestValues {
  double D = kNaN;
  double C = kNaN;
  double B = kNaN;
  double y = kNaN;
};

enum class NestTag : std::uint8_t { Root, Outer, B, C, D, Other };

// Tree of CES nests. Node 0 is the root; children always have a larger index
// than their parent so a reverse sweep evaluates bottom-up.
class NestTree {
 public:
  static constexpr int kMaxNodes = 6;
  static constexpr int kMaxChildren = 6;

  struct Node {
    double sigma = 0.0;
    NestTag tag = NestTag::Other;
    int size = 0;
    std::array<int, kMaxChildren> child{};
    std::array<double, kMaxChildren> weight{};
    bool cobb_douglas() const { return std::abs(sigma) < kCobbDouglasBand; }
  };

  struct CostEval {
    double log_cost = 0.0;
    FactorArray shares{};
  };

  double tfp = 1.0;

  static constexpr int leaf(Factor f) { return -static_cast<int>(idx(f)) - 1; }
  static constexpr bool is_leaf(int c) { return c < 0; }
  static constexpr std::size_t leaf_factor(int c) { return static_cast<std::size_t>(-c - 1); }

  int add_node(double sigma, NestTag tag = NestTag::Other) {
    if (count_ == kMaxNodes) throw std::length_error("nest tree: too many nodes");
    nodes_[count_].sigma = sigma;
    nodes_[count_].tag = tag;
    return count_++;
  }

  void add_child(int node, int child, double weight) {
    Node& n = nodes_.at(node);
    if (n.size == kMaxChildren) throw std::length_error("nest tree: too many children");
    if (!is_leaf(child) && child <= node) throw std::logic_error("nest tree: child must follow parent");
    if (!(weight > 0.0)) throw std::invalid_argument("nest tree: weights must be positive");
    n.child[n.size] = child;
    n.weight[n.size] = weight;
    ++n.size;
    if (is_leaf(child)) used_ |= 1u << leaf_factor(child);
  }

  int node_count() const { return count_; }
  const Node& node(int i) const { return nodes_.at(i); }
  bool uses(Factor f) const { return (used_ >> idx(f)) & 1u; }

  int find(NestTag tag) const {
    for (int i = 0; i < count_; ++i)
      if (nodes_[i].tag == tag) return i;
    return -1;
  }

  // Bitmask of factors below each node.
  std::array<std::uint32_t, kMaxNodes> masks() const {
    std::array<std::uint32_t, kMaxNodes> m{};
    for (int i = count_ - 1; i >= 0; --i)
      for (int k = 0; k < nodes_[i].size; ++k) {
        int c = nodes_[i].child[k];
        m[i] |= is_leaf(c) ? (1u << leaf_factor(c)) : m[c];
      }
    return m;
  }

  // Natural logs of node values, excluding tfp.
  std::array<double, kMaxNodes> node_logs(const FactorArray& x) const {
    for (std::size_t f = 0; f < kFactors; ++f)
      if (((used_ >> f) & 1u) && !(x[f] > 0.0))
        throw std::domain_error("ces: inputs must be positive");
    std::array<double, kMaxNodes> logs{};
    std::array<double, kMaxChildren> l{};
    for (int i = count_ - 1; i >= 0; --i) {
      const Node& n = nodes_[i];
      for (int k = 0; k < n.size; ++k) {
        int c = n.child[k];
        l[k] = is_leaf(c) ? std::log(x[leaf_factor(c)]) : logs[c];
      }
      logs[i] = combine(n, l);
    }
    return logs;
  }

  double log_output(const FactorArray& x) const { return std::log(tfp) + node_logs(x)[0]; }
  double output(const FactorArray& x) const { return std::exp(log_output(x)); }

  // d ln y / d ln x_f, equal to income shares at competitive prices.
  FactorArray output_shares(const FactorArray& x) const {
    auto logs = node_logs(x);
    FactorArray out{};
    std::array<double, kMaxNodes> reach{};
    reach[0] = 1.0;
    for (int i = 0; i < count_; ++i) {
      const Node& n = nodes_[i];
      for (int k = 0; k < n.size; ++k) {
        int c = n.child[k];
        double lc = is_leaf(c) ? std::log(x[leaf_factor(c)]) : logs[c];
        double s = n.cobb_douglas() ? n.weight[k] : n.weight[k] * std::exp(n.sigma * (lc - logs[i]));
        if (is_leaf(c))
          out[leaf_factor(c)] = reach[i] * s;
        else
          reach[c] = reach[i] * s;
      }
    }
    return out;
  }

  FactorArray marginal_products(const FactorArray& x) const {
    double y = output(x);
    FactorArray s = output_shares(x);
    FactorArray mp{};
    for (std::size_t f = 0; f < kFactors; ++f) mp[f] = ((used_ >> f) & 1u) ? y * s[f] / x[f] : 0.0;
    return mp;
  }

  // Unit cost and cost shares at factor prices w. Requires sigma < 1 everywhere.
  CostEval cost(const FactorArray& w) const {
    for (std::size_t f = 0; f < kFactors; ++f)
      if (((used_ >> f) & 1u) && !(w[f] > 0.0))
        throw std::domain_error("ces: factor prices must be positive");
    std::array<double, kMaxNodes> lc{};
    std::array<std::array<double, kMaxChildren>, kMaxNodes> share{};
    std::array<double, kMaxChildren> a{};
    for (int i = count_ - 1; i >= 0; --i) {
      const Node& n = nodes_[i];
      if (n.cobb_douglas()) {
        double v = 0.0;
        for (int k = 0; k < n.size; ++k) {
          v += n.weight[k] * (child_log_price(n.child[k], w, lc) - std::log(n.weight[k]));
          share[i][k] = n.weight[k];
        }
        lc[i] = v;
        continue;
      }
      double e = 1.0 / (1.0 - n.sigma);
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < n.size; ++k) {
        a[k] = e * std::log(n.weight[k]) + (1.0 - e) * child_log_price(n.child[k], w, lc);
        m = std::max(m, a[k]);
      }
      double s = 0.0;
      for (int k = 0; k < n.size; ++k) s += std::exp(a[k] - m);
      double lse = m + std::log(s);
      for (int k = 0; k < n.size; ++k) share[i][k] = std::exp(a[k] - lse);
      lc[i] = lse / (1.0 - e);
    }
    CostEval out;
    out.log_cost = lc[0] - std::log(tfp);
    std::array<double, kMaxNodes> reach{};
    reach[0] = 1.0;
    for (int i = 0; i < count_; ++i) {
      const Node& n = nodes_[i];
      for (int k = 0; k < n.size; ++k) {
        int c = n.child[k];
        if (is_leaf(c))
          out.shares[leaf_factor(c)] = reach[i] * share[i][k];
        else
          reach[c] = reach[i] * share[i][k];
      }
    }
    return out;
  }

  // d ln(lambda_f) / d ln(w_g) for the sector's cost shares lambda. Only the
  // substitution parameters and the shares themselves are needed: along the
  // path of f, each nest N contributes (1 - e_N) [pi(g | child) - pi(g | N)]
  // where e_N = 1/(1 - sigma_N) and pi(g | X) is g's share of X's cost.
  FactorMatrix share_derivatives(const FactorArray& lambda) const {
    FactorMatrix d = FactorMatrix::Zero();
    auto m = masks();
    std::array<double, kMaxNodes> total{};
    for (int i = 0; i < count_; ++i) total[i] = masked_sum(lambda, m[i]);
    for (int i = 0; i < count_; ++i) {
      const Node& n = nodes_[i];
      if (n.cobb_douglas()) continue;
      double coef = -n.sigma / (1.0 - n.sigma);
      for (int k = 0; k < n.size; ++k) {
        int c = n.child[k];
        std::uint32_t cm = is_leaf(c) ? (1u << leaf_factor(c)) : m[c];
        double csum = masked_sum(lambda, cm);
        for (std::size_t f = 0; f < kFactors; ++f) {
          if (!((cm >> f) & 1u)) continue;
          for (std::size_t g = 0; g < kFactors; ++g) {
            if (!((m[i] >> g) & 1u)) continue;
            double inner = ((cm >> g) & 1u) ? lambda[g] / csum : 0.0;
            d(f, g) += coef * (inner - lambda[g] / total[i]);
          }
        }
      }
    }
    return d;
  }

 private:
  std::array<Node, kMaxNodes> nodes_{};
  int count_ = 0;
  std::uint32_t used_ = 0;

  static double masked_sum(const FactorArray& v, std::uint32_t mask) {
    double s = 0.0;
    for (std::size_t f = 0; f < kFactors; ++f)
      if ((mask >> f) & 1u) s += v[f];
    return s;
  }

  static double child_log_price(int c, const FactorArray& w, const std::array<double, kMaxNodes>& lc) {
    return is_leaf(c) ? std::log(w[leaf_factor(c)]) : lc[c];
  }

  static double combine(const Node& n, const std::array<double, kMaxChildren>& l) {
    if (n.cobb_douglas()) {
      double v = 0.0;
      for (int k = 0; k < n.size; ++k) v += n.weight[k] * l[k];
      return v;
    }
    double lo = l[0], hi = l[0];
    for (int k = 1; k < n.size; ++k) {
      lo = std::min(lo, l[k]);
      hi = std::max(hi, l[k]);
    }
    if (hi - lo > std::log(kLogSpaceRatio)) {
      std::array<double, kMaxChildren> a{};
      double m = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < n.size; ++k) {
        a[k] = std::log(n.weight[k]) + n.sigma * l[k];
        m = std::max(m, a[k]);
      }
      double s = 0.0;
      for (int k = 0; k < n.size; ++k) s += std::exp(a[k] - m);
      return (m + std::log(s)) / n.sigma;
    }
    double s = 0.0;
    for (int k = 0; k < n.size; ++k) s += n.weight[k] * std::pow(std::exp(l[k]), n.sigma);
    return std::log(s) / n.sigma;
  }
};

namespace detail {

inline int outer_root(NestTree& t, double alpha, double sigma_outer) {
  int root = t.add_node(0.0, NestTag::Root);
  int outer = t.add_node(sigma_outer, NestTag::Outer);
  if (alpha > 0.0) t.add_child(root, NestTree::leaf(Factor::Ko), alpha);
  t.add_child(root, outer, 1.0 - alpha);
  return outer;
}

inline void add_d_nest(NestTree& t, int parent, double weight, double sigma_fh, double theta_fh) {
  int d = t.add_node(sigma_fh, NestTag::D);
  t.add_child(parent, d, weight);
  t.add_child(d, NestTree::leaf(Factor::Ki), 1.0 - theta_fh);
  t.add_child(d, NestTree::leaf(Factor::Lfh), theta_fh);
}

}  // namespace detail

inline NestTree make_tree(const VariantTechnology& v) {
  NestTree t;
  t.tfp = v.tfp;
  const NestParams& th = v.theta;
  const NestParams& sg = v.sigma;
  int outer = detail::outer_root(t, v.alpha, sg.mu);
  switch (v.level) {
    case NestLevel::One: {
      double rest = 1.0 - th.fh - th.mh - th.fu - th.mu;
      t.add_child(outer, NestTree::leaf(Factor::Ki), rest);
      t.add_child(outer, NestTree::leaf(Factor::Lfh), th.fh);
      t.add_child(outer, NestTree::leaf(Factor::Lmh), th.mh);
      t.add_child(outer, NestTree::leaf(Factor::Lfu), th.fu);
      t.add_child(outer, NestTree::leaf(Factor::Lmu), th.mu);
      break;
    }
    case NestLevel::Two: {
      detail::add_d_nest(t, outer, 1.0 - th.mh - th.fu - th.mu, sg.fh, th.fh);
      t.add_child(outer, NestTree::leaf(Factor::Lmh), th.mh);
      t.add_child(outer, NestTree::leaf(Factor::Lfu), th.fu);
      t.add_child(outer, NestTree::leaf(Factor::Lmu), th.mu);
      break;
    }
    case NestLevel::Three: {
      int c = t.add_node(sg.mh, NestTag::C);
      t.add_child(outer, c, 1.0 - th.fu - th.mu);
      t.add_child(outer, NestTree::leaf(Factor::Lfu), th.fu);
      t.add_child(outer, NestTree::leaf(Factor::Lmu), th.mu);
      detail::add_d_nest(t, c, 1.0 - th.mh, sg.fh, th.fh);
      t.add_child(c, NestTree::leaf(Factor::Lmh), th.mh);
      break;
    }
    case NestLevel::Four: {
      int b = t.add_node(sg.fu, NestTag::B);
      t.add_child(outer, b, 1.0 - th.mu);
      t.add_child(outer, NestTree::leaf(Factor::Lmu), th.mu);
      int c = t.add_node(sg.mh, NestTag::C);
      t.add_child(b, c, 1.0 - th.fu);
      t.add_child(b, NestTree::leaf(Factor::Lfu), th.fu);
      detail::add_d_nest(t, c, 1.0 - th.mh, sg.fh, th.fh);
      t.add_child(c, NestTree::leaf(Factor::Lmh), th.mh);
      break;
    }
  }
  return t;
}

inline NestTree make_tree(const SectorTechnology& tech) { return make_tree(VariantTechnology::from(tech)); }

inline NestValues eval_variant(const VariantTechnology& v, const FactorArray& inputs) {
  NestTree t = make_tree(v);
  auto logs = t.node_logs(inputs);
  NestValues out;
  auto read = [&](NestTag tag) {
    int i = t.find(tag);
    return i < 0 ? kNaN : std::exp(logs[i]);
  };
  out.D = read(NestTag::D);
  out.C = read(NestTag::C);
  out.B = read(NestTag::B);
  out.y = std::exp(std::log(t.tfp) + logs[0]);
  return out;
}

inline NestValues eval_nests(const SectorTechnology& tech, const FactorArray& inputs) {
  return eval_variant(VariantTechnology::from(tech), inputs);
}

inline FactorArray marginal_products(const SectorTechnology& tech, const FactorArray& inputs) {
  return make_tree(tech).marginal_products(inputs);
}

struct GammaWeights {
  double fh = 0.5;
  double mh = 0.5;
  double fu = 0.5;
};

// Pointwise weights from factor bills (price times quantity).
inline GammaWeights gamma_point(const FactorArray& bill) {
  double d = bill[idx(Factor::Ki)] + bill[idx(Factor::Lfh)];
  double c = d + bill[idx(Factor::Lmh)];
  double b = c + bill[idx(Factor::Lfu)];
  return {bill[idx(Factor::Lfh)] / d, bill[idx(Factor::Lmh)] / c, bill[idx(Factor::Lfu)] / b};
}

// Mean over a country-sector run of pointwise weights.
inline GammaWeights gamma_weights(std::span<const FactorArray> bills) {
  if (bills.empty()) throw std::invalid_argument("gamma_weights: empty run");
  GammaWeights g{0.0, 0.0, 0.0};
  for (const auto& b : bills) {
    auto p = gamma_point(b);
    g.fh += p.fh;
    g.mh += p.mh;
    g.fu += p.fu;
  }
  double n = static_cast<double>(bills.size());
  return {g.fh / n, g.mh / n, g.fu / n};
}

struct AggregateDeltas {
  double D = 0.0;
  double C = 0.0;
  double B = 0.0;
};

inline AggregateDeltas loglin_deltas(const GammaWeights& g, const FactorArray& dln) {
  AggregateDeltas a;
  a.D = (1.0 - g.fh) * dln[idx(Factor::Ki)] + g.fh * dln[idx(Factor::Lfh)];
  a.C = (1.0 - g.mh) * a.D + g.mh * dln[idx(Factor::Lmh)];
  a.B = (1.0 - g.fu) * a.C + g.fu * dln[idx(Factor::Lfu)];
  return a;
}

inline double log_mean(double a, double b) {
  double u = a / b - 1.0;
  if (std::abs(u) < 1e-4) return b * (1.0 + u / 2.0 - u * u / 12.0 + u * u * u / 24.0);
  return (a - b) / std::log(a / b);
}

namespace detail {

inline double sato_vartia_pair(double bill_x1, double bill_z1, double bill_x0, double bill_z0,
                               double dx, double dz) {
  double sx1 = bill_x1 / (bill_x1 + bill_z1), sz1 = 1.0 - sx1;
  double sx0 = bill_x0 / (bill_x0 + bill_z0), sz0 = 1.0 - sx0;
  double wx = log_mean(sx1, sx0), wz = log_mean(sz1, sz0);
  return (wx * dx + wz * dz) / (wx + wz);
}

}  // namespace detail

// Exact log changes of the CES aggregates between two dates, from the bills at
// both dates. Exact for any substitution parameter with fixed share weights.
inline AggregateDeltas sato_vartia_deltas(const FactorArray& bill_now, const FactorArray& bill_then,
                                          const FactorArray& dln) {
  auto ki = idx(Factor::Ki), fh = idx(Factor::Lfh), mh = idx(Factor::Lmh), fu = idx(Factor::Lfu);
  AggregateDeltas a;
  a.D = detail::sato_vartia_pair(bill_now[ki], bill_now[fh], bill_then[ki], bill_then[fh], dln[ki],
                                 dln[fh]);
  double d1 = bill_now[ki] + bill_now[fh], d0 = bill_then[ki] + bill_then[fh];
  a.C = detail::sato_vartia_pair(d1, bill_now[mh], d0, bill_then[mh], a.D, dln[mh]);
  double c1 = d1 + bill_now[mh], c0 = d0 + bill_then[mh];
  a.B = detail::sato_vartia_pair(c1, bill_now[fu], c0, bill_then[fu], a.C, dln[fu]);
  return a;
}

struct WageGaps {
  double mh_fh = 0.0;
  double mu_fu = 0.0;
  double mh_mu = 0.0;
  double fh_fu = 0.0;
  double fh_ri = 0.0;
};

inline WageGaps wage_gap_deltas(const NestParams& sigma, const FactorArray& dln, const AggregateDeltas& a) {
  double bfh = 1.0 - sigma.fh, bmh = 1.0 - sigma.mh, bfu = 1.0 - sigma.fu, bmu = 1.0 - sigma.mu;
  double ki = dln[idx(Factor::Ki)], fh = dln[idx(Factor::Lfh)], mh = dln[idx(Factor::Lmh)];
  double fu = dln[idx(Factor::Lfu)], mu = dln[idx(Factor::Lmu)];
  WageGaps w;
  w.mh_fh = bmh * (a.D - mh) - bfh * (a.D - fh);
  w.mu_fu = bmu * (a.B - mu) - bfu * (a.B - fu);
  w.mh_mu = bmh * (a.C - mh) - bmu * (a.B - mu) + bfu * (a.B - a.C);
  w.fh_fu = bfh * (a.D - fh) - bfu * (a.C - fu) + bmh * (a.C - a.D);
  w.fh_ri = -bfh * (fh - ki);
  return w;
}

inline WageGaps wage_gap_deltas(const SectorTechnology& tech, const FactorArray& dln, const GammaWeights& g) {
  return wage_gap_deltas(tech.sigma, dln, loglin_deltas(g, dln));
}

}  // namespace cesrace
