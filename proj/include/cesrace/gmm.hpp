#pragma once

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>

namespace cesrace {

// Linear moment system: for every moment k on equation e,
//   E[ z_k (y_e - x_e b) ] = 0
// All equations share the same N rows; rows are grouped into clusters.
struct GmmEquation {
  std::string name;
  Eigen::VectorXd y;
  Eigen::MatrixXd x;  // N x P, one column per parameter
};

struct GmmMoment {
  std::string name;
  int equation = 0;
  Eigen::VectorXd z;
};

struct LinearSystem {
  std::vector<std::string> params;
  std::vector<GmmEquation> equations;
  std::vector<GmmMoment> moments;
  std::vector<int> cluster;  // one id per row

  Eigen::Index rows() const { return static_cast<Eigen::Index>(cluster.size()); }
  Eigen::Index param_count() const { return static_cast<Eigen::Index>(params.size()); }
  Eigen::Index moment_count() const { return static_cast<Eigen::Index>(moments.size()); }
};

class GmmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GmmOptions {
  bool two_step = true;
  bool small_sample = true;       // scale the clustered covariance by G/(G-1)
  double exact_fit_tolerance = 1e-8;
};

struct GmmFit {
  std::vector<std::string> params;
  Eigen::VectorXd b;
  Eigen::MatrixXd vcov;
  Eigen::VectorXd gbar;
  double j_stat = 0.0;
  int j_df = 0;
  double j_pvalue = 1.0;
  int n_obs = 0;
  int n_clusters = 0;
  bool exact_fit = false;

  double se(Eigen::Index i) const { return std::sqrt(std::max(0.0, vcov(i, i))); }
  Eigen::Index index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i] == name) return static_cast<Eigen::Index>(i);
    throw std::out_of_range("gmm: unknown parameter " + name);
  }
  double operator[](const std::string& name) const { return b[index(name)]; }
};

namespace detail {

struct MomentBlocks {
  Eigen::MatrixXd G;  // K x P, mean of z x'
  Eigen::VectorXd s;  // K, mean of z y
};

inline MomentBlocks moment_blocks(const LinearSystem& sys) {
  const Eigen::Index K = sys.moment_count(), P = sys.param_count();
  const double n = static_cast<double>(sys.rows());
  MomentBlocks m{Eigen::MatrixXd::Zero(K, P), Eigen::VectorXd::Zero(K)};
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto& mo = sys.moments[k];
    const auto& eq = sys.equations[mo.equation];
    m.G.row(k) = (mo.z.transpose() * eq.x) / n;
    m.s(k) = mo.z.dot(eq.y) / n;
  }
  return m;
}

// Row-level moment contributions g_ik at b.
inline Eigen::MatrixXd moment_contributions(const LinearSystem& sys, const Eigen::VectorXd& b) {
  const Eigen::Index N = sys.rows(), K = sys.moment_count();
  std::vector<Eigen::VectorXd> u(sys.equations.size());
  for (std::size_t e = 0; e < sys.equations.size(); ++e)
    u[e] = sys.equations[e].y - sys.equations[e].x * b;
  Eigen::MatrixXd g(N, K);
  for (Eigen::Index k = 0; k < K; ++k) g.col(k) = sys.moments[k].z.cwiseProduct(u[sys.moments[k].equation]);
  return g;
}

// Clustered second moment (1/N) sum_c (sum_{i in c} g_i)(sum_{i in c} g_i)'.
inline Eigen::MatrixXd clustered_s(const LinearSystem& sys, const Eigen::MatrixXd& g, int* clusters = nullptr) {
  std::map<int, Eigen::VectorXd> sums;
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    auto [it, fresh] = sums.try_emplace(sys.cluster[i], Eigen::VectorXd::Zero(g.cols()));
    it->second += g.row(i).transpose();
  }
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(g.cols(), g.cols());
  for (const auto& [c, v] : sums) S += v * v.transpose();
  if (clusters) *clusters = static_cast<int>(sums.size());
  return S / static_cast<double>(g.rows());
}

inline void check_shapes(const LinearSystem& sys) {
  const Eigen::Index N = sys.rows(), P = sys.param_count();
  if (N == 0) throw GmmError("gmm: empty sample");
  if (sys.moments.size() < sys.params.size()) throw GmmError("gmm: fewer moments than parameters");
  for (const auto& e : sys.equations)
    if (e.y.size() != N || e.x.rows() != N || e.x.cols() != P)
      throw std::invalid_argument("gmm: equation " + e.name + " has inconsistent dimensions");
  for (const auto& m : sys.moments) {
    if (m.equation < 0 || m.equation >= static_cast<int>(sys.equations.size()))
      throw std::invalid_argument("gmm: moment " + m.name + " references no equation");
    if (m.z.size() != N) throw std::invalid_argument("gmm: moment " + m.name + " has wrong length");
  }
}

// Names the moment or parameter responsible for a rank-deficient G.
inline void check_rank(const LinearSystem& sys, const Eigen::MatrixXd& G) {
  const double scale = std::max(1.0, G.cwiseAbs().maxCoeff());
  for (Eigen::Index k = 0; k < G.rows(); ++k)
    if (G.row(k).cwiseAbs().maxCoeff() <= 1e-12 * scale)
      throw GmmError("gmm: rank-deficient instrument matrix, moment " + sys.moments[k].name +
                     " carries no information on any parameter");
  Eigen::MatrixXd Gn = G;
  for (Eigen::Index k = 0; k < G.rows(); ++k) Gn.row(k) /= Gn.row(k).norm();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Gn);
  qr.setThreshold(1e-10);
  if (qr.rank() < G.cols()) {
    Eigen::Index p = qr.colsPermutation().indices()(G.cols() - 1);
    throw GmmError("gmm: rank-deficient instrument matrix, parameter " + sys.params[p] +
                   " is not identified by the moments");
  }
}

inline Eigen::VectorXd weighted_solution(const Eigen::MatrixXd& G, const Eigen::VectorXd& s,
                                         const Eigen::MatrixXd& W) {
  Eigen::MatrixXd A = G.transpose() * W * G;
  return A.ldlt().solve(G.transpose() * W * s);
}

inline Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  Eigen::VectorXd ev = es.eigenvalues();
  const double top = ev.cwiseAbs().maxCoeff();
  Eigen::VectorXd inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv(i) = ev(i) > 1e-14 * top ? 1.0 / ev(i) : 0.0;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Two-step linear GMM. The first step weights each moment by the inverse mean
// square of its instrument, the second by the inverse clustered moment
// covariance. When the first step fits every moment exactly the second step is
// skipped and the over-identification statistic is zero.
inline GmmFit fit_gmm(const LinearSystem& sys, const GmmOptions& opt = {}) {
  detail::check_shapes(sys);
  const Eigen::Index K = sys.moment_count(), P = sys.param_count();
  const double n = static_cast<double>(sys.rows());
  auto mb = detail::moment_blocks(sys);
  detail::check_rank(sys, mb.G);

  int clusters = 0;
  {
    std::map<int, int> seen;
    for (int c : sys.cluster) ++seen[c];
    clusters = static_cast<int>(seen.size());
  }
  if (clusters < P) {
    std::ostringstream os;
    os << "gmm: " << clusters << " clusters cannot support " << P << " parameters";
    throw GmmError(os.str());
  }

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(K, K);
  for (Eigen::Index k = 0; k < K; ++k) W(k, k) = n / sys.moments[k].z.squaredNorm();
  Eigen::VectorXd b = detail::weighted_solution(mb.G, mb.s, W);

  GmmFit fit;
  fit.params = sys.params;
  fit.n_obs = static_cast<int>(sys.rows());
  fit.n_clusters = clusters;
  fit.j_df = static_cast<int>(K - P);

  double ynorm = 0.0, unorm = 0.0;
  for (const auto& e : sys.equations) {
    ynorm += e.y.squaredNorm();
    unorm += (e.y - e.x * b).squaredNorm();
  }
  fit.exact_fit = std::sqrt(unorm) <= opt.exact_fit_tolerance * std::max(1.0, std::sqrt(ynorm));

  Eigen::MatrixXd g = detail::moment_contributions(sys, b);
  Eigen::MatrixXd S = detail::clustered_s(sys, g);
  if (opt.two_step && !fit.exact_fit && K > P) {
    W = detail::symmetric_inverse(S);
    b = detail::weighted_solution(mb.G, mb.s, W);
    g = detail::moment_contributions(sys, b);
    S = detail::clustered_s(sys, g);
  }
  fit.b = b;
  fit.gbar = g.colwise().mean().transpose();

  Eigen::MatrixXd bread = (mb.G.transpose() * W * mb.G).ldlt().solve(Eigen::MatrixXd::Identity(P, P));
  Eigen::MatrixXd meat = mb.G.transpose() * W * S * W * mb.G;
  fit.vcov = bread * meat * bread / n;
  if (opt.small_sample && clusters > 1) fit.vcov *= static_cast<double>(clusters) / (clusters - 1.0);
  fit.vcov = 0.5 * (fit.vcov + fit.vcov.transpose());

  if (fit.j_df > 0 && !fit.exact_fit) {
    fit.j_stat = n * fit.gbar.dot(detail::symmetric_inverse(S) * fit.gbar);
    fit.j_pvalue = boost::math::cdf(boost::math::complement(boost::math::chi_squared(fit.j_df), fit.j_stat));
  }
  return fit;
}

struct WaldTest {
  double stat = 0.0;
  int df = 0;
  double pvalue = 1.0;
  double f_pvalue = 1.0;  // stat / df against F(df, clusters - 1)
};

// Wald test of R b = r with the clustered covariance.
inline WaldTest wald(const GmmFit& fit, const Eigen::MatrixXd& R, const Eigen::VectorXd& r) {
  if (R.cols() != fit.b.size() || R.rows() != r.size()) throw std::invalid_argument("wald: dimension mismatch");
  WaldTest t;
  t.df = static_cast<int>(R.rows());
  Eigen::VectorXd d = R * fit.b - r;
  if (d.norm() <= 1e-12 * (1.0 + fit.b.norm())) return t;
  Eigen::MatrixXd V = R * fit.vcov * R.transpose();
  t.stat = d.dot(V.ldlt().solve(d));
  if (!std::isfinite(t.stat) || t.stat < 0.0) {
    t.stat = std::numeric_limits<double>::infinity();
    t.pvalue = t.f_pvalue = 0.0;
    return t;
  }
  t.pvalue = boost::math::cdf(boost::math::complement(boost::math::chi_squared(t.df), t.stat));
  if (fit.n_clusters > 1)
    t.f_pvalue = boost::math::cdf(boost::math::complement(
        boost::math::fisher_f(t.df, fit.n_clusters - 1.0), t.stat / t.df));
  return t;
}

// Equality restrictions between named parameters: (a_i - b_i) = 0 for each pair.
inline WaldTest wald_equal(const GmmFit& fit, const std::vector<std::pair<std::string, std::string>>& pairs) {
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(pairs.size()), fit.b.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    R(static_cast<Eigen::Index>(i), fit.index(pairs[i].first)) += 1.0;
    R(static_cast<Eigen::Index>(i), fit.index(pairs[i].second)) -= 1.0;
  }
  return wald(fit, R, Eigen::VectorXd::Zero(R.rows()));
}

}  // namespace cesrace
