#include <random>

#include "catch_amalgamated.hpp"
#include "cesrace/gmm.hpp"

using namespace cesrace;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Two equations sharing two parameters; three instruments on the first
// equation, two on the second. Errors are correlated within clusters.
LinearSystem random_system(std::mt19937_64& rng, int clusters, int per_cluster, double noise = 0.3) {
  std::normal_distribution<double> nd;
  const int N = clusters * per_cluster;
  LinearSystem sys;
  sys.params = {"a", "b"};
  sys.equations.resize(2);
  sys.equations[0] = {"first", Eigen::VectorXd(N), Eigen::MatrixXd::Zero(N, 2)};
  sys.equations[1] = {"second", Eigen::VectorXd(N), Eigen::MatrixXd::Zero(N, 2)};
  std::vector<Eigen::VectorXd> z(5, Eigen::VectorXd(N));
  for (int c = 0; c < clusters; ++c) {
    double ce = nd(rng);
    for (int j = 0; j < per_cluster; ++j) {
      int i = c * per_cluster + j;
      sys.cluster.push_back(c);
      for (auto& v : z) v(i) = nd(rng);
      double u0 = noise * (nd(rng) + ce), u1 = noise * (nd(rng) - ce);
      double x0 = z[0](i) + 0.5 * z[1](i) - 0.3 * z[2](i) + 0.5 * u0;
      double x1 = z[3](i) - 0.4 * z[4](i) + 0.3 * u1;
      sys.equations[0].x(i, 0) = x0;
      sys.equations[0].y(i) = 0.7 * x0 + u0;
      sys.equations[1].x(i, 0) = -x0;
      sys.equations[1].x(i, 1) = x1;
      sys.equations[1].y(i) = -0.7 * x0 + 1.3 * x1 + u1;
    }
  }
  for (int k = 0; k < 3; ++k) sys.moments.push_back({"m" + std::to_string(k), 0, z[k]});
  for (int k = 3; k < 5; ++k) sys.moments.push_back({"m" + std::to_string(k), 1, z[k]});
  return sys;
}

}  // namespace

TEST_CASE("gmm recovers planted coefficients", "[gmm]") {
  std::mt19937_64 rng(11);
  auto sys = random_system(rng, 40, 25);
  auto fit = fit_gmm(sys);
  CHECK(fit.j_df == 3);
  CHECK(fit.n_clusters == 40);
  CHECK(std::abs(fit["a"] - 0.7) < 4 * fit.se(0));
  CHECK(std::abs(fit["b"] - 1.3) < 4 * fit.se(1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.vcov);
  CHECK(es.eigenvalues().minCoeff() >= 0.0);
  CHECK((fit.vcov - fit.vcov.transpose()).norm() <= 1e-15 * fit.vcov.norm());
}

TEST_CASE("gmm invariances", "[gmm]") {
  std::mt19937_64 rng(5);
  auto sys = random_system(rng, 12, 10);
  auto base = fit_gmm(sys);

  SECTION("instrument scaling leaves estimates unchanged") {
    auto scaled = sys;
    scaled.moments[1].z *= 37.0;
    scaled.moments[4].z *= 0.01;
    auto fit = fit_gmm(scaled);
    CHECK_THAT(fit.b(0), WithinAbs(base.b(0), 1e-9));
    CHECK_THAT(fit.b(1), WithinAbs(base.b(1), 1e-9));
    CHECK_THAT(fit.j_stat, WithinRel(base.j_stat, 1e-8));
  }
  SECTION("duplicating every observation leaves estimates unchanged") {
    auto dup = sys;
    const auto N = sys.rows();
    for (auto& e : dup.equations) {
      Eigen::VectorXd y(2 * N);
      y << e.y, e.y;
      Eigen::MatrixXd x(2 * N, e.x.cols());
      x << e.x, e.x;
      e.y = y;
      e.x = x;
    }
    for (auto& m : dup.moments) {
      Eigen::VectorXd z(2 * N);
      z << m.z, m.z;
      m.z = z;
    }
    dup.cluster.insert(dup.cluster.end(), sys.cluster.begin(), sys.cluster.end());
    auto fit = fit_gmm(dup);
    CHECK_THAT(fit.b(0), WithinAbs(base.b(0), 1e-12));
    CHECK_THAT(fit.b(1), WithinAbs(base.b(1), 1e-12));
  }
  SECTION("wald of a parameter against itself is zero") {
    auto t = wald_equal(base, {{"a", "a"}});
    CHECK(t.stat == 0.0);
    CHECK(t.pvalue == 1.0);
    auto u = wald_equal(base, {{"a", "b"}});
    CHECK(u.stat > 0.0);
  }
}

TEST_CASE("clustered covariance with singleton clusters is the robust sandwich", "[gmm]") {
  std::mt19937_64 rng(9);
  auto sys = random_system(rng, 60, 1);
  // Independent sandwich: one equation, one instrument per parameter.
  LinearSystem one;
  one.params = {"a"};
  one.equations = {sys.equations[0]};
  one.equations[0].x = sys.equations[0].x.leftCols(1);
  one.moments = {sys.moments[0]};
  one.cluster = sys.cluster;
  auto fit = fit_gmm(one);
  const auto& x = one.equations[0].x.col(0);
  const auto& y = one.equations[0].y;
  const auto& z = one.moments[0].z;
  double b = z.dot(y) / z.dot(x);
  double meat = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) meat += std::pow(z(i) * (y(i) - x(i) * b), 2);
  double n = y.size();
  double v = meat / std::pow(z.dot(x), 2) * n / (n - 1.0);
  CHECK_THAT(fit.b(0), WithinRel(b, 1e-12));
  CHECK_THAT(fit.vcov(0, 0), WithinRel(v, 1e-10));

  // The same for the two-parameter over-identified system, stepping through
  // both weighting stages by hand.
  auto full = fit_gmm(sys);
  auto mb = detail::moment_blocks(sys);
  Eigen::MatrixXd W1 = Eigen::MatrixXd::Zero(5, 5);
  for (int k = 0; k < 5; ++k) W1(k, k) = 1.0 / (sys.moments[k].z.squaredNorm() / n);
  Eigen::VectorXd b1 = (mb.G.transpose() * W1 * mb.G).inverse() * mb.G.transpose() * W1 * mb.s;
  auto g1 = detail::moment_contributions(sys, b1);
  Eigen::MatrixXd W = (g1.transpose() * g1 / n).inverse();
  Eigen::VectorXd b2 = (mb.G.transpose() * W * mb.G).inverse() * mb.G.transpose() * W * mb.s;
  auto g2 = detail::moment_contributions(sys, b2);
  Eigen::MatrixXd S = g2.transpose() * g2 / n;
  Eigen::MatrixXd A = (mb.G.transpose() * W * mb.G).inverse();
  Eigen::MatrixXd V = A * (mb.G.transpose() * W * S * W * mb.G) * A / n * (n / (n - 1.0));
  CHECK((full.b - b2).norm() < 1e-12);
  CHECK((full.vcov - V).norm() < 1e-10 * V.norm());
}

TEST_CASE("just-identified systems have zero over-identification statistic", "[gmm]") {
  std::mt19937_64 rng(3);
  auto sys = random_system(rng, 15, 8);
  sys.moments.erase(sys.moments.begin() + 1, sys.moments.begin() + 3);
  sys.moments.pop_back();
  auto fit = fit_gmm(sys);
  CHECK(fit.j_df == 0);
  CHECK(fit.j_stat == 0.0);
  CHECK(fit.gbar.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("exact fit skips the second step", "[gmm]") {
  std::mt19937_64 rng(4);
  auto sys = random_system(rng, 10, 6, 0.0);
  auto fit = fit_gmm(sys);
  CHECK(fit.exact_fit);
  CHECK_THAT(fit["a"], WithinAbs(0.7, 1e-12));
  CHECK_THAT(fit["b"], WithinAbs(1.3, 1e-12));
  CHECK(fit.j_stat == 0.0);
  CHECK(fit.vcov.norm() < 1e-20);
}

TEST_CASE("gmm error reporting", "[gmm]") {
  std::mt19937_64 rng(8);
  SECTION("a moment with zero instrument names itself") {
    auto sys = random_system(rng, 10, 5);
    sys.moments[3].z.setZero();
    sys.moments[4].z.setZero();
    CHECK_THROWS_WITH(fit_gmm(sys), Catch::Matchers::ContainsSubstring("moment m3"));
  }
  SECTION("a parameter without identifying moments is named") {
    auto sys = random_system(rng, 10, 5);
    sys.moments.pop_back();
    sys.moments.pop_back();
    CHECK_THROWS_WITH(fit_gmm(sys), Catch::Matchers::ContainsSubstring("parameter b"));
  }
  SECTION("fewer moments than parameters") {
    auto sys = random_system(rng, 10, 5);
    sys.moments.resize(1);
    CHECK_THROWS_WITH(fit_gmm(sys), Catch::Matchers::ContainsSubstring("fewer moments"));
  }
  SECTION("too few clusters") {
    auto sys = random_system(rng, 1, 30);
    CHECK_THROWS_AS(fit_gmm(sys), GmmError);
  }
}
