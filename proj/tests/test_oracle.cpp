#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crate/numerics.hpp"
#include "crate/oracle.hpp"

#include <cmath>

using namespace crate;
using Md = Mat<double>;
using Vd = Vec<double>;

namespace {

Md random_mat(RngState& rng, int r, int c) {
  Md m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.uniform() * 2.0 - 1.0;
  return m;
}

}  // namespace

TEST_CASE("nn_lasso_cd zero target") {
  LassoInstance<double> inst;
  inst.dict = Md::Identity(3, 3);
  inst.target = Vd::Zero(3);
  inst.lambda = 0.5;
  const auto sol = nn_lasso_cd(inst);
  CHECK(sol.a.isZero(0.0));
  CHECK(sol.objective == doctest::Approx(0.0));
  CHECK(sol.converged);
}

TEST_CASE("nn_lasso_cd scalar soft threshold") {
  LassoInstance<double> inst;
  inst.dict = Md::Ones(1, 1);
  inst.target = Vd::Ones(1) * 3.0;
  inst.lambda = 2.0;
  const auto sol = nn_lasso_cd(inst);
  CHECK(sol.a(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sol.objective == doctest::Approx(4.0).epsilon(1e-12));  // 0.5*(3-1)^2 + 2
}

TEST_CASE("nn_lasso_cd huge lambda yields zero") {
  RngState rng(31);
  for (int t = 0; t < 5; ++t) {
    LassoInstance<double> inst;
    inst.dict = random_mat(rng, 4, 6);
    inst.target = random_mat(rng, 4, 1);
    inst.lambda = (inst.dict.transpose() * inst.target).cwiseAbs().maxCoeff() * 1.5;
    const auto sol = nn_lasso_cd(inst);
    CHECK(sol.a.isZero(0.0));
    // the zero vector must beat any single-coordinate move
    const Vd probe = Vd::Unit(6, t % 6) * 0.1;
    CHECK(sol.objective <=
          lasso_objective(inst.dict, probe, inst.target, inst.lambda) + 1e-12);
  }
}

TEST_CASE("nn_lasso_cd satisfies KKT at convergence") {
  RngState rng(13);
  for (int t = 0; t < 20; ++t) {
    LassoInstance<double> inst;
    const int d = 2 + static_cast<int>(rng.below(5));
    const int m = 1 + static_cast<int>(rng.below(8));
    inst.dict = random_mat(rng, d, m);
    inst.target = random_mat(rng, d, 1);
    inst.lambda = 0.05 + rng.uniform() * 0.3;
    inst.tolerance = 1e-12;
    const auto sol = nn_lasso_cd(inst);
    CHECK(sol.converged);
    CHECK(kkt_violation(inst, sol.a) < 10 * 1e-12 + 1e-10);
    CHECK((sol.a.array() >= 0).all());
  }
}

TEST_CASE("nn_lasso_cd handles a dead atom") {
  LassoInstance<double> inst;
  inst.dict = Md::Zero(2, 2);
  inst.dict(0, 0) = 1.0;
  inst.target = Vd::Ones(2);
  inst.lambda = 0.1;
  const auto sol = nn_lasso_cd(inst);
  CHECK(sol.a(1) == 0.0);
  CHECK(sol.a(0) == doctest::Approx(0.9));
}

TEST_CASE("columnwise solve reproduces the matrix objective") {
  RngState rng(99);
  Md dict = random_mat(rng, 4, 8);
  Md z = random_mat(rng, 4, 3);
  const double lambda = 0.2;
  Md a = nn_lasso_cd_cols(dict, z, lambda, 1e-12);
  double sum_cols = 0;
  for (int j = 0; j < 3; ++j) {
    LassoInstance<double> inst{dict, z.col(j), lambda, 1e-12, 100000};
    sum_cols += nn_lasso_cd(inst).objective;
  }
  CHECK(lasso_objective(dict, a, z, lambda) == doctest::Approx(sum_cols).epsilon(1e-10));
}

TEST_CASE("fd_grad on closed forms") {
  RngState rng(5);
  Md x = random_mat(rng, 3, 3);
  auto fsum = [](const Md& m) { return m.sum(); };
  CHECK((fd_grad<double>(fsum, x, 1e-5) - Md::Ones(3, 3)).cwiseAbs().maxCoeff() < 1e-9);
  auto fsq = [](const Md& m) { return 0.5 * m.squaredNorm(); };
  CHECK((fd_grad<double>(fsq, x, 1e-5) - x).cwiseAbs().maxCoeff() < 1e-9);
}
