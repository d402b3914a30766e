#pragma once

#include "crate/numerics.hpp"

#include <functional>

namespace crate {

template <class S>
struct LassoInstance {
  Mat<S> dict;    // d x m
  Vec<S> target;  // d
  S lambda = S(0);
  S tolerance = S(1e-10);
  int max_iters = 100000;
};

template <class S>
struct LassoSolution {
  Vec<S> a;  // entrywise >= 0
  S objective = S(0);
  int sweeps = 0;
  bool converged = false;
  S final_gap = S(0);  // max coordinate change in the last sweep
};

template <class S>
S lasso_objective(const Mat<S>& dict, const Vec<S>& a, const Vec<S>& z, S lambda) {
  return S(0.5) * (z - dict * a).squaredNorm() + lambda * a.cwiseAbs().sum();
}

/// Matrix form over tokens: 0.5 * ||Z - D A||_F^2 + lambda * sum|A|.
template <class S>
S lasso_objective(const Mat<S>& dict, const Mat<S>& a, const Mat<S>& z, S lambda) {
  return S(0.5) * (z - dict * a).squaredNorm() + lambda * a.cwiseAbs().sum();
}

/// Cyclic coordinate descent for min_{a >= 0} 0.5*||z - D a||^2 + lambda*sum(a).
/// Each coordinate has the closed-form update
///   a_j <- max(0, (d_j' r + a_j ||d_j||^2 - lambda) / ||d_j||^2)
/// with the residual r = z - D a maintained incrementally.
template <class S>
LassoSolution<S> nn_lasso_cd(const LassoInstance<S>& inst) {
  if (inst.lambda < S(0)) throw ConfigError("nn_lasso_cd: lambda must be >= 0");
  if (inst.tolerance <= S(0)) throw ConfigError("nn_lasso_cd: tolerance must be > 0");
  const auto m = inst.dict.cols();
  require_shape(inst.dict.rows() == inst.target.rows(), "nn_lasso_cd: dict/target mismatch");

  Vec<S> colsq(m);
  for (Eigen::Index j = 0; j < m; ++j) colsq(j) = inst.dict.col(j).squaredNorm();

  LassoSolution<S> sol;
  sol.a = Vec<S>::Zero(m);
  Vec<S> r = inst.target;
  S prev_obj = lasso_objective(inst.dict, sol.a, inst.target, inst.lambda);

  for (int sweep = 0; sweep < inst.max_iters; ++sweep) {
    S max_change = S(0);
    for (Eigen::Index j = 0; j < m; ++j) {
      if (colsq(j) == S(0)) continue;  // dead atom, stays at zero
      const S num = inst.dict.col(j).dot(r) + sol.a(j) * colsq(j) - inst.lambda;
      const S next = std::max(S(0), num / colsq(j));
      const S delta = next - sol.a(j);
      if (delta != S(0)) {
        r -= delta * inst.dict.col(j);
        sol.a(j) = next;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    sol.sweeps = sweep + 1;
    sol.final_gap = max_change;

    const S obj = lasso_objective(inst.dict, sol.a, inst.target, inst.lambda);
    if (obj > prev_obj + S(1e-12) * std::max(S(1), std::abs(prev_obj)))
      throw NumericalError("nn_lasso_cd: objective increased within a sweep");
    prev_obj = obj;

    if (max_change < inst.tolerance) {
      sol.converged = true;
      break;
    }
  }
  sol.objective = prev_obj;
  return sol;
}

/// Column-by-column solve of the matrix problem; returns the code matrix.
template <class S>
Mat<S> nn_lasso_cd_cols(const Mat<S>& dict, const Mat<S>& z, S lambda,
                        S tolerance = S(1e-10), int max_iters = 100000) {
  Mat<S> a(dict.cols(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    LassoInstance<S> inst{dict, z.col(j), lambda, tolerance, max_iters};
    a.col(j) = nn_lasso_cd(inst).a;
  }
  return a;
}

/// Worst KKT violation at a candidate solution: for active coordinates the
/// stationarity residual, for inactive ones the amount the gradient dips
/// below -0 (negative values indicate a violated optimality condition).
template <class S>
S kkt_violation(const LassoInstance<S>& inst, const Vec<S>& a) {
  const Vec<S> g = inst.dict.transpose() * (inst.dict * a - inst.target);
  S worst = S(0);
  for (Eigen::Index j = 0; j < a.rows(); ++j) {
    if (a(j) > S(0))
      worst = std::max(worst, std::abs(g(j) + inst.lambda));
    else
      worst = std::max(worst, std::max(S(0), -(g(j) + inst.lambda)));
  }
  return worst;
}

/// Central finite differences of a scalar function, entry by entry.
template <class S>
Mat<S> fd_grad(const std::function<S(const Mat<S>&)>& f, const Mat<S>& x, S step) {
  Mat<S> g(x.rows(), x.cols());
  Mat<S> probe = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const S orig = probe(i, j);
      probe(i, j) = orig + step;
      const S fp = f(probe);
      probe(i, j) = orig - step;
      const S fm = f(probe);
      probe(i, j) = orig;
      g(i, j) = (fp - fm) / (S(2) * step);
    }
  }
  return g;
}

}  // namespace crate
