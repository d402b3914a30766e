#pragma once

#include "crate/numerics.hpp"

#include <utility>
#include <vector>

namespace crate {

template <class S>
struct RateParams {
  S epsilon = S(0.5);
  S lambda = S(0.1);

  void validate() const {
    if (!(epsilon > S(0))) throw ConfigError("RateParams: epsilon must be > 0");
    if (lambda < S(0)) throw ConfigError("RateParams: lambda must be >= 0");
  }
};

template <class S>
struct SrrReport {
  S rate = S(0);          // R
  S rate_proj = S(0);     // R^c, sum over heads
  S l1 = S(0);
  S srr = S(0);           // R^c - R + lambda * l1
  std::vector<S> per_head_rates;
};

/// Coding rate 0.5 * log det(I + d/(N eps^2) Z'Z); the Gram side (N x N vs
/// d x d) is chosen by size, the determinants agree.
template <class S>
S rate_R(const Mat<S>& z, S epsilon) {
  if (!(epsilon > S(0))) throw ConfigError("rate_R: epsilon must be > 0");
  require_shape(z.cols() >= 1, "rate_R: need at least one token");
  const S alpha = static_cast<S>(z.rows()) /
                  (static_cast<S>(z.cols()) * epsilon * epsilon);
  Mat<S> gram;
  if (z.cols() < z.rows())
    gram = Mat<S>::Identity(z.cols(), z.cols()) + alpha * (z.transpose() * z);
  else
    gram = Mat<S>::Identity(z.rows(), z.rows()) + alpha * (z * z.transpose());
  return S(0.5) * logdet_posdef(gram);
}

/// Closed-form gradient alpha * Z * (I + alpha Z'Z)^{-1}.
template <class S>
Mat<S> grad_rate_R(const Mat<S>& z, S epsilon) {
  if (!(epsilon > S(0))) throw ConfigError("grad_rate_R: epsilon must be > 0");
  require_shape(z.cols() >= 1, "grad_rate_R: need at least one token");
  const S alpha = static_cast<S>(z.rows()) /
                  (static_cast<S>(z.cols()) * epsilon * epsilon);
  Mat<S> gram = Mat<S>::Identity(z.cols(), z.cols()) + alpha * (z.transpose() * z);
  return alpha * gram.llt().solve(z.transpose()).transpose();
}

/// Sum of head rates R(U_k' Z); each head's leading factor uses the projected
/// row count, since the rate is a function of the matrix it receives.
template <class S>
std::pair<S, std::vector<S>> rate_Rc(const Mat<S>& z, const std::vector<Mat<S>>& heads,
                                     S epsilon) {
  std::vector<S> per_head;
  per_head.reserve(heads.size());
  S total = S(0);
  for (const auto& u : heads) {
    require_shape(u.rows() == z.rows(), "rate_Rc: head row count must match tokens");
    const S r = rate_R<S>(u.transpose() * z, epsilon);
    per_head.push_back(r);
    total += r;
  }
  return {total, std::move(per_head)};
}

template <class S>
Mat<S> grad_rate_Rc(const Mat<S>& z, const std::vector<Mat<S>>& heads, S epsilon) {
  Mat<S> g = Mat<S>::Zero(z.rows(), z.cols());
  for (const auto& u : heads) {
    require_shape(u.rows() == z.rows(), "grad_rate_Rc: head row count must match tokens");
    g.noalias() += u * grad_rate_R<S>(u.transpose() * z, epsilon);
  }
  return g;
}

template <class S>
SrrReport<S> srr_objective(const Mat<S>& z, const std::vector<Mat<S>>& heads,
                           const RateParams<S>& params) {
  params.validate();
  SrrReport<S> rep;
  rep.rate = rate_R(z, params.epsilon);
  auto [rc, per_head] = rate_Rc(z, heads, params.epsilon);
  rep.rate_proj = rc;
  rep.per_head_rates = std::move(per_head);
  rep.l1 = z.cwiseAbs().sum();
  rep.srr = rep.rate_proj - rep.rate + params.lambda * rep.l1;
  return rep;
}

/// Fraction of entries with magnitude above tol; the sparsity diagnostic
/// reported alongside the l1 term.
template <class S>
double l0_fraction(const Mat<S>& z, S tol = S(1e-6)) {
  if (z.size() == 0) return 0.0;
  const auto n = (z.cwiseAbs().array() > tol).count();
  return static_cast<double>(n) / static_cast<double>(z.size());
}

}  // namespace crate
