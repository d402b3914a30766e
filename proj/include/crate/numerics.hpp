#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace crate {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotPositiveDefiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

/// Counter-based generator: the n-th draw is a pure function of (seed, n), so
/// streams can be split by deriving fresh seeds from tags and any position can
/// be restored from two integers.
class RngState {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter";

  RngState() = default;
  explicit RngState(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// New independent stream; the parent stream is not advanced.
  RngState derive(std::initializer_list<std::uint64_t> tags) const {
    std::uint64_t s = seed_;
    for (std::uint64_t t : tags) s = mix64(s ^ mix64(t + 0x9E3779B97F4A7C15ULL));
    return RngState(s);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; u1 kept strictly positive so log() is finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double trunc_normal(double stddev, double lo = -2.0, double hi = 2.0) {
    for (;;) {
      const double v = normal() * stddev;
      if (v >= lo && v <= hi) return v;
    }
  }

  /// Uniform integer in [0, n) via multiply-shift.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<int>(below(static_cast<std::uint64_t>(i) + 1));
      std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.array().isFinite().all();
}

template <class S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  require_shape(a.cols() == b.rows(),
                "matmul: inner dimensions disagree (" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + ")");
  return a * b;
}

/// log det of a symmetric positive definite matrix, as twice the log-diagonal
/// of its Cholesky factor.
template <class S>
S logdet_posdef(const Mat<S>& m) {
  require_shape(m.rows() == m.cols(), "logdet_posdef: matrix must be square");
  const S scale = m.cwiseAbs().maxCoeff();
  const S asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > S(1e-6) * std::max(scale, S(1)))
    throw ShapeError("logdet_posdef: matrix is not symmetric within tolerance");
  Eigen::LLT<Mat<S>> llt(m);
  if (llt.info() != Eigen::Success)
    throw NotPositiveDefiniteError("logdet_posdef: matrix is not positive definite");
  S acc = 0;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < m.rows(); ++i) acc += std::log(l(i, i));
  return S(2) * acc;
}

/// Column-stochastic softmax with per-column max subtraction.
template <class S>
Mat<S> softmax_cols(const Mat<S>& m) {
  Mat<S> out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const S mx = m.col(j).maxCoeff();
    out.col(j) = (m.col(j).array() - mx).exp();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

template <class S>
Mat<S> relu(const Mat<S>& m) {
  return m.cwiseMax(S(0));
}

template <class S>
Mat<S> gaussian(RngState& rng, Eigen::Index rows, Eigen::Index cols,
                double stddev = 1.0) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = static_cast<S>(rng.normal() * stddev);
  return m;
}

template <class S>
Mat<S> trunc_gaussian(RngState& rng, Eigen::Index rows, Eigen::Index cols,
                      double stddev) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      m(i, j) = static_cast<S>(rng.trunc_normal(stddev));
  return m;
}

template <class S>
Mat<S> random_orthogonal(RngState& rng, Eigen::Index n) {
  Mat<S> g = gaussian<S>(rng, n, n);
  Eigen::HouseholderQR<Mat<S>> qr(g);
  return qr.householderQ() * Mat<S>::Identity(n, n);
}

}  // namespace crate
