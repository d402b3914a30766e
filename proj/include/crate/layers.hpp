#pragma once

#include "crate/numerics.hpp"
#include "crate/srr.hpp"

#include <optional>
#include <type_traits>
#include <string>
#include <vector>

namespace crate {

enum class ScaleMode { paper, sqrt_p };

enum class BlockVariant {
  vanilla,      // single complete dictionary, one thresholded step
  overcomplete, // widened dictionary, two proximal steps, decode with the same dictionary
  decoupled,    // separate decoder dictionary
  residual,     // decoupled plus a skip connection around the sparse block
};

inline const char* to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::vanilla: return "vanilla";
    case BlockVariant::overcomplete: return "oc";
    case BlockVariant::decoupled: return "ocd";
    case BlockVariant::residual: return "ocdr";
  }
  return "?";
}

inline BlockVariant parse_variant(const std::string& s) {
  if (s == "vanilla") return BlockVariant::vanilla;
  if (s == "oc") return BlockVariant::overcomplete;
  if (s == "ocd") return BlockVariant::decoupled;
  if (s == "ocdr") return BlockVariant::residual;
  throw ConfigError("unknown block variant: " + s);
}

template <class S>
struct SubspaceBases {
  std::vector<Mat<S>> heads;  // each d x p
  S kappa = S(1);
  S epsilon = S(0.5);
  std::optional<Mat<S>> out_proj;  // d x d
  ScaleMode scale_mode = ScaleMode::sqrt_p;

  void validate(Eigen::Index token_dim) const {
    require_shape(!heads.empty(), "SubspaceBases: need at least one head");
    const auto p = heads.front().cols();
    for (const auto& u : heads)
      require_shape(u.rows() == token_dim && u.cols() == p,
                    "SubspaceBases: inconsistent head shapes");
    if (!(kappa > S(0)) || !(epsilon > S(0)))
      throw ConfigError("SubspaceBases: kappa and epsilon must be > 0");
    if (out_proj)
      require_shape(out_proj->rows() == token_dim && out_proj->cols() == token_dim,
                    "SubspaceBases: out_proj must be d x d");
  }
};

template <class S>
struct DictionaryPair {
  Mat<S> dict;                   // d x (C*d) encoder
  std::optional<Mat<S>> decoder; // d x (C*d), present for decoupled variants
  int overcompleteness = 1;
  S eta = S(0.1);
  S lambda = S(0.1);
  int steps = 2;
};

template <class S>
struct LayerTrace {
  Mat<S> z_half;                  // iterate after the attention block
  Mat<S> codes;                   // sparse codes (empty for the vanilla block)
  Mat<S> output;
  std::vector<Mat<S>> attention;  // per-head column-stochastic maps, N x N
};

/// Multi-head subspace attention: every head projects with a single basis used
/// as query, key, and value, and the heads are folded back through the stacked
/// bases. The leading step-size factor kappa*p/(N eps^2) can be overridden
/// (the trained model replaces it with a learned per-layer gain).
template <class S>
Mat<S> mssa(const Mat<S>& z, const SubspaceBases<S>& bases,
            std::optional<std::type_identity_t<S>> scale_override = {},
            std::vector<Mat<S>>* attention_out = nullptr) {
  bases.validate(z.rows());
  const auto n = z.cols();
  const auto p = bases.heads.front().cols();
  Mat<S> out = Mat<S>::Zero(z.rows(), n);
  if (attention_out) attention_out->clear();
  for (const auto& u : bases.heads) {
    const Mat<S> v = u.transpose() * z;
    Mat<S> scores = v.transpose() * v;
    if (bases.scale_mode == ScaleMode::sqrt_p)
      scores /= std::sqrt(static_cast<S>(p));
    Mat<S> attn = softmax_cols(scores);
    out.noalias() += u * (v * attn);
    if (attention_out) attention_out->push_back(std::move(attn));
  }
  const S s = scale_override
                  ? *scale_override
                  : bases.kappa * static_cast<S>(p) /
                        (static_cast<S>(n) * bases.epsilon * bases.epsilon);
  out *= s;
  if (bases.out_proj) out = *bases.out_proj * out;
  return out;
}

/// One thresholded gradient step on the complete-dictionary sparse coding
/// problem: ReLU(Z + eta D'(Z - D Z) - eta*lambda).
template <class S>
Mat<S> vanilla_ista(const Mat<S>& z_half, const Mat<S>& dict, S eta, S lambda) {
  require_shape(dict.rows() == dict.cols(), "vanilla_ista: dictionary must be square");
  require_shape(dict.cols() == z_half.rows(), "vanilla_ista: dictionary/token mismatch");
  Mat<S> step = z_half + eta * (dict.transpose() * (z_half - dict * z_half));
  step.array() -= eta * lambda;
  return relu(step);
}

/// Proximal step of the non-negative LASSO: ReLU(A - eta D'(D A - Z) - eta*lambda).
template <class S>
Mat<S> prox_step(const Mat<S>& codes, const Mat<S>& dict, const Mat<S>& z,
                 S eta, S lambda) {
  require_shape(dict.cols() == codes.rows(), "prox_step: dictionary/code mismatch");
  require_shape(dict.rows() == z.rows() && codes.cols() == z.cols(),
                "prox_step: target shape mismatch");
  Mat<S> step = codes - eta * (dict.transpose() * (dict * codes - z));
  step.array() -= eta * lambda;
  return relu(step);
}

/// Truncated sparse coding: `steps` proximal steps from a zero start. Output
/// is entrywise non-negative.
template <class S>
Mat<S> ista_oc(const Mat<S>& z_half, const DictionaryPair<S>& dict) {
  if (dict.steps < 1) throw ConfigError("ista_oc: need at least one step");
  Mat<S> codes = Mat<S>::Zero(dict.dict.cols(), z_half.cols());
  for (int s = 0; s < dict.steps; ++s)
    codes = prox_step(codes, dict.dict, z_half, dict.eta, dict.lambda);
  return codes;
}

/// Decode sparse codes back to token space according to the block variant.
template <class S>
Mat<S> odl_decode(const Mat<S>& codes, const Mat<S>& z_half,
                  const DictionaryPair<S>& dict, BlockVariant variant) {
  switch (variant) {
    case BlockVariant::vanilla:
      throw ConfigError("odl: vanilla variant has no code decoding");
    case BlockVariant::overcomplete:
      return dict.dict * codes;
    case BlockVariant::decoupled:
    case BlockVariant::residual: {
      if (!dict.decoder)
        throw ConfigError("odl: decoupled variant requires a decoder dictionary");
      Mat<S> out = *dict.decoder * codes;
      if (variant == BlockVariant::residual) out += z_half;
      return out;
    }
  }
  throw ConfigError("odl: unknown variant");
}

template <class S>
Mat<S> odl(const Mat<S>& z_half, const DictionaryPair<S>& dict, BlockVariant variant) {
  return odl_decode(ista_oc(z_half, dict), z_half, dict, variant);
}

/// One full layer in its literal form: attention with a residual connection,
/// then the selected sparse coding block.
template <class S>
Mat<S> crate_alpha_layer(const Mat<S>& z, const SubspaceBases<S>& bases,
                         const DictionaryPair<S>& dict, BlockVariant variant,
                         LayerTrace<S>* trace = nullptr) {
  Mat<S> z_half = z + mssa(z, bases, {}, trace ? &trace->attention : nullptr);
  Mat<S> out;
  if (variant == BlockVariant::vanilla) {
    out = vanilla_ista(z_half, dict.dict, dict.eta, dict.lambda);
  } else {
    Mat<S> codes = ista_oc(z_half, dict);
    out = odl_decode(codes, z_half, dict, variant);
    if (trace) trace->codes = std::move(codes);
  }
  if (trace) {
    trace->z_half = std::move(z_half);
    trace->output = out;
  }
  return out;
}

/// Per-token standardization with a learned affine; gain and bias are d x 1.
template <class S>
Mat<S> token_norm(const Mat<S>& z, const Mat<S>& gain, const Mat<S>& bias, S eps) {
  require_shape(gain.rows() == z.rows() && gain.cols() == 1 &&
                    bias.rows() == z.rows() && bias.cols() == 1,
                "token_norm: affine shape mismatch");
  const auto d = static_cast<S>(z.rows());
  Mat<S> out(z.rows(), z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const S mean = z.col(j).mean();
    const S var = (z.col(j).array() - mean).square().sum() / d;
    const S inv = S(1) / std::sqrt(var + eps);
    out.col(j) = (((z.col(j).array() - mean) * inv) * gain.col(0).array() +
                  bias.col(0).array())
                     .matrix();
  }
  return out;
}

inline constexpr double kNormEps = 1e-6;

/// Cosine similarity between the attention update and the negated projected
/// rate gradient it approximates; diagnostic only.
template <class S>
S mssa_grad_alignment(const Mat<S>& z, const SubspaceBases<S>& bases) {
  const Mat<S> a = mssa(z, bases);
  const Mat<S> g = -grad_rate_Rc(z, bases.heads, bases.epsilon);
  const S na = a.norm(), ng = g.norm();
  if (na == S(0) || ng == S(0)) return S(0);
  return a.cwiseProduct(g).sum() / (na * ng);
}

}  // namespace crate
