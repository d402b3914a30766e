#pragma once

#include "crate/model.hpp"
#include "crate/numerics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace crate {

struct TrainConfig {
  double base_lr = 0.0;  // 0: derived from batch size, 8e-4 at batch 4096
  double min_lr = 0.0;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  int warmup_epochs = 1;
  int total_epochs = 5;
  int batch_size = 128;
  double label_smoothing = 0.1;
  double clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 42;
  int max_steps = 0;    // 0: run all epochs
  int num_shards = 1;   // fixed gradient-accumulation blocks per batch
  int threads = 1;      // worker threads over shards

  double effective_base_lr() const {
    return base_lr > 0 ? base_lr : 8e-4 * static_cast<double>(batch_size) / 4096.0;
  }

  void validate() const {
    if (warmup_epochs < 0 || total_epochs < 1 || warmup_epochs > total_epochs)
      throw ConfigError("train.warmup_epochs must lie in [0, train.total_epochs]");
    if (base_lr < 0 || min_lr < 0 || weight_decay < 0)
      throw ConfigError("train rates must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("train.betas must lie in [0, 1)");
    if (eps_opt <= 0) throw ConfigError("train.eps_opt must be > 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (label_smoothing < 0 || label_smoothing >= 1)
      throw ConfigError("train.label_smoothing must lie in [0, 1)");
    if (clip_norm < 0) throw ConfigError("train.clip_norm must be >= 0");
    if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
    if (num_shards < 1) throw ConfigError("train.num_shards must be >= 1");
    if (threads < 1) throw ConfigError("train.threads must be >= 1");
  }
};

struct LrSchedule {
  double base = 0;
  double min = 0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
};

/// Linear ramp 0 -> base over the warmup, then cosine decay base -> min.
inline double lr_at(std::int64_t step, const LrSchedule& s) {
  if (step <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.base;
    return s.base * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const auto span = static_cast<double>(s.total_steps - s.warmup_steps);
  double t = span > 0 ? static_cast<double>(step - s.warmup_steps) / span : 1.0;
  if (t > 1.0) t = 1.0;
  return s.min + (s.base - s.min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Mean label-smoothed cross-entropy over the columns of a logit matrix.
template <class S>
S smoothed_ce(const Mat<S>& logits, const std::vector<int>& labels, S smoothing) {
  require_shape(static_cast<Eigen::Index>(labels.size()) == logits.cols(),
                "smoothed_ce: one label per column required");
  if (smoothing < S(0) || smoothing >= S(1))
    throw ConfigError("smoothed_ce: smoothing must lie in [0, 1)");
  const auto nclass = logits.rows();
  const S off = smoothing / static_cast<S>(nclass);
  const S on = (S(1) - smoothing) + off;
  S total = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= nclass) throw DataError("smoothed_ce: label out of range");
    const S mx = logits.col(j).maxCoeff();
    const S lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    S tgt = on * logits(y, j);
    for (Eigen::Index c = 0; c < nclass; ++c)
      if (c != y) tgt += off * logits(c, j);
    total += lse - tgt;
  }
  return total / static_cast<S>(logits.cols());
}

template <class S>
double accuracy(const Mat<S>& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  int hits = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    logits.col(j).maxCoeff(&best);
    if (static_cast<int>(best) == labels[static_cast<std::size_t>(j)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Weight decay applies to weight matrices only; biases, normalization
/// affines, the class token, and scalar gains are exempt.
inline bool decay_param(const std::string& name) {
  return name.find("bias") == std::string::npos &&
         name.find("norm") == std::string::npos && name != "cls_token" &&
         !name.ends_with(".gain");
}

template <class S>
struct OptState {
  std::vector<Mat<S>> m, v;  // aligned with the model's tensor order
  std::int64_t step = 0;
};

template <class S>
OptState<S> init_opt_state(const ModelState<S>& model) {
  OptState<S> st;
  model.for_each_tensor([&](const std::string&, const Mat<S>& t) {
    st.m.push_back(Mat<S>::Zero(t.rows(), t.cols()));
    st.v.push_back(Mat<S>::Zero(t.rows(), t.cols()));
  });
  return st;
}

/// One decoupled-weight-decay adaptive update with bias correction and
/// optional global-norm clipping. Gradients must align with the model's
/// tensor order.
template <class S>
void opt_step(ModelState<S>& model, OptState<S>& opt, const std::vector<Mat<S>>& grads,
              double lr, const TrainConfig& cfg) {
  std::vector<std::pair<std::string, Mat<S>*>> params;
  model.for_each_tensor([&](const std::string& name, Mat<S>& t) {
    params.emplace_back(name, &t);
  });
  require_shape(params.size() == grads.size(), "opt_step: gradient count mismatch");

  double sq = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!all_finite(grads[i]))
      throw NumericalError("non-finite gradient in " + params[i].first);
    sq += static_cast<double>(grads[i].squaredNorm());
  }
  S gscale = S(1);
  if (cfg.clip_norm > 0) {
    const double gnorm = std::sqrt(sq);
    if (gnorm > cfg.clip_norm) gscale = static_cast<S>(cfg.clip_norm / gnorm);
  }

  opt.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.eps_opt);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat<S>& p = *params[i].second;
    if (cfg.weight_decay > 0 && decay_param(params[i].first))
      p *= S(1) - static_cast<S>(lr * cfg.weight_decay);
    const auto g = (grads[i].array() * gscale).eval();
    opt.m[i] = b1 * opt.m[i] + (S(1) - b1) * g.matrix();
    opt.v[i].array() = b2 * opt.v[i].array() + (S(1) - b2) * g.square();
    const auto mhat = (opt.m[i].array() / static_cast<S>(bc1)).eval();
    const auto vhat = (opt.v[i].array() / static_cast<S>(bc2)).eval();
    p.array() -= static_cast<S>(lr) * mhat / (vhat.sqrt() + eps);
  }
}

}  // namespace crate
