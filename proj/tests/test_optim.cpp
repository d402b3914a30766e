#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crate/model.hpp"
#include "crate/numerics.hpp"
#include "crate/optim.hpp"
#include "crate/tape.hpp"

#include <cmath>

using namespace crate;
using Md = Mat<double>;

namespace {

// one-parameter model stand-in for scalar optimizer checks
struct ScalarFixture {
  ModelConfig cfg;
  ModelState<double> st;

  explicit ScalarFixture(double value) {
    cfg.depth = 1;
    cfg.width = 2;
    cfg.heads = 1;
    cfg.num_classes = 2;
    cfg.input = InputKind::tokens;
    cfg.token_dim = 2;
    cfg.tokens_per_sample = 2;
    st = init<double>(cfg, RngState(1));
    st.for_each_tensor([&](const std::string&, Md& m) { m.setZero(); });
    st.patch_weight(0, 0) = value;
  }

  std::vector<Md> grads_with(double g) const {
    std::vector<Md> grads;
    st.for_each_tensor([&](const std::string&, const Md& m) {
      grads.push_back(Md::Zero(m.rows(), m.cols()));
    });
    grads[0](0, 0) = g;
    return grads;
  }
};

}  // namespace

TEST_CASE("lr schedule endpoints and symmetry") {
  LrSchedule s{1e-3, 0.0, 100, 1100};
  CHECK(lr_at(0, s) == doctest::Approx(0.0));
  CHECK(lr_at(100, s) == doctest::Approx(1e-3));
  CHECK(lr_at(1100, s) == doctest::Approx(0.0));
  CHECK(lr_at(600, s) == doctest::Approx(0.5e-3).epsilon(1e-12));  // decay midpoint

  // continuity across the warmup boundary
  const double before = lr_at(100, s);
  const double after =
      0.0 + (s.base - 0.0) * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.0));
  CHECK(std::abs(before - after) < 1e-12);

  LrSchedule with_min{1e-3, 1e-5, 0, 10};
  CHECK(lr_at(0, with_min) == doctest::Approx(1e-3));  // no warmup
  CHECK(lr_at(10, with_min) == doctest::Approx(1e-5));
}

TEST_CASE("smoothed_ce targets and hand values") {
  // s=0.1, C=10: on-mass 0.91, off-mass 0.01 each
  const double s = 0.1;
  const int c = 10;
  const double on = (1.0 - s) + s / c;
  CHECK(on == doctest::Approx(0.91));
  CHECK(s / c == doctest::Approx(0.01));

  // uniform logits cost ln C regardless of smoothing
  Md uniform = Md::Zero(c, 3);
  CHECK(smoothed_ce(uniform, {0, 5, 9}, s) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(smoothed_ce(uniform, {0, 5, 9}, 0.0) ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));

  // hard targets: confident correct logits drive the loss to zero
  Md confident = Md::Zero(3, 1);
  confident(1, 0) = 60.0;
  CHECK(smoothed_ce(confident, {1}, 0.0) == doctest::Approx(0.0).epsilon(1e-10));

  CHECK_THROWS_AS(smoothed_ce(uniform, {0, 5, 11}, s), DataError);
  CHECK_THROWS_AS(smoothed_ce(uniform, {0, 5, 9}, 1.0), ConfigError);
}

TEST_CASE("accuracy argmax") {
  Md logits(3, 2);
  logits << 1, 0, 5, 2, 0, 1;
  CHECK(accuracy(logits, {1, 1}) == doctest::Approx(1.0));
  CHECK(accuracy(logits, {0, 2}) == doctest::Approx(0.0));
}

TEST_CASE("adam first step on a unit gradient") {
  ScalarFixture fx(1.0);
  auto opt = init_opt_state(fx.st);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 0.0;
  opt_step(fx.st, opt, fx.grads_with(1.0), 0.1, cfg);
  // bias-corrected mhat = 1, vhat = 1: step is lr / (1 + eps)
  CHECK(fx.st.patch_weight(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(opt.step == 1);
}

TEST_CASE("zero gradients leave parameters unchanged without decay") {
  ScalarFixture fx(0.7);
  auto opt = init_opt_state(fx.st);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  opt_step(fx.st, opt, fx.grads_with(0.0), 0.1, cfg);
  CHECK(fx.st.patch_weight(0, 0) == doctest::Approx(0.7));
}

TEST_CASE("decoupled weight decay scales decayable weights only") {
  ScalarFixture fx(1.0);
  auto opt = init_opt_state(fx.st);
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  opt_step(fx.st, opt, fx.grads_with(0.0), 0.1, cfg);
  CHECK(fx.st.patch_weight(0, 0) == doctest::Approx(0.99).epsilon(1e-12));

  CHECK(decay_param("patch_embed.weight"));
  CHECK(decay_param("pos_embed"));
  CHECK(decay_param("layers.03.attn.basis"));
  CHECK(decay_param("layers.03.dict.decoder"));
  CHECK(decay_param("head.weight"));
  CHECK(!decay_param("patch_embed.bias"));
  CHECK(!decay_param("cls_token"));
  CHECK(!decay_param("layers.03.norm1.gain"));
  CHECK(!decay_param("layers.03.attn.gain"));
  CHECK(!decay_param("head.bias"));
}

TEST_CASE("gradient clipping bounds the global norm") {
  ScalarFixture fx(1.0);
  auto opt = init_opt_state(fx.st);
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.clip_norm = 1.0;
  // raw gradient norm 10 clips to 1; adam normalizes it away so the step
  // equals the unclipped unit-gradient step
  opt_step(fx.st, opt, fx.grads_with(10.0), 0.1, cfg);
  CHECK(fx.st.patch_weight(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("non-finite gradients are reported with the tensor name") {
  ScalarFixture fx(1.0);
  auto opt = init_opt_state(fx.st);
  TrainConfig cfg;
  auto grads = fx.grads_with(std::nan(""));
  try {
    opt_step(fx.st, opt, grads, 0.1, cfg);
    CHECK(false);
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("patch_embed.weight") != std::string::npos);
  }
}

TEST_CASE("effective base lr scales linearly with batch size") {
  TrainConfig cfg;
  cfg.batch_size = 4096;
  CHECK(cfg.effective_base_lr() == doctest::Approx(8e-4));
  cfg.batch_size = 128;
  CHECK(cfg.effective_base_lr() == doctest::Approx(8e-4 / 32.0));
  cfg.base_lr = 1e-3;
  CHECK(cfg.effective_base_lr() == doctest::Approx(1e-3));
}

TEST_CASE("training drives the loss down on a separable two-class problem") {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.width = 16;
  cfg.heads = 4;
  cfg.overcompleteness = 2;
  cfg.num_classes = 2;
  cfg.input = InputKind::tokens;
  cfg.token_dim = 8;
  cfg.tokens_per_sample = 4;

  auto st = init<double>(cfg, RngState(5));
  auto opt = init_opt_state(st);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  tc.label_smoothing = 0.0;

  // two classes living on fixed orthogonal coordinate pairs
  RngState rng(9);
  auto sample = [&](int cls) {
    Md x = Md::Zero(cfg.token_dim, cfg.tokens_per_sample);
    for (int j = 0; j < cfg.tokens_per_sample; ++j) {
      const int base = cls == 0 ? 0 : 4;
      x(base + static_cast<int>(rng.below(4)), j) = 1.0 + rng.uniform();
    }
    return x;
  };
  std::vector<Md> xs;
  std::vector<int> ys;
  for (int i = 0; i < 32; ++i) {
    xs.push_back(sample(i % 2));
    ys.push_back(i % 2);
  }

  auto batch_loss = [&](bool update, double lr) {
    Tape<double> tape;
    const auto tm = make_leaves(tape, st);
    Var<double> total;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Var<double> li = sample_loss_tape(tape, tm, cfg, xs[i], ys[i], 0.0);
      total = total.valid() ? total + li : li;
    }
    Var<double> loss = scale(total, 1.0 / static_cast<double>(xs.size()));
    if (update) {
      tape.backward(loss);
      std::vector<Md> grads;
      for (const auto& leaf : tm.ordered) grads.push_back(tape.grad(leaf));
      opt_step(st, opt, grads, lr, tc);
    }
    return loss.value()(0, 0);
  };

  const double initial = batch_loss(false, 0.0);
  for (int step = 0; step < 200; ++step) batch_loss(true, 3e-3);
  const double trained = batch_loss(false, 0.0);
  INFO("loss " << initial << " -> " << trained);
  CHECK(trained < 0.5 * initial);
}
