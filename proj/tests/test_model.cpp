#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crate/model.hpp"
#include "crate/numerics.hpp"
#include "crate/oracle.hpp"
#include "crate/optim.hpp"

#include <cmath>

using namespace crate;
using Md = Mat<double>;

namespace {

ModelConfig token_config(BlockVariant variant = BlockVariant::residual) {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.width = 16;
  cfg.heads = 4;
  cfg.overcompleteness = 2;
  cfg.num_classes = 3;
  cfg.input = InputKind::tokens;
  cfg.token_dim = 6;
  cfg.tokens_per_sample = 4;  // sequence length 5 with the cls token
  cfg.variant = variant;
  return cfg;
}

template <class S>
std::vector<Mat<S>> token_batch(const ModelConfig& cfg, RngState& rng, int n) {
  std::vector<Mat<S>> batch;
  for (int i = 0; i < n; ++i)
    batch.push_back(gaussian<S>(rng, cfg.token_dim, cfg.tokens_per_sample));
  return batch;
}

}  // namespace

TEST_CASE("paramcount matches the published ladder within 3 percent") {
  const struct {
    SizeName size;
    double want_m;
  } cases[] = {{SizeName::tiny, 4.8e6},
               {SizeName::small, 41.0e6},
               {SizeName::base, 72.3e6},
               {SizeName::large, 253.8e6},
               {SizeName::huge, 526.8e6}};
  for (const auto& c : cases) {
    const auto b = paramcount(preset(c.size));
    const double rel =
        std::abs(static_cast<double>(b.total()) - c.want_m) / c.want_m;
    INFO(to_string(c.size) << " total " << b.total());
    CHECK(rel < 0.03);
  }
  const auto vb = paramcount(preset(SizeName::base, BlockVariant::vanilla));
  CHECK(std::abs(static_cast<double>(vb.total()) - 22.8e6) / 22.8e6 < 0.03);
}

TEST_CASE("paramcount breakdown sums exactly and grows along the ladders") {
  const auto b = paramcount(preset(SizeName::base));
  CHECK(b.total() == b.patch_embed + b.pos_embed + b.cls_token + b.attention +
                         b.sparse + b.norms + b.head);

  std::int64_t prev = 0;
  for (SizeName s : {SizeName::tiny, SizeName::small, SizeName::base,
                     SizeName::large, SizeName::huge}) {
    const auto cur = paramcount(preset(s)).total();
    CHECK(cur > prev);
    prev = cur;
  }

  const auto vanilla = paramcount(preset(SizeName::base, BlockVariant::vanilla));
  const auto oc = paramcount(preset(SizeName::base, BlockVariant::overcomplete));
  const auto ocd = paramcount(preset(SizeName::base, BlockVariant::decoupled));
  const auto ocdr = paramcount(preset(SizeName::base, BlockVariant::residual));
  CHECK(vanilla.total() < oc.total());
  CHECK(oc.total() < ocd.total());
  CHECK(ocd.total() == ocdr.total());  // the residual adds no parameters
}

TEST_CASE("init reproducibility and self-consistent count") {
  const ModelConfig cfg = token_config();
  const auto a = init<double>(cfg, RngState(7));
  const auto b = init<double>(cfg, RngState(7));
  bool equal = true;
  a.for_each_tensor([&](const std::string& name, const Md& m) {
    b.for_each_tensor([&](const std::string& name2, const Md& m2) {
      if (name == name2 && (m.rows() != m2.rows() || m != m2)) equal = false;
    });
  });
  CHECK(equal);
  CHECK(a.num_scalars() == paramcount(cfg).total());

  const auto c = init<double>(cfg, RngState(8));
  CHECK(c.patch_weight != a.patch_weight);
}

TEST_CASE("init statistics: embedding std near 0.02 at width 192") {
  ModelConfig cfg = preset(SizeName::tiny);
  cfg.num_classes = 10;
  cfg.image_side = 32;
  cfg.patch = 8;
  const auto st = init<float>(cfg, RngState(3));
  const double n = static_cast<double>(st.patch_weight.size());
  const double mean = st.patch_weight.template cast<double>().mean();
  const double var =
      (st.patch_weight.template cast<double>().array() - mean).square().sum() / n;
  CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.10));

  // dictionary scale 1/sqrt(atoms)
  const double want = 1.0 / std::sqrt(static_cast<double>(cfg.dict_atoms()));
  const double dvar =
      st.layers[0].dict.template cast<double>().array().square().sum() /
      static_cast<double>(st.layers[0].dict.size());
  CHECK(std::sqrt(dvar) == doctest::Approx(want).epsilon(0.10));
}

TEST_CASE("patchify shape arithmetic") {
  ModelConfig cfg;
  cfg.image_side = 32;
  cfg.patch = 4;
  cfg.num_classes = 10;
  CHECK(cfg.num_patch_tokens() == 64);
  CHECK(cfg.seq_len() == 65);

  ModelConfig big;
  big.image_side = 224;
  big.patch = 32;
  CHECK(big.num_patch_tokens() == 49);
  CHECK(big.seq_len() == 50);

  ModelConfig bad;
  bad.image_side = 33;
  bad.patch = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("extract_patches lays out channel-major patches") {
  ModelConfig cfg;
  cfg.image_side = 4;
  cfg.patch = 2;
  cfg.channels = 2;
  cfg.num_classes = 2;
  cfg.width = 4;
  cfg.heads = 1;
  cfg.depth = 1;
  Vec<double> img(2 * 4 * 4);
  for (int i = 0; i < img.size(); ++i) img(i) = i;
  const Md p = extract_patches(cfg, img);
  CHECK(p.rows() == 8);
  CHECK(p.cols() == 4);
  // first patch, first channel: pixels (0,0),(0,1),(1,0),(1,1) of plane 0
  CHECK(p(0, 0) == 0.0);
  CHECK(p(1, 0) == 1.0);
  CHECK(p(2, 0) == 4.0);
  CHECK(p(3, 0) == 5.0);
  // second channel of the same patch starts at plane offset 16
  CHECK(p(4, 0) == 16.0);
  // second patch in the grid row
  CHECK(p(0, 1) == 2.0);
}

TEST_CASE("zero embeddings map a zero image to the positional table") {
  ModelConfig cfg = token_config();
  auto st = init<double>(cfg, RngState(1));
  st.patch_weight.setZero();
  st.patch_bias.setZero();
  st.cls_token.setZero();
  const Md zero_tokens = Md::Zero(cfg.token_dim, cfg.tokens_per_sample);
  const Md z = patchify(st, zero_tokens);
  CHECK((z - st.pos_embed).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward determinism and batch invariance") {
  const ModelConfig cfg = token_config();
  const auto st = init<double>(cfg, RngState(11));
  RngState rng(5);
  auto batch = token_batch<double>(cfg, rng, 3);

  const auto out1 = forward(st, batch);
  CHECK(out1.logits.rows() == cfg.num_classes);
  CHECK(out1.logits.cols() == 3);

  // identical samples give identical columns
  std::vector<Md> dup{batch[0], batch[0]};
  const auto out2 = forward(st, dup);
  CHECK((out2.logits.col(0) - out2.logits.col(1)).cwiseAbs().maxCoeff() == 0.0);

  // per-image logits do not depend on what else is in the batch
  const auto solo = forward(st, {batch[1]});
  CHECK((solo.logits.col(0) - out1.logits.col(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("all-zero residual model with zero head gives zero logits") {
  ModelConfig cfg = token_config(BlockVariant::residual);
  cfg.use_pre_norm = false;  // literal path
  auto st = init<double>(cfg, RngState(2));
  st.for_each_tensor([](const std::string&, Md& m) { m.setZero(); });
  RngState rng(6);
  const auto out = forward(st, token_batch<double>(cfg, rng, 2));
  CHECK(out.logits.isZero(0.0));
}

TEST_CASE("plain forward and tape forward agree for every variant") {
  RngState rng(21);
  for (BlockVariant v : {BlockVariant::vanilla, BlockVariant::overcomplete,
                         BlockVariant::decoupled, BlockVariant::residual}) {
    for (bool prenorm : {false, true}) {
      ModelConfig cfg = token_config(v);
      cfg.use_pre_norm = prenorm;
      auto st = init<double>(cfg, RngState(31 + static_cast<int>(v)));
      // nonzero head so logits are informative
      st.head_weight = gaussian<double>(rng, cfg.width, cfg.num_classes, 0.1);
      const Md sample = gaussian<double>(rng, cfg.token_dim, cfg.tokens_per_sample);

      const auto plain = forward(st, {sample});
      Tape<double> tape;
      const auto tm = make_leaves(tape, st);
      const Var<double> logits = forward_sample_tape(tape, tm, cfg, sample);
      INFO("variant " << to_string(v) << " prenorm " << prenorm);
      CHECK((plain.logits.col(0) - logits.value().col(0)).cwiseAbs().maxCoeff() <
            1e-12);
    }
  }
}

TEST_CASE("tape parameter gradients match finite differences end to end") {
  ModelConfig cfg = token_config(BlockVariant::residual);
  auto st = init<double>(cfg, RngState(77));
  RngState rng(78);
  st.head_weight = gaussian<double>(rng, cfg.width, cfg.num_classes, 0.2);
  const Md sample = gaussian<double>(rng, cfg.token_dim, cfg.tokens_per_sample);
  const int label = 1;
  const double smoothing = 0.1;

  Tape<double> tape;
  const auto tm = make_leaves(tape, st);
  Var<double> loss = sample_loss_tape(tape, tm, cfg, sample, label, smoothing);
  tape.backward(loss);

  std::vector<std::string> names;
  st.for_each_tensor([&](const std::string& n, const Md&) { names.push_back(n); });

  std::size_t i = 0;
  st.for_each_tensor([&](const std::string& name, Md& tensor) {
    const Md ad = tape.grad(tm.ordered[i]);
    auto f = [&](const Md& probe) {
      const Md saved = tensor;
      tensor = probe;
      Tape<double> t2;
      const auto tm2 = make_leaves(t2, st);
      const double val =
          sample_loss_tape(t2, tm2, cfg, sample, label, smoothing).value()(0, 0);
      tensor = saved;
      return val;
    };
    const Md fd = fd_grad<double>(f, tensor, 1e-6);
    const double denom = std::max(fd.norm(), 1e-10);
    INFO("tensor " << name);
    CHECK((ad - fd).norm() / denom < 1e-5);
    ++i;
  });
}
