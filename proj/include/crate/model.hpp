#pragma once

#include "crate/layers.hpp"
#include "crate/numerics.hpp"
#include "crate/srr.hpp"
#include "crate/tape.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace crate {

enum class SizeName { tiny, small, base, large, huge, custom };
enum class InputKind { image, tokens };
enum class AttnScaleKind { learned, literal };

inline const char* to_string(SizeName s) {
  switch (s) {
    case SizeName::tiny: return "tiny";
    case SizeName::small: return "small";
    case SizeName::base: return "base";
    case SizeName::large: return "large";
    case SizeName::huge: return "huge";
    case SizeName::custom: return "custom";
  }
  return "?";
}

inline SizeName parse_size(const std::string& s) {
  if (s == "tiny") return SizeName::tiny;
  if (s == "small") return SizeName::small;
  if (s == "base") return SizeName::base;
  if (s == "large") return SizeName::large;
  if (s == "huge") return SizeName::huge;
  if (s == "custom") return SizeName::custom;
  throw ConfigError("unknown model size: " + s);
}

struct ModelConfig {
  SizeName size = SizeName::custom;
  BlockVariant variant = BlockVariant::residual;
  int depth = 12;
  int width = 192;
  int heads = 3;
  int patch = 16;
  int overcompleteness = 4;
  int image_side = 224;
  int channels = 3;
  int num_classes = 1000;
  InputKind input = InputKind::image;
  int token_dim = 0;          // tokens input: per-token dimension
  int tokens_per_sample = 0;  // tokens input: tokens per sample
  bool use_out_proj = true;
  bool use_cls_token = true;
  bool use_pre_norm = true;
  ScaleMode scale_mode = ScaleMode::sqrt_p;
  AttnScaleKind attn_scale = AttnScaleKind::learned;
  double kappa = 1.0;
  double epsilon = 0.5;
  double eta = 0.1;
  double lambda = 0.1;
  int ista_steps = 2;

  int head_dim() const { return width / heads; }
  int input_dim() const {
    return input == InputKind::image ? channels * patch * patch : token_dim;
  }
  int num_patch_tokens() const {
    if (input == InputKind::image) {
      const int g = image_side / patch;
      return g * g;
    }
    return tokens_per_sample;
  }
  int grid_side() const { return image_side / patch; }
  int seq_len() const { return num_patch_tokens() + (use_cls_token ? 1 : 0); }
  int dict_atoms() const {
    return variant == BlockVariant::vanilla ? width : overcompleteness * width;
  }

  void validate() const {
    if (depth < 1) throw ConfigError("model.depth must be >= 1");
    if (width < 1) throw ConfigError("model.width must be >= 1");
    if (heads < 1 || width % heads != 0)
      throw ConfigError("model.width must be divisible by model.heads");
    if (overcompleteness < 1) throw ConfigError("model.overcompleteness must be >= 1");
    if (num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
    if (input == InputKind::image) {
      if (patch < 1 || image_side % patch != 0)
        throw ConfigError("model.image_side must be divisible by model.patch");
      if (channels < 1) throw ConfigError("model.channels must be >= 1");
    } else {
      if (token_dim < 1) throw ConfigError("model.token_dim must be >= 1");
      if (tokens_per_sample < 1)
        throw ConfigError("model.tokens_per_sample must be >= 1");
    }
    if (!(kappa > 0) || !(epsilon > 0))
      throw ConfigError("model.kappa and model.epsilon must be > 0");
    if (!(eta > 0) || lambda < 0)
      throw ConfigError("model.eta must be > 0 and model.lambda >= 0");
    if (ista_steps < 1) throw ConfigError("model.ista_steps must be >= 1");
  }
};

/// Named sizes; depth/width/heads follow the published ladder, the patch side
/// defaults to 16 except for the huge model which uses 14.
inline ModelConfig preset(SizeName size, BlockVariant variant = BlockVariant::residual) {
  ModelConfig c;
  c.size = size;
  c.variant = variant;
  switch (size) {
    case SizeName::tiny:  c.depth = 12; c.width = 192;  c.heads = 3;  break;
    case SizeName::small: c.depth = 12; c.width = 576;  c.heads = 12; break;
    case SizeName::base:  c.depth = 12; c.width = 768;  c.heads = 12; break;
    case SizeName::large: c.depth = 24; c.width = 1024; c.heads = 16; break;
    case SizeName::huge:  c.depth = 32; c.width = 1280; c.heads = 16; c.patch = 14; break;
    case SizeName::custom: break;
  }
  return c;
}

struct ParamBreakdown {
  std::int64_t patch_embed = 0;
  std::int64_t pos_embed = 0;
  std::int64_t cls_token = 0;
  std::int64_t attention = 0;
  std::int64_t sparse = 0;
  std::int64_t norms = 0;
  std::int64_t head = 0;

  std::int64_t total() const {
    return patch_embed + pos_embed + cls_token + attention + sparse + norms + head;
  }
};

inline ParamBreakdown paramcount(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.width;
  const std::int64_t L = cfg.depth;
  const std::int64_t atoms = cfg.dict_atoms();
  ParamBreakdown b;
  b.patch_embed = d * cfg.input_dim() + d;
  b.pos_embed = d * cfg.seq_len();
  b.cls_token = cfg.use_cls_token ? d : 0;
  b.attention = L * (d * d + (cfg.use_out_proj ? d * d : 0) +
                     (cfg.attn_scale == AttnScaleKind::learned ? 1 : 0));
  b.sparse = L * (d * atoms +
                  (cfg.variant == BlockVariant::decoupled ||
                           cfg.variant == BlockVariant::residual
                       ? d * atoms
                       : 0));
  b.norms = cfg.use_pre_norm ? L * 4 * d + 2 * d : 0;
  b.head = d * cfg.num_classes + cfg.num_classes;
  return b;
}

template <class S>
struct LayerState {
  Mat<S> basis;      // d x d, the K head bases side by side
  Mat<S> out_proj;   // d x d, empty when disabled
  Mat<S> attn_gain;  // 1 x 1 learned step scale, empty in literal mode
  Mat<S> norm1_gain, norm1_bias, norm2_gain, norm2_bias;  // d x 1, empty without pre-norm
  Mat<S> dict;       // d x atoms
  Mat<S> decoder;    // d x atoms, empty unless decoupled/residual
};

template <class S>
struct ModelState {
  ModelConfig config;
  Mat<S> patch_weight;  // d x input_dim
  Mat<S> patch_bias;    // d x 1
  Mat<S> pos_embed;     // d x seq_len
  Mat<S> cls_token;     // d x 1, empty when disabled
  std::vector<LayerState<S>> layers;
  Mat<S> final_gain, final_bias;  // d x 1, empty without pre-norm
  Mat<S> head_weight;             // d x num_classes
  Mat<S> head_bias;               // num_classes x 1

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f("patch_embed.weight", self.patch_weight);
    f("patch_embed.bias", self.patch_bias);
    f("pos_embed", self.pos_embed);
    if (self.config.use_cls_token) f("cls_token", self.cls_token);
    char name[64];
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& ly = self.layers[l];
      const int li = static_cast<int>(l);
      std::snprintf(name, sizeof name, "layers.%02d.attn.basis", li);
      f(std::string(name), ly.basis);
      if (self.config.use_out_proj) {
        std::snprintf(name, sizeof name, "layers.%02d.attn.out_proj", li);
        f(std::string(name), ly.out_proj);
      }
      if (self.config.attn_scale == AttnScaleKind::learned) {
        std::snprintf(name, sizeof name, "layers.%02d.attn.gain", li);
        f(std::string(name), ly.attn_gain);
      }
      if (self.config.use_pre_norm) {
        std::snprintf(name, sizeof name, "layers.%02d.norm1.gain", li);
        f(std::string(name), ly.norm1_gain);
        std::snprintf(name, sizeof name, "layers.%02d.norm1.bias", li);
        f(std::string(name), ly.norm1_bias);
        std::snprintf(name, sizeof name, "layers.%02d.norm2.gain", li);
        f(std::string(name), ly.norm2_gain);
        std::snprintf(name, sizeof name, "layers.%02d.norm2.bias", li);
        f(std::string(name), ly.norm2_bias);
      }
      std::snprintf(name, sizeof name, "layers.%02d.dict.encoder", li);
      f(std::string(name), ly.dict);
      if (self.config.variant == BlockVariant::decoupled ||
          self.config.variant == BlockVariant::residual) {
        std::snprintf(name, sizeof name, "layers.%02d.dict.decoder", li);
        f(std::string(name), ly.decoder);
      }
    }
    if (self.config.use_pre_norm) {
      f("final_norm.gain", self.final_gain);
      f("final_norm.bias", self.final_bias);
    }
    f("head.weight", self.head_weight);
    f("head.bias", self.head_bias);
  }

  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::int64_t num_scalars() const {
    std::int64_t n = 0;
    for_each_tensor([&](const std::string&, const Mat<S>& m) { n += m.size(); });
    return n;
  }

  SubspaceBases<S> bases_at(int l) const {
    const auto& ly = layers[static_cast<std::size_t>(l)];
    SubspaceBases<S> b;
    const int p = config.head_dim();
    b.heads.reserve(static_cast<std::size_t>(config.heads));
    for (int k = 0; k < config.heads; ++k)
      b.heads.push_back(ly.basis.middleCols(static_cast<Eigen::Index>(k) * p, p));
    b.kappa = static_cast<S>(config.kappa);
    b.epsilon = static_cast<S>(config.epsilon);
    if (config.use_out_proj) b.out_proj = ly.out_proj;
    b.scale_mode = config.scale_mode;
    return b;
  }

  DictionaryPair<S> dict_at(int l) const {
    const auto& ly = layers[static_cast<std::size_t>(l)];
    DictionaryPair<S> d;
    d.dict = ly.dict;
    if (config.variant == BlockVariant::decoupled ||
        config.variant == BlockVariant::residual)
      d.decoder = ly.decoder;
    d.overcompleteness =
        config.variant == BlockVariant::vanilla ? 1 : config.overcompleteness;
    d.eta = static_cast<S>(config.eta);
    d.lambda = static_cast<S>(config.lambda);
    d.steps = config.ista_steps;
    return d;
  }
};

template <class S>
ModelState<S> init(const ModelConfig& cfg, RngState rng) {
  cfg.validate();
  ModelState<S> st;
  st.config = cfg;
  const int d = cfg.width;
  const int atoms = cfg.dict_atoms();
  const double dict_std = 1.0 / std::sqrt(static_cast<double>(atoms));

  st.patch_weight = trunc_gaussian<S>(rng, d, cfg.input_dim(), 0.02);
  st.patch_bias = Mat<S>::Zero(d, 1);
  st.pos_embed = trunc_gaussian<S>(rng, d, cfg.seq_len(), 0.02);
  if (cfg.use_cls_token) st.cls_token = trunc_gaussian<S>(rng, d, 1, 0.02);

  st.layers.resize(static_cast<std::size_t>(cfg.depth));
  for (auto& ly : st.layers) {
    ly.basis = trunc_gaussian<S>(rng, d, d, 0.02);
    if (cfg.use_out_proj) ly.out_proj = trunc_gaussian<S>(rng, d, d, 0.02);
    if (cfg.attn_scale == AttnScaleKind::learned) ly.attn_gain = Mat<S>::Ones(1, 1);
    if (cfg.use_pre_norm) {
      ly.norm1_gain = Mat<S>::Ones(d, 1);
      ly.norm1_bias = Mat<S>::Zero(d, 1);
      ly.norm2_gain = Mat<S>::Ones(d, 1);
      ly.norm2_bias = Mat<S>::Zero(d, 1);
    }
    ly.dict = gaussian<S>(rng, d, atoms, dict_std);
    if (cfg.variant == BlockVariant::decoupled || cfg.variant == BlockVariant::residual)
      ly.decoder = gaussian<S>(rng, d, atoms, dict_std);
  }
  if (cfg.use_pre_norm) {
    st.final_gain = Mat<S>::Ones(d, 1);
    st.final_bias = Mat<S>::Zero(d, 1);
  }
  st.head_weight = Mat<S>::Zero(d, cfg.num_classes);
  st.head_bias = Mat<S>::Zero(cfg.num_classes, 1);
  return st;
}

/// Rearrange channel-major pixels into one column per patch; rows run over
/// (channel, py, px) within the patch, columns over the patch grid row-major.
template <class S>
Mat<S> extract_patches(const ModelConfig& cfg, const Vec<S>& pixels) {
  if (cfg.input == InputKind::tokens)
    throw ConfigError("extract_patches: model takes token input");
  const int side = cfg.image_side, ch = cfg.channels, ps = cfg.patch;
  require_shape(pixels.size() == static_cast<Eigen::Index>(ch) * side * side,
                "extract_patches: pixel count mismatch");
  const int g = cfg.grid_side();
  Mat<S> out(cfg.input_dim(), g * g);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      const Eigen::Index col = gy * g + gx;
      Eigen::Index row = 0;
      for (int c = 0; c < ch; ++c)
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px) {
            const Eigen::Index idx = (static_cast<Eigen::Index>(c) * side +
                                      (gy * ps + py)) * side +
                                     (gx * ps + px);
            out(row++, col) = pixels(idx);
          }
    }
  }
  return out;
}

/// Embed per-token inputs, prepend the class token, add positions.
template <class S>
Mat<S> patchify(const ModelState<S>& st, const Mat<S>& patch_cols) {
  const auto& cfg = st.config;
  require_shape(patch_cols.rows() == cfg.input_dim() &&
                    patch_cols.cols() == cfg.num_patch_tokens(),
                "patchify: patch matrix shape mismatch");
  Mat<S> z(cfg.width, cfg.seq_len());
  const Eigen::Index off = cfg.use_cls_token ? 1 : 0;
  z.middleCols(off, patch_cols.cols()).noalias() = st.patch_weight * patch_cols;
  z.middleCols(off, patch_cols.cols()).colwise() += st.patch_bias.col(0);
  if (cfg.use_cls_token) z.col(0) = st.cls_token.col(0);
  z += st.pos_embed;
  return z;
}

template <class S>
struct ForwardTrace {
  Mat<S> logits;  // num_classes x batch
  std::vector<std::vector<LayerTrace<S>>> traces;  // [sample][layer], diagnostics only
};

namespace detail {

template <class S>
S literal_attn_scale(const ModelConfig& cfg, Eigen::Index n) {
  return static_cast<S>(cfg.kappa) * static_cast<S>(cfg.head_dim()) /
         (static_cast<S>(n) * static_cast<S>(cfg.epsilon * cfg.epsilon));
}

}  // namespace detail

/// Forward one sample already in patch-column form; fills `trace` when given.
template <class S>
Mat<S> forward_sample(const ModelState<S>& st, const Mat<S>& patch_cols,
                      std::vector<LayerTrace<S>>* trace = nullptr) {
  const auto& cfg = st.config;
  Mat<S> z = patchify(st, patch_cols);
  if (trace) trace->resize(st.layers.size());
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const auto& ly = st.layers[l];
    const auto bases = st.bases_at(static_cast<int>(l));
    const auto dict = st.dict_at(static_cast<int>(l));
    LayerTrace<S>* lt = trace ? &(*trace)[l] : nullptr;

    const Mat<S> attn_in =
        cfg.use_pre_norm
            ? token_norm(z, ly.norm1_gain, ly.norm1_bias, S(kNormEps))
            : z;
    std::optional<S> gain;
    if (cfg.attn_scale == AttnScaleKind::learned) gain = ly.attn_gain(0, 0);
    Mat<S> z_half =
        z + mssa(attn_in, bases, gain, lt ? &lt->attention : nullptr);

    const Mat<S> block_in =
        cfg.use_pre_norm
            ? token_norm(z_half, ly.norm2_gain, ly.norm2_bias, S(kNormEps))
            : z_half;
    Mat<S> z_next;
    if (cfg.variant == BlockVariant::vanilla) {
      z_next = vanilla_ista(block_in, dict.dict, dict.eta, dict.lambda);
    } else {
      Mat<S> codes = ista_oc(block_in, dict);
      z_next = odl_decode(codes, z_half, dict, cfg.variant);
      if (lt) lt->codes = std::move(codes);
    }
    if (lt) {
      lt->z_half = std::move(z_half);
      lt->output = z_next;
    }
    z = std::move(z_next);
  }
  if (cfg.use_pre_norm) z = token_norm(z, st.final_gain, st.final_bias, S(kNormEps));
  return z;
}

template <class S>
Vec<S> feature_of(const ModelConfig& cfg, const Mat<S>& z) {
  if (cfg.use_cls_token) return z.col(0);
  return z.rowwise().mean();
}

/// Batch forward; samples are patch-column matrices.
template <class S>
ForwardTrace<S> forward(const ModelState<S>& st, const std::vector<Mat<S>>& batch,
                        bool diagnostics = false) {
  ForwardTrace<S> out;
  out.logits.resize(st.config.num_classes, static_cast<Eigen::Index>(batch.size()));
  if (diagnostics) out.traces.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Mat<S> z =
        forward_sample(st, batch[i], diagnostics ? &out.traces[i] : nullptr);
    const Vec<S> f = feature_of(st.config, z);
    out.logits.col(static_cast<Eigen::Index>(i)) =
        st.head_weight.transpose() * f + st.head_bias.col(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape-side forward, used for training. Mirrors forward_sample; the two paths
// are cross-checked in the tests.

template <class S>
struct TapeLayer {
  Var<S> basis, out_proj, attn_gain;
  Var<S> norm1_gain, norm1_bias, norm2_gain, norm2_bias;
  Var<S> dict, decoder;
};

template <class S>
struct TapeModel {
  std::vector<Var<S>> ordered;  // leaves in for_each_tensor order
  Var<S> patch_weight, patch_bias, pos_embed, cls_token;
  std::vector<TapeLayer<S>> layers;
  Var<S> final_gain, final_bias, head_weight, head_bias;
};

template <class S>
TapeModel<S> make_leaves(Tape<S>& tape, const ModelState<S>& st) {
  TapeModel<S> tm;
  tm.layers.resize(st.layers.size());
  st.for_each_tensor([&](const std::string& name, const Mat<S>& m) {
    Var<S> v = tape.leaf(m);
    tm.ordered.push_back(v);
    if (name == "patch_embed.weight") tm.patch_weight = v;
    else if (name == "patch_embed.bias") tm.patch_bias = v;
    else if (name == "pos_embed") tm.pos_embed = v;
    else if (name == "cls_token") tm.cls_token = v;
    else if (name == "final_norm.gain") tm.final_gain = v;
    else if (name == "final_norm.bias") tm.final_bias = v;
    else if (name == "head.weight") tm.head_weight = v;
    else if (name == "head.bias") tm.head_bias = v;
    else {
      const int l = std::stoi(name.substr(7, 2));
      auto& tl = tm.layers[static_cast<std::size_t>(l)];
      const std::string leafname = name.substr(10);
      if (leafname == "attn.basis") tl.basis = v;
      else if (leafname == "attn.out_proj") tl.out_proj = v;
      else if (leafname == "attn.gain") tl.attn_gain = v;
      else if (leafname == "norm1.gain") tl.norm1_gain = v;
      else if (leafname == "norm1.bias") tl.norm1_bias = v;
      else if (leafname == "norm2.gain") tl.norm2_gain = v;
      else if (leafname == "norm2.bias") tl.norm2_bias = v;
      else if (leafname == "dict.encoder") tl.dict = v;
      else if (leafname == "dict.decoder") tl.decoder = v;
      else throw ConfigError("make_leaves: unexpected tensor " + name);
    }
  });
  return tm;
}

template <class S>
Var<S> forward_sample_tape(Tape<S>& tape, const TapeModel<S>& tm,
                           const ModelConfig& cfg, const Mat<S>& patch_cols) {
  const int p = cfg.head_dim();
  const Eigen::Index n = cfg.seq_len();

  Var<S> tokens = matmul(tm.patch_weight, tape.constant(patch_cols));
  tokens = add_colvec(tokens, tm.patch_bias);
  Var<S> z = cfg.use_cls_token
                 ? concat_cols(tape, std::vector<Var<S>>{tm.cls_token, tokens})
                 : tokens;
  z = z + tm.pos_embed;

  for (std::size_t l = 0; l < tm.layers.size(); ++l) {
    const auto& tl = tm.layers[l];
    Var<S> attn_in = cfg.use_pre_norm
                         ? standardize_cols(z, tl.norm1_gain, tl.norm1_bias,
                                            S(kNormEps))
                         : z;
    Var<S> acc;
    for (int k = 0; k < cfg.heads; ++k) {
      Var<S> uk = block_cols(tl.basis, static_cast<Eigen::Index>(k) * p, p);
      Var<S> v = matmul_tn(uk, attn_in);
      Var<S> scores = matmul_tn(v, v);
      if (cfg.scale_mode == ScaleMode::sqrt_p)
        scores = scale(scores, S(1) / std::sqrt(static_cast<S>(p)));
      Var<S> attn = softmax_cols(scores);
      Var<S> o = matmul(uk, matmul(v, attn));
      acc = (k == 0) ? o : acc + o;
    }
    Var<S> update = cfg.attn_scale == AttnScaleKind::learned
                        ? scale_by(acc, tl.attn_gain)
                        : scale(acc, detail::literal_attn_scale<S>(cfg, n));
    if (cfg.use_out_proj) update = matmul(tl.out_proj, update);
    Var<S> z_half = z + update;

    Var<S> block_in = cfg.use_pre_norm
                          ? standardize_cols(z_half, tl.norm2_gain, tl.norm2_bias,
                                             S(kNormEps))
                          : z_half;
    const S eta = static_cast<S>(cfg.eta);
    const S lam = static_cast<S>(cfg.lambda);
    if (cfg.variant == BlockVariant::vanilla) {
      Var<S> r = block_in - matmul(tl.dict, block_in);
      Var<S> step = block_in + scale(matmul_tn(tl.dict, r), eta);
      z = relu(add_scalar(step, -eta * lam));
    } else {
      // zero start makes the first proximal step a plain thresholded encode
      Var<S> codes = relu(
          add_scalar(scale(matmul_tn(tl.dict, block_in), eta), -eta * lam));
      for (int s = 1; s < cfg.ista_steps; ++s) {
        Var<S> r = matmul(tl.dict, codes) - block_in;
        Var<S> step = codes - scale(matmul_tn(tl.dict, r), eta);
        codes = relu(add_scalar(step, -eta * lam));
      }
      Var<S> decoded =
          matmul(cfg.variant == BlockVariant::overcomplete ? tl.dict : tl.decoder,
                 codes);
      z = cfg.variant == BlockVariant::residual ? z_half + decoded : decoded;
    }
  }
  if (cfg.use_pre_norm)
    z = standardize_cols(z, tm.final_gain, tm.final_bias, S(kNormEps));

  Var<S> feat;
  if (cfg.use_cls_token) {
    feat = block_cols(z, 0, 1);
  } else {
    Mat<S> ones = Mat<S>::Constant(n, 1, S(1) / static_cast<S>(n));
    feat = matmul(z, tape.constant(std::move(ones)));
  }
  Var<S> logits = matmul_tn(tm.head_weight, feat) + tm.head_bias;
  return logits;
}

template <class S>
Var<S> sample_loss_tape(Tape<S>& tape, const TapeModel<S>& tm, const ModelConfig& cfg,
                        const Mat<S>& patch_cols, int label, S smoothing) {
  Var<S> logits = forward_sample_tape(tape, tm, cfg, patch_cols);
  return smoothed_ce(logits, std::vector<int>{label}, smoothing);
}

}  // namespace crate
