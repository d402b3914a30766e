#pragma once

#include "crate/container.hpp"
#include "crate/data.hpp"
#include "crate/model.hpp"
#include "crate/optim.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

namespace crate {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kDataEnvVar = "CRATE_ALPHA_DATA";

struct DataConfig {
  std::string dataset = "cifar10";  // "cifar10" or "synthetic"
  std::string root;                   // cifar10 directory; empty: $CRATE_ALPHA_DATA
  int max_train = 0;                  // 0: use everything
  int max_test = 0;
  bool augment = true;                // random crop + horizontal flip (images only)
  SubspaceDatasetSpec synthetic;

  std::string resolved_root() const {
    if (!root.empty()) return root;
    if (const char* env = std::getenv(kDataEnvVar)) return env;
    return "";
  }

  void validate() const {
    if (dataset != "cifar10" && dataset != "synthetic")
      throw ConfigError("data.dataset must be cifar10 or synthetic");
    if (max_train < 0 || max_test < 0)
      throw ConfigError("data.max_train and data.max_test must be >= 0");
    synthetic.validate();
  }
};

struct DiagConfig {
  int log_every = 50;          // steps between train metric rows
  int rate_every_epochs = 1;   // epochs between rate/sparsity rows (0 disables)
  int checkpoint_every = 0;    // steps between checkpoints (0: epoch ends only)
  int rate_batch = 32;         // held-out samples per rate measurement

  void validate() const {
    if (log_every < 1) throw ConfigError("diagnostics.log_every must be >= 1");
    if (rate_every_epochs < 0)
      throw ConfigError("diagnostics.rate_every_epochs must be >= 0");
    if (checkpoint_every < 0)
      throw ConfigError("diagnostics.checkpoint_every must be >= 0");
    if (rate_batch < 1) throw ConfigError("diagnostics.rate_batch must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  DiagConfig diagnostics;
  std::string out_dir = "runs/default";
  std::string precision = "f32";

  void validate() const {
    model.validate();
    train.validate();
    data.validate();
    diagnostics.validate();
    if (precision != "f32" && precision != "f64")
      throw ConfigError("precision must be f32 or f64");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    if (data.dataset == "cifar10" && model.input != InputKind::image)
      throw ConfigError("cifar10 requires an image-input model");
    if (data.dataset == "synthetic" && model.input != InputKind::tokens)
      throw ConfigError("synthetic data requires a token-input model");
  }
};

namespace detail {

/// Tracks consumed keys so unknown ones can be rejected with their path.
class JsonReader {
 public:
  JsonReader(const json& j, std::string scope) : j_(j), scope_(std::move(scope)) {
    if (!j_.is_object()) throw ConfigError(scope_ + ": expected a JSON object");
  }

  template <class T>
  void field(const char* name, T& out) {
    auto it = j_.find(name);
    if (it == j_.end()) return;
    seen_.insert(name);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(scope_ + "." + name + ": wrong type");
    }
  }

  const json* object(const char* name) {
    auto it = j_.find(name);
    if (it == j_.end()) return nullptr;
    seen_.insert(name);
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key()))
        throw ConfigError(scope_ + ": unknown key \"" + it.key() + "\"");
  }

 private:
  const json& j_;
  std::string scope_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const ModelConfig& m) {
  return json{{"size", to_string(m.size)},
              {"variant", to_string(m.variant)},
              {"depth", m.depth},
              {"width", m.width},
              {"heads", m.heads},
              {"patch", m.patch},
              {"overcompleteness", m.overcompleteness},
              {"image_side", m.image_side},
              {"channels", m.channels},
              {"num_classes", m.num_classes},
              {"input", m.input == InputKind::image ? "image" : "tokens"},
              {"token_dim", m.token_dim},
              {"tokens_per_sample", m.tokens_per_sample},
              {"use_out_proj", m.use_out_proj},
              {"use_cls_token", m.use_cls_token},
              {"use_pre_norm", m.use_pre_norm},
              {"scale_mode", m.scale_mode == ScaleMode::paper ? "paper" : "sqrt_p"},
              {"attn_scale",
               m.attn_scale == AttnScaleKind::learned ? "learned" : "literal"},
              {"kappa", m.kappa},
              {"epsilon", m.epsilon},
              {"eta", m.eta},
              {"lambda", m.lambda},
              {"ista_steps", m.ista_steps}};
}

inline ModelConfig model_from_json(const json& j, const std::string& scope) {
  detail::JsonReader r(j, scope);
  ModelConfig m;
  std::string size = to_string(m.size), variant = to_string(m.variant);
  std::string input = "image", scale_mode = "sqrt_p", attn_scale = "learned";
  r.field("size", size);
  m.size = parse_size(size);
  if (m.size != SizeName::custom) m = preset(m.size);
  r.field("variant", variant);
  m.variant = parse_variant(variant);
  r.field("depth", m.depth);
  r.field("width", m.width);
  r.field("heads", m.heads);
  r.field("patch", m.patch);
  r.field("overcompleteness", m.overcompleteness);
  r.field("image_side", m.image_side);
  r.field("channels", m.channels);
  r.field("num_classes", m.num_classes);
  r.field("input", input);
  if (input == "image") m.input = InputKind::image;
  else if (input == "tokens") m.input = InputKind::tokens;
  else throw ConfigError(scope + ".input must be image or tokens");
  r.field("token_dim", m.token_dim);
  r.field("tokens_per_sample", m.tokens_per_sample);
  r.field("use_out_proj", m.use_out_proj);
  r.field("use_cls_token", m.use_cls_token);
  r.field("use_pre_norm", m.use_pre_norm);
  r.field("scale_mode", scale_mode);
  if (scale_mode == "paper") m.scale_mode = ScaleMode::paper;
  else if (scale_mode == "sqrt_p") m.scale_mode = ScaleMode::sqrt_p;
  else throw ConfigError(scope + ".scale_mode must be paper or sqrt_p");
  r.field("attn_scale", attn_scale);
  if (attn_scale == "learned") m.attn_scale = AttnScaleKind::learned;
  else if (attn_scale == "literal") m.attn_scale = AttnScaleKind::literal;
  else throw ConfigError(scope + ".attn_scale must be learned or literal");
  r.field("kappa", m.kappa);
  r.field("epsilon", m.epsilon);
  r.field("eta", m.eta);
  r.field("lambda", m.lambda);
  r.field("ista_steps", m.ista_steps);
  r.finish();
  return m;
}

inline json to_json(const TrainConfig& t) {
  return json{{"base_lr", t.base_lr},
              {"min_lr", t.min_lr},
              {"weight_decay", t.weight_decay},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps_opt", t.eps_opt},
              {"warmup_epochs", t.warmup_epochs},
              {"total_epochs", t.total_epochs},
              {"batch_size", t.batch_size},
              {"label_smoothing", t.label_smoothing},
              {"clip_norm", t.clip_norm},
              {"seed", t.seed},
              {"max_steps", t.max_steps},
              {"num_shards", t.num_shards},
              {"threads", t.threads}};
}

inline TrainConfig train_from_json(const json& j, const std::string& scope) {
  detail::JsonReader r(j, scope);
  TrainConfig t;
  r.field("base_lr", t.base_lr);
  r.field("min_lr", t.min_lr);
  r.field("weight_decay", t.weight_decay);
  r.field("beta1", t.beta1);
  r.field("beta2", t.beta2);
  r.field("eps_opt", t.eps_opt);
  r.field("warmup_epochs", t.warmup_epochs);
  r.field("total_epochs", t.total_epochs);
  r.field("batch_size", t.batch_size);
  r.field("label_smoothing", t.label_smoothing);
  r.field("clip_norm", t.clip_norm);
  r.field("seed", t.seed);
  r.field("max_steps", t.max_steps);
  r.field("num_shards", t.num_shards);
  r.field("threads", t.threads);
  r.finish();
  return t;
}

inline json to_json(const SubspaceDatasetSpec& s) {
  return json{{"k_true", s.k_true},
              {"ambient", s.ambient},
              {"p_true", s.p_true},
              {"noise_sigma", s.noise_sigma},
              {"tokens_per_sample", s.tokens_per_sample},
              {"train_samples", s.train_samples},
              {"test_samples", s.test_samples}};
}

inline SubspaceDatasetSpec synthetic_from_json(const json& j, const std::string& scope) {
  detail::JsonReader r(j, scope);
  SubspaceDatasetSpec s;
  r.field("k_true", s.k_true);
  r.field("ambient", s.ambient);
  r.field("p_true", s.p_true);
  r.field("noise_sigma", s.noise_sigma);
  r.field("tokens_per_sample", s.tokens_per_sample);
  r.field("train_samples", s.train_samples);
  r.field("test_samples", s.test_samples);
  r.finish();
  return s;
}

inline json to_json(const DataConfig& d) {
  return json{{"dataset", d.dataset},      {"root", d.root},
              {"max_train", d.max_train},  {"max_test", d.max_test},
              {"augment", d.augment},      {"synthetic", to_json(d.synthetic)}};
}

inline json to_json(const DiagConfig& d) {
  return json{{"log_every", d.log_every},
              {"rate_every_epochs", d.rate_every_epochs},
              {"checkpoint_every", d.checkpoint_every},
              {"rate_batch", d.rate_batch}};
}

inline json to_json(const RunConfig& r) {
  return json{{"model", to_json(r.model)},
              {"train", to_json(r.train)},
              {"data", to_json(r.data)},
              {"diagnostics", to_json(r.diagnostics)},
              {"out_dir", r.out_dir},
              {"precision", r.precision}};
}

inline RunConfig run_from_json(const json& j) {
  detail::JsonReader r(j, "config");
  RunConfig run;
  if (const json* m = r.object("model")) run.model = model_from_json(*m, "model");
  if (const json* t = r.object("train")) run.train = train_from_json(*t, "train");
  if (const json* d = r.object("data")) {
    detail::JsonReader dr(*d, "data");
    dr.field("dataset", run.data.dataset);
    dr.field("root", run.data.root);
    dr.field("max_train", run.data.max_train);
    dr.field("max_test", run.data.max_test);
    dr.field("augment", run.data.augment);
    if (const json* s = dr.object("synthetic"))
      run.data.synthetic = synthetic_from_json(*s, "data.synthetic");
    dr.finish();
  }
  if (const json* g = r.object("diagnostics")) {
    detail::JsonReader gr(*g, "diagnostics");
    gr.field("log_every", run.diagnostics.log_every);
    gr.field("rate_every_epochs", run.diagnostics.rate_every_epochs);
    gr.field("checkpoint_every", run.diagnostics.checkpoint_every);
    gr.field("rate_batch", run.diagnostics.rate_batch);
    gr.finish();
  }
  r.field("out_dir", run.out_dir);
  r.field("precision", run.precision);
  r.finish();
  return run;
}

/// Canonical text form: sorted keys, two-space indent, trailing newline.
inline std::string canonical_config_text(const RunConfig& r) {
  return to_json(r).dump(2) + "\n";
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  RunConfig run = run_from_json(j);
  run.validate();
  return run;
}

inline void save_run_config(const std::string& path, const RunConfig& r) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file " + path);
  out << canonical_config_text(r);
}

}  // namespace crate
