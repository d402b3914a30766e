// Command-line front end: train, eval, ablate, diagnose, paramcount.

#include "crate/checkpoint.hpp"
#include "crate/config.hpp"
#include "crate/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string resume_path;
  std::string precision;
  std::string variant;
  std::string size;
  std::optional<std::uint64_t> seed;
};

crate::RunConfig resolve_config(const CommonOpts& o, bool model_only = false) {
  crate::RunConfig run;
  if (!o.config_path.empty()) run = crate::load_run_config(o.config_path);
  if (!o.size.empty()) {
    const auto keep_variant = run.model.variant;
    crate::ModelConfig base = crate::preset(crate::parse_size(o.size), keep_variant);
    // size presets override architecture only; input/head wiring stays
    base.input = run.model.input;
    base.token_dim = run.model.token_dim;
    base.tokens_per_sample = run.model.tokens_per_sample;
    base.patch = run.model.size == crate::SizeName::custom ? base.patch : run.model.patch;
    base.image_side = run.model.image_side;
    base.channels = run.model.channels;
    base.num_classes = run.model.num_classes;
    base.use_cls_token = run.model.use_cls_token;
    run.model = base;
  }
  if (!o.variant.empty()) run.model.variant = crate::parse_variant(o.variant);
  if (!o.precision.empty()) run.precision = o.precision;
  if (!o.out_dir.empty()) run.out_dir = o.out_dir;
  if (o.seed) run.train.seed = *o.seed;
  if (model_only)
    run.model.validate();
  else
    run.validate();
  return run;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_model_flags = true) {
  cmd->add_option("--config", o.config_path, "run configuration JSON");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "training seed");
  cmd->add_option("--precision", o.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  if (with_model_flags) {
    cmd->add_option("--variant", o.variant, "block variant")
        ->check(CLI::IsMember({"vanilla", "oc", "ocd", "ocdr"}));
    cmd->add_option("--size", o.size, "model size preset")
        ->check(CLI::IsMember({"tiny", "small", "base", "large", "huge"}));
  }
}

template <class S>
int do_train(const crate::RunConfig& run, const std::string& resume_path) {
  crate::Trainer<S> trainer(run);
  if (!resume_path.empty()) {
    auto ck = crate::load_checkpoint<S>(resume_path);
    trainer.restore(std::move(ck));
    std::cout << "resumed from " << resume_path << " at step "
              << trainer.cursor().step << "\n";
  }
  const crate::TrainSummary s = trainer.run();
  std::cout << "steps " << s.steps << "\n"
            << "train loss " << s.init_train_loss << " -> " << s.final_train_loss
            << "\n"
            << "test loss " << s.test_loss << ", test accuracy " << s.test_accuracy
            << "\n"
            << "final checkpoint " << s.final_checkpoint << "\n";
  return 0;
}

template <class S>
int do_eval(const std::string& checkpoint, int max_samples) {
  auto ck = crate::load_checkpoint<S>(checkpoint);
  crate::RunConfig run = ck.run;
  crate::Trainer<S> trainer(run);
  trainer.restore(std::move(ck));
  const auto res = trainer.evaluate_split(trainer.data().test, 0.0,
                                          static_cast<std::size_t>(max_samples));
  std::cout << "test loss " << res.loss << ", test accuracy " << res.accuracy << "\n";
  return 0;
}

std::vector<int> parse_layers(const std::string& sel, int depth) {
  std::vector<int> out;
  if (sel == "all") {
    for (int l = 1; l <= depth; ++l) out.push_back(l);
    return out;
  }
  std::size_t pos = 0;
  while (pos < sel.size()) {
    const auto comma = sel.find(',', pos);
    const std::string tok = sel.substr(pos, comma == std::string::npos ? sel.npos
                                                                       : comma - pos);
    const int l = std::stoi(tok);
    if (l < 1 || l > depth)
      throw crate::ConfigError("layer selection out of range: " + tok);
    out.push_back(l);
    pos = comma == std::string::npos ? sel.size() : comma + 1;
  }
  if (out.empty()) throw crate::ConfigError("empty layer selection");
  return out;
}

template <class S>
int do_diagnose(const std::string& checkpoint, const std::string& out_dir,
                const std::string& layers, int batch) {
  auto ck = crate::load_checkpoint<S>(checkpoint);
  const auto selection = parse_layers(layers, ck.run.model.depth);
  const std::string dir = out_dir.empty() ? ck.run.out_dir + "/diagnose" : out_dir;
  const auto rows = crate::run_diagnose(ck, dir, selection, batch);
  std::cout << "layer,r,rc,r_unit,rc_unit,l1,l0_fraction,srr\n";
  for (const auto& r : rows)
    std::cout << r.layer << ',' << r.r << ',' << r.rc << ',' << r.r_unit << ','
              << r.rc_unit << ',' << r.l1 << ',' << r.l0 << ',' << r.srr << "\n";
  std::cout << "wrote " << dir << "/srr_report.csv and attention_maps.bin\n";
  return 0;
}

int do_paramcount(const crate::RunConfig& run) {
  const crate::ParamBreakdown b = crate::paramcount(run.model);
  std::printf("model %s/%s patch %d, %d classes\n", crate::to_string(run.model.size),
              crate::to_string(run.model.variant), run.model.patch,
              run.model.num_classes);
  std::printf("  patch_embed %12lld\n", static_cast<long long>(b.patch_embed));
  std::printf("  pos_embed   %12lld\n", static_cast<long long>(b.pos_embed));
  std::printf("  cls_token   %12lld\n", static_cast<long long>(b.cls_token));
  std::printf("  attention   %12lld\n", static_cast<long long>(b.attention));
  std::printf("  sparse      %12lld\n", static_cast<long long>(b.sparse));
  std::printf("  norms       %12lld\n", static_cast<long long>(b.norms));
  std::printf("  head        %12lld\n", static_cast<long long>(b.head));
  std::printf("  total       %12lld\n", static_cast<long long>(b.total()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"white-box transformer trainer and diagnostics"};
  app.require_subcommand(1);

  CommonOpts train_opts, ablate_opts, count_opts;
  std::string eval_checkpoint, diag_checkpoint, diag_out, diag_layers = "all";
  std::string diag_precision_unused;
  int eval_max = 0, diag_batch = 32;

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common(train, train_opts);
  train->add_option("--resume", train_opts.resume_path, "checkpoint to resume from");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
  eval->add_option("--max-samples", eval_max, "cap on evaluated samples");

  CLI::App* ablate = app.add_subcommand("ablate", "train the four-block variant ladder");
  add_common(ablate, ablate_opts, /*with_model_flags=*/false);
  ablate->add_option("--size", ablate_opts.size, "model size preset")
      ->check(CLI::IsMember({"tiny", "small", "base", "large", "huge"}));

  CLI::App* diagnose = app.add_subcommand(
      "diagnose", "per-layer rate report and attention-map export");
  diagnose->add_option("--checkpoint", diag_checkpoint, "checkpoint path")->required();
  diagnose->add_option("--out", diag_out, "output directory");
  diagnose->add_option("--layers", diag_layers, "\"all\" or comma-separated 1-based list");
  diagnose->add_option("--batch", diag_batch, "held-out samples to measure");

  CLI::App* count = app.add_subcommand("paramcount", "parameter count and breakdown");
  add_common(count, count_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (train->parsed()) {
      crate::RunConfig run;
      if (!train_opts.resume_path.empty()) {
        // resuming adopts the stored config; --out may redirect outputs
        const std::string prec = crate::checkpoint_precision(train_opts.resume_path);
        if (prec == "f64") {
          auto ck = crate::load_checkpoint<double>(train_opts.resume_path);
          run = ck.run;
          if (!train_opts.out_dir.empty()) run.out_dir = train_opts.out_dir;
          crate::Trainer<double> trainer(run);
          trainer.restore(std::move(ck));
          const auto s = trainer.run();
          std::cout << "steps " << s.steps << ", final checkpoint "
                    << s.final_checkpoint << "\n";
          return 0;
        }
        auto ck = crate::load_checkpoint<float>(train_opts.resume_path);
        run = ck.run;
        if (!train_opts.out_dir.empty()) run.out_dir = train_opts.out_dir;
        crate::Trainer<float> trainer(run);
        trainer.restore(std::move(ck));
        const auto s = trainer.run();
        std::cout << "steps " << s.steps << ", final checkpoint " << s.final_checkpoint
                  << "\n";
        return 0;
      }
      run = resolve_config(train_opts);
      return run.precision == "f64" ? do_train<double>(run, "")
                                    : do_train<float>(run, "");
    }
    if (eval->parsed()) {
      return crate::checkpoint_precision(eval_checkpoint) == "f64"
                 ? do_eval<double>(eval_checkpoint, eval_max)
                 : do_eval<float>(eval_checkpoint, eval_max);
    }
    if (ablate->parsed()) {
      const crate::RunConfig run = resolve_config(ablate_opts);
      if (run.precision == "f64")
        crate::run_ablation<double>(run, std::cout);
      else
        crate::run_ablation<float>(run, std::cout);
      std::cout << "wrote " << run.out_dir << "/ablation.csv\n";
      return 0;
    }
    if (diagnose->parsed()) {
      return crate::checkpoint_precision(diag_checkpoint) == "f64"
                 ? do_diagnose<double>(diag_checkpoint, diag_out, diag_layers,
                                       diag_batch)
                 : do_diagnose<float>(diag_checkpoint, diag_out, diag_layers,
                                      diag_batch);
    }
    if (count->parsed()) {
      return do_paramcount(resolve_config(count_opts, /*model_only=*/true));
    }
  } catch (const crate::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const crate::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const crate::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const crate::NotPositiveDefiniteError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const crate::ShapeError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
