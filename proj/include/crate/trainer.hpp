#pragma once

#include "crate/checkpoint.hpp"
#include "crate/config.hpp"
#include "crate/data.hpp"
#include "crate/model.hpp"
#include "crate/optim.hpp"
#include "crate/srr.hpp"
#include "crate/tape.hpp"

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

namespace crate {

namespace fs = std::filesystem;

/// Exclusive ownership of an output directory for the duration of a run.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      throw ConfigError("output directory is locked by " + path_ +
                        " (another run owns it; remove the stale lock to proceed)");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
    held_ = true;
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  ~DirLock() {
    if (held_) std::remove(path_.c_str());
  }

 private:
  std::string path_;
  bool held_ = false;
};

template <class S>
struct PreparedData {
  Dataset<S> train, test;
  ChannelStats stats;  // empty for token datasets
};

template <class S>
PreparedData<S> prepare_data(const RunConfig& run) {
  PreparedData<S> out;
  if (run.data.dataset == "cifar10") {
    const std::string root = run.data.resolved_root();
    if (root.empty())
      throw DataError("cifar10 root not set; pass data.root or export " +
                      std::string(kDataEnvVar));
    out.train = load_cifar10<S>(root, "train",
                                static_cast<std::size_t>(run.data.max_train));
    out.test =
        load_cifar10<S>(root, "test", static_cast<std::size_t>(run.data.max_test));
    out.stats = compute_channel_stats(out.train);
  } else {
    auto spec = run.data.synthetic;
    if (run.data.max_train > 0)
      spec.train_samples = std::min(spec.train_samples, run.data.max_train);
    if (run.data.max_test > 0)
      spec.test_samples = std::min(spec.test_samples, run.data.max_test);
    out.train = gen_subspace_data<S>(spec, run.train.seed, "train", spec.train_samples);
    out.test = gen_subspace_data<S>(spec, run.train.seed, "test", spec.test_samples);
  }
  if (out.train.size() == 0 || out.test.size() == 0)
    throw DataError("empty dataset after applying limits");
  return out;
}

struct LayerRateRow {
  int layer = 0;  // 1-based; rates are measured on this layer's output
  double r = 0, rc = 0;            // raw features, Eq-faithful report
  double r_unit = 0, rc_unit = 0;  // unit-norm tokens, comparable across depth
  double l1 = 0, l0 = 0, srr = 0;
};

/// Rates are scale-covariant and the residual stream grows with depth, so the
/// table carries both the raw values and values on l2-normalized tokens; only
/// the latter compare compression across layers.
template <class S>
std::vector<LayerRateRow> layer_rate_table(const ModelState<S>& model,
                                           const std::vector<Mat<S>>& batch) {
  const ForwardTrace<S> ft = forward(model, batch, /*diagnostics=*/true);
  const int L = model.config.depth;
  std::vector<LayerRateRow> rows(static_cast<std::size_t>(L));
  RateParams<S> params{static_cast<S>(model.config.epsilon),
                       static_cast<S>(model.config.lambda)};
  for (int l = 0; l < L; ++l) {
    auto& row = rows[static_cast<std::size_t>(l)];
    row.layer = l + 1;
    const auto bases = model.bases_at(l);
    for (const auto& trace : ft.traces) {
      const auto& out = trace[static_cast<std::size_t>(l)].output;
      const auto rep = srr_objective(out, bases.heads, params);
      row.r += rep.rate;
      row.rc += rep.rate_proj;
      row.l1 += rep.l1;
      row.srr += rep.srr;
      row.l0 += l0_fraction(out);
      Mat<S> unit = out;
      for (Eigen::Index j = 0; j < unit.cols(); ++j) {
        const S norm = unit.col(j).norm();
        if (norm > S(0)) unit.col(j) /= norm;
      }
      row.r_unit += rate_R(unit, params.epsilon);
      row.rc_unit += rate_Rc(unit, bases.heads, params.epsilon).first;
    }
    const double n = static_cast<double>(ft.traces.size());
    row.r /= n;
    row.rc /= n;
    row.r_unit /= n;
    row.rc_unit /= n;
    row.l1 /= n;
    row.srr /= n;
    row.l0 /= n;
  }
  return rows;
}

struct EvalResult {
  double loss = 0, accuracy = 0;
};

struct TrainSummary {
  double init_train_loss = 0, final_train_loss = 0;
  double test_loss = 0, test_accuracy = 0;
  std::int64_t steps = 0;
  std::string final_checkpoint;
};

namespace detail {

class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool append, const std::string& comment,
                int depth)
      : out_(path, append ? std::ios::app : std::ios::out), depth_(depth) {
    if (!out_) throw DataError("cannot open metrics file " + path);
    out_ << std::setprecision(10);
    if (!append) {
      out_ << comment << '\n';
      out_ << "step,epoch,split,loss,accuracy,lr,wall_seconds";
      for (int l = 1; l <= depth_; ++l) out_ << ",r_" << l;
      for (int l = 1; l <= depth_; ++l) out_ << ",rc_" << l;
      for (int l = 1; l <= depth_; ++l) out_ << ",l0_" << l;
      out_ << '\n';
    }
  }

  void row(std::int64_t step, int epoch, const std::string& split, double loss,
           double acc, double lr, double wall,
           const std::vector<LayerRateRow>* rates = nullptr) {
    out_ << step << ',' << epoch << ',' << split << ',' << loss << ',' << acc << ','
         << lr << ',' << wall;
    if (rates) {
      for (const auto& r : *rates) out_ << ',' << r.r_unit;
      for (const auto& r : *rates) out_ << ',' << r.rc_unit;
      for (const auto& r : *rates) out_ << ',' << r.l0;
    } else {
      for (int i = 0; i < 3 * depth_; ++i) out_ << ',';
    }
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
  int depth_;
};

inline std::string metrics_comment(const RunConfig& run) {
  std::ostringstream os;
  os << "# seed=" << run.train.seed << " precision=" << run.precision
     << " version=" << kToolVersion << " rng=" << RngState::kAlgorithm
     << " base_lr=" << run.train.effective_base_lr() << " min_lr=" << run.train.min_lr
     << " weight_decay=" << run.train.weight_decay << " beta1=" << run.train.beta1
     << " beta2=" << run.train.beta2 << " eps_opt=" << run.train.eps_opt
     << " clip_norm=" << run.train.clip_norm
     << " label_smoothing=" << run.train.label_smoothing
     << " warmup_epochs=" << run.train.warmup_epochs
     << " total_epochs=" << run.train.total_epochs
     << " batch_size=" << run.train.batch_size
     << " epsilon=" << run.model.epsilon << " eta=" << run.model.eta
     << " lambda=" << run.model.lambda;
  return os.str();
}

}  // namespace detail

template <class S>
class Trainer {
 public:
  explicit Trainer(RunConfig run) : run_(std::move(run)) {
    run_.validate();
    data_ = prepare_data<S>(run_);
    model_ = init<S>(run_.model, RngState(run_.train.seed));
    opt_ = init_opt_state(model_);
    const auto spe = steps_per_epoch();
    if (spe < 1)
      throw ConfigError("train.batch_size exceeds the training set size");
  }

  /// Replace model/optimizer/cursor with checkpoint contents.
  void restore(LoadedCheckpoint<S> ck) {
    model_ = std::move(ck.model);
    opt_ = std::move(ck.opt);
    cursor_ = ck.cursor;
    if (!ck.stats.mean.empty()) data_.stats = std::move(ck.stats);
  }

  std::int64_t steps_per_epoch() const {
    return static_cast<std::int64_t>(data_.train.size()) / run_.train.batch_size;
  }

  std::int64_t planned_steps() const {
    return steps_per_epoch() * run_.train.total_epochs;
  }

  /// max_steps stops execution early but never reshapes the schedule, so an
  /// interrupted run retraces the uninterrupted one step for step.
  std::int64_t stop_steps() const {
    const std::int64_t total = planned_steps();
    if (run_.train.max_steps > 0)
      return std::min<std::int64_t>(total, run_.train.max_steps);
    return total;
  }

  LrSchedule schedule() const {
    LrSchedule s;
    s.base = run_.train.effective_base_lr();
    s.min = run_.train.min_lr;
    s.total_steps = planned_steps();
    s.warmup_steps =
        std::min<std::int64_t>(steps_per_epoch() * run_.train.warmup_epochs,
                               s.total_steps);
    return s;
  }

  TrainSummary run() {
    DirLock lock(run_.out_dir);
    const bool resumed = cursor_.step > 0;
    save_run_config((fs::path(run_.out_dir) / "config.json").string(), run_);
    if (!data_.stats.mean.empty())
      save_channel_stats((fs::path(run_.out_dir) / "channel_stats.txt").string(),
                         data_.stats);
    detail::MetricsWriter metrics((fs::path(run_.out_dir) / "metrics.csv").string(),
                                  resumed, detail::metrics_comment(run_),
                                  run_.model.depth);
    const auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
    };

    TrainSummary summary;
    summary.init_train_loss =
        evaluate_split(data_.train, run_.train.label_smoothing).loss;

    const auto sched = schedule();
    const auto stop = stop_steps();
    const auto spe = steps_per_epoch();
    const int n_train = static_cast<int>(data_.train.size());
    if (cursor_.step_in_epoch >= spe) {  // normalized epoch boundary
      cursor_.epoch += 1;
      cursor_.step_in_epoch = 0;
    }

    for (int epoch = cursor_.epoch; epoch < run_.train.total_epochs; ++epoch) {
      const auto order = shuffle_order(run_.train.seed, epoch, n_train);
      std::int64_t b = (epoch == cursor_.epoch) ? cursor_.step_in_epoch : 0;
      for (; b < spe && cursor_.step < stop; ++b) {
        std::vector<int> idx(order.begin() + b * run_.train.batch_size,
                             order.begin() + (b + 1) * run_.train.batch_size);
        const double lr = lr_at(cursor_.step + 1, sched);
        const auto [loss, acc] = train_step(idx, epoch, lr);
        if (!std::isfinite(loss))
          throw NumericalError("training loss became non-finite at step " +
                               std::to_string(cursor_.step + 1));
        cursor_.step += 1;
        cursor_.step_in_epoch = static_cast<int>(b) + 1;
        cursor_.epoch = epoch;
        if (cursor_.step % run_.diagnostics.log_every == 0)
          metrics.row(cursor_.step, epoch, "train", loss, acc, lr, wall());
        if (run_.diagnostics.checkpoint_every > 0 &&
            cursor_.step % run_.diagnostics.checkpoint_every == 0)
          save(step_checkpoint_path(cursor_.step));
      }
      if (cursor_.step_in_epoch >= spe) {
        cursor_.epoch = epoch + 1;
        cursor_.step_in_epoch = 0;
      }
      const EvalResult ev = evaluate_split(data_.test, 0.0);
      metrics.row(cursor_.step, epoch, "test", ev.loss, ev.accuracy, 0.0, wall());
      if (run_.diagnostics.rate_every_epochs > 0 &&
          (epoch + 1) % run_.diagnostics.rate_every_epochs == 0) {
        const auto rates = layer_rate_table(model_, diag_batch());
        metrics.row(cursor_.step, epoch, "diag", 0.0, 0.0, 0.0, wall(), &rates);
      }
      if (run_.diagnostics.checkpoint_every == 0) save(step_checkpoint_path(cursor_.step));
      if (cursor_.step >= stop) break;
    }

    summary.final_train_loss =
        evaluate_split(data_.train, run_.train.label_smoothing).loss;
    const EvalResult fin = evaluate_split(data_.test, 0.0);
    summary.test_loss = fin.loss;
    summary.test_accuracy = fin.accuracy;
    summary.steps = cursor_.step;
    summary.final_checkpoint = (fs::path(run_.out_dir) / "checkpoint_final.bin").string();
    save(summary.final_checkpoint);
    return summary;
  }

  EvalResult evaluate_split(const Dataset<S>& ds, double smoothing,
                            std::size_t cap = 0) const {
    const std::size_t n = cap > 0 ? std::min(cap, ds.size()) : ds.size();
    EvalResult out;
    std::size_t done = 0;
    while (done < n) {
      const std::size_t chunk = std::min<std::size_t>(256, n - done);
      std::vector<Mat<S>> inputs;
      std::vector<int> labels;
      inputs.reserve(chunk);
      labels.reserve(chunk);
      for (std::size_t i = 0; i < chunk; ++i) {
        inputs.push_back(sample_input(ds, static_cast<int>(done + i), false, 0));
        labels.push_back(ds.labels[done + i]);
      }
      const ForwardTrace<S> ft = forward(model_, inputs);
      out.loss += static_cast<double>(
                      smoothed_ce(ft.logits, labels, static_cast<S>(smoothing))) *
                  static_cast<double>(chunk);
      out.accuracy += accuracy(ft.logits, labels) * static_cast<double>(chunk);
      done += chunk;
    }
    out.loss /= static_cast<double>(n);
    out.accuracy /= static_cast<double>(n);
    return out;
  }

  std::vector<Mat<S>> diag_batch() const {
    const std::size_t n =
        std::min<std::size_t>(data_.test.size(),
                              static_cast<std::size_t>(run_.diagnostics.rate_batch));
    std::vector<Mat<S>> batch;
    batch.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      batch.push_back(sample_input(data_.test, static_cast<int>(i), false, 0));
    return batch;
  }

  Mat<S> sample_input(const Dataset<S>& ds, int idx, bool augment, int epoch) const {
    if (ds.kind == InputKind::tokens) return ds.tokens[static_cast<std::size_t>(idx)];
    Vec<S> img = ds.images[static_cast<std::size_t>(idx)];
    if (augment) {
      RngState rng = RngState(run_.train.seed)
                         .derive({0xa46ULL, static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(idx)});
      img = augment_crop_flip(img, ds.channels, ds.side, 4, rng);
    }
    img = normalize_image(img, ds.channels, ds.side, data_.stats);
    return extract_patches(run_.model, img);
  }

  const ModelState<S>& model() const { return model_; }
  ModelState<S>& model() { return model_; }
  const OptState<S>& opt() const { return opt_; }
  const TrainCursor& cursor() const { return cursor_; }
  const RunConfig& config() const { return run_; }
  const PreparedData<S>& data() const { return data_; }

  void save(const std::string& path) const {
    TrainCursor c = cursor_;
    c.opt_step = opt_.step;
    save_checkpoint(path, run_, model_, opt_, c,
                    data_.stats.mean.empty() ? nullptr : &data_.stats);
  }

  std::string step_checkpoint_path(std::int64_t step) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint_step%08lld.bin",
                  static_cast<long long>(step));
    return (fs::path(run_.out_dir) / buf).string();
  }

 private:
  /// One optimizer step over a batch. Gradients accumulate per shard in index
  /// order and shards merge in index order, so the result does not depend on
  /// the number of worker threads.
  std::pair<double, double> train_step(const std::vector<int>& idx, int epoch,
                                       double lr) {
    const int B = static_cast<int>(idx.size());
    const int shards = std::min(run_.train.num_shards, B);

    struct ShardOut {
      std::vector<Mat<S>> grads;
      double loss_sum = 0;
      int hits = 0;
    };
    std::vector<ShardOut> outs(static_cast<std::size_t>(shards));

    auto process = [&](int s) {
      const int lo = static_cast<int>(static_cast<std::int64_t>(s) * B / shards);
      const int hi = static_cast<int>(static_cast<std::int64_t>(s + 1) * B / shards);
      Tape<S> tape;
      const TapeModel<S> tm = make_leaves(tape, model_);
      Var<S> total;
      ShardOut& so = outs[static_cast<std::size_t>(s)];
      for (int i = lo; i < hi; ++i) {
        const Mat<S> input = sample_input(data_.train, idx[static_cast<std::size_t>(i)],
                                          run_.data.augment, epoch);
        Var<S> logits = forward_sample_tape(tape, tm, run_.model, input);
        Eigen::Index best = 0;
        logits.value().col(0).maxCoeff(&best);
        if (static_cast<int>(best) == data_.train.labels[static_cast<std::size_t>(
                                          idx[static_cast<std::size_t>(i)])])
          so.hits += 1;
        Var<S> loss = smoothed_ce(
            logits,
            std::vector<int>{
                data_.train.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]},
            static_cast<S>(run_.train.label_smoothing));
        total = total.valid() ? total + loss : loss;
      }
      tape.backward(total);
      so.loss_sum = static_cast<double>(total.value()(0, 0));
      so.grads.reserve(tm.ordered.size());
      for (const auto& leaf : tm.ordered) so.grads.push_back(tape.grad(leaf));
    };

    const int workers = std::min(run_.train.threads, shards);
    if (workers <= 1) {
      for (int s = 0; s < shards; ++s) process(s);
    } else {
      std::atomic<int> next{0};
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(workers));
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (int s = next.fetch_add(1); s < shards; s = next.fetch_add(1)) process(s);
        });
      for (auto& th : pool) th.join();
    }

    if (grads_.empty()) {
      model_.for_each_tensor([&](const std::string&, const Mat<S>& t) {
        grads_.push_back(Mat<S>::Zero(t.rows(), t.cols()));
      });
    } else {
      for (auto& g : grads_) g.setZero();
    }
    double loss_sum = 0;
    int hits = 0;
    for (const auto& so : outs) {
      for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += so.grads[i];
      loss_sum += so.loss_sum;
      hits += so.hits;
    }
    const S inv_b = S(1) / static_cast<S>(B);
    for (auto& g : grads_) g *= inv_b;

    opt_step(model_, opt_, grads_, lr, run_.train);
    return {loss_sum / B, static_cast<double>(hits) / B};
  }

  RunConfig run_;
  PreparedData<S> data_;
  ModelState<S> model_;
  OptState<S> opt_;
  TrainCursor cursor_;
  std::vector<Mat<S>> grads_;
};

struct AblationRow {
  std::string variant;
  std::int64_t params = 0;
  std::int64_t steps = 0;
  double init_train_loss = 0, final_train_loss = 0;
  double test_loss = 0, test_accuracy = 0;
};

/// Runs the four-block ladder under one seed and data order; per-variant
/// outputs land in subdirectories and the comparison table in ablation.csv.
template <class S>
std::vector<AblationRow> run_ablation(const RunConfig& base, std::ostream& log) {
  static constexpr BlockVariant kLadder[] = {
      BlockVariant::vanilla, BlockVariant::overcomplete, BlockVariant::decoupled,
      BlockVariant::residual};
  fs::create_directories(base.out_dir);
  std::vector<AblationRow> rows;
  for (BlockVariant v : kLadder) {
    RunConfig run = base;
    run.model.variant = v;
    run.out_dir = (fs::path(base.out_dir) / to_string(v)).string();
    log << "ablate: training variant " << to_string(v) << "\n" << std::flush;
    Trainer<S> trainer(run);
    const TrainSummary s = trainer.run();
    AblationRow row;
    row.variant = to_string(v);
    row.params = paramcount(run.model).total();
    row.steps = s.steps;
    row.init_train_loss = s.init_train_loss;
    row.final_train_loss = s.final_train_loss;
    row.test_loss = s.test_loss;
    row.test_accuracy = s.test_accuracy;
    rows.push_back(row);
  }
  std::ofstream table((fs::path(base.out_dir) / "ablation.csv").string());
  if (!table) throw DataError("cannot write ablation.csv");
  table << std::setprecision(10);
  table << "variant,params,steps,init_train_loss,final_train_loss,test_loss,test_"
           "accuracy\n";
  for (const auto& r : rows)
    table << r.variant << ',' << r.params << ',' << r.steps << ','
          << r.init_train_loss << ',' << r.final_train_loss << ',' << r.test_loss
          << ',' << r.test_accuracy << '\n';
  for (const auto& r : rows)
    log << "ablate: " << r.variant << " params=" << r.params
        << " init_loss=" << r.init_train_loss << " final_loss=" << r.final_train_loss
        << " test_acc=" << r.test_accuracy << "\n";
  return rows;
}

/// Per-layer rate table plus attention-map export for a trained checkpoint.
template <class S>
std::vector<LayerRateRow> run_diagnose(const LoadedCheckpoint<S>& ck,
                                       const std::string& out_dir,
                                       const std::vector<int>& layer_selection,
                                       int batch_size) {
  fs::create_directories(out_dir);
  RunConfig run = ck.run;
  PreparedData<S> data = prepare_data<S>(run);
  if (!ck.stats.mean.empty()) data.stats = ck.stats;

  const std::size_t n =
      std::min<std::size_t>(data.test.size(), static_cast<std::size_t>(batch_size));
  std::vector<Mat<S>> batch;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    if (data.test.kind == InputKind::tokens) {
      batch.push_back(data.test.tokens[i]);
    } else {
      Vec<S> img = normalize_image(data.test.images[i], data.test.channels,
                                   data.test.side, data.stats);
      batch.push_back(extract_patches(run.model, img));
    }
    labels.push_back(data.test.labels[i]);
  }

  const auto rows = layer_rate_table(ck.model, batch);
  {
    std::ofstream csv((fs::path(out_dir) / "srr_report.csv").string());
    if (!csv) throw DataError("cannot write srr_report.csv");
    csv << std::setprecision(10) << "layer,r,rc,r_unit,rc_unit,l1,l0_fraction,srr\n";
    for (const auto& r : rows)
      csv << r.layer << ',' << r.r << ',' << r.rc << ',' << r.r_unit << ','
          << r.rc_unit << ',' << r.l1 << ',' << r.l0 << ',' << r.srr << '\n';
  }

  // Attention maps of the first sample, one rank-3 tensor per selected layer.
  const ForwardTrace<S> ft = forward(ck.model, {batch.front()}, true);
  std::vector<TensorRecord> tensors;
  const auto seq = static_cast<std::uint64_t>(run.model.seq_len());
  for (int l : layer_selection) {
    const auto& attn = ft.traces[0][static_cast<std::size_t>(l - 1)].attention;
    std::vector<S> flat;
    flat.reserve(attn.size() * seq * seq);
    for (const auto& a : attn)
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) flat.push_back(a(i, j));
    char name[48];
    std::snprintf(name, sizeof name, "layers.%02d.attention", l - 1);
    tensors.push_back(to_record(name, {attn.size(), seq, seq}, flat));

    if (run.model.use_cls_token && run.model.input == InputKind::image) {
      const auto g = static_cast<std::uint64_t>(run.model.grid_side());
      std::vector<S> grid;
      grid.reserve(attn.size() * g * g);
      for (const auto& a : attn)
        for (std::uint64_t i = 0; i < g * g; ++i)
          grid.push_back(a(static_cast<Eigen::Index>(i) + 1, 0));
      std::snprintf(name, sizeof name, "layers.%02d.cls_grid", l - 1);
      tensors.push_back(to_record(name, {attn.size(), g, g}, grid));
    }
  }
  json header;
  header["kind"] = "attention_maps";
  header["precision"] = precision_name<S>();
  header["layers"] = layer_selection;
  header["heads"] = run.model.heads;
  header["seq_len"] = run.model.seq_len();
  write_container((fs::path(out_dir) / "attention_maps.bin").string(), header, tensors);
  return rows;
}

}  // namespace crate
