#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "crate/checkpoint.hpp"
#include "crate/config.hpp"
#include "crate/trainer.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace crate;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("crate_cli_" + std::to_string(RngState(::getpid() + 2).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

int run_cli(const std::string& args, const fs::path& out_file) {
  const std::string cmd =
      std::string(CRATE_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

RunConfig tiny_synthetic_run(const std::string& out_dir) {
  RunConfig run;
  run.model.depth = 2;
  run.model.width = 16;
  run.model.heads = 4;
  run.model.overcompleteness = 2;
  run.model.num_classes = 4;
  run.model.input = InputKind::tokens;
  run.model.token_dim = 8;
  run.model.tokens_per_sample = 4;
  run.model.use_cls_token = false;
  run.data.dataset = "synthetic";
  run.data.synthetic.k_true = 4;
  run.data.synthetic.ambient = 8;
  run.data.synthetic.p_true = 2;
  run.data.synthetic.tokens_per_sample = 4;
  run.data.synthetic.train_samples = 64;
  run.data.synthetic.test_samples = 32;
  run.train.batch_size = 16;
  run.train.total_epochs = 3;
  run.train.warmup_epochs = 1;
  run.train.base_lr = 2e-3;
  run.train.label_smoothing = 0.0;
  run.diagnostics.log_every = 2;
  run.out_dir = out_dir;
  run.precision = "f64";
  return run;
}

}  // namespace

TEST_CASE("cli: paramcount prints a breakdown that sums to the total") {
  TempDir tmp;
  const auto out = tmp.path / "out.txt";
  CHECK(run_cli("paramcount --size base", out) == 0);
  const std::string text = slurp(out);
  std::int64_t total = -1, sum = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string label, extra;
    std::int64_t v;
    if (ls >> label >> v && !(ls >> extra)) {
      if (label == "total") total = v;
      else sum += v;
    }
  }
  CHECK(total > 0);
  CHECK(sum == total);
  CHECK(std::abs(static_cast<double>(total) - 72.3e6) / 72.3e6 < 0.03);
}

TEST_CASE("cli: usage errors exit with 2") {
  TempDir tmp;
  const auto out = tmp.path / "out.txt";
  CHECK(run_cli("paramcount --size enormous", out) == 2);
  CHECK(run_cli("frobnicate", out) == 2);
  CHECK(run_cli("diagnose", out) == 2);  // missing required --checkpoint
}

TEST_CASE("cli: missing cifar data exits with 3") {
  TempDir tmp;
  const auto out = tmp.path / "out.txt";
  RunConfig run;
  run.data.dataset = "cifar10";
  run.data.root = (tmp.path / "nowhere").string();
  run.out_dir = (tmp.path / "run").string();
  run.train.total_epochs = 1;
  const auto cfg = tmp.path / "config.json";
  save_run_config(cfg.string(), run);
  CHECK(run_cli("train --config " + cfg.string(), out) == 3);
}

TEST_CASE("cli: train, eval, diagnose round trip on synthetic data") {
  TempDir tmp;
  const auto out = tmp.path / "out.txt";
  RunConfig run = tiny_synthetic_run((tmp.path / "run").string());
  const auto cfg = tmp.path / "config.json";
  save_run_config(cfg.string(), run);

  CHECK(run_cli("train --config " + cfg.string(), out) == 0);
  const std::string final_ck = run.out_dir + "/checkpoint_final.bin";
  CHECK(fs::exists(final_ck));
  CHECK(fs::exists(run.out_dir + "/metrics.csv"));
  CHECK(fs::exists(run.out_dir + "/config.json"));
  CHECK(!fs::exists(run.out_dir + "/.lock"));  // released on exit

  CHECK(run_cli("eval --checkpoint " + final_ck, out) == 0);
  CHECK(slurp(out).find("test accuracy") != std::string::npos);

  CHECK(run_cli("diagnose --checkpoint " + final_ck + " --out " +
                    (tmp.path / "diag").string() + " --layers 1,2 --batch 8",
                out) == 0);
  CHECK(fs::exists(tmp.path / "diag" / "srr_report.csv"));
  const Container maps =
      read_container((tmp.path / "diag" / "attention_maps.bin").string());
  // K x N x N with 4 heads and 4 tokens (no cls)
  CHECK(maps.find("layers.00.attention").dims ==
        std::vector<std::uint64_t>{4, 4, 4});

  // attention maps are column-stochastic
  const auto flat = record_to_flat<double>(maps.find("layers.00.attention"));
  for (int head = 0; head < 4; ++head)
    for (int col = 0; col < 4; ++col) {
      double colsum = 0;
      for (int row = 0; row < 4; ++row)
        colsum += flat[static_cast<std::size_t>(head * 16 + row * 4 + col)];
      CHECK(colsum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("trainer: metrics layout and row cadence") {
  TempDir tmp;
  RunConfig run = tiny_synthetic_run((tmp.path / "m").string());
  Trainer<double> trainer(run);
  const auto summary = trainer.run();
  CHECK(summary.steps == 12);  // 64/16 * 3 epochs

  std::ifstream in(run.out_dir + "/metrics.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("# seed=", 0) == 0);
  CHECK(line.find("precision=f64") != std::string::npos);
  CHECK(line.find("beta1=") != std::string::npos);
  CHECK(line.find("version=") != std::string::npos);
  std::getline(in, line);
  CHECK(line.rfind("step,epoch,split,loss,accuracy,lr,wall_seconds", 0) == 0);
  CHECK(line.find(",r_1,") != std::string::npos);
  CHECK(line.find(",rc_2") != std::string::npos);

  int train_rows = 0, test_rows = 0, diag_rows = 0;
  while (std::getline(in, line)) {
    if (line.find(",train,") != std::string::npos) ++train_rows;
    if (line.find(",test,") != std::string::npos) ++test_rows;
    if (line.find(",diag,") != std::string::npos) ++diag_rows;
  }
  CHECK(train_rows == 6);  // 12 steps at log_every=2
  CHECK(test_rows == 3);   // one per epoch
  CHECK(diag_rows == 3);
}

TEST_CASE("trainer: resumed f64 run matches the uninterrupted one bit-exactly") {
  TempDir tmp;

  RunConfig full = tiny_synthetic_run((tmp.path / "full").string());
  Trainer<double> a(full);
  a.run();

  RunConfig half = tiny_synthetic_run((tmp.path / "half").string());
  half.diagnostics.checkpoint_every = 6;
  half.train.max_steps = 6;
  Trainer<double> b(half);
  b.run();

  RunConfig cont = tiny_synthetic_run((tmp.path / "cont").string());
  cont.diagnostics.checkpoint_every = 6;
  auto ck = load_checkpoint<double>((tmp.path / "half").string() +
                                    "/checkpoint_step00000006.bin");
  ck.run = cont;  // same run parameters, fresh output directory
  Trainer<double> c(cont);
  c.restore(std::move(ck));
  c.run();

  // identical parameters after 12 total steps
  bool same = true;
  std::vector<Mat<double>> av;
  a.model().for_each_tensor(
      [&](const std::string&, const Mat<double>& m) { av.push_back(m); });
  std::size_t i = 0;
  c.model().for_each_tensor([&](const std::string&, const Mat<double>& m) {
    if (!(av[i].rows() == m.rows() && av[i] == m)) same = false;
    ++i;
  });
  CHECK(same);
  CHECK(a.cursor().step == c.cursor().step);
}

TEST_CASE("trainer: f32 runs are deterministic across repetitions") {
  TempDir tmp;
  RunConfig r1 = tiny_synthetic_run((tmp.path / "a").string());
  r1.precision = "f32";
  RunConfig r2 = tiny_synthetic_run((tmp.path / "b").string());
  r2.precision = "f32";
  Trainer<float> a(r1), b(r2);
  a.run();
  b.run();
  std::vector<Mat<float>> av;
  a.model().for_each_tensor(
      [&](const std::string&, const Mat<float>& m) { av.push_back(m); });
  std::size_t i = 0;
  bool same = true;
  b.model().for_each_tensor([&](const std::string&, const Mat<float>& m) {
    if (!(av[i].rows() == m.rows() && av[i] == m)) same = false;
    ++i;
  });
  CHECK(same);
}

TEST_CASE("trainer: output directory lock is exclusive") {
  TempDir tmp;
  RunConfig run = tiny_synthetic_run((tmp.path / "locked").string());
  fs::create_directories(run.out_dir);
  {
    std::ofstream lock(run.out_dir + "/.lock");
    lock << "held\n";
  }
  Trainer<double> trainer(run);
  CHECK_THROWS_AS(trainer.run(), ConfigError);
}
