#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sbmt/cli.hpp"
#include "sbmt/costing.hpp"
#include "sbmt/errors.hpp"
#include "sbmt/sampler.hpp"

using namespace sbmt;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sbmt_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

RunConfig small_run() {
  RunConfig c = default_run_config();
  std::istringstream text("seq_len=8\nbatch_size=4\nsteps=6\nk=4\nd=8\nd_ff=8\ncheckpoint_every=3\n");
  read_run_config(text, c);
  return c;
}

}  // namespace

TEST_CASE("default run config is the synthetic setup") {
  const RunConfig c = default_run_config();
  CHECK(c.task.n == 256);
  CHECK(c.task.batch_size == 256);
  CHECK(c.model.n_layers == 1);
  CHECK(c.model.n_heads == 1);
  CHECK(c.model.d == 32);
  CHECK(c.model.k == 128);
  CHECK(c.model.learning_rate == 1e-3);
  CHECK(c.model.vocab_size == 257);
  CHECK(c.model.max_seq_len == 256);
  CHECK_NOTHROW(validate(c.model));
}

TEST_CASE("config text parsing, overrides and round trip") {
  RunConfig c = default_run_config();
  std::istringstream text("# comment\n\n lambda = 0.1 \nseq_len=32 # trailing\nseed=9\n");
  read_run_config(text, c);
  CHECK(c.model.lambda == 0.1);
  CHECK(c.task.n == 32);
  CHECK(c.model.vocab_size == 33);
  CHECK(c.task.seed == 9);

  RunConfig back = default_run_config();
  std::istringstream again(run_config_to_text(c));
  read_run_config(again, back);
  CHECK(run_config_to_text(back) == run_config_to_text(c));

  std::istringstream bad_key("bogus=1\n");
  CHECK_THROWS_WITH_AS(read_run_config(bad_key, c), doctest::Contains("bogus"), InputError);
  std::istringstream bad_line("lambda\n");
  CHECK_THROWS_AS(read_run_config(bad_line, c), InputError);
  CHECK_THROWS_AS(apply_run_value(c, "steps", "-3"), InputError);
  CHECK_THROWS_AS(apply_run_value(c, "vocab_size", "9"), InputError);
}

TEST_CASE("fnv1a reference values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hex_hash(0xab) == "00000000000000ab");
}

TEST_CASE("output directory resolution") {
  CHECK(resolve_output_dir("/x/y", "train") == fs::path("/x/y"));
  ::setenv(kOutputDirEnv, "/tmp/root", 1);
  CHECK(resolve_output_dir("", "train") == fs::path("/tmp/root/train"));
  ::unsetenv(kOutputDirEnv);
  CHECK(resolve_output_dir("", "train") == fs::path("runs/train"));
}

TEST_CASE("train writes reproducible artifacts and a manifest") {
  RunConfig c = small_run();
  c.model.lambda = 0.1;
  const fs::path a = scratch_dir("train_a"), b = scratch_dir("train_b");
  std::ostringstream log;
  REQUIRE(cmd_train(c, a, log) == kExitOk);
  REQUIRE(cmd_train(c, b, log) == kExitOk);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "checkpoint_final.bin") == slurp(b / "checkpoint_final.bin"));
  CHECK(fs::exists(a / "checkpoint_3.bin"));

  const std::string metrics = slurp(a / "metrics.csv");
  CHECK(metrics.rfind("step,loss,bce,accuracy,mean_density,density_l0_h0\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 7);

  std::ifstream mf(a / "manifest.txt");
  const RunManifest m = read_manifest(mf);
  CHECK(m.command == "train");
  CHECK(m.config.model.lambda == 0.1);
  CHECK(m.config_hash == hex_hash(fnv1a(run_config_to_text(c))));
  CHECK(run_config_to_text(m.config) == run_config_to_text(c));

  // The manifest alone reproduces the run.
  const fs::path r = scratch_dir("train_r");
  REQUIRE(cmd_train(m.config, r, log) == kExitOk);
  CHECK(slurp(r / "metrics.csv") == metrics);

  RunConfig other = c;
  other.model.seed = 1;
  finalize(other);
  const fs::path o = scratch_dir("train_o");
  REQUIRE(cmd_train(other, o, log) == kExitOk);
  CHECK(slurp(o / "metrics.csv") != metrics);
}

TEST_CASE("train rejects invalid configs with a usage exit") {
  RunConfig c = small_run();
  c.model.n_heads = 3;
  std::ostringstream log;
  CHECK(cmd_train(c, scratch_dir("bad"), log) == kExitUsage);
  CHECK(log.str().find("n_heads") != std::string::npos);
}

TEST_CASE("eval: determinism, schema and hash warning") {
  const RunConfig c = small_run();
  const fs::path run = scratch_dir("eval_run");
  std::ostringstream log;
  REQUIRE(cmd_train(c, run, log) == kExitOk);

  EvalRequest req;
  req.checkpoint = run / "checkpoint_final.bin";
  req.config = c;
  const fs::path a = scratch_dir("eval_a"), b = scratch_dir("eval_b");
  std::ostringstream la, lb;
  REQUIRE(cmd_eval(req, a, la) == kExitOk);
  REQUIRE(cmd_eval(req, b, lb) == kExitOk);
  CHECK(la.str().find("warning") == std::string::npos);
  CHECK(slurp(a / "eval.csv") == slurp(b / "eval.csv"));
  CHECK(slurp(a / "density.csv") == slurp(b / "density.csv"));

  std::ifstream density(a / "density.csv");
  std::string line;
  std::getline(density, line);
  CHECK(line == "layer,head,metric,value");
  std::size_t rows = 0;
  while (std::getline(density, line)) {
    ++rows;
    const double v = std::stod(line.substr(line.rfind(',') + 1));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(rows == 2 * c.model.n_layers * c.model.n_heads);

  RunConfig changed = c;
  changed.model.lambda = 0.5;
  req.config = changed;
  std::ostringstream lw;
  CHECK(cmd_eval(req, scratch_dir("eval_w"), lw) == kExitOk);
  CHECK(lw.str().find("warning") != std::string::npos);

  req.checkpoint = run / "missing.bin";
  std::ostringstream lm;
  CHECK(cmd_eval(req, scratch_dir("eval_m"), lm) == kExitUsage);
}

TEST_CASE("sample-mask: fresh density, injection, seeds and length check") {
  SampleMaskRequest req;
  req.config = default_run_config();
  std::istringstream text("seq_len=64\nk=32\n");
  read_run_config(text, req.config);
  std::ostringstream log;

  const fs::path a = scratch_dir("mask_a"), b = scratch_dir("mask_b");
  REQUIRE(cmd_sample_mask(req, a, log) == kExitOk);
  REQUIRE(cmd_sample_mask(req, b, log) == kExitOk);
  CHECK(slurp(a / "mask_l0_h0.txt") == slurp(b / "mask_l0_h0.txt"));
  std::ifstream mask_in(a / "mask_l0_h0.txt");
  const EdgeMask m = read_mask(mask_in);
  CHECK(std::abs(mask_density(m) - 0.25) <= 0.15);
  CHECK(slurp(a / "cost_l0_h0.csv").find("component,flops,bytes") != std::string::npos);

  req.config.model.seed = 5;
  const fs::path c = scratch_dir("mask_c");
  REQUIRE(cmd_sample_mask(req, c, log) == kExitOk);
  CHECK(slurp(c / "mask_l0_h0.txt") != slurp(a / "mask_l0_h0.txt"));

  req.inject_full = true;
  const fs::path f = scratch_dir("mask_f");
  REQUIRE(cmd_sample_mask(req, f, log) == kExitOk);
  std::ifstream full_in(f / "mask_l0_h0.txt");
  CHECK(mask_density(read_mask(full_in)) == 1.0);

  const fs::path seq = scratch_dir("mask_seq");
  fs::create_directories(seq);
  {
    std::ofstream out(seq / "long.txt");
    for (int i = 0; i < 65; ++i) out << 1 + i % 64 << " ";
  }
  req.sequence_file = seq / "long.txt";
  std::ostringstream le;
  CHECK(cmd_sample_mask(req, scratch_dir("mask_e"), le) == kExitUsage);
  CHECK(le.str().find("exceeds") != std::string::npos);
}

TEST_CASE("verify-theory, gradcheck and flops commands") {
  std::ostringstream log;
  CHECK(cmd_verify_theory(16, 4, log) == kExitOk);
  CHECK(log.str().find("passed: true") != std::string::npos);
  std::ostringstream bad;
  CHECK(cmd_verify_theory(10, 4, bad) == kExitUsage);

  std::ostringstream g;
  CHECK(cmd_gradcheck(tiny_gradcheck(), g) == kExitOk);
  GradCheckRequest strict = tiny_gradcheck();
  strict.tolerance = 1e-30;
  std::ostringstream gs;
  CHECK(cmd_gradcheck(strict, gs) == kExitCheckFailed);
  CHECK(gs.str().find("FAILED") != std::string::npos);

  std::ostringstream f;
  CHECK(cmd_flops(256, 65536, 128, 32, f) == kExitOk);
  std::ostringstream expected;
  write_cost_csv(expected, flops_attention(256, 65536, 128, 32));
  CHECK(f.str() == expected.str());
  std::ostringstream fneg;
  CHECK(cmd_flops(4, -1, 2, 2, fneg) == kExitUsage);
}
