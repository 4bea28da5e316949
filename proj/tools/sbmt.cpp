// sbmt: train, evaluate and inspect SBM-attention encoders on the duplicate-token task.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sbmt/cli.hpp"
#include "sbmt/errors.hpp"

namespace {

// Config sources, lowest to highest precedence: defaults, --config, --set, named flags.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda, lr, delta;
  std::optional<std::size_t> steps, seq_len, batch_size, k, d, layers, heads;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one config key (key=value), repeatable");
    app->add_option("--seed", seed, "master seed");
    app->add_option("--lambda", lambda, "sparsity regularization weight");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--delta", delta, "edge exploration intensity");
    app->add_option("--steps", steps, "training steps");
    app->add_option("--seq-len", seq_len, "sequence length N");
    app->add_option("--batch-size", batch_size, "sequences per step");
    app->add_option("--k", k, "clusters per head");
    app->add_option("--d", d, "model width");
    app->add_option("--layers", layers, "encoder layers");
    app->add_option("--heads", heads, "heads per layer");
  }

  sbmt::RunConfig resolve() const {
    sbmt::RunConfig c = sbmt::default_run_config();
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      sbmt::read_run_config(in, c);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw sbmt::InputError("--set expects key=value, got '" + s + "'");
      sbmt::apply_run_value(c, s.substr(0, eq), s.substr(eq + 1));
    }
    auto put = [&](const char* key, const auto& v) {
      if (v) sbmt::apply_run_value(c, key, std::to_string(*v));
    };
    put("seed", seed);
    put("steps", steps);
    put("seq_len", seq_len);
    put("batch_size", batch_size);
    put("k", k);
    put("d", d);
    put("n_layers", layers);
    put("n_heads", heads);
    if (lambda) c.model.lambda = *lambda;
    if (lr) c.model.learning_rate = *lr;
    if (delta) c.model.delta = *delta;
    sbmt::finalize(c);
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SBM-attention transformer toolkit"};
  app.require_subcommand(1);
  std::string out_flag;
  app.add_option("--out", out_flag, "output directory (default $SBMT_OUTPUT_DIR/<command>)");

  ConfigFlags train_flags;
  auto* train = app.add_subcommand("train", "train on the duplicate-token task");
  train_flags.attach(train);

  sbmt::EvalRequest eval_req;
  std::string eval_config;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with exploration off");
  eval->add_option("checkpoint", eval_req.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--config", eval_config, "config or manifest to compare against")->check(CLI::ExistingFile);
  eval->add_option("--batches", eval_req.batches, "evaluation batches");
  eval->add_option("--batch-size", eval_req.batch_size, "sequences per batch");
  eval->add_option("--seed", eval_req.seed, "evaluation seed");

  ConfigFlags sample_flags;
  std::string sample_ckpt, sample_seq, inject;
  auto* sample = app.add_subcommand("sample-mask", "sample attention masks for one sequence");
  sample_flags.attach(sample);
  sample->add_option("--checkpoint", sample_ckpt, "load weights instead of a fresh init")->check(CLI::ExistingFile);
  sample->add_option("--input", sample_seq, "file of whitespace-separated token ids")->check(CLI::ExistingFile);
  sample->add_option("--inject", inject, "bypass sampling with a fixed mask")->check(CLI::IsMember({"full"}));

  std::size_t th_n = 16, th_k = 4;
  auto* theory = app.add_subcommand("verify-theory", "check the sparsity-pattern assumptions");
  theory->add_option("--n", th_n, "sequence length");
  theory->add_option("--k", th_k, "block size");

  sbmt::GradCheckRequest gc = sbmt::tiny_gradcheck();
  bool tiny = false;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter");
  grad->add_flag("--tiny", tiny, "n=6, d=8, k=2 (default)");
  grad->add_option("--seq-len", gc.seq_len, "sequence length");
  grad->add_option("--d", gc.model.d, "model width");
  grad->add_option("--k", gc.model.k, "clusters");
  grad->add_option("--layers", gc.model.n_layers, "layers");
  grad->add_option("--heads", gc.model.n_heads, "heads");
  grad->add_option("--lambda", gc.lambda, "sparsity weight");
  grad->add_option("--tolerance", gc.tolerance, "relative error bound");

  std::size_t fl_n = 256, fl_k = 128, fl_d = 32;
  double fl_m = 65536;
  auto* flops = app.add_subcommand("flops", "closed-form attention cost as CSV");
  flops->add_option("--n", fl_n, "sequence length");
  flops->add_option("--m", fl_m, "number of sampled edges");
  flops->add_option("--k", fl_k, "clusters");
  flops->add_option("--d", fl_d, "head width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return sbmt::kExitUsage;
  }

  try {
    if (*train) {
      const auto cfg = train_flags.resolve();
      return sbmt::cmd_train(cfg, sbmt::resolve_output_dir(out_flag, "train"), std::cout);
    }
    if (*eval) {
      if (!eval_config.empty()) {
        std::ifstream in(eval_config);
        std::string first;
        std::getline(in, first);
        in.seekg(0);
        if (first == "sbmt-manifest 1") {
          eval_req.config = sbmt::read_manifest(in).config;
        } else {
          sbmt::RunConfig c = sbmt::default_run_config();
          sbmt::read_run_config(in, c);
          eval_req.config = c;
        }
      }
      return sbmt::cmd_eval(eval_req, sbmt::resolve_output_dir(out_flag, "eval"), std::cout);
    }
    if (*sample) {
      sbmt::SampleMaskRequest req;
      req.config = sample_flags.resolve();
      if (!sample_ckpt.empty()) req.checkpoint = sample_ckpt;
      if (!sample_seq.empty()) req.sequence_file = sample_seq;
      req.inject_full = inject == "full";
      return sbmt::cmd_sample_mask(req, sbmt::resolve_output_dir(out_flag, "sample-mask"), std::cout);
    }
    if (*theory) return sbmt::cmd_verify_theory(th_n, th_k, std::cout);
    if (*grad) {
      gc.model.max_seq_len = gc.seq_len;
      gc.model.vocab_size = gc.seq_len + 1;
      gc.model.d_ff = gc.model.d;
      return sbmt::cmd_gradcheck(gc, std::cout);
    }
    if (*flops) return sbmt::cmd_flops(fl_n, fl_m, fl_k, fl_d, std::cout);
  } catch (const sbmt::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sbmt::kExitUsage;
  }
  return sbmt::kExitUsage;
}
