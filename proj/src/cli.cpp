#include "sbmt/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "sbmt/costing.hpp"
#include "sbmt/errors.hpp"
#include "sbmt/theory.hpp"

namespace sbmt {

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != value.size()) {
    throw InputError("config key '" + key + "': expected a non-negative integer, got '" + value +
                     "'");
  }
  return static_cast<std::size_t>(v);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::ofstream open_out(const std::filesystem::path& p, bool binary = false) {
  std::ofstream out(p, binary ? std::ios::binary : std::ios::out);
  if (!out) throw InputError("cannot open '" + p.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& p, bool binary = false) {
  std::ifstream in(p, binary ? std::ios::binary : std::ios::in);
  if (!in) throw InputError("cannot open '" + p.string() + "'");
  return in;
}

void save_checkpoint_file(const std::filesystem::path& p, const EncoderModel& model) {
  auto out = open_out(p, true);
  save_checkpoint(out, model);
}

EncoderModel load_checkpoint_file(const std::filesystem::path& p) {
  auto in = open_in(p, true);
  return load_checkpoint(in);
}

std::string head_label(std::size_t layer, std::size_t head) {
  return "l" + std::to_string(layer) + "_h" + std::to_string(head);
}

std::string fmt(double v) {
  std::ostringstream oss;
  oss << std::setprecision(17) << v;
  return oss.str();
}

// Runs a command body, mapping library errors to exit codes.
template <typename F>
int guarded(std::ostream& log, F&& body) {
  try {
    return body();
  } catch (const NonFiniteError& e) {
    log << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  } catch (const InputError& e) {
    log << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DomainError& e) {
    log << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    log << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.model.n_layers = 1;
  c.model.n_heads = 1;
  c.model.d = 32;
  c.model.d_ff = 32;
  c.model.k = 128;
  c.model.learning_rate = 1e-3;
  c.task.n = 256;
  c.task.batch_size = 256;
  finalize(c);
  return c;
}

void apply_run_value(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "seq_len") c.task.n = parse_size(key, value);
  else if (key == "batch_size") c.task.batch_size = parse_size(key, value);
  else if (key == "steps") c.steps = parse_size(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_size(key, value);
  else if (key == "eval_batches") c.eval_batches = parse_size(key, value);
  else if (key == "vocab_size" || key == "max_seq_len")
    throw InputError("config key '" + key + "' is derived from seq_len and cannot be set");
  else apply_config_value(c.model, key, value);
}

void read_run_config(std::istream& in, RunConfig& c) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                       line + "'");
    }
    apply_run_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  finalize(c);
}

void finalize(RunConfig& c) {
  c.model.vocab_size = c.task.n + 1;
  c.model.max_seq_len = c.task.n;
  c.task.seed = c.model.seed;
}

std::string run_config_to_text(const RunConfig& c) {
  std::ostringstream oss;
  oss << "seq_len=" << c.task.n << "\n"
      << "batch_size=" << c.task.batch_size << "\n"
      << "steps=" << c.steps << "\n"
      << "checkpoint_every=" << c.checkpoint_every << "\n"
      << "eval_batches=" << c.eval_batches << "\n";
  // Derived keys are dropped so the text reads back through apply_run_value.
  std::istringstream model(config_to_text(c.model));
  std::string line;
  while (std::getline(model, line)) {
    if (line.rfind("vocab_size=", 0) == 0 || line.rfind("max_seq_len=", 0) == 0) continue;
    oss << line << "\n";
  }
  return oss.str();
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex_hash(std::uint64_t h) {
  std::ostringstream oss;
  oss << std::hex << std::setw(16) << std::setfill('0') << h;
  return oss.str();
}

void write_manifest(std::ostream& out, const RunManifest& m) {
  out << "sbmt-manifest 1\n"
      << "command=" << m.command << "\n"
      << "config_hash=" << m.config_hash << "\n";
  for (const auto& f : m.files) out << "file=" << f << "\n";
  out << "[config]\n" << run_config_to_text(m.config);
}

RunManifest read_manifest(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "sbmt-manifest 1") {
    throw InputError("manifest: missing 'sbmt-manifest 1' header");
  }
  RunManifest m;
  m.config = default_run_config();
  bool in_config = false;
  std::ostringstream config_text;
  while (std::getline(in, line)) {
    if (line == "[config]") {
      in_config = true;
      continue;
    }
    if (in_config) {
      config_text << line << "\n";
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("manifest: bad line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "command") m.command = value;
    else if (key == "config_hash") m.config_hash = value;
    else if (key == "file") m.files.push_back(value);
    else throw InputError("manifest: unknown key '" + key + "'");
  }
  std::istringstream cfg(config_text.str());
  read_run_config(cfg, m.config);
  return m;
}

std::filesystem::path resolve_output_dir(const std::string& flag, const std::string& default_name) {
  if (!flag.empty()) return flag;
  if (const char* root = std::getenv(kOutputDirEnv); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / default_name;
  }
  return std::filesystem::path("runs") / default_name;
}

int cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log) {
  return guarded(log, [&] {
    validate(config.model);
    validate(config.task);
    if (config.task.n > config.model.max_seq_len) {
      throw DomainError("seq_len exceeds the model's max_seq_len");
    }
    std::filesystem::create_directories(out_dir);

    RunManifest manifest;
    manifest.config = config;
    manifest.command = "train";
    manifest.config_hash = hex_hash(fnv1a(run_config_to_text(config)));

    EncoderModel model = EncoderModel::init(config.model);
    Optimizer opt = Optimizer::for_model(model);
    const std::size_t heads = config.model.n_layers * config.model.n_heads;

    auto metrics = open_out(out_dir / "metrics.csv");
    metrics << "step,loss,bce,accuracy,mean_density";
    for (std::size_t l = 0; l < config.model.n_layers; ++l)
      for (std::size_t h = 0; h < config.model.n_heads; ++h) metrics << ",density_" << head_label(l, h);
    metrics << "\n";
    manifest.files.push_back("metrics.csv");

    std::vector<TrainMetrics> history;
    history.reserve(config.steps);
    const std::size_t log_every = std::max<std::size_t>(1, config.steps / 20);
    for (std::size_t step = 0; step < config.steps; ++step) {
      const LabeledBatch batch = batch_for_step(config.task, step);
      TrainMetrics m;
      try {
        m = train_step(model, opt, batch.tokens, batch.targets, step);
      } catch (const NonFiniteError&) {
        save_checkpoint_file(out_dir / "checkpoint_failed.bin", model);
        throw;
      }
      metrics << m.step << "," << fmt(m.loss) << "," << fmt(m.bce) << "," << fmt(m.accuracy) << ","
              << fmt(m.mean_density);
      for (std::size_t i = 0; i < heads; ++i) metrics << "," << fmt(m.head_density_mean[i]);
      metrics << "\n";
      if (step % log_every == 0 || step + 1 == config.steps) {
        log << "step " << step << " loss " << m.loss << " bce " << m.bce << " acc " << m.accuracy
            << " density " << m.mean_density << "\n";
      }
      if (config.checkpoint_every > 0 && step > 0 && step % config.checkpoint_every == 0) {
        const std::string name = "checkpoint_" + std::to_string(step) + ".bin";
        save_checkpoint_file(out_dir / name, model);
        manifest.files.push_back(name);
      }
      history.push_back(std::move(m));
    }
    metrics.close();

    save_checkpoint_file(out_dir / "checkpoint_final.bin", model);
    manifest.files.push_back("checkpoint_final.bin");
    if (!history.empty()) {
      auto density = open_out(out_dir / "density.csv");
      write_density_csv(density, density_report(history, config.model.n_layers, config.model.n_heads));
      manifest.files.push_back("density.csv");
    }
    manifest.files.push_back("manifest.txt");
    auto mf = open_out(out_dir / "manifest.txt");
    write_manifest(mf, manifest);
    log << "wrote " << out_dir.string() << "\n";
    return kExitOk;
  });
}

int cmd_eval(const EvalRequest& request, const std::filesystem::path& out_dir, std::ostream& log) {
  return guarded(log, [&] {
    const EncoderModel model = load_checkpoint_file(request.checkpoint);
    if (request.config) {
      const auto expected = hex_hash(fnv1a(config_to_text(request.config->model)));
      const auto actual = hex_hash(fnv1a(config_to_text(model.config)));
      if (expected != actual) {
        log << "warning: config hash " << expected << " does not match checkpoint " << actual
            << "; evaluating the checkpoint as stored\n";
      }
    }
    TaskConfig task;
    task.n = model.config.max_seq_len;
    task.batch_size = request.batch_size;
    task.seed = request.seed;
    validate(task);
    std::vector<TokenBatch> batches;
    std::vector<Matrix> targets;
    for (std::size_t i = 0; i < request.batches; ++i) {
      Rng rng = Rng::derive(request.seed, {static_cast<std::uint64_t>(Stream::kEval), 0, i});
      LabeledBatch b = generate_batch(task, rng);
      batches.push_back(std::move(b.tokens));
      targets.push_back(std::move(b.targets));
    }
    const EvalMetrics m = evaluate(model, batches, targets, request.seed);

    std::filesystem::create_directories(out_dir);
    {
      auto out = open_out(out_dir / "eval.csv");
      out << "metric,value\naccuracy," << fmt(m.accuracy) << "\nloss," << fmt(m.loss)
          << "\npositions," << m.positions << "\n";
    }
    std::vector<DensityRow> rows;
    for (std::size_t l = 0; l < model.config.n_layers; ++l)
      for (std::size_t h = 0; h < model.config.n_heads; ++h) {
        const std::size_t i = l * model.config.n_heads + h;
        rows.push_back({l, h, m.head_density_mean[i], m.head_density_std[i]});
      }
    auto density = open_out(out_dir / "density.csv");
    write_density_csv(density, rows);
    log << "accuracy " << m.accuracy << " loss " << m.loss << " over " << m.positions
        << " positions\n";
    return kExitOk;
  });
}

std::vector<std::uint32_t> read_sequence(std::istream& in) {
  std::vector<std::uint32_t> ids;
  std::string tok;
  while (in >> tok) ids.push_back(static_cast<std::uint32_t>(parse_size("sequence", tok)));
  return ids;
}

int cmd_sample_mask(const SampleMaskRequest& request, const std::filesystem::path& out_dir,
                    std::ostream& log) {
  return guarded(log, [&] {
    EncoderModel model = request.checkpoint ? load_checkpoint_file(*request.checkpoint)
                                            : EncoderModel::init(request.config.model);
    if (request.checkpoint) model.config.seed = request.config.model.seed;

    std::vector<std::uint32_t> ids;
    if (request.sequence_file) {
      auto in = open_in(*request.sequence_file);
      ids = read_sequence(in);
    } else {
      TaskConfig task{model.config.max_seq_len, 1, model.config.seed};
      Rng rng = Rng::derive(model.config.seed, {static_cast<std::uint64_t>(Stream::kData), 0});
      ids = generate_batch(task, rng).tokens.ids;
    }
    if (ids.empty()) throw InputError("sample-mask: empty input sequence");
    if (ids.size() > model.config.max_seq_len) {
      throw InputError("sample-mask: sequence length " + std::to_string(ids.size()) +
                       " exceeds max_seq_len " + std::to_string(model.config.max_seq_len));
    }
    const std::size_t n = ids.size();
    const TokenBatch batch{1, n, ids};

    std::vector<EdgeMask> full;
    ForwardOptions opt;
    opt.count_ops = true;
    if (request.inject_full) {
      full.assign(model.config.n_layers * model.config.n_heads, EdgeMask::full(n, n));
      opt.injected_masks = &full;
    }
    const ModelForward fwd = model_forward(model, batch, opt);

    std::filesystem::create_directories(out_dir);
    const auto& trace = fwd.traces.front();
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
      for (std::size_t h = 0; h < trace.layers[l].heads.size(); ++h) {
        const HeadForwardTrace& ht = trace.layers[l].heads[h];
        const std::string label = head_label(l, h);
        {
          auto out = open_out(out_dir / ("mask_" + label + ".txt"));
          write_mask(out, ht.mask);
        }
        auto cost = open_out(out_dir / ("cost_" + label + ".csv"));
        write_cost_csv(cost, instrument_forward(ht));
        log << label << " edges " << ht.mask.num_edges() << " density " << ht.density << "\n";
      }
    }
    log << "mean density " << fwd.mean_density << "\n";
    return kExitOk;
  });
}

int cmd_verify_theory(std::size_t n, std::size_t k, std::ostream& log) {
  return guarded(log, [&] {
    const TheoryPatterns p = build_patterns(n, k);
    const AssumptionReport r = verify_assumption1({p.a1, p.a2, p.a3});
    log << format_report(r);
    if (!r.passed()) {
      if (!r.condition1) log << "failed: condition1 (self loops)\n";
      if (!r.condition2) log << "failed: condition2 (hamiltonian path)\n";
      if (!r.condition3) log << "failed: condition3 (reachability)\n";
      return kExitCheckFailed;
    }
    if (r.best_s > 3) {
      log << "failed: best_s " << r.best_s << " > 3\n";
      return kExitCheckFailed;
    }
    return kExitOk;
  });
}

GradCheckRequest tiny_gradcheck() {
  GradCheckRequest r;
  r.model.n_layers = 1;
  r.model.n_heads = 1;
  r.model.d = 8;
  r.model.d_ff = 8;
  r.model.k = 2;
  r.model.vocab_size = 7;
  r.model.max_seq_len = 6;
  r.seq_len = 6;
  return r;
}

int cmd_gradcheck(const GradCheckRequest& request, std::ostream& log) {
  return guarded(log, [&] {
    FiniteDiffOptions fd;
    fd.tolerance = request.tolerance;
    const GradCheckResult r =
        model_gradcheck(request.model, request.seq_len, request.batch, request.lambda, fd);
    for (const auto& p : r.params) {
      log << (p.passed ? "ok     " : "FAILED ") << p.name << " checked " << p.checked
          << " max_rel_error " << p.max_rel_error << "\n";
    }
    log << "max_rel_error " << r.max_rel_error << " tolerance " << request.tolerance << "\n";
    return r.passed ? kExitOk : kExitCheckFailed;
  });
}

int cmd_flops(std::size_t n, double m, std::size_t k, std::size_t d, std::ostream& out) {
  return guarded(out, [&] {
    write_cost_csv(out, flops_attention(n, m, k, d));
    return kExitOk;
  });
}

}  // namespace sbmt
