#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sbmt/duplicate_task.hpp"
#include "sbmt/encoder.hpp"

namespace sbmt {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;

// Environment variable naming the root under which run directories are created.
inline constexpr const char* kOutputDirEnv = "SBMT_OUTPUT_DIR";

struct RunConfig {
  ModelConfig model;
  TaskConfig task;
  std::size_t steps = 2000;
  std::size_t checkpoint_every = 500;  // 0 disables periodic checkpoints
  std::size_t eval_batches = 4;
};

// Synthetic duplicate-token defaults: N=256, one layer and head, d=32, k=128,
// batch 256, lr 1e-3.
RunConfig default_run_config();

// Task keys: seq_len, batch_size, steps, checkpoint_every, eval_batches.
// Everything else goes to apply_config_value. vocab_size and max_seq_len are
// derived from seq_len and rejected here.
void apply_run_value(RunConfig& config, const std::string& key, const std::string& value);

// Flat key=value lines; '#' starts a comment, blank lines are skipped.
void read_run_config(std::istream& in, RunConfig& config);
std::string run_config_to_text(const RunConfig& config);

// Ties vocab, max length and task seed to seq_len and the model seed.
void finalize(RunConfig& config);

// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);
std::string hex_hash(std::uint64_t h);

struct RunManifest {
  RunConfig config;
  std::string config_hash;
  std::string command;
  std::vector<std::string> files;  // relative to the run directory
};

void write_manifest(std::ostream& out, const RunManifest& manifest);
RunManifest read_manifest(std::istream& in);

// Explicit flag, else $SBMT_OUTPUT_DIR/<default_name>, else ./runs/<default_name>.
std::filesystem::path resolve_output_dir(const std::string& flag, const std::string& default_name);

// Every command writes human-readable progress to `log` and returns an exit code.
int cmd_train(const RunConfig& config, const std::filesystem::path& out_dir, std::ostream& log);

struct EvalRequest {
  std::filesystem::path checkpoint;
  std::optional<RunConfig> config;  // compared against the checkpoint by hash
  std::size_t batches = 4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};
int cmd_eval(const EvalRequest& request, const std::filesystem::path& out_dir, std::ostream& log);

struct SampleMaskRequest {
  RunConfig config;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> sequence_file;
  bool inject_full = false;
};
int cmd_sample_mask(const SampleMaskRequest& request, const std::filesystem::path& out_dir,
                    std::ostream& log);

int cmd_verify_theory(std::size_t n, std::size_t k, std::ostream& log);

struct GradCheckRequest {
  ModelConfig model;
  std::size_t seq_len = 6;
  std::size_t batch = 1;
  double lambda = 0.5;
  double tolerance = 1e-4;
};
// n=6, d=d_h=8, k=2, one layer and head.
GradCheckRequest tiny_gradcheck();
int cmd_gradcheck(const GradCheckRequest& request, std::ostream& log);

int cmd_flops(std::size_t n, double m, std::size_t k, std::size_t d, std::ostream& out);

// Whitespace-separated token ids.
std::vector<std::uint32_t> read_sequence(std::istream& in);

}  // namespace sbmt
