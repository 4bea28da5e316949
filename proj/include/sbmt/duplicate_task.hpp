#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sbmt/encoder.hpp"
#include "sbmt/rng.hpp"

namespace sbmt {

// Sequences of N tokens drawn uniformly from {1..N}; position t is labeled 1
// iff its token occurs at least twice in the sequence.
struct TaskConfig {
  std::size_t n = 256;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
};

struct LabeledBatch {
  TokenBatch tokens;
  Matrix targets;  // batch×N of 0/1
};

// Throws DomainError for n < 2 or an empty batch.
void validate(const TaskConfig& config);

std::vector<std::uint8_t> duplicate_labels(std::span<const std::uint32_t> sequence);

LabeledBatch generate_batch(const TaskConfig& config, Rng& rng);

// Batch for training step `step`, drawn from its own data substream.
LabeledBatch batch_for_step(const TaskConfig& config, std::uint64_t step);

// P(a position is a duplicate) = 1 − (1 − 1/N)^(N−1).
double duplicate_rate(const TaskConfig& config);

// One line per sequence: space-separated tokens, " | ", space-separated labels.
void write_dataset(std::ostream& out, const LabeledBatch& batch);

}  // namespace sbmt
