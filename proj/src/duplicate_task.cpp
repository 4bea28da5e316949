#include "sbmt/duplicate_task.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "sbmt/errors.hpp"

namespace sbmt {

void validate(const TaskConfig& config) {
  if (config.n < 2) throw DomainError("TaskConfig: N must be at least 2");
  if (config.batch_size == 0) throw DomainError("TaskConfig: batch_size must be at least 1");
}

std::vector<std::uint8_t> duplicate_labels(std::span<const std::uint32_t> sequence) {
  std::uint32_t top = 0;
  for (auto v : sequence) top = std::max(top, v);
  std::vector<std::uint32_t> counts(static_cast<std::size_t>(top) + 1, 0);
  for (auto v : sequence) ++counts[v];
  std::vector<std::uint8_t> labels(sequence.size());
  for (std::size_t t = 0; t < sequence.size(); ++t) labels[t] = counts[sequence[t]] >= 2;
  return labels;
}

LabeledBatch generate_batch(const TaskConfig& config, Rng& rng) {
  validate(config);
  const std::size_t n = config.n;
  LabeledBatch out;
  out.tokens = TokenBatch{config.batch_size, n, std::vector<std::uint32_t>(config.batch_size * n)};
  out.targets = Matrix(config.batch_size, n);
  for (std::size_t b = 0; b < config.batch_size; ++b) {
    auto row = std::span<std::uint32_t>(out.tokens.ids).subspan(b * n, n);
    for (auto& id : row) id = 1 + static_cast<std::uint32_t>(rng.below(n));
    const auto labels = duplicate_labels(row);
    for (std::size_t t = 0; t < n; ++t) out.targets(b, t) = labels[t];
  }
  return out;
}

LabeledBatch batch_for_step(const TaskConfig& config, std::uint64_t step) {
  Rng rng = Rng::derive(config.seed, {static_cast<std::uint64_t>(Stream::kData), step});
  return generate_batch(config, rng);
}

double duplicate_rate(const TaskConfig& config) {
  validate(config);
  const double n = static_cast<double>(config.n);
  return 1.0 - std::pow(1.0 - 1.0 / n, n - 1.0);
}

void write_dataset(std::ostream& out, const LabeledBatch& batch) {
  const std::size_t n = batch.tokens.length;
  for (std::size_t b = 0; b < batch.tokens.batch; ++b) {
    for (std::size_t t = 0; t < n; ++t) out << (t ? " " : "") << batch.tokens.at(b, t);
    out << " |";
    for (std::size_t t = 0; t < n; ++t) out << " " << static_cast<int>(batch.targets(b, t));
    out << "\n";
  }
}

}  // namespace sbmt
