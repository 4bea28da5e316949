#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "sbmt/attention.hpp"
#include "sbmt/matrix.hpp"
#include "sbmt/numerics.hpp"
#include "sbmt/rng.hpp"

namespace sbmt {

enum class Pooling { kNone, kMean };

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t d = 32;
  std::size_t d_ff = 32;
  std::size_t k = 32;
  std::size_t vocab_size = 65;  // includes the padding id 0
  std::size_t max_seq_len = 64;
  double dropout = 0.0;
  double attn_dropout = 0.0;
  double delta = 0.01;
  double lambda = 0.0;
  bool self_loops = false;
  Pooling pooling = Pooling::kNone;
  EdgeLaw edge_law = EdgeLaw::kExact;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d / n_heads; }
};

// Throws DomainError naming the offending field.
void validate(const ModelConfig& config);

inline constexpr std::uint32_t kPadId = 0;

// Row-major batch of token ids; kPadId marks padding.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint32_t> ids;

  std::uint32_t at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
};

struct EncoderLayer {
  std::vector<AttentionHead> heads;
  Matrix w_out, b_out;  // d×d, 1×d
  Matrix ln1_gain, ln1_bias;
  Matrix ffn_w1, ffn_b1;  // d×d_ff, 1×d_ff
  Matrix ffn_w2, ffn_b2;  // d_ff×d, 1×d
  Matrix ln2_gain, ln2_bias;
};

// Post-norm encoder with learned positional embeddings and a one-logit
// classifier, applied per token or after mean pooling.
struct EncoderModel {
  ModelConfig config;
  Matrix token_embedding;     // vocab×d
  Matrix position_embedding;  // max_seq_len×d
  std::vector<EncoderLayer> layers;
  Matrix classifier_w;  // d×1
  Matrix classifier_b;  // 1×1

  static EncoderModel init(const ModelConfig& config);
  // Same shapes, every parameter zero. Used as the gradient container.
  static EncoderModel zeros_like(const EncoderModel& model);

  // Stable ordering shared by optimizers, checkpoints and gradient checks.
  std::vector<std::pair<std::string, Matrix*>> named_parameters();
  std::vector<std::pair<std::string, const Matrix*>> named_parameters() const;
  std::size_t parameter_count() const;
};

struct LayerTrace {
  Matrix input;
  std::vector<HeadForwardTrace> heads;
  Matrix concat;
  Matrix attn_keep;  // dropout multipliers, empty when inactive
  LayerNormCache ln1;
  Matrix y1;
  Matrix ffn_pre;
  Matrix ffn_hidden;
  Matrix ffn_keep;
  LayerNormCache ln2;
  Matrix y2;
};

struct ExampleTrace {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint8_t> valid;
  Matrix embed_keep;
  std::vector<LayerTrace> layers;
  Matrix pooled;  // 1×d under mean pooling
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t step = 0;
  Stream stream = Stream::kSample;
  // Frozen masks, one per (example, layer, head) in that nesting order.
  const std::vector<EdgeMask>* injected_masks = nullptr;
  // Surrogate anchors aligned with injected_masks (see HeadForwardOptions).
  const std::vector<std::vector<double>>* ste_anchors = nullptr;
  bool count_ops = false;
};

struct ModelForward {
  Matrix logits;  // batch×length, or batch×1 under mean pooling
  std::vector<ExampleTrace> traces;
  std::vector<double> densities;  // per (example, layer, head)
  double mean_density = 0.0;
  // Mean of Σm̃ / n² over masks; equals mean_density outside surrogate mode.
  double mean_mask_mass = 0.0;
  std::size_t num_masks() const { return densities.size(); }
};

ModelForward model_forward(const EncoderModel& model, const TokenBatch& batch,
                           const ForwardOptions& options = {});

// Positions that contribute to the loss: valid tokens (token level) or
// one per sequence (mean pooling).
Matrix loss_mask(const EncoderModel& model, const TokenBatch& batch);

struct LossBreakdown {
  double total = 0.0;
  double bce = 0.0;
  double density = 0.0;
  Matrix grad_logits;
};

// BCE over loss_mask positions plus λ · mean mask mass.
LossBreakdown model_loss(const EncoderModel& model, const TokenBatch& batch,
                         const ModelForward& forward, const Matrix& targets, double lambda);

// Gradients of model_loss wrt every parameter, in an EncoderModel-shaped container.
EncoderModel model_backward(const EncoderModel& model, const ModelForward& forward,
                            const Matrix& grad_logits, double lambda);

struct Optimizer {
  std::vector<AdamState> states;
  static Optimizer for_model(EncoderModel& model);
};

struct TrainMetrics {
  std::uint64_t step = 0;
  double loss = 0.0;
  double bce = 0.0;
  double accuracy = 0.0;
  double mean_density = 0.0;
  // Per (layer, head): mean and population std across the batch.
  std::vector<double> head_density_mean;
  std::vector<double> head_density_std;
  double wall_seconds = 0.0;
  double attention_flops = 0.0;
};

// Forward, loss, backward and one Adam update. Throws NonFiniteError with a
// diagnostic dump when the loss is not finite.
TrainMetrics train_step(EncoderModel& model, Optimizer& optimizer, const TokenBatch& batch,
                        const Matrix& targets, std::uint64_t step);

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t positions = 0;
  std::vector<double> head_density_mean;
  std::vector<double> head_density_std;
};

// Inference mode (no exploration, no dropout) over every batch; densities are
// aggregated per head across all sampled masks.
EvalMetrics evaluate(const EncoderModel& model, const std::vector<TokenBatch>& batches,
                     const std::vector<Matrix>& targets, std::uint64_t seed);

// Checkpoint: a text manifest (config, then "name rows cols offset" lines)
// terminated by "end", followed by little-endian f32 payloads, row-major.
void save_checkpoint(std::ostream& out, const EncoderModel& model);
EncoderModel load_checkpoint(std::istream& in);

// Config as flat key=value lines, and the inverse. Unknown keys raise InputError.
std::string config_to_text(const ModelConfig& config);
void apply_config_value(ModelConfig& config, const std::string& key, const std::string& value);

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckResult {
  bool passed = true;
  double max_rel_error = 0.0;
  std::vector<ParamCheck> params;
};

// Frozen-mask, surrogate-anchored finite-difference check of every model
// parameter on random tokens and targets.
GradCheckResult model_gradcheck(const ModelConfig& config, std::size_t seq_len,
                                std::size_t batch, double lambda,
                                const FiniteDiffOptions& options);

}  // namespace sbmt
