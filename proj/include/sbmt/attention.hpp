#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sbmt/matrix.hpp"
#include "sbmt/rng.hpp"
#include "sbmt/sampler.hpp"

namespace sbmt {

// Learnable parameters of one SBM attention head.
struct AttentionHead {
  Matrix w_query;  // d×d_h
  Matrix w_key;    // d×d_h
  Matrix w_value;  // d×d_h
  // Shared 2-layer MLP (d_h→d_h→d_h, ReLU between) applied to Q and K.
  Matrix mlp_w1;  // d_h×d_h
  Matrix mlp_b1;  // 1×d_h
  Matrix mlp_w2;  // d_h×d_h
  Matrix mlp_b2;  // 1×d_h
  Matrix clusters;  // k×d_h cluster embeddings C
  double delta = 0.0;  // exploration intensity added during training
  bool self_loops = false;

  std::size_t model_dim() const { return w_query.rows(); }
  std::size_t head_dim() const { return w_query.cols(); }
  std::size_t num_clusters() const { return clusters.rows(); }

  // W^{Q,K,V} ~ N(0, 0.02²); MLP weights and C Kaiming-normal; biases zero.
  static AttentionHead init(std::size_t d, std::size_t d_h, std::size_t k, Rng& rng,
                            double delta = 0.0, bool self_loops = false);
};

// Throws ShapeError/DomainError when shapes are inconsistent or k, d_h are 0.
void validate(const AttentionHead& head);

// How sampled edges relate to the SBM intensity p = Q̂ᵢŜK̂ⱼᵀ.
enum class EdgeLaw {
  kExact,    // P(Mᵢⱼ = 1) = min(p, cap)
  kPoisson,  // raw fastRG: P(Mᵢⱼ = 1) = 1 − exp(−p)
};

// Multiply-add and operation counts for one head forward.
struct OpCounters {
  bool enabled = false;
  std::uint64_t membership_macs = 0;  // shared MLP on Q and K, node·cluster products
  std::uint64_t block_macs = 0;       // C Cᵀ
  std::uint64_t edge_prob_macs = 0;   // Q̂Ŝ and per-edge p
  std::uint64_t sampling_ops = 0;     // Poisson/alias work
  std::uint64_t dot_products = 0;     // sampled QᵢKⱼᵀ evaluations
  std::uint64_t dot_macs = 0;
  std::uint64_t pool_macs = 0;
  std::uint64_t softmax_flops = 0;
  std::uint64_t peak_live_floats = 0;
};

struct HeadForwardOptions {
  bool training = false;
  // Bypass sampling with a fixed mask (oracle tests and debugging).
  const EdgeMask* injected_mask = nullptr;
  // Per-position validity; empty means every position is real (no padding).
  std::span<const std::uint8_t> valid;
  EdgeLaw edge_law = EdgeLaw::kExact;
  double probability_cap = kDefaultProbabilityCap;
  double attention_dropout = 0.0;
  Rng* dropout_rng = nullptr;
  bool count_ops = false;
  // Gradient-check surrogate: when set (one entry per edge of the injected
  // mask), each sampled logit is scaled by m̃ = 1 + p − anchor instead of 1.
  const std::vector<double>* ste_anchor = nullptr;
};

struct SbmInference {
  SbmParams params;  // (Q̂, Ŝ, K̂)
  Matrix mlp_pre_q, mlp_hidden_q, node_q;
  Matrix mlp_pre_k, mlp_hidden_k, node_k;
};

// Ŝ = softmax_all(C Cᵀ), Q̂ = sigmoid(MLP(Q) Cᵀ), K̂ = sigmoid(MLP(K) Cᵀ).
SbmInference infer_sbm(const AttentionHead& head, const Matrix& q, const Matrix& k);

struct HeadForwardTrace {
  Matrix x;
  Matrix q, k, v;
  SbmInference sbm;
  std::vector<std::uint8_t> valid;
  EdgeMask mask;
  // Per edge, aligned with mask.edges().
  std::vector<double> edge_prob;    // p = Q̂ᵢŜK̂ⱼᵀ (padding rows zeroed, before exploration)
  std::vector<double> edge_logit;   // QᵢKⱼᵀ/√d_h
  std::vector<double> edge_scale;   // m̃ (1 unless a surrogate anchor is given)
  std::vector<double> edge_weight;  // masked-softmax output
  std::vector<double> edge_keep;    // attention-dropout multiplier
  Matrix output;                    // n×d_h
  double density = 0.0;
  double mask_mass = 0.0;           // Σ m̃ (equals the edge count unless surrogate)
  OpCounters counters;
};

HeadForwardTrace head_forward(const AttentionHead& head, const Matrix& x, Rng& rng,
                              const HeadForwardOptions& options = {});

struct HeadGradients {
  Matrix w_query, w_key, w_value;
  Matrix mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Matrix clusters;
  Matrix x;
  std::vector<double> edge_grad_logit;  // ∂L/∂A per sampled edge
  std::vector<double> edge_grad_prob;   // ∂L/∂p per sampled edge (straight-through)

  static HeadGradients zeros_like(const AttentionHead& head, std::size_t n);
};

// Backprop through pooling, masked softmax and the sampled dot products, plus
// the straight-through branch ∂L/∂pᵢⱼ = ∂L/∂Aᵢⱼ · QᵢKⱼᵀ/√d_h on sampled edges
// and the density term λ/(num_masks · n_q · n_k) per sampled edge.
HeadGradients head_backward(const HeadForwardTrace& trace, const AttentionHead& head,
                            const Matrix& grad_output, double lambda,
                            std::size_t num_masks);

// Mean mask density over a set of heads (the regularizer L_s).
double density_loss(std::span<const EdgeMask> masks);

}  // namespace sbmt
