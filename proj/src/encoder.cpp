#include "sbmt/encoder.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "sbmt/costing.hpp"
#include "sbmt/errors.hpp"

namespace sbmt {

namespace {

constexpr double kLayerNormEps = 1e-5;

void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (auto& v : m.values()) v = bound * (2.0 * rng.uniform() - 1.0);
}

// Linear layer weights: U(−1/√fan_in, 1/√fan_in).
Matrix linear_weight(std::size_t in, std::size_t out, Rng& rng) {
  Matrix w(in, out);
  fill_uniform(w, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  return w;
}

Matrix dropout_keep(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  Matrix keep(rows, cols);
  const double scale = 1.0 / (1.0 - rate);
  for (auto& v : keep.values()) v = rng.uniform() < rate ? 0.0 : scale;
  return keep;
}

void add_head(AttentionHead& acc, const HeadGradients& g) {
  add_inplace(acc.w_query, g.w_query);
  add_inplace(acc.w_key, g.w_key);
  add_inplace(acc.w_value, g.w_value);
  add_inplace(acc.mlp_w1, g.mlp_w1);
  add_inplace(acc.mlp_b1, g.mlp_b1);
  add_inplace(acc.mlp_w2, g.mlp_w2);
  add_inplace(acc.mlp_b2, g.mlp_b2);
  add_inplace(acc.clusters, g.clusters);
}

template <typename Model, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Model& m) {
  std::vector<std::pair<std::string, Ptr>> out;
  out.emplace_back("token_embedding", &m.token_embedding);
  out.emplace_back("position_embedding", &m.position_embedding);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& layer = m.layers[l];
    const std::string lp = "layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      auto& head = layer.heads[h];
      const std::string hp = lp + "head" + std::to_string(h) + ".";
      out.emplace_back(hp + "w_query", &head.w_query);
      out.emplace_back(hp + "w_key", &head.w_key);
      out.emplace_back(hp + "w_value", &head.w_value);
      out.emplace_back(hp + "mlp_w1", &head.mlp_w1);
      out.emplace_back(hp + "mlp_b1", &head.mlp_b1);
      out.emplace_back(hp + "mlp_w2", &head.mlp_w2);
      out.emplace_back(hp + "mlp_b2", &head.mlp_b2);
      out.emplace_back(hp + "clusters", &head.clusters);
    }
    out.emplace_back(lp + "w_out", &layer.w_out);
    out.emplace_back(lp + "b_out", &layer.b_out);
    out.emplace_back(lp + "ln1_gain", &layer.ln1_gain);
    out.emplace_back(lp + "ln1_bias", &layer.ln1_bias);
    out.emplace_back(lp + "ffn_w1", &layer.ffn_w1);
    out.emplace_back(lp + "ffn_b1", &layer.ffn_b1);
    out.emplace_back(lp + "ffn_w2", &layer.ffn_w2);
    out.emplace_back(lp + "ffn_b2", &layer.ffn_b2);
    out.emplace_back(lp + "ln2_gain", &layer.ln2_gain);
    out.emplace_back(lp + "ln2_bias", &layer.ln2_bias);
  }
  out.emplace_back("classifier_w", &m.classifier_w);
  out.emplace_back("classifier_b", &m.classifier_b);
  return out;
}

std::vector<std::uint8_t> validity(const TokenBatch& batch, std::size_t b) {
  std::vector<std::uint8_t> valid(batch.length);
  for (std::size_t t = 0; t < batch.length; ++t) valid[t] = batch.at(b, t) != kPadId;
  return valid;
}

void mean_std(const std::vector<double>& xs, double& mean, double& std) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  std = std::sqrt(var / static_cast<double>(xs.size()));
}

// Per (layer, head) mean and population std over a flat (example, layer, head) list.
void per_head_stats(const std::vector<double>& densities, std::size_t heads_per_example,
                    std::vector<double>& mean, std::vector<double>& std) {
  mean.assign(heads_per_example, 0.0);
  std.assign(heads_per_example, 0.0);
  const std::size_t examples = densities.size() / heads_per_example;
  for (std::size_t slot = 0; slot < heads_per_example; ++slot) {
    std::vector<double> xs(examples);
    for (std::size_t b = 0; b < examples; ++b) xs[b] = densities[b * heads_per_example + slot];
    mean_std(xs, mean[slot], std[slot]);
  }
}

const char* pooling_name(Pooling p) { return p == Pooling::kMean ? "mean" : "none"; }
const char* law_name(EdgeLaw law) { return law == EdgeLaw::kPoisson ? "poisson" : "exact"; }

std::size_t parse_count(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != value.size() || value.empty() || value[0] == '-') {
    throw InputError("config key '" + key + "': expected a nonnegative integer, got '" + value +
                     "'");
  }
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != value.size() || value.empty()) {
    throw InputError("config key '" + key + "': expected a number, got '" + value + "'");
  }
  return v;
}

bool parse_flag(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InputError("config key '" + key + "': expected true/false, got '" + value + "'");
}

}  // namespace

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& what) { throw DomainError("ModelConfig: " + what); };
  if (c.n_layers == 0) fail("n_layers must be at least 1");
  if (c.n_heads == 0) fail("n_heads must be at least 1");
  if (c.d == 0) fail("d must be at least 1");
  if (c.d % c.n_heads != 0) fail("d must be divisible by n_heads");
  if (c.d_ff == 0) fail("d_ff must be at least 1");
  if (c.k == 0) fail("k must be at least 1");
  if (c.vocab_size < 2) fail("vocab_size must be at least 2 (id 0 is padding)");
  if (c.max_seq_len == 0) fail("max_seq_len must be at least 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(c.attn_dropout >= 0.0 && c.attn_dropout < 1.0)) fail("attn_dropout must lie in [0, 1)");
  if (!(c.delta >= 0.0 && c.delta <= 1.0)) fail("delta must lie in [0, 1]");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) fail("lambda must be nonnegative");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be positive");
}

EncoderModel EncoderModel::init(const ModelConfig& config) {
  validate(config);
  Rng rng = Rng::derive(config.seed, {static_cast<std::uint64_t>(Stream::kInit)});
  const std::size_t d = config.d;
  EncoderModel m;
  m.config = config;
  m.token_embedding = Matrix(config.vocab_size, d);
  m.position_embedding = Matrix(config.max_seq_len, d);
  fill_normal(m.token_embedding, rng, 1.0);
  fill_normal(m.position_embedding, rng, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    EncoderLayer layer;
    for (std::size_t h = 0; h < config.n_heads; ++h)
      layer.heads.push_back(AttentionHead::init(d, config.head_dim(), config.k, rng,
                                                config.delta, config.self_loops));
    layer.w_out = linear_weight(d, d, rng);
    layer.b_out = Matrix(1, d);
    layer.ln1_gain = Matrix(1, d, 1.0);
    layer.ln1_bias = Matrix(1, d);
    layer.ffn_w1 = linear_weight(d, config.d_ff, rng);
    layer.ffn_b1 = Matrix(1, config.d_ff);
    layer.ffn_w2 = linear_weight(config.d_ff, d, rng);
    layer.ffn_b2 = Matrix(1, d);
    layer.ln2_gain = Matrix(1, d, 1.0);
    layer.ln2_bias = Matrix(1, d);
    m.layers.push_back(std::move(layer));
  }
  m.classifier_w = linear_weight(d, 1, rng);
  m.classifier_b = Matrix(1, 1);
  return m;
}

EncoderModel EncoderModel::zeros_like(const EncoderModel& model) {
  EncoderModel z = model;
  for (auto& [name, p] : z.named_parameters()) p->fill(0.0);
  return z;
}

std::vector<std::pair<std::string, Matrix*>> EncoderModel::named_parameters() {
  return collect<EncoderModel, Matrix*>(*this);
}

std::vector<std::pair<std::string, const Matrix*>> EncoderModel::named_parameters() const {
  return collect<const EncoderModel, const Matrix*>(*this);
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, p] : named_parameters()) total += p->size();
  return total;
}

ModelForward model_forward(const EncoderModel& model, const TokenBatch& batch,
                           const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  if (batch.ids.size() != batch.batch * batch.length) {
    throw ShapeError("model_forward: token buffer holds " + std::to_string(batch.ids.size()) +
                     " ids for a " + std::to_string(batch.batch) + "x" +
                     std::to_string(batch.length) + " batch");
  }
  if (batch.length == 0 || batch.length > cfg.max_seq_len) {
    throw InputError("model_forward: sequence length " + std::to_string(batch.length) +
                     " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  }
  for (std::uint32_t id : batch.ids)
    if (id >= cfg.vocab_size) {
      throw InputError("model_forward: token id " + std::to_string(id) + " >= vocab size " +
                       std::to_string(cfg.vocab_size));
    }
  const std::size_t heads_per_example = cfg.n_layers * cfg.n_heads;
  const std::size_t total_masks = batch.batch * heads_per_example;
  if (options.injected_masks != nullptr && options.injected_masks->size() != total_masks) {
    throw ShapeError("model_forward: expected " + std::to_string(total_masks) +
                     " injected masks, got " + std::to_string(options.injected_masks->size()));
  }
  if (options.ste_anchors != nullptr &&
      (options.injected_masks == nullptr || options.ste_anchors->size() != total_masks)) {
    throw ShapeError("model_forward: surrogate anchors need one entry per injected mask");
  }

  const std::size_t n = batch.length;
  const std::size_t d = cfg.d;
  const std::size_t d_h = cfg.head_dim();
  const bool drop = options.training && cfg.dropout > 0.0;
  const auto stream = static_cast<std::uint64_t>(options.stream);

  ModelForward out;
  out.logits = cfg.pooling == Pooling::kMean ? Matrix(batch.batch, 1) : Matrix(batch.batch, n);
  out.traces.resize(batch.batch);
  out.densities.assign(total_masks, 0.0);
  double mass_total = 0.0;

  for (std::size_t b = 0; b < batch.batch; ++b) {
    ExampleTrace& ex = out.traces[b];
    ex.ids.assign(batch.ids.begin() + static_cast<std::ptrdiff_t>(b * n),
                  batch.ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * n));
    ex.valid = validity(batch, b);
    Rng drop_rng = Rng::derive(cfg.seed, {static_cast<std::uint64_t>(Stream::kDropout),
                                          options.step, b});

    Matrix x(n, d);
    for (std::size_t t = 0; t < n; ++t) {
      const auto te = model.token_embedding.row(ex.ids[t]);
      const auto pe = model.position_embedding.row(t);
      auto xr = x.row(t);
      for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }
    if (drop) {
      ex.embed_keep = dropout_keep(n, d, cfg.dropout, drop_rng);
      x = hadamard(x, ex.embed_keep);
    }

    ex.layers.resize(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const EncoderLayer& layer = model.layers[l];
      LayerTrace& lt = ex.layers[l];
      lt.input = x;
      lt.concat = Matrix(n, d);
      lt.heads.reserve(cfg.n_heads);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t slot = (b * cfg.n_layers + l) * cfg.n_heads + h;
        Rng sample_rng = Rng::derive(cfg.seed, {stream, options.step, b, l, h});
        HeadForwardOptions ho;
        ho.training = options.training;
        ho.valid = ex.valid;
        ho.edge_law = cfg.edge_law;
        ho.attention_dropout = cfg.attn_dropout;
        ho.dropout_rng = &drop_rng;
        ho.count_ops = options.count_ops;
        if (options.injected_masks != nullptr) ho.injected_mask = &(*options.injected_masks)[slot];
        if (options.ste_anchors != nullptr) ho.ste_anchor = &(*options.ste_anchors)[slot];
        lt.heads.push_back(head_forward(layer.heads[h], x, sample_rng, ho));
        const HeadForwardTrace& ht = lt.heads.back();
        set_cols(lt.concat, h * d_h, ht.output);
        out.densities[slot] = ht.density;
        mass_total += ht.mask_mass / static_cast<double>(n * n);
      }
      Matrix attn = matmul(lt.concat, layer.w_out);
      add_row_inplace(attn, layer.b_out);
      if (drop) {
        lt.attn_keep = dropout_keep(n, d, cfg.dropout, drop_rng);
        attn = hadamard(attn, lt.attn_keep);
      }
      lt.y1 = layer_norm(add(x, attn), layer.ln1_gain, layer.ln1_bias, kLayerNormEps, &lt.ln1);
      lt.ffn_pre = matmul(lt.y1, layer.ffn_w1);
      add_row_inplace(lt.ffn_pre, layer.ffn_b1);
      lt.ffn_hidden = relu(lt.ffn_pre);
      Matrix f = matmul(lt.ffn_hidden, layer.ffn_w2);
      add_row_inplace(f, layer.ffn_b2);
      if (drop) {
        lt.ffn_keep = dropout_keep(n, d, cfg.dropout, drop_rng);
        f = hadamard(f, lt.ffn_keep);
      }
      lt.y2 = layer_norm(add(lt.y1, f), layer.ln2_gain, layer.ln2_bias, kLayerNormEps, &lt.ln2);
      x = lt.y2;
    }

    if (cfg.pooling == Pooling::kMean) {
      ex.pooled = Matrix(1, d);
      std::size_t count = 0;
      for (std::size_t t = 0; t < n; ++t) {
        if (!ex.valid[t]) continue;
        ++count;
        for (std::size_t c = 0; c < d; ++c) ex.pooled(0, c) += x(t, c);
      }
      if (count > 0) ex.pooled = scale(ex.pooled, 1.0 / static_cast<double>(count));
      out.logits(b, 0) = matmul(ex.pooled, model.classifier_w)(0, 0) + model.classifier_b(0, 0);
    } else {
      const Matrix logits = matmul(x, model.classifier_w);
      for (std::size_t t = 0; t < n; ++t) out.logits(b, t) = logits(t, 0) + model.classifier_b(0, 0);
    }
  }

  if (total_masks > 0) {
    double total = 0.0;
    for (double v : out.densities) total += v;
    out.mean_density = total / static_cast<double>(total_masks);
    out.mean_mask_mass = mass_total / static_cast<double>(total_masks);
  }
  return out;
}

Matrix loss_mask(const EncoderModel& model, const TokenBatch& batch) {
  if (model.config.pooling == Pooling::kMean) return Matrix(batch.batch, 1, 1.0);
  Matrix mask(batch.batch, batch.length);
  for (std::size_t i = 0; i < batch.ids.size(); ++i) mask[i] = batch.ids[i] != kPadId ? 1.0 : 0.0;
  return mask;
}

LossBreakdown model_loss(const EncoderModel& model, const TokenBatch& batch,
                         const ModelForward& forward, const Matrix& targets, double lambda) {
  const Matrix mask = loss_mask(model, batch);
  BceResult bce = bce_loss(forward.logits, targets, &mask);
  LossBreakdown out;
  out.bce = bce.loss;
  out.density = forward.mean_mask_mass;
  out.total = bce.loss + lambda * forward.mean_mask_mass;
  out.grad_logits = std::move(bce.grad);
  return out;
}

EncoderModel model_backward(const EncoderModel& model, const ModelForward& forward,
                            const Matrix& grad_logits, double lambda) {
  const ModelConfig& cfg = model.config;
  if (!grad_logits.same_shape(forward.logits)) {
    throw ShapeError("model_backward: grad_logits " + grad_logits.shape_string() +
                     " vs logits " + forward.logits.shape_string());
  }
  EncoderModel g = EncoderModel::zeros_like(model);
  const std::size_t d = cfg.d;
  const std::size_t d_h = cfg.head_dim();
  const std::size_t num_masks = std::max<std::size_t>(forward.num_masks(), 1);

  for (std::size_t b = 0; b < forward.traces.size(); ++b) {
    const ExampleTrace& ex = forward.traces[b];
    const std::size_t n = ex.ids.size();
    const Matrix& top = ex.layers.back().y2;

    Matrix grad_x(n, d);
    if (cfg.pooling == Pooling::kMean) {
      const double gl = grad_logits(b, 0);
      g.classifier_b(0, 0) += gl;
      for (std::size_t c = 0; c < d; ++c) g.classifier_w(c, 0) += gl * ex.pooled(0, c);
      std::size_t count = 0;
      for (auto v : ex.valid) count += v;
      if (count > 0) {
        const double share = gl / static_cast<double>(count);
        for (std::size_t t = 0; t < n; ++t)
          if (ex.valid[t])
            for (std::size_t c = 0; c < d; ++c) grad_x(t, c) = share * model.classifier_w(c, 0);
      }
    } else {
      for (std::size_t t = 0; t < n; ++t) {
        const double gl = grad_logits(b, t);
        if (gl == 0.0) continue;
        g.classifier_b(0, 0) += gl;
        for (std::size_t c = 0; c < d; ++c) {
          g.classifier_w(c, 0) += gl * top(t, c);
          grad_x(t, c) = gl * model.classifier_w(c, 0);
        }
      }
    }

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
      const EncoderLayer& layer = model.layers[l];
      EncoderLayer& gl = g.layers[l];
      const LayerTrace& lt = ex.layers[l];

      Matrix grad_r2 = layer_norm_backward(grad_x, layer.ln2_gain, lt.ln2, gl.ln2_gain, gl.ln2_bias);
      Matrix grad_y1 = grad_r2;
      const Matrix grad_f = lt.ffn_keep.size() ? hadamard(grad_r2, lt.ffn_keep) : grad_r2;
      add_inplace(gl.ffn_w2, matmul_tn(lt.ffn_hidden, grad_f));
      add_inplace(gl.ffn_b2, column_sums(grad_f));
      Matrix grad_hidden = matmul_nt(grad_f, layer.ffn_w2);
      for (std::size_t i = 0; i < grad_hidden.size(); ++i)
        if (lt.ffn_pre[i] <= 0.0) grad_hidden[i] = 0.0;
      add_inplace(gl.ffn_w1, matmul_tn(lt.y1, grad_hidden));
      add_inplace(gl.ffn_b1, column_sums(grad_hidden));
      add_inplace(grad_y1, matmul_nt(grad_hidden, layer.ffn_w1));

      Matrix grad_r1 = layer_norm_backward(grad_y1, layer.ln1_gain, lt.ln1, gl.ln1_gain, gl.ln1_bias);
      const Matrix grad_attn = lt.attn_keep.size() ? hadamard(grad_r1, lt.attn_keep) : grad_r1;
      add_inplace(gl.w_out, matmul_tn(lt.concat, grad_attn));
      add_inplace(gl.b_out, column_sums(grad_attn));
      const Matrix grad_concat = matmul_nt(grad_attn, layer.w_out);
      grad_x = std::move(grad_r1);
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const HeadGradients hg = head_backward(lt.heads[h], layer.heads[h],
                                               slice_cols(grad_concat, h * d_h, d_h), lambda,
                                               num_masks);
        add_head(gl.heads[h], hg);
        add_inplace(grad_x, hg.x);
      }
    }

    if (ex.embed_keep.size()) grad_x = hadamard(grad_x, ex.embed_keep);
    for (std::size_t t = 0; t < n; ++t) {
      auto te = g.token_embedding.row(ex.ids[t]);
      auto pe = g.position_embedding.row(t);
      const auto gx = grad_x.row(t);
      for (std::size_t c = 0; c < d; ++c) {
        te[c] += gx[c];
        pe[c] += gx[c];
      }
    }
  }
  return g;
}

Optimizer Optimizer::for_model(EncoderModel& model) {
  Optimizer opt;
  for (auto& [name, p] : model.named_parameters())
    opt.states.push_back(AdamState::for_param(*p, model.config.learning_rate));
  return opt;
}

TrainMetrics train_step(EncoderModel& model, Optimizer& optimizer, const TokenBatch& batch,
                        const Matrix& targets, std::uint64_t step) {
  const auto start = std::chrono::steady_clock::now();
  ForwardOptions fo;
  fo.training = true;
  fo.step = step;
  const ModelForward fwd = model_forward(model, batch, fo);
  const LossBreakdown loss = model_loss(model, batch, fwd, targets, model.config.lambda);

  TrainMetrics m;
  m.step = step;
  m.loss = loss.total;
  m.bce = loss.bce;
  m.mean_density = fwd.mean_density;
  per_head_stats(fwd.densities, model.config.n_layers * model.config.n_heads,
                 m.head_density_mean, m.head_density_std);

  if (!std::isfinite(loss.total)) {
    std::ostringstream oss;
    oss << "non-finite loss at step " << step << ": loss=" << loss.total << " bce=" << loss.bce
        << " max|logit|=" << max_abs(fwd.logits) << " head densities=";
    for (std::size_t i = 0; i < m.head_density_mean.size(); ++i)
      oss << (i ? "," : "") << m.head_density_mean[i];
    throw NonFiniteError(oss.str());
  }

  const Matrix mask = loss_mask(model, batch);
  double correct = 0.0, counted = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) continue;
    counted += 1.0;
    correct += ((fwd.logits[i] > 0.0) == (targets[i] > 0.5)) ? 1.0 : 0.0;
  }
  m.accuracy = counted > 0.0 ? correct / counted : 0.0;

  const std::size_t n = batch.length;
  for (double density : fwd.densities)
    m.attention_flops += flops_attention(n, density * static_cast<double>(n * n), model.config.k,
                                         model.config.head_dim())
                             .total_flops;

  EncoderModel grads = model_backward(model, fwd, loss.grad_logits, model.config.lambda);
  auto params = model.named_parameters();
  auto gparams = grads.named_parameters();
  if (optimizer.states.size() != params.size()) {
    throw ConsistencyError("train_step: optimizer was built for a different model");
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    adam_update(*params[i].second, *gparams[i].second, optimizer.states[i]);

  m.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

EvalMetrics evaluate(const EncoderModel& model, const std::vector<TokenBatch>& batches,
                     const std::vector<Matrix>& targets, std::uint64_t seed) {
  if (batches.size() != targets.size()) {
    throw ShapeError("evaluate: " + std::to_string(batches.size()) + " batches but " +
                     std::to_string(targets.size()) + " target matrices");
  }
  EvalMetrics out;
  std::vector<double> densities;
  double loss_sum = 0.0, correct = 0.0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    ForwardOptions fo;
    fo.training = false;
    fo.stream = Stream::kEval;
    fo.step = seed * 1000003ULL + i;
    const ModelForward fwd = model_forward(model, batches[i], fo);
    const Matrix mask = loss_mask(model, batches[i]);
    const BceResult bce = bce_loss(fwd.logits, targets[i], &mask);
    loss_sum += bce.loss * static_cast<double>(bce.count);
    out.positions += bce.count;
    for (std::size_t j = 0; j < mask.size(); ++j)
      if (mask[j] != 0.0) correct += ((fwd.logits[j] > 0.0) == (targets[i][j] > 0.5)) ? 1.0 : 0.0;
    densities.insert(densities.end(), fwd.densities.begin(), fwd.densities.end());
  }
  if (out.positions > 0) {
    out.loss = loss_sum / static_cast<double>(out.positions);
    out.accuracy = correct / static_cast<double>(out.positions);
  }
  if (!densities.empty())
    per_head_stats(densities, model.config.n_layers * model.config.n_heads,
                   out.head_density_mean, out.head_density_std);
  return out;
}

std::string config_to_text(const ModelConfig& c) {
  std::ostringstream oss;
  oss.precision(17);
  oss << "n_layers=" << c.n_layers << "\n"
      << "n_heads=" << c.n_heads << "\n"
      << "d=" << c.d << "\n"
      << "d_ff=" << c.d_ff << "\n"
      << "k=" << c.k << "\n"
      << "vocab_size=" << c.vocab_size << "\n"
      << "max_seq_len=" << c.max_seq_len << "\n"
      << "dropout=" << c.dropout << "\n"
      << "attn_dropout=" << c.attn_dropout << "\n"
      << "delta=" << c.delta << "\n"
      << "lambda=" << c.lambda << "\n"
      << "self_loops=" << (c.self_loops ? "true" : "false") << "\n"
      << "pooling=" << pooling_name(c.pooling) << "\n"
      << "edge_law=" << law_name(c.edge_law) << "\n"
      << "learning_rate=" << c.learning_rate << "\n"
      << "seed=" << c.seed << "\n";
  return oss.str();
}

void apply_config_value(ModelConfig& c, const std::string& key, const std::string& value) {
  if (key == "n_layers") c.n_layers = parse_count(key, value);
  else if (key == "n_heads") c.n_heads = parse_count(key, value);
  else if (key == "d") c.d = parse_count(key, value);
  else if (key == "d_ff") c.d_ff = parse_count(key, value);
  else if (key == "k") c.k = parse_count(key, value);
  else if (key == "vocab_size") c.vocab_size = parse_count(key, value);
  else if (key == "max_seq_len") c.max_seq_len = parse_count(key, value);
  else if (key == "dropout") c.dropout = parse_real(key, value);
  else if (key == "attn_dropout") c.attn_dropout = parse_real(key, value);
  else if (key == "delta") c.delta = parse_real(key, value);
  else if (key == "lambda") c.lambda = parse_real(key, value);
  else if (key == "self_loops") c.self_loops = parse_flag(key, value);
  else if (key == "learning_rate") c.learning_rate = parse_real(key, value);
  else if (key == "seed") c.seed = parse_count(key, value);
  else if (key == "pooling") {
    if (value == "none") c.pooling = Pooling::kNone;
    else if (value == "mean") c.pooling = Pooling::kMean;
    else throw InputError("config key 'pooling': expected none or mean, got '" + value + "'");
  } else if (key == "edge_law") {
    if (value == "exact") c.edge_law = EdgeLaw::kExact;
    else if (value == "poisson") c.edge_law = EdgeLaw::kPoisson;
    else throw InputError("config key 'edge_law': expected exact or poisson, got '" + value + "'");
  } else {
    throw InputError("unknown config key '" + key + "'");
  }
}

void save_checkpoint(std::ostream& out, const EncoderModel& model) {
  const auto params = model.named_parameters();
  out << "sbmt-checkpoint 1\n" << config_to_text(model.config);
  out << "tensors " << params.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, p] : params) {
    out << name << " " << p->rows() << " " << p->cols() << " " << offset << "\n";
    offset += p->size() * sizeof(float);
  }
  out << "end\n";
  for (const auto& [name, p] : params) {
    for (double v : p->values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff),
                             static_cast<char>((bits >> 24) & 0xff)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw InputError("save_checkpoint: write failed");
}

EncoderModel load_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "sbmt-checkpoint 1") {
    throw InputError("load_checkpoint: missing 'sbmt-checkpoint 1' header");
  }
  ModelConfig cfg;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    if (line.rfind("tensors ", 0) == 0) {
      count = parse_count("tensors", line.substr(8));
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw InputError("load_checkpoint: bad manifest line '" + line + "'");
    apply_config_value(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
  EncoderModel model = EncoderModel::init(cfg);
  auto params = model.named_parameters();
  if (count != params.size()) {
    throw InputError("load_checkpoint: manifest lists " + std::to_string(count) +
                     " tensors, config implies " + std::to_string(params.size()));
  }
  std::size_t expected_offset = 0;
  for (auto& [name, p] : params) {
    std::string got_name;
    std::size_t rows = 0, cols = 0, offset = 0;
    if (!(in >> got_name >> rows >> cols >> offset) || got_name != name || rows != p->rows() ||
        cols != p->cols() || offset != expected_offset) {
      throw InputError("load_checkpoint: tensor entry for '" + name + "' does not match config");
    }
    expected_offset += p->size() * sizeof(float);
  }
  std::string end;
  in >> end;
  if (end != "end") throw InputError("load_checkpoint: manifest not terminated by 'end'");
  in.get();  // newline before the payload
  for (auto& [name, p] : params) {
    for (auto& v : p->values()) {
      unsigned char bytes[4];
      if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw InputError("load_checkpoint: payload truncated in '" + name + "'");
      }
      const std::uint32_t bits = bytes[0] | (bytes[1] << 8) | (bytes[2] << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      v = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return model;
}

GradCheckResult model_gradcheck(const ModelConfig& config, std::size_t seq_len,
                                std::size_t batch_size, double lambda,
                                const FiniteDiffOptions& options) {
  ModelConfig cfg = config;
  cfg.dropout = 0.0;
  cfg.attn_dropout = 0.0;
  cfg.lambda = lambda;
  EncoderModel model = EncoderModel::init(cfg);
  // Larger projections than the 0.02 default so the attention and membership
  // paths carry gradients well above the finite-difference noise floor.
  Rng rng = Rng::derive(cfg.seed, {static_cast<std::uint64_t>(Stream::kData), 0xC0FFEEULL});
  for (auto& layer : model.layers)
    for (auto& head : layer.heads) {
      fill_normal(head.w_query, rng, 0.5);
      fill_normal(head.w_key, rng, 0.5);
      fill_normal(head.w_value, rng, 0.5);
      fill_normal(head.mlp_b1, rng, 0.3);
      fill_normal(head.mlp_b2, rng, 0.3);
    }

  TokenBatch batch{batch_size, seq_len, std::vector<std::uint32_t>(batch_size * seq_len)};
  for (auto& id : batch.ids) id = 1 + static_cast<std::uint32_t>(rng.below(cfg.vocab_size - 1));
  Matrix targets(batch_size, cfg.pooling == Pooling::kMean ? 1 : seq_len);
  for (auto& t : targets.values()) t = rng.bernoulli(0.5) ? 1.0 : 0.0;

  // Freeze one training-mode draw of every mask and anchor p at the current parameters.
  ForwardOptions draw;
  draw.training = true;
  const ModelForward sampled = model_forward(model, batch, draw);
  std::vector<EdgeMask> masks;
  std::vector<std::vector<double>> anchors;
  for (const auto& ex : sampled.traces)
    for (const auto& lt : ex.layers)
      for (const auto& ht : lt.heads) {
        masks.push_back(ht.mask);
        anchors.push_back(ht.edge_prob);
      }

  ForwardOptions frozen;
  frozen.injected_masks = &masks;
  frozen.ste_anchors = &anchors;
  const ModelForward base = model_forward(model, batch, frozen);
  const LossBreakdown loss = model_loss(model, batch, base, targets, lambda);
  EncoderModel grads = model_backward(model, base, loss.grad_logits, lambda);

  GradCheckResult result;
  auto params = model.named_parameters();
  auto gparams = grads.named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix* target = params[i].second;
    auto f = [&](const Matrix& value) {
      const Matrix saved = *target;
      *target = value;
      const ModelForward fwd = model_forward(model, batch, frozen);
      const double total = model_loss(model, batch, fwd, targets, lambda).total;
      *target = saved;
      return total;
    };
    Matrix probe = *target;
    const FiniteDiffReport rep = finite_diff_check(f, probe, *gparams[i].second, options);
    ParamCheck pc{params[i].first, rep.checked, rep.max_rel_error, rep.passed};
    result.passed = result.passed && rep.passed;
    result.max_rel_error = std::max(result.max_rel_error, rep.max_rel_error);
    result.params.push_back(pc);
  }
  return result;
}

}  // namespace sbmt
