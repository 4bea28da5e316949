#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "sbmt/cli.hpp"
#include "sbmt/costing.hpp"
#include "sbmt/duplicate_task.hpp"
#include "sbmt/encoder.hpp"
#include "sbmt/errors.hpp"
#include "sbmt/sampler.hpp"
#include "sbmt/theory.hpp"

namespace py = pybind11;
using namespace sbmt;

namespace {

using Rows = std::vector<std::vector<double>>;

Matrix to_matrix(const Rows& rows) {
  const std::size_t r = rows.size(), c = r == 0 ? 0 : rows[0].size();
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    if (rows[i].size() != c) throw ShapeError("ragged nested list");
    for (std::size_t j = 0; j < c; ++j) m(i, j) = rows[i][j];
  }
  return m;
}

Rows to_rows(const Matrix& m) {
  Rows out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

TokenBatch to_batch(const std::vector<std::vector<std::uint32_t>>& seqs) {
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.length = std::max(b.length, s.size());
  b.ids.assign(b.batch * b.length, kPadId);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + i * b.length);
  return b;
}

ModelConfig config_from(const py::dict& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    apply_config_value(c, py::str(k), py::str(v));
  }
  return c;
}

py::dict report_dict(const CostReport& r) {
  py::dict d;
  for (const auto& c : r.components) d[py::str(c.name)] = c.flops;
  d["total"] = r.total_flops;
  d["peak_floats"] = r.peak_floats;
  return d;
}

// Owns a model and its optimizer so Python can step it.
class Model {
 public:
  explicit Model(const ModelConfig& c) : model_(EncoderModel::init(c)), opt_(Optimizer::for_model(model_)) {}

  Rows forward(const std::vector<std::vector<std::uint32_t>>& seqs, bool full_attention) const {
    const TokenBatch b = to_batch(seqs);
    ForwardOptions opt;
    std::vector<EdgeMask> masks;
    if (full_attention) {
      masks.assign(b.batch * model_.config.n_layers * model_.config.n_heads,
                   EdgeMask::full(b.length, b.length));
      opt.injected_masks = &masks;
    }
    return to_rows(model_forward(model_, b, opt).logits);
  }

  py::dict train_step(std::size_t batch_size, std::uint64_t step) {
    const TaskConfig task{model_.config.max_seq_len, batch_size, model_.config.seed};
    const LabeledBatch b = batch_for_step(task, step);
    const TrainMetrics m = sbmt::train_step(model_, opt_, b.tokens, b.targets, step);
    py::dict d;
    d["step"] = m.step;
    d["loss"] = m.loss;
    d["bce"] = m.bce;
    d["accuracy"] = m.accuracy;
    d["mean_density"] = m.mean_density;
    d["head_density"] = m.head_density_mean;
    return d;
  }

  std::size_t parameter_count() const { return model_.parameter_count(); }
  std::string config() const { return config_to_text(model_.config); }

  py::bytes save() const {
    std::ostringstream out;
    save_checkpoint(out, model_);
    return py::bytes(out.str());
  }

  static Model load(const std::string& data) {
    std::istringstream in(data);
    Model m(ModelConfig{});
    m.model_ = load_checkpoint(in);
    m.opt_ = Optimizer::for_model(m.model_);
    return m;
  }

 private:
  EncoderModel model_;
  Optimizer opt_;
};

}  // namespace

PYBIND11_MODULE(_sbmt, m) {
  m.doc() = "SBM-attention transformer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<UnavailableError>(m, "UnavailableError", PyExc_RuntimeError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_FloatingPointError);

  m.def("duplicate_labels", [](const std::vector<std::uint32_t>& s) {
    const auto l = duplicate_labels(s);
    return std::vector<int>(l.begin(), l.end());
  });
  m.def("duplicate_rate", [](std::size_t n) { return duplicate_rate(TaskConfig{n, 1, 0}); });

  m.def(
      "sample_mask",
      [](const Rows& y, const Rows& b, const Rows& z, std::uint64_t seed, bool exact) {
        const SbmParams p{to_matrix(y), to_matrix(b), to_matrix(z)};
        Rng rng(seed);
        const EdgeMask mask = exact ? sample_mask_exact(p, rng) : sample_mask(p, rng);
        std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
        for (const Edge& e : mask.edges()) edges.emplace_back(e.query, e.key);
        return edges;
      },
      py::arg("y"), py::arg("b"), py::arg("z"), py::arg("seed") = 0, py::arg("exact") = false,
      "Sampled (query, key) pairs from intensity Y B Z^T.");

  m.def("flops_attention",
        [](std::size_t n, double edges, std::size_t k, std::size_t d) {
          return report_dict(flops_attention(n, edges, k, d));
        },
        py::arg("n"), py::arg("m"), py::arg("k"), py::arg("d"));

  m.def("verify_theory", [](std::size_t n, std::size_t k) {
    const TheoryPatterns p = build_patterns(n, k);
    const AssumptionReport r = verify_assumption1({p.a1, p.a2, p.a3});
    py::dict d;
    d["passed"] = r.passed();
    d["condition1"] = r.condition1;
    d["condition2"] = r.condition2;
    d["condition3"] = r.condition3;
    d["s"] = r.s;
    d["best_s"] = r.best_s;
    d["edge_counts"] = r.edge_counts;
    d["report"] = format_report(r);
    return d;
  });
  m.def("hamiltonian_cycle_expectation", &hamiltonian_cycle_expectation);
  m.def("threshold_probability", [](std::size_t n) { return threshold_probability(n).raw; });

  m.def("gradcheck_tiny", []() {
    const GradCheckRequest r = tiny_gradcheck();
    FiniteDiffOptions fd;
    fd.tolerance = r.tolerance;
    const GradCheckResult g = model_gradcheck(r.model, r.seq_len, r.batch, r.lambda, fd);
    return py::make_tuple(g.passed, g.max_rel_error);
  });

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::dict& kv) { return Model(config_from(kv)); }), py::arg("config") = py::dict())
      .def("forward", &Model::forward, py::arg("sequences"), py::arg("full_attention") = false,
           "Inference logits; sequences are lists of token ids, right-padded with 0.")
      .def("train_step", &Model::train_step, py::arg("batch_size"), py::arg("step"),
           "One Adam step on a duplicate-token batch of length max_seq_len.")
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def_property_readonly("config", &Model::config)
      .def("save", &Model::save)
      .def_static("load", [](const py::bytes& b) { return Model::load(std::string(b)); });
}
