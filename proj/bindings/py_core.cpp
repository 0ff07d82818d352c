// Python bindings over the main operations: tensor ops, the Mamba mixer,
// MIL initialization, models, distillation, and synthetic tasks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hybridlm/bench.hpp"
#include "hybridlm/checkpoint.hpp"
#include "hybridlm/decode.hpp"
#include "hybridlm/distill.hpp"
#include "hybridlm/hybridize.hpp"
#include "hybridlm/importance.hpp"

namespace py = pybind11;
using namespace hybridlm;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const FloatArray& arr) {
  Shape shape;
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape.push_back(static_cast<int>(arr.shape(i)));
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return from_vector(shape, std::move(data));
}

py::array_t<float> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> arr(shape);
  std::copy(t.data(), t.data() + t.numel(), arr.mutable_data());
  return arr;
}

ModelConfig config_from_dict(const py::dict& d) {
  ModelConfig c;
  if (d.contains("n_layers")) c.n_layers = d["n_layers"].cast<int>();
  if (d.contains("d_model")) c.d_model = d["d_model"].cast<int>();
  if (d.contains("n_heads")) c.n_heads = d["n_heads"].cast<int>();
  if (d.contains("n_kv_heads")) c.n_kv_heads = d["n_kv_heads"].cast<int>();
  if (d.contains("d_head")) c.d_head = d["d_head"].cast<int>();
  if (d.contains("vocab_size")) c.vocab_size = d["vocab_size"].cast<int>();
  if (d.contains("d_mlp")) c.d_mlp = d["d_mlp"].cast<int>();
  if (d.contains("max_seq")) c.max_seq = d["max_seq"].cast<int>();
  c.validate();
  return c;
}

MambaConfig mamba_from_model(const ModelConfig& c) {
  MambaConfig m;
  m.d_state = c.d_head;
  m.n_ssm_heads = c.n_heads;
  m.d_head = c.d_head;
  m.dt_rank = std::max(1, c.d_model / 16);
  return m;
}

TaskSpec task_from_dict(const py::dict& d) {
  TaskSpec t;
  if (d.contains("kind")) t.kind = task_kind_from_name(d["kind"].cast<std::string>());
  if (d.contains("vocab_size")) t.vocab_size = d["vocab_size"].cast<int>();
  if (d.contains("seq_len")) t.seq_len = d["seq_len"].cast<int>();
  if (d.contains("count")) t.count = d["count"].cast<int>();
  if (d.contains("seed")) t.seed = d["seed"].cast<uint64_t>();
  t.validate();
  return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "desk-scale transformer-to-hybrid-SSM conversion by distillation";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_IOError);

  m.def("softmax", [](const FloatArray& x) { return array_from_tensor(softmax_last(tensor_from_array(x))); });
  m.def("silu", [](const FloatArray& x) { return array_from_tensor(silu(tensor_from_array(x))); });
  m.def("matmul", [](const FloatArray& a, const FloatArray& b) {
    return array_from_tensor(matmul(tensor_from_array(a), tensor_from_array(b)));
  });
  m.def("rms_norm", [](const FloatArray& x, const FloatArray& w, float eps) {
    return array_from_tensor(rms_norm(tensor_from_array(x), tensor_from_array(w), eps));
  }, py::arg("x"), py::arg("weight"), py::arg("eps") = 1e-5f);

  m.def("kl_loss", [](const FloatArray& zs, const FloatArray& zt, float tau, const std::string& dir) {
    const KlDirection d = dir == "forward" ? KlDirection::kForward : KlDirection::kReverse;
    return kl_loss(tensor_from_array(zs), tensor_from_array(zt), tau, d).item();
  }, py::arg("z_student"), py::arg("z_teacher"), py::arg("tau") = 1.0f,
     py::arg("direction") = "reverse");

  m.def("mil_init_slices", [](const FloatArray& wq, const FloatArray& wk, const FloatArray& wv,
                              const FloatArray& wo, int n_heads, int n_kv_heads) {
    ModelConfig cfg;
    cfg.d_model = static_cast<int>(wq.shape(0));
    cfg.n_heads = n_heads;
    cfg.n_kv_heads = n_kv_heads;
    cfg.d_head = static_cast<int>(wq.shape(1)) / n_heads;
    cfg.vocab_size = 2;
    cfg.n_layers = 1;
    cfg.d_mlp = 1;
    cfg.validate();
    AttentionWeights w{tensor_from_array(wq), tensor_from_array(wk), tensor_from_array(wv),
                       tensor_from_array(wo)};
    MilReport report;
    MambaParams p = mil_init(w, cfg, mamba_from_model(cfg), &report);
    py::dict out;
    out["in_c"] = array_from_tensor(p.in_c);
    out["in_b"] = array_from_tensor(p.in_b);
    out["in_x"] = array_from_tensor(p.in_x);
    out["out_proj"] = array_from_tensor(p.out_proj);
    out["repetition"] = report.repetition;
    return out;
  }, py::arg("wq"), py::arg("wk"), py::arg("wv"), py::arg("wo"), py::arg("n_heads"),
     py::arg("n_kv_heads"));

  m.def("generate_task", [](const py::dict& spec, const std::string& split, int count) {
    const TaskSpec t = task_from_dict(spec);
    auto samples = generate(t, split == "heldout" ? Split::kHeldOut : Split::kTrain, count);
    py::list tokens, masks;
    for (const SeqSample& s : samples) {
      tokens.append(py::array_t<int32_t>(static_cast<py::ssize_t>(s.tokens.size()), s.tokens.data()));
      masks.append(py::array_t<uint8_t>(static_cast<py::ssize_t>(s.answer_mask.size()),
                                        s.answer_mask.data()));
    }
    return py::make_tuple(tokens, masks);
  }, py::arg("spec"), py::arg("split") = "train", py::arg("count") = 1);

  py::class_<Model>(m, "Model")
      .def_static("init_random", [](const py::dict& cfg, uint64_t seed) {
        const ModelConfig c = config_from_dict(cfg);
        return Model::init_random(c, mamba_from_model(c), seed);
      }, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const Model& self, const std::string& path) { save_checkpoint(self, path); })
      .def("forward", [](const Model& self, const std::vector<int32_t>& tokens) {
        return array_from_tensor(self.forward(tokens));
      }, py::arg("tokens"))
      .def("decode_greedy", [](const Model& self, const std::vector<int32_t>& prompt, int n) {
        Decoder dec(self);
        std::vector<int32_t> out = prompt;
        const std::vector<float>* logits = nullptr;
        for (int32_t t : prompt) logits = &dec.step(t);
        for (int i = 0; i < n; ++i) {
          const int32_t next = static_cast<int32_t>(
              std::max_element(logits->begin(), logits->end()) - logits->begin());
          out.push_back(next);
          logits = &dec.step(next);
        }
        return out;
      }, py::arg("prompt"), py::arg("n"))
      .def("replace_layers", [](const Model& self, const std::vector<int>& layers,
                                const std::string& init) {
        return replace_layers(self, std::set<int>(layers.begin(), layers.end()),
                              init == "random" ? InitKind::kRandom : InitKind::kMil);
      }, py::arg("layers"), py::arg("init") = "mil")
      .def("distill_from", [](Model& self, const Model& teacher, const py::dict& task, int steps,
                              int batch, float lr, uint64_t seed) {
        DistillRunConfig cfg;
        cfg.steps = steps;
        cfg.batch = batch;
        cfg.lr = lr;
        cfg.seq_len = 0;
        cfg.seed = seed;
        cfg.eval_batches = 2;
        RunLog log = distill_stage(teacher, self, task_from_dict(task), cfg);
        py::dict out;
        out["eval_initial"] = log.eval_initial;
        out["eval_final"] = log.eval_final;
        out["tokens"] = log.tokens;
        return out;
      }, py::arg("teacher"), py::arg("task"), py::arg("steps") = 100, py::arg("batch") = 4,
         py::arg("lr") = 1e-3f, py::arg("seed") = 0)
      .def("accuracy", [](const Model& self, const py::dict& task, int count) {
        return evaluate_accuracy(self, generate(task_from_dict(task), Split::kHeldOut, count));
      }, py::arg("task"), py::arg("count") = 32)
      .def_property_readonly("layout_name", [](const Model& self) { return self.layout.name(); })
      .def_property_readonly("n_layers", [](const Model& self) { return self.cfg.n_layers; })
      .def_property_readonly("mamba_count",
                             [](const Model& self) { return self.layout.mamba_count(); })
      .def_property_readonly("tokens_trained",
                             [](const Model& self) { return self.tokens_trained; });

  m.def("scan_step_max_diff", [](uint64_t seed, int t) {
    MambaConfig cfg;
    cfg.d_state = 8;
    cfg.n_ssm_heads = 4;
    cfg.d_head = 8;
    cfg.dt_rank = 4;
    const int d_model = 32;
    Rng rng(seed);
    MambaParams p = random_mamba_params(cfg, d_model, rng);
    Tensor u = randn({t, d_model}, rng);
    Tensor scan = mixer_forward(p, cfg, u, MixerMode::kScan, nullptr);
    SsmState state = SsmState::zero(cfg);
    float worst = 0.0f;
    for (int i = 0; i < t; ++i) {
      Tensor row = slice(u, 0, i, 1);
      Tensor y = mixer_forward(p, cfg, row, MixerMode::kStep, &state);
      for (int d = 0; d < d_model; ++d)
        worst = std::max(worst, std::abs(y.data()[d] - scan.data()[i * d_model + d]));
    }
    return worst;
  }, py::arg("seed") = 1, py::arg("t") = 32,
     "max |scan - chained steps| for a random mixer; equivalence smoke check");
}
