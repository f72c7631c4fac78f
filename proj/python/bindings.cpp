#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "refseg/checkpoint.hpp"
#include "refseg/errors.hpp"
#include "refseg/feature_file.hpp"
#include "refseg/trainer.hpp"

namespace py = pybind11;
using namespace refseg;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

py::dict metrics_dict(const Metrics& m) {
  py::dict d;
  d["ciou"] = m.ciou;
  d["miou"] = m.miou;
  d["acc@0.3"] = m.acc[0];
  d["acc@0.5"] = m.acc[1];
  d["acc@0.7"] = m.acc[2];
  return d;
}

Mask to_mask(const Array<std::uint8_t>& a) {
  if (a.ndim() != 2) throw DimensionError("mask must be 2-D");
  Mask m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  const auto* p = a.data();
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = p[i] != 0;
  return m;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
  py::array_t<std::uint8_t> out({m.height, m.width});
  std::copy(m.bits.begin(), m.bits.end(), out.mutable_data());
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> from_values(std::span<const T> values, const Shape& shape) {
  py::array_t<T> out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::string& json) { return json.empty() ? synthetic_preset() : RunConfig::from_json(json); }

py::dict dataset_dict(const SyntheticDataset& data) {
  const std::size_t m = data.items.size(), n = data.spec.num_patches(), d = data.spec.feature_dim;
  py::array_t<float> visual({m, n, d}), textual({m, d});
  py::array_t<std::uint8_t> gt({m, data.spec.grid_h, data.spec.grid_w});
  for (std::size_t i = 0; i < m; ++i) {
    const auto& it = data.items[i];
    std::copy(it.visual.begin(), it.visual.end(), visual.mutable_data() + i * n * d);
    std::copy(it.textual.begin(), it.textual.end(), textual.mutable_data() + i * d);
    std::copy(it.gt_grid.bits.begin(), it.gt_grid.bits.end(), gt.mutable_data() + i * n);
  }
  py::dict out;
  out["visual"] = visual;
  out["textual"] = textual;
  out["gt_grid"] = gt;
  return out;
}

template <typename T>
py::dict train_as(const RunConfig& cfg, const std::string& checkpoint) {
  const auto data = generate_synthetic(cfg.data);
  const auto split = split_items(data.items.size(), data.spec.seed);
  TrainOutcome<T> result;
  {
    py::gil_scoped_release release;
    result = train<T>(cfg, data, split);
  }
  if (!checkpoint.empty()) save_checkpoint(checkpoint, cfg, *result.model, *result.optimizer);
  py::list log;
  for (const auto& l : result.log) {
    py::dict e;
    e["epoch"] = l.epoch;
    e["loss"] = l.loss;
    e["c3"] = l.c3;
    e["recon"] = l.recon;
    e["lr"] = l.lr;
    if (l.eval) e["eval"] = metrics_dict(*l.eval);
    log.append(e);
  }
  py::dict out;
  out["log"] = log;
  if (!result.log.empty() && result.log.back().eval) out["metrics"] = metrics_dict(*result.log.back().eval);
  return out;
}

template <typename T>
py::dict evaluate_as(const std::filesystem::path& path, std::optional<double> tau, std::optional<std::string> scheme) {
  auto loaded = load_checkpoint<T>(path);
  const auto& cfg = loaded.config;
  const auto data = generate_synthetic(cfg.data);
  const auto split = split_items(data.items.size(), data.spec.seed);
  const ScoreOptions opts{tau.value_or(cfg.tau), scheme ? parse_scheme(*scheme) : cfg.scheme, std::nullopt};
  Metrics m;
  {
    py::gil_scoped_release release;
    m = evaluate(*loaded.model, data, split.eval, cfg.eval_seed, opts);
  }
  return metrics_dict(m);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Referring segmentation by entity discovery: C++ core";

  auto base = py::register_exception<Error>(m, "RefsegError");
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<GenerationError>(m, "GenerationError", base.ptr());

  m.def("preset_config", [] { return synthetic_preset().to_json(); }, "Synthetic preset as a JSON string.");
  m.def(
      "apply_settings",
      [](const std::string& json, const std::map<std::string, std::string>& settings) {
        RunConfig cfg = config_from(json);
        apply_settings(cfg, settings);
        cfg.validate();
        return cfg.to_json();
      },
      py::arg("config_json"), py::arg("settings"), "Apply flat 'section.key' settings to a JSON config.");

  m.def(
      "generate_synthetic", [](const std::string& json) { return dataset_dict(generate_synthetic(config_from(json).data)); },
      py::arg("config_json") = "", "Synthetic dataset of the config's data section as numpy arrays.");

  m.def(
      "train",
      [](const std::string& json, const std::string& checkpoint) {
        const auto cfg = config_from(json);
        return cfg.precision == Precision::F64 ? train_as<double>(cfg, checkpoint) : train_as<float>(cfg, checkpoint);
      },
      py::arg("config_json") = "", py::arg("checkpoint") = "", "Train on the config's synthetic data.");

  m.def(
      "evaluate_checkpoint",
      [](const std::filesystem::path& path, std::optional<double> tau, std::optional<std::string> scheme) {
        return checkpoint_precision(path) == Precision::F64 ? evaluate_as<double>(path, tau, scheme)
                                                            : evaluate_as<float>(path, tau, scheme);
      },
      py::arg("path"), py::arg("tau") = py::none(), py::arg("scheme") = py::none());

  m.def(
      "predict_mask",
      [](const Array<double>& a_slot, const Array<double>& a_fuse, std::size_t grid_h, std::size_t grid_w,
         std::size_t out_h, std::size_t out_w, double tau, const std::string& scheme) {
        return from_mask(predict_mask(to_tensor(a_slot), to_tensor(a_fuse), grid_h, grid_w, out_h, out_w, tau,
                                      parse_scheme(scheme)));
      },
      py::arg("a_slot"), py::arg("a_fuse"), py::arg("grid_h"), py::arg("grid_w"), py::arg("out_h"), py::arg("out_w"),
      py::arg("tau") = kDefaultTau, py::arg("scheme") = "compose", "Binary mask from [N, K] slot and [K] fusion attention.");

  m.def(
      "iou", [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& gt) { return iou(to_mask(pred), to_mask(gt)); },
      py::arg("pred"), py::arg("gt"));
  m.def(
      "score_masks",
      [](const std::vector<Array<std::uint8_t>>& preds, const std::vector<Array<std::uint8_t>>& gts) {
        if (preds.size() != gts.size()) throw DimensionError("need as many predictions as ground-truth masks");
        EvalRecord rec;
        for (std::size_t i = 0; i < preds.size(); ++i) rec.accumulate(to_mask(preds[i]), to_mask(gts[i]));
        return metrics_dict(rec.finalize());
      },
      py::arg("preds"), py::arg("gts"), "cIoU, mIoU and accuracy at 0.3/0.5/0.7.");

  m.def(
      "c3_loss",
      [](const Array<double>& z, const Array<double>& text) {
        auto zt = to_tensor(z);
        zt.set_requires_grad(true);
        const auto loss = c3_loss_from_embeddings(zt, to_tensor(text));
        backward(loss);
        return py::make_tuple(loss.item(), from_values<double>(zt.grad_or_zeros(), zt.shape()));
      },
      py::arg("z"), py::arg("text"), "Loss and gradient w.r.t. z for [B, B, D] embeddings and [B, D] text.");

  m.def(
      "write_feature_file",
      [](const std::filesystem::path& path, const Array<float>& values, const std::string& role) {
        if (role != "visual" && role != "textual") throw ConfigError("role must be visual or textual");
        write_feature_file(path, to_tensor(values), role == "visual" ? FeatureRole::Visual : FeatureRole::Textual);
      },
      py::arg("path"), py::arg("values"), py::arg("role") = "visual");
  m.def(
      "read_feature_file",
      [](const std::filesystem::path& path) {
        FeatureRole role{};
        const auto t = read_feature_tensor<float>(path, &role);
        return py::make_tuple(from_values<float>(t.data(), t.shape()), role == FeatureRole::Visual ? "visual" : "textual");
      },
      py::arg("path"));
}
