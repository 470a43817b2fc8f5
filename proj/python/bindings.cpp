// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "triedit/eval.hpp"
#include "triedit/image_io.hpp"
#include "triedit/trainer.hpp"

namespace py = pybind11;
using namespace triedit;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensorf to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensorf t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

FloatArray to_array(const Tensorf& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray a(shape);
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

CameraPose pose_for(double yaw, double pitch, const ModelConfig& mc) {
  OrbitSettings o;
  o.image_size = mc.image_size;
  o.extent = mc.triplane_extent;
  return orbit_pose(yaw, pitch, o);
}

struct PyModel {
  ModelParams<float> params;
  bool clip_r_excluded = false;

  Prompt prompt(const std::optional<std::string>& text, const std::optional<FloatArray>& image) const {
    require(text.has_value() != image.has_value(), "give exactly one of text= and image=");
    return text ? Prompt::from_text(*text, params.config.vocab_size) : Prompt::from_image(to_tensor(*image));
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "triedit core bindings";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def("style_ids", [] {
    std::vector<std::string> ids;
    for (const auto& s : style_bank()) ids.push_back(s.style_id);
    return ids;
  });
  m.def(
      "apply_style",
      [](const FloatArray& img, const std::string& id) { return to_array(apply_edit(to_tensor(img), style_by_id(id))); },
      py::arg("image"), py::arg("style_id"));
  m.def(
      "composite_weights",
      [](const std::vector<double>& sigma, double delta) { return composite_weights<double>(sigma, delta); },
      py::arg("sigma"), py::arg("delta"));
  m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(to_tensor(a), to_tensor(b)); });
  m.def("id_t", [](const FloatArray& a, const FloatArray& b) {
    static const EmbeddingModel e = EmbeddingModel::make(EmbeddingModel::Kind::Identity);
    return triedit::id_t(to_tensor(a), to_tensor(b), e);
  });
  m.def("encode_png", [](const FloatArray& img) { return py::bytes(encode_png(to_tensor(img))); });
  m.def("decode_png", [](const py::bytes& b) { return to_array(decode_png(std::string(b))); });

  py::class_<Triplane<float>>(m, "Triplane")
      .def_property_readonly("channels", &Triplane<float>::channels)
      .def_property_readonly("resolution", &Triplane<float>::resolution)
      .def_property_readonly("planes", [](const Triplane<float>& t) { return to_array(t.planes); })
      .def("save", [](const Triplane<float>& t, const std::string& path) { save_triplane(path, t); })
      .def_static("load", &load_triplane);

  py::class_<PyModel>(m, "Model")
      .def_static(
          "init",
          [](const std::string& config_json) {
            ModelConfig c = config_json.empty() ? ModelConfig{} : nlohmann::json::parse(config_json).get<ModelConfig>();
            return PyModel{ModelParams<float>::init(c), false};
          },
          py::arg("config_json") = "")
      .def_static("toy", [] { return PyModel{ModelParams<float>::init(ModelConfig::toy()), false}; })
      .def_static("load",
                  [](const std::string& path) {
                    LoadedModel lm = load_model(path);
                    return PyModel{std::move(lm.params), lm.clip_r_excluded};
                  })
      .def("save",
           [](const PyModel& p, const std::string& path) {
             save_model(p.params, path, TrainMode::Distill, p.clip_r_excluded);
           })
      .def_property_readonly("config_json", [](const PyModel& p) { return nlohmann::json(p.params.config).dump(); })
      .def_property_readonly("image_size", [](const PyModel& p) { return p.params.config.image_size; })
      .def_readonly("clip_r_excluded", &PyModel::clip_r_excluded)
      .def("params_hash", [](const PyModel& p) { return params_hash(p.params); })
      .def(
          "edit",
          [](const PyModel& p, const FloatArray& img, std::optional<std::string> text, std::optional<FloatArray> image) {
            const Prompt pr = p.prompt(text, image);
            const Tensorf in = to_tensor(img);
            py::gil_scoped_release release;
            return edit(in, pr, p.params);
          },
          py::arg("image"), py::arg("text") = py::none(), py::arg("prompt_image") = py::none())
      .def(
          "reconstruct",
          [](const PyModel& p, const FloatArray& img) { return reconstruct(to_tensor(img), p.params); }, py::arg("image"))
      .def(
          "render",
          [](const PyModel& p, const Triplane<float>& t, double yaw, double pitch, int samples,
             std::optional<std::uint64_t> seed) {
            require(std::abs(yaw) <= 90 && std::abs(pitch) <= 45, "yaw must be in [-90, 90] and pitch in [-45, 45]");
            RenderSettings rs{samples, seed ? SamplingMode::Stratified : SamplingMode::Midpoint, seed.value_or(0)};
            RenderOutput out;
            {
              py::gil_scoped_release release;
              out = render_model(t, p.params, pose_for(yaw, pitch, p.params.config), rs);
            }
            return py::make_tuple(to_array(out.rgb_final), to_array(out.depth));
          },
          py::arg("triplane"), py::arg("yaw") = 0.0, py::arg("pitch") = 0.0, py::arg("samples") = 24,
          py::arg("seed") = py::none());
}
