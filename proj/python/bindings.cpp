#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "robustkd/pipeline.hpp"

namespace py = pybind11;
using namespace robustkd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Dataset to_dataset(const Array& images, const std::vector<std::size_t>& labels, std::size_t num_classes) {
  Dataset d;
  d.images = to_tensor(images);
  d.labels = labels;
  d.num_classes = num_classes;
  d.validate();
  return d;
}

py::dict report_dict(const ExperimentReport& r) {
  py::dict d;
  d["teacher_acc"] = r.teacher_acc;
  d["teacher_asr"] = r.teacher_asr;
  d["baseline_student_acc"] = r.baseline_student_acc;
  d["baseline_student_asr"] = r.baseline_student_asr;
  d["defended_student_acc"] = r.defended_student_acc;
  d["defended_student_asr"] = r.defended_student_asr;
  d["variance_profile"] = r.variance_profile;
  d["extras"] = r.extras;
  d["config_digest"] = r.config_digest;
  d["seed"] = r.seed;
  d["text"] = render_report(r);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Backdoor-robust knowledge distillation on toy networks.";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  py::class_<ExperimentConfig>(m, "Config")
      .def(py::init(&default_config))
      .def_static("parse", &parse_config, py::arg("text"))
      .def_static("load", &load_config, py::arg("path"))
      .def("render", &render_config)
      .def("digest", &config_digest)
      .def("validate", &validate_config)
      .def("set_seed", &set_seed, py::arg("seed"))
      .def_readonly("seed", &ExperimentConfig::seed)
      .def_readwrite("output_dir", &ExperimentConfig::output_dir)
      .def_property(
          "attack_kind", [](const ExperimentConfig& c) { return to_string(c.attack.attack.kind); },
          [](ExperimentConfig& c, const std::string& k) { c.attack.attack.kind = attack_kind_from_string(k); })
      .def("__repr__", [](const ExperimentConfig& c) { return "<robustkd.Config digest=" + config_digest(c) + ">"; });

  py::class_<Network>(m, "Network")
      .def_static("mlp", &make_mlp, py::arg("input_shape"), py::arg("hidden1"), py::arg("hidden2"),
                  py::arg("num_classes"), py::arg("seed"))
      .def_static("cnn", &make_cnn, py::arg("input_shape"), py::arg("channels1"), py::arg("channels2"),
                  py::arg("num_classes"), py::arg("seed"))
      .def_static("load", &load_network, py::arg("path"))
      .def("save", [](const Network& n, const std::string& path) { save_network(n, path); }, py::arg("path"))
      .def_property_readonly("taps", &Network::tap_order)
      .def_property_readonly("num_classes", &Network::num_classes)
      .def_property_readonly("parameter_count", &Network::parameter_count)
      .def(
          "forward",
          [](const Network& n, const Array& x) {
            const auto fr = forward(n, to_tensor(x));
            py::dict taps;
            for (const auto& [name, t] : fr.taps) taps[py::str(name)] = to_array(t);
            return py::make_tuple(to_array(fr.logits), taps);
          },
          py::arg("inputs"), "Logits and tap features for an (n, c, h, w) batch.")
      .def(py::self == py::self);

  m.def(
      "generate_blobs",
      [](std::size_t num_classes, std::size_t train_per_class, std::size_t test_per_class, const Shape& image_shape,
         double noise_std, std::uint64_t seed) {
        const auto d = generate_blobs({num_classes, train_per_class, test_per_class, image_shape, noise_std, seed});
        return py::make_tuple(to_array(d.train.images), d.train.labels, to_array(d.test.images), d.test.labels);
      },
      py::arg("num_classes") = 10, py::arg("train_per_class") = 200, py::arg("test_per_class") = 50,
      py::arg("image_shape") = Shape{1, 16, 16}, py::arg("noise_std") = 0.4, py::arg("seed") = 0,
      "(train_images, train_labels, test_images, test_labels)");

  m.def(
      "accuracy",
      [](const Network& n, const Array& images, const std::vector<std::size_t>& labels) {
        return accuracy(n, to_dataset(images, labels, n.num_classes()));
      },
      py::arg("net"), py::arg("images"), py::arg("labels"));
  m.def(
      "attack_success_rate",
      [](const Network& n, const Array& images, const std::vector<std::size_t>& labels, std::size_t trigger_size,
         std::size_t target_label) {
        const Dataset d = to_dataset(images, labels, n.num_classes());
        return attack_success_rate(n, d, corner_trigger(d.image_shape(), trigger_size, target_label));
      },
      py::arg("net"), py::arg("images"), py::arg("labels"), py::arg("trigger_size") = 3, py::arg("target_label") = 0);

  m.def("softmax_t", [](const Array& z, double T) { return to_array(softmax_T(to_tensor(z), T)); }, py::arg("logits"),
        py::arg("temperature"));
  m.def(
      "detox_features",
      [](const Array& f, const Array& p, double mval, const std::string& variant) {
        return to_array(detox_features(to_tensor(f), to_tensor(p), mval, mask_variant_from_string(variant)));
      },
      py::arg("features"), py::arg("p"), py::arg("m"), py::arg("variant") = "additive");
  m.def(
      "variance_loss",
      [](const Array& f) {
        const auto l = loss_f(to_tensor(f));
        return py::make_tuple(l.value, to_array(l.grad));
      },
      py::arg("features"), "(value, gradient) of the batch-mean per-example variance.");
  m.def("per_example_variance", [](const Array& f) { return per_example_variance(to_tensor(f)); },
        py::arg("features"));

  m.def(
      "run_pipeline",
      [](const ExperimentConfig& c, bool write_artifacts) {
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(c, write_artifacts);
        }
        return report_dict(r.report);
      },
      py::arg("config"), py::arg("write_artifacts") = false);
  m.def(
      "run_ablation",
      [](const ExperimentConfig& c, const std::string& axis, bool write_artifacts) {
        AblationResult r;
        {
          py::gil_scoped_release release;
          r = run_ablation(c, ablation_axis_from_string(axis), write_artifacts);
        }
        py::list points;
        for (const auto& p : r.points) {
          py::dict d = report_dict(p.report);
          d["label"] = p.label;
          points.append(d);
        }
        py::dict out;
        out["points"] = points;
        out["checks"] = r.checks;
        out["table"] = r.table;
        return out;
      },
      py::arg("config"), py::arg("axis"), py::arg("write_artifacts") = false);
  m.def("parse_report", [](const std::string& text) { return report_dict(parse_report(text)); }, py::arg("text"));
}
