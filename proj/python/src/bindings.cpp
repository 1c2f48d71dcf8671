#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stcnet/checkpoint.hpp"
#include "stcnet/data.hpp"
#include "stcnet/graph.hpp"
#include "stcnet/harness.hpp"
#include "stcnet/model.hpp"

namespace py = pybind11;
using namespace stcnet;

namespace {

template <class S>
py::array_t<S> to_array(const Tensor<S>& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<S> a(shape);
  std::copy(t.v.begin(), t.v.end(), a.mutable_data());
  return a;
}

Tensor<float> from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
  Tensor<float> t(std::move(shape));
  std::copy(a.data(), a.data() + a.size(), t.v.begin());
  return t;
}

graph::SkeletonGraph graph_from_parents(const std::vector<int>& parents) {
  graph::SkeletonGraph g;
  g.num_nodes = static_cast<int>(parents.size());
  for (int i = 0; i < g.num_nodes; ++i) {
    if (parents[static_cast<size_t>(i)] < 0)
      g.root = i;
    else
      g.edges.push_back({parents[static_cast<size_t>(i)], i});
  }
  g.validate();
  return g;
}

graph::Direction parse_direction(const std::string& s) {
  if (s == "cp") return graph::Direction::kCentripetal;
  if (s == "id") return graph::Direction::kIdentity;
  if (s == "cf") return graph::Direction::kCentrifugal;
  throw ArgumentError("direction must be cp, id, or cf");
}

model::ModelConfig build_config(const graph::SkeletonGraph& skeleton, int num_classes,
                                double width_scale, int sigma, const std::string& stream, int k,
                                double temperature, bool stc) {
  model::ModelConfig mc;
  mc.skeleton = skeleton;
  mc.num_classes = num_classes;
  mc.sigma = sigma;
  mc.stream = harness::parse_stream(stream);
  mc.stc.k = k;
  mc.stc.temperature = temperature;
  if (!stc) mc.stc_blocks.clear();
  if (width_scale != 1.0) mc = model::scaled_channels(mc, width_scale);
  return mc;
}

struct PyModel {
  model::StcNet<float> net;

  explicit PyModel(model::StcNet<float> n) : net(std::move(n)) {}
};

py::dict train_result_dict(const harness::TrainResult& r) {
  py::dict d;
  d["best_epoch"] = r.best_epoch;
  d["best_val_acc"] = r.best_val_acc;
  d["train_loss"] = r.train_loss;
  d["train_acc"] = r.train_acc;
  d["val_acc"] = r.val_acc;
  d["metrics"] = r.metrics;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Spatio-temporal curve network over skeletal graphs";

  // base first: translators run newest-first, so derived classes must follow
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<StructuralError>(m, "StructuralError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<graph::SkeletonGraph>(m, "SkeletonGraph")
      .def(py::init(&graph_from_parents), py::arg("parents"))
      .def_readonly("num_nodes", &graph::SkeletonGraph::num_nodes)
      .def_readonly("root", &graph::SkeletonGraph::root)
      .def("parents", &graph::SkeletonGraph::parents)
      .def("root_distances", &graph::SkeletonGraph::root_distances)
      .def("__repr__", [](const graph::SkeletonGraph& g) {
        return "SkeletonGraph(num_nodes=" + std::to_string(g.num_nodes) +
               ", root=" + std::to_string(g.root) + ")";
      });

  m.def("body_graph", &data::body_graph, py::arg("num_nodes"));

  m.def(
      "dilated_kernel",
      [](const graph::SkeletonGraph& g, int d, const std::string& direction, bool normalized) {
        auto ks = graph::kernel_set(g, d);
        auto dir = parse_direction(direction);
        if (normalized) {
          const Tensor<double>& a = dir == graph::Direction::kCentripetal ? ks.a_cp
                                    : dir == graph::Direction::kIdentity  ? ks.a_id
                                                                          : ks.a_cf;
          return py::object(to_array(a));
        }
        const Tensor<int64_t>& u = dir == graph::Direction::kCentripetal ? ks.u_cp
                                   : dir == graph::Direction::kIdentity  ? ks.u_id
                                                                         : ks.u_cf;
        return py::object(to_array(u));
      },
      py::arg("graph"), py::arg("d"), py::arg("direction"), py::arg("normalized") = false);

  py::class_<data::Dataset>(m, "Dataset")
      .def(py::init([](const graph::SkeletonGraph& g,
                       const py::array_t<float, py::array::c_style | py::array::forcecast>&
                           samples,
                       const std::vector<int>& labels) {
             data::Dataset ds;
             ds.graph = g;
             ds.samples = from_array(samples);
             ds.labels = labels;
             ds.validate();
             return ds;
           }),
           py::arg("graph"), py::arg("samples"), py::arg("labels"))
      .def_property_readonly("samples",
                             [](const data::Dataset& ds) { return to_array(ds.samples); })
      .def_readonly("labels", &data::Dataset::labels)
      .def_readonly("graph", &data::Dataset::graph)
      .def("__len__", [](const data::Dataset& ds) { return ds.size(); });

  m.def(
      "generate_synthetic",
      [](int nodes, int frames, int classes, int per_class, double noise, uint64_t seed) {
        data::SynthSpec spec;
        spec.num_nodes = nodes;
        spec.frames = frames;
        spec.num_classes = classes;
        spec.per_class = per_class;
        spec.noise_std = noise;
        spec.seed = seed;
        return data::generate_synthetic(spec);
      },
      py::arg("nodes") = 15, py::arg("frames") = 32, py::arg("classes") = 4,
      py::arg("per_class") = 100, py::arg("noise") = 0.05, py::arg("seed") = 1);

  m.def("split_per_class", &data::split_per_class, py::arg("dataset"),
        py::arg("train_per_class"));
  m.def("write_dataset", &data::write_dataset, py::arg("dataset"), py::arg("path"));
  m.def("read_dataset", &data::read_dataset, py::arg("path"));
  m.def("preprocess", &data::preprocess, py::arg("dataset"), py::arg("target_frames"));

  py::class_<harness::ScoreFile>(m, "ScoreFile")
      .def_readonly("stream", &harness::ScoreFile::stream)
      .def_readonly("sigma", &harness::ScoreFile::sigma)
      .def_readonly("num_classes", &harness::ScoreFile::num_classes)
      .def_readonly("labels", &harness::ScoreFile::labels)
      .def_readonly("scores", &harness::ScoreFile::scores);

  m.def("write_scores", &harness::write_scores, py::arg("scores"), py::arg("path"));
  m.def("read_scores", &harness::read_scores, py::arg("path"));

  m.def(
      "ensemble",
      [](const std::vector<harness::ScoreFile>& files) {
        auto r = harness::ensemble(files);
        py::dict d;
        d["fused_accuracy"] = r.fused_accuracy;
        d["per_stream_accuracy"] = r.per_stream_accuracy;
        return d;
      },
      py::arg("files"));

  py::class_<PyModel>(m, "Model")
      .def(py::init([](const graph::SkeletonGraph& skeleton, int num_classes, double width_scale,
                       int sigma, const std::string& stream, int k, double temperature, bool stc,
                       uint64_t seed) {
             auto mc = build_config(skeleton, num_classes, width_scale, sigma, stream, k,
                                    temperature, stc);
             return PyModel(model::StcNet<float>(mc, seed));
           }),
           py::arg("skeleton"), py::arg("num_classes"), py::arg("width_scale") = 1.0,
           py::arg("sigma") = 0, py::arg("stream") = "joint", py::arg("k") = 4,
           py::arg("temperature") = 1.0, py::arg("stc") = true, py::arg("seed") = 1)
      .def_property_readonly("num_classes",
                             [](const PyModel& pm) { return pm.net.config().num_classes; })
      .def_property_readonly("sigma", [](const PyModel& pm) { return pm.net.config().sigma; })
      .def_property_readonly(
          "stream", [](const PyModel& pm) { return harness::stream_name(pm.net.config().stream); })
      .def("num_params", [](const PyModel& pm) { return model::count_params(pm.net.config()); })
      .def(
          "flops",
          [](const PyModel& pm, int frames) { return model::count_flops(pm.net.config(), frames); },
          py::arg("frames") = 64)
      .def(
          "evaluate",
          [](const PyModel& pm, const data::Dataset& ds, int batch_size) {
            harness::EvalResult r;
            {
              py::gil_scoped_release release;
              r = harness::evaluate(pm.net, ds, batch_size);
            }
            return py::make_tuple(r.accuracy, r.scores);
          },
          py::arg("dataset"), py::arg("batch_size") = 16)
      .def(
          "export_curves",
          [](const PyModel& pm, const data::Dataset& ds, const std::vector<int64_t>& samples,
             const std::string& svg_dir) {
            harness::CurveExportOptions opts;
            opts.svg_dir = svg_dir;
            return harness::export_curves(pm.net, ds, samples, opts);
          },
          py::arg("dataset"), py::arg("samples"), py::arg("svg_dir") = "")
      .def(
          "save",
          [](const PyModel& pm, const std::string& path, int epoch) {
            ckpt::save_checkpoint(path, pm.net, epoch);
          },
          py::arg("path"), py::arg("epoch") = 0)
      .def_static(
          "load",
          [](const std::string& path) { return PyModel(ckpt::load_checkpoint(path)); },
          py::arg("path"));

  m.def(
      "train",
      [](const data::Dataset& train_ds, const data::Dataset& val_ds, int epochs, int warmup,
         double base_lr, double final_lr, double momentum, double weight_decay, int batch_size,
         uint64_t seed, int sigma, const std::string& stream, double width_scale, int k, bool stc,
         const std::string& checkpoint, const std::string& metrics) {
        harness::TrainConfig tc;
        tc.epochs = epochs;
        tc.warmup_epochs = warmup;
        tc.base_lr = base_lr;
        tc.final_lr = final_lr;
        tc.momentum = momentum;
        tc.weight_decay = weight_decay;
        tc.batch_size = batch_size;
        tc.seed = seed;
        tc.sigma = sigma;
        tc.stream = harness::parse_stream(stream);
        model::ModelConfig mc;
        mc.stc.k = k;
        if (!stc) mc.stc_blocks.clear();
        if (width_scale != 1.0) mc = model::scaled_channels(mc, width_scale);
        harness::TrainResult r;
        {
          py::gil_scoped_release release;
          r = harness::train(tc, mc, train_ds, val_ds, checkpoint, metrics);
        }
        return train_result_dict(r);
      },
      py::arg("train_ds"), py::arg("val_ds"), py::arg("epochs") = 90, py::arg("warmup") = 5,
      py::arg("base_lr") = 0.1, py::arg("final_lr") = 1e-4, py::arg("momentum") = 0.9,
      py::arg("weight_decay") = 4e-4, py::arg("batch_size") = 16, py::arg("seed") = 1,
      py::arg("sigma") = 0, py::arg("stream") = "joint", py::arg("width_scale") = 1.0,
      py::arg("k") = 4, py::arg("stc") = true, py::arg("checkpoint") = "",
      py::arg("metrics") = "");
}
