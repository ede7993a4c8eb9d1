// Python surface for the core operations: layout arithmetic, the scan
// kernels in their three forms, dataset tooling and the training drivers.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "armamba/blocks.hpp"
#include "armamba/config.hpp"
#include "armamba/dataio.hpp"
#include "armamba/layout.hpp"
#include "armamba/selfcheck.hpp"
#include "armamba/ssm.hpp"
#include "armamba/threadpool.hpp"
#include "armamba/trainer.hpp"

namespace py = pybind11;
using namespace armamba;

namespace {

Tensor tensor_from_array(const py::array& arr) {
  const bool is64 = py::isinstance<py::array_t<double>>(arr);
  if (!is64 && !py::isinstance<py::array_t<float>>(arr))
    throw py::type_error("expected a float32 or float64 array");
  py::array a = py::array::ensure(arr, py::array::c_style);
  Shape shape(size_t(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[size_t(i)] = a.shape(i);
  Tensor t = Tensor::empty(shape, is64 ? DType::f64 : DType::f32);
  std::memcpy(t.impl()->storage->raw(), a.data(), size_t(a.nbytes()));
  return t;
}

py::array array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  if (t.dtype() == DType::f32) {
    py::array_t<float> out(shape);
    std::memcpy(out.mutable_data(), t.impl()->storage->raw(),
                t.impl()->storage->size);
    return out;
  }
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.impl()->storage->raw(),
              t.impl()->storage->size);
  return out;
}

layout::ClusterLayout layout_from_args(int64_t image, int64_t patch, int64_t cluster,
                                       const std::string& order, uint64_t seed) {
  return layout::make_layout(image, image, patch, cluster, layout::order_from_name(order), seed);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "selective state-space vision pretraining: core operations";

  py::register_exception<Error>(m, "ArmambaError");

  m.def("set_num_workers", &set_num_workers, py::arg("n"));

  // --- layout ---
  py::class_<layout::ClusterLayout>(m, "ClusterLayout")
      .def_readonly("perm", &layout::ClusterLayout::perm)
      .def_property_readonly("num_clusters", &layout::ClusterLayout::num_clusters)
      .def_property_readonly("grid_h", &layout::ClusterLayout::grid_h)
      .def_property_readonly("grid_w", &layout::ClusterLayout::grid_w)
      .def_property_readonly("patches_per_cluster", &layout::ClusterLayout::patches_per_cluster)
      .def_property_readonly("num_patches", &layout::ClusterLayout::num_patches)
      .def("token_to_patch", &layout::ClusterLayout::token_to_patch);

  m.def("make_layout", &layout_from_args, py::arg("image"), py::arg("patch"), py::arg("cluster"),
        py::arg("order") = "row-forward", py::arg("seed") = 0);
  m.def(
      "order_permutation",
      [](int64_t grid_h, int64_t grid_w, const std::string& order, uint64_t seed) {
        return layout::order_permutation(grid_h, grid_w, layout::order_from_name(order), seed);
      },
      py::arg("grid_h"), py::arg("grid_w"), py::arg("order"), py::arg("seed") = 0);
  m.def("patchify", [](const py::array& img, const layout::ClusterLayout& lay) {
    return array_from_tensor(layout::patchify(tensor_from_array(img), lay));
  });
  m.def("unpatchify", [](const py::array& tokens, const layout::ClusterLayout& lay) {
    return array_from_tensor(layout::unpatchify(tensor_from_array(tokens), lay));
  });

  // --- scan kernels ---
  m.def(
      "zoh_discretize",
      [](const py::array& a, const py::array& dt, const py::array& b, const std::string& disc) {
        NoGradGuard ng;
        auto [abar, bbar] = ssm::zoh_discretize(
            tensor_from_array(a), tensor_from_array(dt), tensor_from_array(b),
            disc == "euler" ? ssm::Discretization::euler : ssm::Discretization::zoh_exact);
        return py::make_tuple(array_from_tensor(abar), array_from_tensor(bbar));
      },
      py::arg("a"), py::arg("dt"), py::arg("b"), py::arg("discretization") = "zoh_exact");
  m.def("scan_recurrent",
        [](const py::array& ab, const py::array& bb, const py::array& c, const py::array& x) {
          NoGradGuard ng;
          return array_from_tensor(ssm::scan_recurrent(tensor_from_array(ab),
                                                       tensor_from_array(bb),
                                                       tensor_from_array(c),
                                                       tensor_from_array(x)));
        });
  m.def(
      "scan_parallel",
      [](const py::array& ab, const py::array& bb, const py::array& c, const py::array& x,
         int64_t chunk) {
        NoGradGuard ng;
        return array_from_tensor(ssm::scan_parallel(tensor_from_array(ab), tensor_from_array(bb),
                                                    tensor_from_array(c), tensor_from_array(x),
                                                    chunk));
      },
      py::arg("a_bar"), py::arg("b_bar"), py::arg("c"), py::arg("x"), py::arg("chunk") = 64);
  m.def("lti_kernel_apply",
        [](const py::array& ab, const py::array& bb, const py::array& c, const py::array& x) {
          return array_from_tensor(ssm::lti_kernel_apply(
              tensor_from_array(ab), tensor_from_array(bb), tensor_from_array(c),
              tensor_from_array(x)));
        });

  // --- architecture arithmetic ---
  m.def("swiglu_hidden", &blocks::swiglu_hidden);
  m.def("encoder_param_count", [](const std::string& model_json) {
    return blocks::encoder_param_count(config::model_from_json(model_json));
  });

  // --- datasets ---
  m.def("generate_synthetic", &dataio::generate_synthetic, py::arg("out_packed"),
        py::arg("out_manifest"), py::arg("classes"), py::arg("train_per_class"),
        py::arg("val_per_class"), py::arg("size"), py::arg("seed"));
  py::class_<dataio::PackedDataset>(m, "PackedDataset")
      .def_static("read", &dataio::PackedDataset::read)
      .def_property_readonly("count", &dataio::PackedDataset::count)
      .def_property_readonly("height", &dataio::PackedDataset::height)
      .def_property_readonly("width", &dataio::PackedDataset::width)
      .def("label", &dataio::PackedDataset::label)
      .def("image", [](const dataio::PackedDataset& ds, int64_t i) {
        py::array_t<uint8_t> out({ds.height(), ds.width(), int64_t(3)});
        std::memcpy(out.mutable_data(), ds.image(i), size_t(ds.height() * ds.width() * 3));
        return out;
      });

  // --- self-check and training drivers ---
  m.def(
      "selfcheck",
      [](bool full) {
        py::list out;
        for (const auto& r : selfcheck::run(full)) {
          py::dict d;
          d["module"] = r.module;
          d["name"] = r.name;
          d["passed"] = r.passed;
          d["detail"] = r.detail;
          out.append(d);
        }
        return out;
      },
      py::arg("full") = false);

  m.def(
      "run_pretrain",
      [](const std::string& config_path, const std::string& out_dir, uint64_t seed,
         bool deterministic) {
        trainer::RunOptions opt;
        opt.seed = seed;
        opt.deterministic_artifacts = deterministic;
        trainer::RunResult res =
            trainer::run_pretrain(config::load_config_file(config_path), out_dir, opt);
        py::dict d;
        d["losses"] = res.losses;
        d["final_ckpt"] = res.final_ckpt;
        d["metrics"] = res.metrics_path;
        d["steps"] = res.steps;
        return d;
      },
      py::arg("config_path"), py::arg("out_dir"), py::arg("seed") = 0,
      py::arg("deterministic") = false);
  m.def(
      "run_finetune",
      [](const std::string& config_path, const std::string& pretrained_ckpt,
         const std::string& out_dir, uint64_t seed, bool deterministic) {
        trainer::RunOptions opt;
        opt.seed = seed;
        opt.deterministic_artifacts = deterministic;
        trainer::RunResult res = trainer::run_finetune(config::load_config_file(config_path),
                                                       pretrained_ckpt, out_dir, opt);
        py::dict d;
        d["losses"] = res.losses;
        d["top1_ema"] = res.top1_ema;
        d["top1_raw"] = res.top1_raw;
        d["best_top1"] = res.best_top1;
        d["best_ckpt"] = res.best_ckpt;
        return d;
      },
      py::arg("config_path"), py::arg("pretrained_ckpt"), py::arg("out_dir"), py::arg("seed") = 0,
      py::arg("deterministic") = false);
}
