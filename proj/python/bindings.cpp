#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "madlab/analysis.hpp"
#include "madlab/config.hpp"
#include "madlab/errors.hpp"
#include "madlab/pipeline.hpp"

namespace py = pybind11;
using namespace madlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
    return out;
}

std::vector<std::size_t> to_labels(const py::array_t<long long, py::array::c_style | py::array::forcecast>& y) {
    std::vector<std::size_t> out;
    for (py::ssize_t i = 0; i < y.size(); ++i) {
        if (y.data()[i] < 0) throw InvalidArgument("labels must be non-negative");
        out.push_back(static_cast<std::size_t>(y.data()[i]));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_madlab, m) {
    m.doc() = "Python bindings for the madlab core";

    py::register_exception<Error>(m, "MadlabError", PyExc_RuntimeError);

    py::class_<Network>(m, "Network")
        .def_property_readonly("num_classes", &Network::num_classes)
        .def_property_readonly("embedding_dim", &Network::embedding_dim)
        .def_property_readonly("input_size", &Network::input_size)
        .def("parameter_count", &Network::parameter_count)
        .def("predict", [](const Network& n, const Array& x) { return predict(n, to_tensor(x)); })
        .def("embed", [](const Network& n, const Array& x) { return to_array(infer(n, to_tensor(x)).embedding); })
        .def("logits", [](const Network& n, const Array& x) { return to_array(infer(n, to_tensor(x)).logits); })
        .def("jacobian_norms",
             [](const Network& n, const Array& x) { return jacobian_norms(n, to_tensor(x)); })
        .def("save", [](const Network& n, const std::filesystem::path& p) { save_checkpoint(n, p); });

    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
    m.def("mlp", [](std::size_t inputs, std::vector<std::size_t> hidden, std::size_t classes, std::uint64_t seed) {
        return init_parameters(mlp_spec(inputs, std::move(hidden), classes), seed);
    }, py::arg("inputs"), py::arg("hidden"), py::arg("classes"), py::arg("seed") = 0);

    m.def("davies_bouldin", [](const Array& z, const py::array_t<long long>& y) {
        return davies_bouldin(to_tensor(z), to_labels(y));
    });
    m.def("frobenius_norm", [](const Array& a) { return frobenius_norm(to_tensor(a)); });
    m.def("fgsm", [](const Network& n, const Array& x, std::size_t y, double eps) {
        return to_array(fgsm(n, to_tensor(x), y, eps).x_adv);
    });

    m.def("run_pipeline", [](const std::string& config_text, const std::string& out, std::size_t workers) {
        RunConfig cfg = parse_config(config_text);
        cfg.out = out;
        cfg.workers = workers;
        std::vector<std::string> paths;
        for (const auto& p : run_pipeline(cfg, nullptr)) paths.push_back(p.string());
        return paths;
    }, py::arg("config_text"), py::arg("out"), py::arg("workers") = 1);
}
