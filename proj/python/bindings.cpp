#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "tsmamba/checkpoint.hpp"
#include "tsmamba/data.hpp"
#include "tsmamba/error.hpp"
#include "tsmamba/model.hpp"
#include "tsmamba/pipeline.hpp"
#include "tsmamba/ssm.hpp"

namespace py = pybind11;
using namespace tsmamba;

namespace {

using Array = py::array_t<Real, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<Real>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Selective state-space forecaster";

    static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyErr_SetString(error.ptr(), e.what());
        }
    });

    py::enum_<CombineMode>(m, "CombineMode").value("Add", CombineMode::Add).value("Concat", CombineMode::Concat);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("lookback", &ModelConfig::lookback)
        .def_readwrite("horizon", &ModelConfig::horizon)
        .def_readwrite("patch_len", &ModelConfig::patch_len)
        .def_readwrite("d_model", &ModelConfig::d_model)
        .def_readwrite("n_layers", &ModelConfig::n_layers)
        .def_readwrite("d_state", &ModelConfig::d_state)
        .def_readwrite("expand", &ModelConfig::expand)
        .def_readwrite("conv_kernel", &ModelConfig::conv_kernel)
        .def_readwrite("head_dim", &ModelConfig::head_dim)
        .def_readwrite("n_channels", &ModelConfig::n_channels)
        .def_readwrite("huber_delta", &ModelConfig::huber_delta)
        .def_readwrite("revin_eps", &ModelConfig::revin_eps)
        .def_readwrite("xchannel_enabled", &ModelConfig::xchannel_enabled)
        .def_readwrite("revin_affine", &ModelConfig::revin_affine)
        .def_readwrite("combine", &ModelConfig::combine)
        .def_property_readonly("n_tokens", &ModelConfig::n_tokens)
        .def("validate", &ModelConfig::validate);

    py::class_<TSMambaModel>(m, "Model")
        .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed") = 0)
        .def_property_readonly("config", &TSMambaModel::config)
        .def("parameter_names",
             [](const TSMambaModel& model) {
                 std::vector<std::string> names;
                 for (const Parameter& p : model.params().all()) names.push_back(p.name);
                 return names;
             })
        .def("parameter", [](const TSMambaModel& model, const std::string& name) {
            return to_array(model.params().at(name).value);
        })
        .def("num_parameters", [](const TSMambaModel& model) { return model.params().numel(); })
        .def("forecast", [](const TSMambaModel& model, const Array& x) { return to_array(forecast(model, to_tensor(x))); },
             py::arg("x"), "Forecast [D, T] for a raw lookback window [D, L].")
        .def("save", [](const TSMambaModel& model, const std::string& path, const std::string& stage) {
            save_checkpoint(path, model, stage);
        }, py::arg("path"), py::arg("stage") = "stage2");

    m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path).model; }, py::arg("path"));
    m.def("checkpoint_stage", [](const std::string& path) { return load_checkpoint(path).stage; }, py::arg("path"));

    m.def("revin_normalize", [](const Array& x, Real eps) {
        const Normalized n = revin_normalize(to_tensor(x), eps);
        return py::make_tuple(to_array(n.x_hat), to_array(n.stats.mean), to_array(n.stats.std));
    }, py::arg("x"), py::arg("eps") = 1e-8);

    m.def("selective_scan", [](const Array& x, const Array& a_log, const Array& x_to_b, const Array& x_to_c,
                               const Array& x_to_dt, const Array& dt_bias, const Array& d_skip, bool parallel) {
        SSMParams p{to_tensor(a_log), to_tensor(x_to_b), to_tensor(x_to_c), to_tensor(x_to_dt), to_tensor(dt_bias),
                    to_tensor(d_skip)};
        const Tensor xt = to_tensor(x);
        return to_array(parallel ? selective_scan_parallel(xt, p, 1) : selective_scan_sequential(xt, p));
    }, py::arg("x"), py::arg("a_log"), py::arg("x_to_b"), py::arg("x_to_c"), py::arg("x_to_dt"), py::arg("dt_bias"),
          py::arg("d_skip"), py::arg("parallel") = false);

    m.def("synth", [](const std::string& preset, std::uint64_t seed, std::size_t channels, std::size_t rows,
                      std::size_t lag, Real gain) {
        return to_array(synth_generate(synth_preset(preset, seed, channels, rows, lag, gain)).values);
    }, py::arg("preset"), py::arg("seed") = 0, py::arg("channels") = 1, py::arg("rows") = 1000, py::arg("lag") = 4,
          py::arg("gain") = 1.0, "Synthetic series [rows, channels].");

    m.def("mse", [](const Array& p, const Array& t) { return metric_mse(to_tensor(p), to_tensor(t)); });
    m.def("mae", [](const Array& p, const Array& t) { return metric_mae(to_tensor(p), to_tensor(t)); });
}
