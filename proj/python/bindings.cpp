#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "smolpipe/budget.hpp"
#include "smolpipe/image.hpp"
#include "smolpipe/shuffle.hpp"
#include "smolpipe/tensor.hpp"
#include "smolpipe/vocab.hpp"

namespace py = pybind11;
using namespace smolpipe;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict count_dict(const ImageTokenCount& c) {
  py::dict d;
  d["rows"] = c.rows;
  d["cols"] = c.cols;
  d["tiles"] = c.tiles;
  d["visual_tokens"] = c.visual_tokens;
  d["marker_tokens"] = c.marker_tokens;
  d["total"] = c.total();
  return d;
}

}  // namespace

PYBIND11_MODULE(_smolpipe, m) {
  m.doc() = "Desk-scale multimodal pipeline kernels: pixel shuffle, tiling "
            "geometry, tokenization, and context budgeting.";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
  py::register_exception<ContextOverflowError>(m, "ContextOverflowError", PyExc_RuntimeError);

  m.def(
      "pixel_shuffle",
      [](const DoubleArray& features, std::size_t r) {
        NoGradGuard ng;
        return to_array(pixel_shuffle(to_tensor(features), r));
      },
      py::arg("features"), py::arg("r"),
      "Space-to-depth on an [h, w, c] feature map: r x r blocks fold into "
      "channels, shrinking the token count r^2-fold.");
  m.def(
      "pixel_unshuffle",
      [](const DoubleArray& features, std::size_t r) {
        NoGradGuard ng;
        return to_array(pixel_unshuffle(to_tensor(features), r));
      },
      py::arg("features"), py::arg("r"), "Exact inverse of pixel_shuffle.");
  m.def(
      "flatten_tokens",
      [](const DoubleArray& features) {
        NoGradGuard ng;
        return to_array(flatten_tokens(to_tensor(features)));
      },
      py::arg("features"), "[h, w, c] -> [h*w, c] in raster order.");
  m.def(
      "rope",
      [](const DoubleArray& x, const std::vector<int>& positions, double base) {
        NoGradGuard ng;
        return to_array(rope(to_tensor(x), positions, base));
      },
      py::arg("x"), py::arg("positions"), py::arg("base") = 10000.0,
      "Rotary embedding over the last dim; attention dots depend only on "
      "relative positions.");

  m.def("longest_edge_fit", &longest_edge_fit, py::arg("height"), py::arg("width"),
        py::arg("cap"), "Post-cap dimensions for the longest-edge resize.");
  m.def("grid_shape", &grid_shape, py::arg("height"), py::arg("width"), py::arg("tile_size"),
        "(rows, cols) the tiler produces; (0, 0) for a single tile.");

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init<>())
      .def_readwrite("encoder_params", &PipelineConfig::encoder_params)
      .def_readwrite("lm_params", &PipelineConfig::lm_params)
      .def_readwrite("tile_size", &PipelineConfig::tile_size)
      .def_readwrite("patch", &PipelineConfig::patch)
      .def_readwrite("shuffle_r", &PipelineConfig::shuffle_r)
      .def_readwrite("longest_edge_cap", &PipelineConfig::longest_edge_cap)
      .def_readwrite("context_limit", &PipelineConfig::context_limit)
      .def_readwrite("frames_per_video", &PipelineConfig::frames_per_video)
      .def_readwrite("tokens_per_frame", &PipelineConfig::tokens_per_frame)
      .def_readwrite("n_layers_lm", &PipelineConfig::n_layers_lm)
      .def_readwrite("n_heads", &PipelineConfig::n_heads)
      .def_readwrite("head_dim", &PipelineConfig::head_dim)
      .def("validate", &PipelineConfig::validate)
      .def("tokens_per_tile", &PipelineConfig::tokens_per_tile)
      .def_static(
          "load", [](const std::string& path) { return PipelineConfig::load(path); },
          py::arg("path"));

  m.def(
      "image_token_count",
      [](const PipelineConfig& cfg, std::size_t height, std::size_t width) {
        return count_dict(image_token_count(cfg, height, width));
      },
      py::arg("config"), py::arg("height"), py::arg("width"),
      "Token accounting for one image pushed through cap -> tiling -> shuffle.");
  m.def("video_token_count", &video_token_count, py::arg("config"));
  m.def("kv_cache_bytes", &kv_cache_bytes, py::arg("config"), py::arg("seq_len"),
        py::arg("batch"), py::arg("bytes_per_scalar"),
        "2 * layers * heads * head_dim * seq * batch * bytes_per_scalar.");
  m.def(
      "allocation_report",
      [](std::uint64_t encoder_params, std::uint64_t lm_params) {
        AllocationReport r = allocation_report(encoder_params, lm_params);
        py::dict d;
        d["ratio"] = r.ratio;
        d["label"] = r.label;
        return d;
      },
      py::arg("encoder_params"), py::arg("lm_params"));

  m.def(
      "plan_mixture",
      [](const std::vector<std::pair<std::string, double>>& fractions, std::size_t n_samples,
         std::uint64_t seed) {
        MixtureSpec spec;
        spec.fractions = fractions;
        spec.seed = seed;
        MixturePlan plan = plan_mixture(spec, n_samples);
        py::dict d;
        d["sequence"] = plan.sequence;
        d["counts"] = plan.counts;
        d["rare_warning"] = plan.rare_warning;
        return d;
      },
      py::arg("fractions"), py::arg("n_samples"), py::arg("seed") = 0,
      "Deterministic largest-deficit schedule over (category, fraction) pairs.");

  py::class_<Vocab>(m, "Vocab")
      .def_static("byte_fallback", &Vocab::byte_fallback,
                  "Raw bytes plus role markers and end-of-utterance.")
      .def("size", &Vocab::size)
      .def("is_special", &Vocab::is_special, py::arg("id"))
      .def("has_special", &Vocab::has_special, py::arg("name"))
      .def("special_id", &Vocab::special_id, py::arg("name"))
      .def("token_string", &Vocab::token_string, py::arg("id"))
      .def("encode", &Vocab::encode, py::arg("text"))
      .def("encode_bytes", &Vocab::encode_bytes, py::arg("text"))
      .def("decode", &Vocab::decode, py::arg("ids"));
  m.def("extend_vocab", &extend_vocab, py::arg("base"), py::arg("max_rows"), py::arg("max_cols"),
        "Adds row/column positional tokens plus the media specials.");
  m.def("positional_token_name", &positional_token_name, py::arg("row"), py::arg("col"));
}
