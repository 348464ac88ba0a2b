#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "flns/checkpoint.hpp"
#include "flns/corpus.hpp"
#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/evalkit.hpp"
#include "flns/intervene.hpp"
#include "flns/lens.hpp"
#include "flns/model.hpp"
#include "flns/pipeline.hpp"
#include "flns/probes.hpp"

namespace py = pybind11;
using namespace flns;

namespace {

using FloatRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::span<const float> as_span(const Eigen::Ref<const Eigen::RowVectorXf>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

py::dict trace_dict(const Trace<float>& t) {
  py::dict d;
  d["tokens"] = t.tokens;
  py::list hidden;
  for (const auto& h : t.hidden) hidden.append(FloatRows(h));
  d["hidden"] = hidden;
  d["logits"] = FloatRows(t.logits);
  d["dists"] = FloatRows(t.dists);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Toy-transformer future-token decoding: model, probes, prompt interventions, metrics, lens";

  static py::exception<Error> error_type(m, "FlnsError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object err = py::handle(error_type)(e.what());
      err.attr("code") = std::string(error_code_name(e.code()));
      py::set_error(error_type, err);
    }
  });

  py::class_<Tokenizer>(m, "Tokenizer")
      .def("encode", &Tokenizer::encode)
      .def("decode", [](const Tokenizer& t, const std::vector<TokenId>& ids) { return t.decode(ids); })
      .def("text", &Tokenizer::text)
      .def("__len__", &Tokenizer::size)
      .def_property_readonly("entries", &Tokenizer::entries);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_vocab", &ModelConfig::d_vocab)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("seed", &ModelConfig::seed)
      .def_property(
          "positional_scheme", [](const ModelConfig& c) { return positional_scheme_name(c.positional); },
          [](ModelConfig& c, const std::string& s) { c.positional = parse_positional_scheme(s); })
      .def("to_json", [](const ModelConfig& c) { return config_to_json(c); });

  py::class_<TransformerModel>(m, "Model")
      .def_readonly("config", &TransformerModel::config)
      .def_readonly("tokenizer", &TransformerModel::tokenizer)
      .def("tokenize", [](const TransformerModel& model, const std::string& text) { return tokenize(model, text); })
      .def(
          "forward",
          [](const TransformerModel& model, const std::vector<TokenId>& tokens) {
            return trace_dict(forward_trace(model, tokens));
          },
          py::arg("tokens"), "Hidden states for layers 0..L plus logits and next-token distributions.")
      .def(
          "forward_patched",
          [](const TransformerModel& model, const std::vector<TokenId>& tokens, int layer, std::size_t position,
             const Eigen::RowVectorXf& vector) {
            const PatchSpec<float> patch{layer, position, vector};
            return trace_dict(forward_patched(model, tokens, patch));
          },
          py::arg("tokens"), py::arg("layer"), py::arg("position"), py::arg("vector"))
      .def(
          "generate",
          [](const TransformerModel& model, const std::vector<TokenId>& tokens, std::size_t n) {
            return greedy_generate(model, tokens, n).new_tokens;
          },
          py::arg("tokens"), py::arg("n"))
      .def("checksum", [](const TransformerModel& model) { return weights_checksum(model.weights); })
      .def("save", [](const TransformerModel& model, const std::string& path) { save_model(model, path); });

  m.def("load_model", &load_model, py::arg("path"));

  m.def(
      "kl_divergence",
      [](const Eigen::Ref<const Eigen::RowVectorXf>& p, const Eigen::Ref<const Eigen::RowVectorXf>& q) {
        if (p.size() != q.size()) throw Error(ErrorCode::kDimensionError, "distribution sizes differ");
        return kl_divergence(as_span(p), as_span(q));
      },
      py::arg("p"), py::arg("q"));
  m.def(
      "precision_at_k",
      [](const Eigen::Ref<const Eigen::RowVectorXf>& pred, const Eigen::Ref<const Eigen::RowVectorXf>& ref,
         std::size_t k, bool reference_in_prediction) {
        return precision_at_k(as_span(pred), as_span(ref), k,
                              reference_in_prediction ? PrecisionDirection::kReferenceInPrediction
                                                      : PrecisionDirection::kPredictionInReference);
      },
      py::arg("pred"), py::arg("ref"), py::arg("k"), py::arg("reference_in_prediction") = false);
  m.def(
      "surprisal", [](const Eigen::Ref<const Eigen::RowVectorXf>& ref, TokenId token) { return surprisal(as_span(ref), token); },
      py::arg("ref"), py::arg("token"));
  m.def(
      "bigram_counts",
      [](const std::vector<std::vector<TokenId>>& corpus) {
        std::map<std::pair<TokenId, TokenId>, std::uint64_t> counts = BigramTable::build(corpus).counts();
        return counts;
      },
      py::arg("corpus"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static("from_json", &parse_run_config)
      .def_static("load", &load_run_config)
      .def("to_json", &RunConfig::to_json)
      .def_readwrite("artifact_dir", &RunConfig::artifact_dir)
      .def_readwrite("report_dir", &RunConfig::report_dir)
      .def_readwrite("seed", &RunConfig::seed);

  auto summary = [](const StageSummary& s) {
    py::dict d;
    d["outputs"] = s.outputs;
    py::dict metrics;
    for (const auto& [k, v] : s.metrics) metrics[py::str(k)] = v;
    d["metrics"] = metrics;
    return d;
  };
  m.def("train_model", [summary](const RunConfig& c) { return summary(train_model_stage(c)); });
  m.def("train_probes", [summary](const RunConfig& c) { return summary(train_probes_stage(c)); });
  m.def("train_prompts", [summary](const RunConfig& c) { return summary(train_prompts_stage(c)); });
  m.def("evaluate", [summary](const RunConfig& c) { return summary(eval_stage(c)); });

  m.def(
      "lens_json",
      [](const RunConfig& c, const std::string& prompt, const std::string& method, int horizon) {
        const TransformerModel model = load_model(model_path(c));
        const Artifacts artifacts = load_artifacts(c, model);
        LensOptions options;
        options.method = method;
        options.horizon = horizon;
        return grid_to_json(compute_future_lens(model, prompt, artifacts, options));
      },
      py::arg("config"), py::arg("prompt"), py::arg("method") = "learned", py::arg("horizon") = 4,
      py::call_guard<py::gil_scoped_release>());
}
