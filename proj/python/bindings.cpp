#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "convattn/config.hpp"
#include "convattn/data.hpp"
#include "convattn/errors.hpp"
#include "convattn/evaluation.hpp"
#include "convattn/features.hpp"
#include "convattn/training.hpp"

namespace py = pybind11;
using namespace convattn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const features::FeatureTensor& ft) {
  Array out({ft.freq, ft.frames, ft.channels});
  std::copy(ft.values.begin(), ft.values.end(), out.mutable_data());
  return out;
}

features::FeatureTensor from_numpy(const Array& a) {
  if (a.ndim() != 3) throw DimensionError("features must be a [F x T x C] array");
  features::FeatureTensor ft(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                             static_cast<std::size_t>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), ft.values.begin());
  return ft;
}

py::dict beam_dict(const BeamResult& r) {
  py::dict d;
  d["tokens"] = r.tokens;
  d["score"] = r.score;
  d["truncated"] = r.truncated;
  return d;
}

// Beam search over a Python callable mapping a prefix to next-token
// log-probabilities.
class CallbackModel : public StepModel {
 public:
  CallbackModel(std::function<std::vector<double>(const std::vector<int>&)> fn, std::size_t vocab)
      : fn_(std::move(fn)), vocab_(vocab) {}
  std::size_t vocab_size() const override { return vocab_; }
  int eos() const override { return static_cast<int>(vocab_) - 1; }
  State initial_state() override { return std::make_shared<const std::vector<int>>(); }
  std::vector<double> step(const State& state, int prev, State* next) override {
    auto prefix = *static_cast<const std::vector<int>*>(state.get());
    if (prev >= 0) prefix.push_back(prev);
    auto lp = fn_(prefix);
    if (lp.size() != vocab_) throw DimensionError("step function returned the wrong number of log-probabilities");
    if (next) *next = std::make_shared<const std::vector<int>>(std::move(prefix));
    return lp;
  }

 private:
  std::function<std::vector<double>(const std::vector<int>&)> fn_;
  std::size_t vocab_;
};

ModelConfig model_config(const std::map<std::string, std::string>& overrides, bool tiny) {
  RunConfig rc;
  if (tiny) rc.model = ModelConfig::tiny();
  rc.apply(ConfigMap(overrides.begin(), overrides.end()));
  return rc.model;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Convolutional attention sequence-to-sequence recognizer";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // evaluation
  m.def("edit_distance", [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
    return edit_distance(a, b);
  }, py::arg("a"), py::arg("b"));
  m.def("edit_distance", [](const std::vector<int>& a, const std::vector<int>& b) { return edit_distance(a, b); },
        py::arg("a"), py::arg("b"));
  m.def("error_rate", [](const std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>>& pairs) {
    return error_rate(pairs);
  }, py::arg("pairs"), "Total edit distance over total reference length.");

  py::class_<PhoneMap>(m, "PhoneMap")
      .def_static("load", &PhoneMap::load, py::arg("path"))
      .def_static("parse", &PhoneMap::parse, py::arg("text"), py::arg("origin") = "<string>")
      .def("apply", &PhoneMap::apply, py::arg("labels"))
      .def("__len__", &PhoneMap::size)
      .def("__contains__", &PhoneMap::contains);

  // features
  m.def("compute_features", [](const Array& samples, int sample_rate) {
    if (samples.ndim() != 1) throw DimensionError("samples must be one-dimensional");
    features::Waveform w;
    w.samples.assign(samples.data(), samples.data() + samples.size());
    w.sample_rate = sample_rate;
    return to_numpy(features::compute_features(w));
  }, py::arg("samples"), py::arg("sample_rate") = 16000, "Returns a [41 x T x 3] array.");
  m.def("read_features", [](const std::filesystem::path& p) { return to_numpy(features::read_features(p)); });
  m.def("write_features", [](const std::filesystem::path& p, const Array& a) {
    features::write_features(p, from_numpy(a));
  });
  m.def("read_wav", [](const std::filesystem::path& p) {
    auto w = features::read_wav(p);
    return py::make_tuple(Array(static_cast<py::ssize_t>(w.samples.size()), w.samples.data()), w.sample_rate);
  });

  // data
  m.def("write_synth_corpus", [](const std::filesystem::path& dir, const std::string& kind, std::size_t vocab,
                                 std::size_t min_len, std::size_t max_len, std::size_t train, std::size_t dev,
                                 std::size_t test, double noise, std::uint64_t seed) {
    data::SynthOptions o;
    o.kind = data::parse_synth_kind(kind);
    o.vocab = vocab;
    o.min_len = min_len;
    o.max_len = max_len;
    o.train = train;
    o.dev = dev;
    o.test = test;
    o.noise = noise;
    o.seed = seed;
    return data::write_synth_corpus(dir, data::synth_corpus(o));
  }, py::arg("dir"), py::arg("kind") = "copy", py::arg("vocab") = 8, py::arg("min_len") = 3, py::arg("max_len") = 6,
     py::arg("train") = 2000, py::arg("dev") = 200, py::arg("test") = 0, py::arg("noise") = 0.05,
     py::arg("seed") = 1, "Writes features, manifest.tsv and vocab.txt; returns the manifest path.");

  // decoding
  m.def("beam_search", [](std::function<std::vector<double>(const std::vector<int>&)> step, std::size_t vocab,
                          std::size_t width, std::size_t max_len, bool length_normalize) {
    CallbackModel model(std::move(step), vocab);
    return beam_dict(beam_search(model, BeamOptions{width, max_len, length_normalize}));
  }, py::arg("step"), py::arg("vocab"), py::arg("width") = 10, py::arg("max_len") = 10,
     py::arg("length_normalize") = false,
     "step(prefix) -> next-token log-probabilities; the last id is end-of-sequence.");

  // model
  py::class_<Seq2Seq>(m, "Model")
      .def(py::init([](std::map<std::string, std::string> config, std::uint64_t seed, bool tiny) {
             return make_model(model_config(config, tiny), seed);
           }),
           py::arg("config") = std::map<std::string, std::string>{}, py::arg("seed") = 1, py::arg("tiny") = false,
           "Fresh model; config holds model.* keys overriding the defaults (or the tiny preset).")
      .def_static("load", [](const std::filesystem::path& p) {
        data::Vocabulary vocab;
        Seq2Seq model = model_from_checkpoint(load_checkpoint(p), &vocab);
        return py::make_tuple(std::move(model), vocab.labels());
      }, py::arg("path"), "Returns (model, labels) from a checkpoint.")
      .def_property_readonly("parameter_count", [](const Seq2Seq& s) { return s.params().parameter_count(); })
      .def_property_readonly("vocab_size", [](const Seq2Seq& s) { return s.config().decoder.vocab_size; })
      .def("parameter_shapes", [](const Seq2Seq& s) {
        std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
        for (const auto& p : s.params().params()) out.emplace_back(p.name, p.value.shape());
        return out;
      })
      .def("decode", [](Seq2Seq& s, const Array& features, std::size_t beam, std::size_t max_len) {
        const auto ft = from_numpy(features);
        Tensor x = Tensor::from({ft.freq, ft.frames, ft.channels}, ft.values);
        return beam_dict(decode_utterance(s, x, BeamOptions{beam, max_len}));
      }, py::arg("features"), py::arg("beam") = 10, py::arg("max_len") = 0)
      .def("encoder_states", [](Seq2Seq& s, const Array& features) {
        const auto ft = from_numpy(features);
        auto enc = s.encode(Tensor::from({1, ft.freq, ft.frames, ft.channels}, ft.values), {ft.frames}, {});
        const auto& shape = enc.states.shape();
        Array out({shape[1], shape[2]});
        std::copy(enc.states.data().begin(), enc.states.data().end(), out.mutable_data());
        return out;
      }, py::arg("features"), "[S' x 2E] encoder outputs for one utterance.");

  m.def("gradcheck", [](std::map<std::string, std::string> config, std::uint64_t seed) {
    const auto r = check_model_gradients(model_config(config, true), seed);
    py::dict per;
    for (const auto& t : r.tensors) per[py::str(t.name)] = t.max_rel_error;
    return py::make_tuple(r.max_rel_error, per);
  }, py::arg("config") = std::map<std::string, std::string>{}, py::arg("seed") = 1,
     "Finite-difference check of a tiny model; returns (worst, per-tensor worst).");

  m.def("train", [](std::map<std::string, std::string> config, const std::filesystem::path& run_dir) {
    RunConfig rc;
    rc.apply(ConfigMap(config.begin(), config.end()));
    if (rc.manifest.empty()) throw ConfigError("config needs a manifest");
    const auto vocab = data::Vocabulary::load(
        rc.vocab.empty() ? std::filesystem::path(rc.manifest).parent_path() / "vocab.txt" : std::filesystem::path(rc.vocab));
    rc.model.decoder.vocab_size = vocab.size();
    const auto manifest = data::load_manifest(rc.manifest, &vocab);
    const auto train = data::load_corpus(manifest, "train", vocab);
    const auto dev = data::load_corpus(manifest, "dev", vocab);
    Seq2Seq model = make_model(rc.model, rc.seed);
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train_loop(model, rc, vocab, train, dev, run_dir);
    }
    py::dict d;
    d["epochs"] = r.epochs;
    d["steps"] = r.steps;
    d["best_dev_error"] = r.best_dev_error;
    d["best_checkpoint"] = r.best_checkpoint;
    d["stop_reason"] = r.stop_reason;
    d["losses"] = r.step_losses;
    return d;
  }, py::arg("config"), py::arg("run_dir"),
     "Trains on the train/dev splits of config['manifest']; keys as in a config file.");
}
