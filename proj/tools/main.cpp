// convattn: command-line front end.
//
// Exit codes: 0 success, 1 quality or threshold failure, 2 usage, config or
// input error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "convattn/config.hpp"
#include "convattn/data.hpp"
#include "convattn/errors.hpp"
#include "convattn/evaluation.hpp"
#include "convattn/features.hpp"
#include "convattn/training.hpp"

namespace fs = std::filesystem;
using namespace convattn;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Options {
  std::string config;
  std::uint64_t seed = 0;
  std::string manifest;
  std::string split;
  std::size_t beam = 0;
  std::string checkpoint;
  std::string phone_map;
  std::string out;

  std::string audio_dir;
  std::string stats;
  std::string hyp;
  bool greedy = false;
  std::string corrupt_op;
  double corrupt_factor = 1.5;
  std::size_t frames = 9;

  data::SynthOptions synth;
  std::string synth_kind = "copy";
};

// Config file first, then flags given on the command line.
RunConfig resolve_config(const Options& o, const CLI::App& cmd) {
  auto given = [&](const std::string& name) {
    const CLI::Option* opt = cmd.get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
  };
  RunConfig rc;
  if (!o.config.empty()) rc.apply(read_config(o.config));
  if (given("--seed")) rc.seed = o.seed;
  if (given("--manifest")) rc.manifest = o.manifest;
  if (given("--out")) rc.out = o.out;
  if (given("--beam")) rc.train.beam = o.beam;
  return rc;
}

std::string format_score(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

fs::path default_vocab(const RunConfig& rc) {
  if (!rc.vocab.empty()) return rc.vocab;
  return fs::path(rc.manifest).parent_path() / "vocab.txt";
}

int cmd_featurize(const Options& o) {
  std::vector<fs::path> wavs;
  if (fs::is_directory(o.audio_dir)) {
    for (const auto& e : fs::directory_iterator(o.audio_dir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
      if (e.is_regular_file() && ext == ".wav") wavs.push_back(e.path());
    }
  } else {
    std::cerr << "error: " << o.audio_dir << " is not a directory\n";
    return kUsage;
  }
  if (wavs.empty()) {
    std::cerr << "no audio found in " << o.audio_dir << "\n";
    return kFailed;
  }
  std::sort(wavs.begin(), wavs.end());
  fs::create_directories(o.out);
  std::vector<features::FeatureTensor> done;
  std::vector<std::string> failures;
  for (const auto& w : wavs) {
    try {
      auto ft = features::compute_features(features::read_wav(w));
      features::write_features(fs::path(o.out) / (w.stem().string() + ".ften"), ft);
      if (!o.stats.empty()) done.push_back(std::move(ft));
    } catch (const std::exception& e) {
      failures.push_back(w.filename().string() + ": " + e.what());
    }
  }
  if (!o.stats.empty() && !done.empty()) features::write_norm_stats(o.stats, features::compute_norm_stats(done));
  std::cout << "featurized " << wavs.size() - failures.size() << " of " << wavs.size() << " files into " << o.out
            << "\n";
  for (const auto& f : failures) std::cerr << "failed: " << f << "\n";
  return failures.empty() ? kOk : kFailed;
}

int cmd_synth(const Options& o, const CLI::App& cmd) {
  data::SynthOptions s = o.synth;
  s.kind = data::parse_synth_kind(o.synth_kind);
  if (cmd.count("--seed")) s.seed = o.seed;
  auto corpus = data::synth_corpus(s);
  const auto manifest = data::write_synth_corpus(o.out, corpus);
  std::cout << "wrote " << corpus.records.size() << " utterances (" << data::to_string(s.kind) << ", "
            << s.vocab << " symbols) to " << manifest.string() << "\n";
  return kOk;
}

int cmd_train(const Options& o, const CLI::App& cmd) {
  RunConfig rc = resolve_config(o, cmd);
  if (rc.manifest.empty()) throw ConfigError("no manifest: pass --manifest or set manifest in the config");
  if (rc.out.empty()) throw ConfigError("no run directory: pass --out or set out in the config");
  const auto vocab = data::Vocabulary::load(default_vocab(rc));
  const bool explicit_vocab =
      !o.config.empty() && read_config(o.config).count("model.vocab_size") != 0;
  if (explicit_vocab && rc.model.decoder.vocab_size != vocab.size()) {
    throw ConfigError("config key model.vocab_size is " + std::to_string(rc.model.decoder.vocab_size) +
                      " but the vocabulary has " + std::to_string(vocab.size()) + " labels");
  }
  rc.model.decoder.vocab_size = vocab.size();
  rc.vocab = default_vocab(rc).string();

  const auto manifest = data::load_manifest(rc.manifest, &vocab);
  std::optional<features::NormStats> stats;
  if (!rc.norm_stats.empty()) stats = features::read_norm_stats(rc.norm_stats);
  const auto train = data::load_corpus(manifest, "train", vocab, stats ? &*stats : nullptr);
  const auto dev = data::load_corpus(manifest, "dev", vocab, stats ? &*stats : nullptr);
  fs::create_directories(rc.out);

  Seq2Seq model = make_model(rc.model, rc.seed);
  std::cout << "model: " << model.params().parameter_count() << " parameters; train " << train.size() << ", dev "
            << dev.size() << " utterances\n";
  const auto r = train_loop(model, rc, vocab, train, dev, rc.out, &std::cout);
  std::cout << "stopped (" << r.stop_reason << ") after " << r.epochs << " epochs, " << r.steps
            << " steps; best dev error " << format_score(r.best_dev_error) << " in "
            << r.best_checkpoint.filename().string() << "\n";
  return r.stop_reason == "diverged" ? kFailed : kOk;
}

int cmd_decode(const Options& o, const CLI::App& cmd) {
  if (!fs::exists(o.checkpoint)) throw FormatError("checkpoint not found: " + o.checkpoint);
  RunConfig rc = resolve_config(o, cmd);
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  data::Vocabulary vocab;
  Seq2Seq model = model_from_checkpoint(ckpt, &vocab);
  if (!o.config.empty()) {
    // The config describes the model the caller expects; insist it matches.
    ModelConfig expected = rc.model;
    expected.decoder.vocab_size = vocab.size();
    Seq2Seq check(expected);
    restore_model_state(ckpt, check.params());
  }
  if (rc.manifest.empty()) throw ConfigError("no manifest: pass --manifest or set manifest in the config");
  const auto manifest = data::load_manifest(rc.manifest, &vocab);
  std::optional<features::NormStats> stats;
  if (!rc.norm_stats.empty()) stats = features::read_norm_stats(rc.norm_stats);
  const std::string split = o.split.empty() ? "test" : o.split;
  const auto corpus = data::load_corpus(manifest, split, vocab, stats ? &*stats : nullptr);
  if (corpus.size() == 0) throw DataError("split " + split + " of " + rc.manifest + " is empty");

  std::ostringstream lines;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& ft = corpus.features[i];
    Tensor x = Tensor::from({ft.freq, ft.frames, ft.channels}, ft.values);
    BeamResult r;
    if (o.greedy) {
      auto enc = model.encode(Tensor::from({1, ft.freq, ft.frames, ft.channels}, ft.values), {ft.frames}, {});
      Seq2SeqStepModel sm(model, enc);
      r = greedy_search(sm, 2 * encoder_length(ft.frames, model.config().encoder.time_stride));
    } else {
      r = decode_utterance(model, x, BeamOptions{rc.train.beam});
    }
    const auto labels = vocab.decode(r.tokens);
    lines << corpus.ids[i] << '\t' << format_score(r.score) << '\t';
    for (std::size_t k = 0; k < labels.size(); ++k) lines << (k ? " " : "") << labels[k];
    lines << '\n';
  }
  if (o.out.empty()) {
    std::cout << lines.str();
  } else {
    fs::create_directories(o.out);
    const auto path = fs::path(o.out) / ("hyp." + split + ".txt");
    std::ofstream(path) << lines.str();
    std::cout << "decoded " << corpus.size() << " utterances to " << path.string() << "\n";
  }
  return kOk;
}

int cmd_score(const Options& o) {
  const std::string split = o.split.empty() ? "test" : o.split;
  const auto manifest = data::load_manifest(o.manifest);
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto* u : manifest.split(split)) refs[u->id] = u->labels;
  if (refs.empty()) throw DataError("split " + split + " of " + o.manifest + " is empty");

  std::ifstream is(o.hyp);
  if (!is) throw DataError("cannot open hypothesis file " + o.hyp);
  std::map<std::string, std::vector<std::string>> hyps;
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() == 2) fields.emplace_back();
    if (fields.size() != 3) throw DataError(o.hyp + ":" + std::to_string(lineno) + ": expected id, score, labels");
    std::istringstream ls(fields[2]);
    std::vector<std::string> labels;
    for (std::string l; ls >> l;) labels.push_back(l);
    if (!hyps.emplace(fields[0], labels).second) throw DataError(o.hyp + ": duplicate id " + fields[0]);
  }
  std::vector<std::string> missing, extra;
  for (const auto& [id, _] : refs)
    if (!hyps.count(id)) missing.push_back(id);
  for (const auto& [id, _] : hyps)
    if (!refs.count(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::cerr << "error: utterance ids differ between " << o.manifest << " (" << split << ") and " << o.hyp << "\n";
    for (const auto& id : missing) std::cerr << "  missing hypothesis: " << id << "\n";
    for (const auto& id : extra) std::cerr << "  no reference: " << id << "\n";
    return kUsage;
  }

  std::optional<PhoneMap> pm;
  if (!o.phone_map.empty()) pm = PhoneMap::load(o.phone_map);
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> pairs;
  for (const auto& [id, ref] : refs) {
    const auto& hyp = hyps.at(id);
    pairs.emplace_back(pm ? pm->apply(ref) : ref, pm ? pm->apply(hyp) : hyp);
  }
  const auto report = format_score_report(count_errors(pairs), pairs.size());
  std::cout << report;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / ("score." + split + ".txt")) << report;
  }
  return kOk;
}

int cmd_gradcheck(const Options& o, const CLI::App& cmd) {
  RunConfig rc;
  rc.model = ModelConfig::tiny();
  if (!o.config.empty()) rc.apply(read_config(o.config));
  if (cmd.count("--seed")) rc.seed = o.seed;
  const double tolerance = 1e-4;
  std::optional<ScopedBackwardFault> fault;
  if (!o.corrupt_op.empty()) fault.emplace(o.corrupt_op, o.corrupt_factor);
  const auto report = check_model_gradients(rc.model, rc.seed, o.frames);
  for (const auto& t : report.tensors) {
    std::printf("%-28s %7zu entries  max rel error %.3e%s\n", t.name.c_str(), t.entries, t.max_rel_error,
                t.max_rel_error < tolerance ? "" : "  FAIL");
  }
  std::printf("worst %.6e over %zu tensors (%zu kink probes skipped)\n", report.max_rel_error,
              report.tensors.size(), report.kink_skipped);
  if (report.passed(tolerance)) return kOk;
  std::cerr << "gradient check failed for:";
  for (const auto& name : report.failing(tolerance)) std::cerr << ' ' << name;
  std::cerr << "\n";
  return kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional attention sequence-to-sequence recognizer"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* c) { c->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile); };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "master random seed"); };
  auto add_split = [&](CLI::App* c) {
    c->add_option("--split", o.split, "manifest split")->check(CLI::IsMember({"train", "dev", "test"}));
  };

  auto* featurize = app.add_subcommand("featurize", "compute feature files from a directory of wav files");
  featurize->add_option("audio_dir", o.audio_dir, "directory of .wav files")->required();
  featurize->add_option("--out", o.out, "output directory")->required();
  featurize->add_option("--stats", o.stats, "also write normalization statistics here");

  auto* synth = app.add_subcommand("synth", "write a synthetic transduction corpus");
  synth->add_option("--out", o.out, "output directory")->required();
  synth->add_option("--kind", o.synth_kind, "copy, reverse or blockmap");
  synth->add_option("--vocab", o.synth.vocab, "number of symbols");
  synth->add_option("--min-len", o.synth.min_len);
  synth->add_option("--max-len", o.synth.max_len);
  synth->add_option("--train", o.synth.train, "training utterances");
  synth->add_option("--dev", o.synth.dev, "development utterances");
  synth->add_option("--test", o.synth.test, "test utterances");
  synth->add_option("--noise", o.synth.noise, "feature noise standard deviation");
  add_seed(synth);

  auto* train = app.add_subcommand("train", "train a model; resumes if the run directory has checkpoints");
  add_config(train);
  add_seed(train);
  train->add_option("--manifest", o.manifest, "corpus manifest");
  train->add_option("--out", o.out, "run directory");

  auto* decode = app.add_subcommand("decode", "decode one split of a manifest");
  decode->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  add_config(decode);
  add_seed(decode);
  decode->add_option("--manifest", o.manifest, "corpus manifest");
  add_split(decode);
  decode->add_option("--beam", o.beam, "beam width")->check(CLI::PositiveNumber);
  decode->add_flag("--greedy", o.greedy, "argmax decoding instead of beam search");
  decode->add_option("--out", o.out, "write hyp.<split>.txt here instead of stdout");

  auto* score = app.add_subcommand("score", "error rate of a decode file against a manifest");
  score->add_option("--manifest", o.manifest, "reference manifest")->required();
  score->add_option("hypotheses", o.hyp, "decode output file")->required();
  add_split(score);
  score->add_option("--phone-map", o.phone_map, "label folding applied before scoring");
  score->add_option("--out", o.out, "also write score.<split>.txt here");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every parameter tensor");
  add_config(gradcheck);
  add_seed(gradcheck);
  gradcheck->add_option("--frames", o.frames, "input frames of the probe batch");
  gradcheck->add_option("--corrupt-backward", o.corrupt_op, "scale the backward rule of this op (test fixture)");
  gradcheck->add_option("--corrupt-factor", o.corrupt_factor);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*featurize) return cmd_featurize(o);
    if (*synth) return cmd_synth(o, *synth);
    if (*train) return cmd_train(o, *train);
    if (*decode) return cmd_decode(o, *decode);
    if (*score) return cmd_score(o);
    if (*gradcheck) return cmd_gradcheck(o, *gradcheck);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
