#include "convattn/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>

#include "convattn/errors.hpp"
#include "convattn/evaluation.hpp"

namespace convattn {

namespace fs = std::filesystem;

Seq2Seq make_model(const ModelConfig& config, std::uint64_t seed) {
  Seq2Seq model(config);
  init_params(model.params(), seed);
  return model;
}

Checkpoint model_checkpoint(const Seq2Seq& model, const data::Vocabulary& vocab) {
  Checkpoint ckpt;
  for (const auto& [k, v] : model_config_map(model.config())) ckpt.set_meta(k, v);
  std::string labels;
  for (const auto& l : vocab.labels()) labels += (labels.empty() ? "" : " ") + l;
  ckpt.set_meta("vocab", labels);
  add_model_state(ckpt, model.params());
  return ckpt;
}

Seq2Seq model_from_checkpoint(const Checkpoint& ckpt, data::Vocabulary* vocab) {
  ConfigMap dims;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.rfind("model.", 0) == 0) dims[k] = v;
  }
  if (dims.empty()) throw FormatError("checkpoint carries no model configuration");
  Seq2Seq model(model_config_from_map(dims));
  restore_model_state(ckpt, model.params());
  if (vocab) {
    std::istringstream is(ckpt.meta_value("vocab"));
    std::vector<std::string> labels;
    for (std::string l; is >> l;) labels.push_back(l);
    *vocab = data::Vocabulary(std::move(labels));
  }
  return model;
}

Tensor batch_loss(Seq2Seq& model, const data::Batch& batch, const layers::ForwardContext& ctx) {
  EncoderOutput enc = model.encode(batch.features, batch.lengths, ctx);
  TeacherForced tf = model.teacher_forced(enc, batch.targets, ctx);
  return cross_entropy_loss(tf.log_probs, tf.targets);
}

StepStats train_step(Seq2Seq& model, OptimizerState& opt, const data::Batch& batch, const TrainConfig& cfg,
                     std::uint64_t seed, double weight_decay) {
  Rng rng = make_rng(seed, "dropout", opt.step);
  layers::ForwardContext ctx;
  ctx.mode = layers::Mode::train;
  ctx.keep_prob = 1.0 - cfg.dropout;
  ctx.rng = &rng;
  model.params().zero_grad();
  Tensor loss = batch_loss(model, batch, ctx);
  loss.backward();
  if (weight_decay > 0.0) apply_weight_decay(model.params(), weight_decay);
  StepStats stats;
  stats.loss = loss.item();
  stats.grad_norm = gradient_norm(model.params());
  clip_gradients(model.params(), cfg.clip_norm);
  optimizer_step(model.params(), opt);
  return stats;
}

double evaluate_error_rate(Seq2Seq& model, const data::Corpus& corpus, std::size_t beam, std::size_t limit) {
  const std::size_t n = limit == 0 ? corpus.size() : std::min(limit, corpus.size());
  if (n == 0) throw std::invalid_argument("evaluate_error_rate: empty corpus");
  ErrorCounts counts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ft = corpus.features[i];
    Tensor x = Tensor::from({ft.freq, ft.frames, ft.channels}, ft.values);
    BeamResult r = decode_utterance(model, x, BeamOptions{beam});
    counts.reference_length += corpus.labels[i].size();
    counts.edits += edit_distance(corpus.labels[i], r.tokens);
  }
  return counts.rate();
}

GradCheckOptions model_gradcheck_options() {
  GradCheckOptions o;
  o.step = 2e-3;
  o.richardson = true;
  return o;
}

GradCheckReport check_model_gradients(const ModelConfig& config, std::uint64_t seed, std::size_t frames,
                                      std::size_t batch, const GradCheckOptions& options) {
  Seq2Seq model = make_model(config, seed);
  const auto& e = config.encoder;
  const std::size_t vocab = config.decoder.vocab_size;
  Rng rng = make_rng(seed, "synth", 1u << 20);
  std::vector<double> x(batch * e.freq_bins * frames * e.in_channels);
  for (auto& v : x) v = normal(rng);
  std::vector<std::size_t> lengths(batch, frames);
  std::vector<std::vector<int>> targets(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    // Later utterances are shorter so padding and masking are covered too.
    if (b > 0 && frames > 2 * b) lengths[b] = frames - 2 * b;
    const std::size_t len = 2 + b % 3;
    for (std::size_t t = 0; t < len; ++t) targets[b].push_back(static_cast<int>(rng() % (vocab - 1)));
    targets[b].push_back(static_cast<int>(vocab) - 1);
  }
  Tensor features = Tensor::from({batch, e.freq_bins, frames, e.in_channels}, std::move(x));
  layers::ForwardContext ctx;
  ctx.mode = layers::Mode::train;
  ctx.update_running_stats = false;
  auto loss = [&] {
    EncoderOutput enc = model.encode(features, lengths, ctx);
    TeacherForced tf = model.teacher_forced(enc, targets, ctx);
    return cross_entropy_loss(tf.log_probs, tf.targets);
  };
  const auto named = model.params().named_params();
  return finite_diff_check(loss, named, options);
}

namespace {

struct LoopState {
  std::size_t epoch = 0;
  std::string phase = "main";
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  std::size_t transitions = 0;
  fs::path best_checkpoint;
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt-%010llu.bin", static_cast<unsigned long long>(step));
  return buf;
}

fs::path latest_checkpoint(const fs::path& dir) {
  fs::path best;
  if (!fs::exists(dir)) return best;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("ckpt-", 0) == 0 && entry.path().extension() == ".bin" && (best.empty() || name > best.filename().string())) {
      best = entry.path();
    }
  }
  return best;
}

void log_line(std::ofstream& log, std::size_t epoch, std::uint64_t step, double loss, double grad_norm, double lr,
              const std::string& dev) {
  log << epoch << ' ' << step << ' ' << format_double(loss) << ' ' << format_double(grad_norm) << ' '
      << format_double(lr) << ' ' << dev << ' ' << std::time(nullptr) << '\n';
  log.flush();
}

}  // namespace

TrainResult train_loop(Seq2Seq& model, const RunConfig& config, const data::Vocabulary& vocab,
                       const data::Corpus& train, const data::Corpus& dev, const fs::path& run_dir,
                       std::ostream* progress) {
  if (train.size() == 0) throw DataError("training corpus is empty");
  if (dev.size() == 0) throw DataError("development corpus is empty");
  if (vocab.size() != model.config().decoder.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " labels but the model expects " +
                      std::to_string(model.config().decoder.vocab_size));
  }
  const TrainConfig& tc = config.train;
  const fs::path ckpt_dir = run_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  if (!fs::exists(run_dir / "config.txt")) std::ofstream(run_dir / "config.txt") << config.to_text();

  OptimizerState opt;
  opt.kind = tc.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  opt.learning_rate = tc.learning_rate;
  LoopState st;

  if (fs::path last = latest_checkpoint(ckpt_dir); !last.empty()) {
    Checkpoint ckpt = load_checkpoint(last);
    restore_model_state(ckpt, model.params());
    restore_optimizer_state(ckpt, model.params(), opt);
    st.epoch = std::stoull(ckpt.meta_value("train.epoch"));
    st.phase = ckpt.meta_value("train.phase");
    st.best = std::stod(ckpt.meta_value("train.best_dev_error"));
    st.bad_epochs = std::stoull(ckpt.meta_value("train.bad_epochs"));
    st.transitions = std::stoull(ckpt.meta_value("train.transitions"));
    st.best_checkpoint = ckpt_dir / ckpt.meta_value("train.best_checkpoint");
    opt.learning_rate = std::stod(ckpt.meta_value("opt.learning_rate"));
    if (progress) *progress << "resuming from " << last.filename().string() << " at step " << opt.step << "\n";
  }

  std::ofstream log(run_dir / "metrics.log", std::ios::app);
  std::vector<std::size_t> lengths;
  for (const auto& ft : train.features) lengths.push_back(ft.frames);
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  TrainResult result;
  auto finish = [&](std::string reason) {
    result.epochs = st.epoch;
    result.steps = opt.step;
    result.best_dev_error = st.best;
    result.best_checkpoint = st.best_checkpoint;
    result.phase = st.phase;
    result.phase_transitions = st.transitions;
    result.stop_reason = std::move(reason);
    return result;
  };

  while (st.epoch < tc.max_epochs) {
    const auto batches = data::make_batches(lengths, tc.batch_size, stream_seed(config.seed, "shuffle", st.epoch));
    double loss_sum = 0.0, last_norm = 0.0;
    for (const auto& indices : batches) {
      if (tc.max_steps && opt.step >= tc.max_steps) return finish("max_steps");
      const data::Batch batch = data::make_batch(train, indices, vocab.eos());
      StepStats s;
      try {
        s = train_step(model, opt, batch, tc, config.seed, st.phase == "fine_tune" ? tc.weight_decay : 0.0);
      } catch (const NumericError& e) {
        if (progress) *progress << "diverged at step " << opt.step << ": " << e.what() << "\n";
        if (!st.best_checkpoint.empty()) restore_model_state(load_checkpoint(st.best_checkpoint), model.params());
        return finish("diverged");
      }
      result.step_losses.push_back(s.loss);
      loss_sum += s.loss;
      last_norm = s.grad_norm;
      log_line(log, st.epoch + 1, opt.step, s.loss, s.grad_norm, opt.learning_rate, "-");
      if (tc.max_seconds > 0 && elapsed() > tc.max_seconds) return finish("time");
    }
    ++st.epoch;
    const double dev_error = evaluate_error_rate(model, dev, tc.beam, tc.dev_limit);
    const double mean_loss = loss_sum / static_cast<double>(batches.size());
    log_line(log, st.epoch, opt.step, mean_loss, last_norm, opt.learning_rate, format_double(dev_error));
    if (progress) {
      *progress << "epoch " << st.epoch << " step " << opt.step << " loss " << mean_loss << " dev_error " << dev_error
                << " phase " << st.phase << " (" << static_cast<int>(elapsed()) << " s)" << std::endl;
    }

    const fs::path path = ckpt_dir / checkpoint_name(opt.step);
    std::string stop;
    if (dev_error < st.best) {
      st.best = dev_error;
      st.bad_epochs = 0;
      st.best_checkpoint = path;
    } else if (++st.bad_epochs >= tc.patience) {
      if (st.phase == "main") {
        // Converged: continue from the best weights with a lower rate and decay.
        if (!st.best_checkpoint.empty()) {
          Checkpoint best = load_checkpoint(st.best_checkpoint);
          restore_model_state(best, model.params());
          // The step counter keeps counting so checkpoint names and dropout
          // streams never repeat.
          const std::uint64_t step = opt.step;
          restore_optimizer_state(best, model.params(), opt);
          opt.step = step;
        }
        st.phase = "fine_tune";
        opt.learning_rate = tc.fine_tune_lr;
        st.bad_epochs = 0;
        ++st.transitions;
      } else {
        stop = "patience";
      }
    }
    if (tc.target_dev_per >= 0 && dev_error <= tc.target_dev_per) stop = "target";
    if (stop.empty() && tc.max_seconds > 0 && elapsed() > tc.max_seconds) stop = "time";

    Checkpoint ckpt = model_checkpoint(model, vocab);
    add_optimizer_state(ckpt, model.params(), opt);
    ckpt.set_meta("seed", std::to_string(config.seed));
    ckpt.set_meta("train.epoch", std::to_string(st.epoch));
    ckpt.set_meta("train.phase", st.phase);
    ckpt.set_meta("train.best_dev_error", format_double(st.best));
    ckpt.set_meta("train.dev_error", format_double(dev_error));
    ckpt.set_meta("train.bad_epochs", std::to_string(st.bad_epochs));
    ckpt.set_meta("train.transitions", std::to_string(st.transitions));
    ckpt.set_meta("train.best_checkpoint", st.best_checkpoint.filename().string());
    ckpt.set_meta("opt.learning_rate", format_double(opt.learning_rate));
    save_checkpoint(path, ckpt);
    if (!stop.empty()) return finish(stop);
  }
  return finish("max_epochs");
}

}  // namespace convattn
