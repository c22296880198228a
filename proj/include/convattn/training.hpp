#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "convattn/checkpoint.hpp"
#include "convattn/config.hpp"
#include "convattn/data.hpp"
#include "convattn/decoding.hpp"
#include "convattn/model.hpp"
#include "convattn/optim.hpp"

namespace convattn {

/// Model built from config with freshly initialized parameters.
Seq2Seq make_model(const ModelConfig& config, std::uint64_t seed);

/// Snapshot of model dimensions, vocabulary and all tensors.
Checkpoint model_checkpoint(const Seq2Seq& model, const data::Vocabulary& vocab);

/// Rebuilds the model recorded in a checkpoint.
Seq2Seq model_from_checkpoint(const Checkpoint& ckpt, data::Vocabulary* vocab = nullptr);

/// Mean per-position cross entropy of a batch under teacher forcing.
Tensor batch_loss(Seq2Seq& model, const data::Batch& batch, const layers::ForwardContext& ctx);

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// One optimizer update. Dropout masks come from the "dropout" stream of
/// `seed` indexed by opt.step, so a step is reproducible in isolation.
StepStats train_step(Seq2Seq& model, OptimizerState& opt, const data::Batch& batch, const TrainConfig& cfg,
                     std::uint64_t seed, double weight_decay);

/// Beam-decodes `corpus` (first `limit` utterances; 0 = all) and returns the
/// symbol error rate against its labels.
double evaluate_error_rate(Seq2Seq& model, const data::Corpus& corpus, std::size_t beam, std::size_t limit = 0);

/// Checker settings for a whole model. Many recurrent and attention
/// gradients are around 1e-9, where a plain central difference at h = 1e-5
/// is dominated by rounding in the loss; extrapolating from h = 2e-3 and
/// h = 1e-3 keeps both rounding and truncation error near 1e-5.
GradCheckOptions model_gradcheck_options();

/// Finite-difference check of every parameter tensor of a freshly
/// initialized model on a random batch (batch norm in training mode, no
/// dropout). Inputs and targets come from the "synth" stream of `seed`.
GradCheckReport check_model_gradients(const ModelConfig& config, std::uint64_t seed, std::size_t frames = 9,
                                      std::size_t batch = 2,
                                      const GradCheckOptions& options = model_gradcheck_options());

struct TrainResult {
  std::size_t epochs = 0;  // completed epochs including any before a resume
  std::uint64_t steps = 0;
  double best_dev_error = 1e300;
  std::filesystem::path best_checkpoint;
  std::string phase;        // "main" or "fine_tune"
  std::string stop_reason;  // "patience", "target", "max_epochs", "max_steps", "time", "diverged"
  std::size_t phase_transitions = 0;
  std::vector<double> step_losses;  // losses of steps run in this call
};

/// Epoch loop: shuffle into length buckets, teacher-forced updates with
/// clipping, dev error rate after every epoch, best-checkpoint tracking and a
/// fine-tuning phase once the dev error stops improving.
///
/// run_dir is append-only: config.txt, metrics.log and checkpoints/ckpt-<step>.bin.
/// If run_dir already holds checkpoints, training resumes from the newest.
TrainResult train_loop(Seq2Seq& model, const RunConfig& config, const data::Vocabulary& vocab,
                       const data::Corpus& train, const data::Corpus& dev, const std::filesystem::path& run_dir,
                       std::ostream* progress = nullptr);

}  // namespace convattn
