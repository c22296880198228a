#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>
#include <unistd.h>

#include "convattn/errors.hpp"
#include "convattn/training.hpp"

namespace convattn {
namespace {

namespace fs = std::filesystem;

struct Fixture {
  data::SynthCorpus synth;
  data::Corpus train, dev;
};

// Copy task over 5 symbols, matching the tiny model's 6-way output.
Fixture small_task(std::size_t n_train, std::size_t n_dev) {
  data::SynthOptions o;
  o.vocab = 5;
  o.min_len = 2;
  o.max_len = 4;
  o.train = n_train;
  o.dev = n_dev;
  Fixture f{data::synth_corpus(o), {}, {}};
  for (std::size_t i = 0; i < f.synth.records.size(); ++i) {
    auto& c = f.synth.records[i].split == "train" ? f.train : f.dev;
    c.ids.push_back(f.synth.records[i].id);
    c.features.push_back(f.synth.features[i]);
    c.labels.push_back(f.synth.sources[i]);
  }
  return f;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("convattn_train_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

RunConfig small_config() {
  RunConfig c;
  c.seed = 5;
  c.model = ModelConfig::tiny();
  c.train.batch_size = 8;
  c.train.beam = 2;
  c.train.dropout = 0.0;
  return c;
}

TEST(TrainStep, OverfitsOneBatch) {
  auto f = small_task(8, 0);
  Seq2Seq model = make_model(ModelConfig::tiny(), 11);
  data::Batch batch = data::make_batch(f.train, {0, 1, 2, 3, 4, 5, 6, 7}, 5);
  TrainConfig tc;
  tc.dropout = 0.0;
  OptimizerState opt;
  opt.learning_rate = 1e-2;
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(train_step(model, opt, batch, tc, 11, 0.0).loss);
  int decreasing = 0;
  for (int i = 1; i <= 10; ++i) decreasing += losses[i] < losses[i - 1];
  EXPECT_GE(decreasing, 8);
  layers::ForwardContext eval;
  const double final_loss = batch_loss(model, batch, eval).item();
  EXPECT_LT(final_loss, 0.1 * losses.front()) << "initial " << losses.front();
  EXPECT_EQ(opt.step, 200u);
}

TEST(TrainStep, BitIdenticalWithDropout) {
  auto f = small_task(8, 0);
  data::Batch batch = data::make_batch(f.train, {0, 1, 2, 3, 4, 5, 6, 7}, 5);
  TrainConfig tc;
  auto run = [&] {
    Seq2Seq model = make_model(ModelConfig::tiny(), 12);
    OptimizerState opt;
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(train_step(model, opt, batch, tc, 12, 0.0).loss);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainLoop, ReproducibleCheckpointsAndLog) {
  auto f = small_task(24, 4);
  RunConfig cfg = small_config();
  cfg.train.max_epochs = 2;
  auto run = [&](const std::string& name) {
    Seq2Seq model = make_model(cfg.model, cfg.seed);
    auto dir = fresh_dir(name);
    auto r = train_loop(model, cfg, f.synth.vocab, f.train, f.dev, dir);
    return std::make_pair(r, dir);
  };
  auto [a, da] = run("a");
  auto [b, db] = run("b");
  EXPECT_EQ(a.stop_reason, "max_epochs");
  EXPECT_EQ(a.epochs, 2u);
  EXPECT_EQ(a.steps, 6u);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(slurp(da / "config.txt"), cfg.to_text());
  for (const char* name : {"ckpt-0000000003.bin", "ckpt-0000000006.bin"}) {
    ASSERT_TRUE(fs::exists(da / "checkpoints" / name));
    EXPECT_EQ(slurp(da / "checkpoints" / name), slurp(db / "checkpoints" / name));
  }
  std::ifstream log(da / "metrics.log");
  std::size_t lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    std::istringstream is(line);
    std::vector<std::string> fields{std::istream_iterator<std::string>(is), {}};
    EXPECT_EQ(fields.size(), 7u) << line;
  }
  EXPECT_EQ(lines, 8u);  // 6 steps + 2 epoch summaries
}

TEST(TrainLoop, ResumeContinuesTheTrajectory) {
  auto f = small_task(24, 4);
  RunConfig cfg = small_config();
  cfg.train.dropout = 0.3;
  cfg.train.max_epochs = 3;
  Seq2Seq full = make_model(cfg.model, cfg.seed);
  auto whole = train_loop(full, cfg, f.synth.vocab, f.train, f.dev, fresh_dir("whole"));

  auto dir = fresh_dir("split");
  RunConfig first = cfg;
  first.train.max_epochs = 1;
  Seq2Seq part = make_model(cfg.model, cfg.seed);
  auto head = train_loop(part, first, f.synth.vocab, f.train, f.dev, dir);
  Seq2Seq resumed = make_model(cfg.model, 999);  // weights come from the checkpoint
  auto tail = train_loop(resumed, cfg, f.synth.vocab, f.train, f.dev, dir);

  std::vector<double> joined = head.step_losses;
  joined.insert(joined.end(), tail.step_losses.begin(), tail.step_losses.end());
  EXPECT_EQ(joined, whole.step_losses);
  EXPECT_EQ(tail.epochs, 3u);
  EXPECT_EQ(tail.steps, whole.steps);
  const auto& pa = full.params().params();
  const auto& pb = resumed.params().params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].value.to_vector(), pb[i].value.to_vector());
}

TEST(TrainLoop, PatienceZeroGivesOneTransition) {
  auto f = small_task(16, 4);
  RunConfig cfg = small_config();
  cfg.train.patience = 0;
  cfg.train.max_epochs = 10;
  Seq2Seq model = make_model(cfg.model, cfg.seed);
  auto r = train_loop(model, cfg, f.synth.vocab, f.train, f.dev, fresh_dir("patience"));
  EXPECT_EQ(r.phase_transitions, 1u);
  EXPECT_EQ(r.phase, "fine_tune");
  EXPECT_EQ(r.stop_reason, "patience");
  // First epoch improves on +inf, the second transitions, the third stops.
  EXPECT_EQ(r.epochs, 3u);
}

TEST(TrainLoop, StopsAtTargetAndStepLimit) {
  auto f = small_task(16, 4);
  RunConfig cfg = small_config();
  cfg.train.target_dev_per = 10.0;
  Seq2Seq m1 = make_model(cfg.model, cfg.seed);
  EXPECT_EQ(train_loop(m1, cfg, f.synth.vocab, f.train, f.dev, fresh_dir("target")).stop_reason, "target");

  cfg.train.target_dev_per = -1;
  cfg.train.max_steps = 3;
  Seq2Seq m2 = make_model(cfg.model, cfg.seed);
  auto r = train_loop(m2, cfg, f.synth.vocab, f.train, f.dev, fresh_dir("steps"));
  EXPECT_EQ(r.stop_reason, "max_steps");
  EXPECT_EQ(r.steps, 3u);
}

TEST(TrainLoop, RejectsMismatchedVocabulary) {
  auto f = small_task(8, 2);
  RunConfig cfg = small_config();
  ModelConfig big = cfg.model;
  big.decoder.vocab_size = 7;
  Seq2Seq model = make_model(big, 1);
  EXPECT_THROW(train_loop(model, cfg, f.synth.vocab, f.train, f.dev, fresh_dir("vocab")), ConfigError);
  data::Corpus empty;
  Seq2Seq ok = make_model(cfg.model, 1);
  EXPECT_THROW(train_loop(ok, cfg, f.synth.vocab, empty, f.dev, fresh_dir("empty")), DataError);
}

}  // namespace
}  // namespace convattn
