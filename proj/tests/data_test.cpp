#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>

#include "convattn/data.hpp"
#include "convattn/errors.hpp"

namespace convattn::data {
namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("convattn_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

features::FeatureTensor ramp(std::size_t frames, double offset) {
  features::FeatureTensor ft(features::kStaticDims, frames, features::kChannels);
  for (std::size_t i = 0; i < ft.values.size(); ++i) ft.values[i] = offset + 0.001 * double(i);
  return ft;
}

TEST(Manifest, Errors) {
  TempDir dir;
  features::write_features(dir.path() / "a.ften", ramp(4, 0));
  const auto m = dir.path() / "m.tsv";

  write_text(m, "");
  try {
    load_manifest(m);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("empty manifest"), std::string::npos);
  }

  write_text(m, "u1\ta.ften\ttrain\tx y\n");
  auto ok = load_manifest(m);
  ASSERT_EQ(ok.records.size(), 1u);
  EXPECT_EQ(ok.records[0].labels, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(ok.resolve(ok.records[0]), dir.path() / "a.ften");

  write_text(m, "u1\tmissing.ften\ttrain\tx\n");
  try {
    load_manifest(m);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.ften"), std::string::npos);
  }

  write_text(m, "u1\ta.ften\ttrain\tx\nu1\ta.ften\tdev\tx\n");
  EXPECT_THROW(load_manifest(m), DataError);
  write_text(m, "u1\ta.ften\tvalid\tx\n");
  EXPECT_THROW(load_manifest(m), DataError);
  write_text(m, "u1\ta.ften\ttrain\t\n");
  EXPECT_THROW(load_manifest(m), DataError);
  write_text(m, "u1\ta.ften\ttrain\n");
  EXPECT_THROW(load_manifest(m), DataError);

  Vocabulary vocab({"x", "y", "<eos>"});
  write_text(m, "u1\ta.ften\ttrain\tx z\n");
  EXPECT_THROW(load_manifest(m, &vocab), DataError);
  write_text(m, "u1\ta.ften\ttrain\tx <eos>\n");
  EXPECT_THROW(load_manifest(m, &vocab), DataError);
}

TEST(Vocabulary, RoundTripAndEos) {
  TempDir dir;
  Vocabulary v({"a", "b", "c", "<eos>"});
  EXPECT_EQ(v.eos(), 3);
  EXPECT_EQ(v.encode({"c", "a"}), (std::vector<int>{2, 0}));
  EXPECT_EQ(v.decode({2, 0, 3}), (std::vector<std::string>{"c", "a"}));
  EXPECT_THROW(v.id("d"), DataError);
  v.save(dir.path() / "v.txt");
  EXPECT_EQ(Vocabulary::load(dir.path() / "v.txt").labels(), v.labels());
  EXPECT_THROW(Vocabulary({"a", "a", "<eos>"}), DataError);
  EXPECT_THROW(Vocabulary({"<eos>"}), DataError);
}

TEST(Batching, SizesAndCoverage) {
  auto sizes = [](const std::vector<std::vector<std::size_t>>& b) {
    std::multiset<std::size_t> s;
    for (const auto& x : b) s.insert(x.size());
    return s;
  };
  EXPECT_EQ(sizes(make_batches(std::vector<std::size_t>(64, 10), 32, 1)), (std::multiset<std::size_t>{32, 32}));
  EXPECT_EQ(sizes(make_batches(std::vector<std::size_t>(33, 10), 32, 1)), (std::multiset<std::size_t>{1, 32}));
  EXPECT_THROW(make_batches({1, 2}, 0, 1), std::invalid_argument);

  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> lengths(1 + static_cast<std::size_t>(uniform01(rng) * 200));
    for (auto& l : lengths) l = 3 + static_cast<std::size_t>(uniform01(rng) * 40);
    const std::size_t bs = 1 + static_cast<std::size_t>(uniform01(rng) * 40);
    auto batches = make_batches(lengths, bs, 100 + trial);
    std::vector<std::size_t> seen;
    std::size_t short_batches = 0;
    for (const auto& b : batches) {
      EXPECT_LE(b.size(), bs);
      short_batches += b.size() < bs;
      seen.insert(seen.end(), b.begin(), b.end());
    }
    EXPECT_LE(short_batches, 1u);
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(lengths.size());
    std::iota(all.begin(), all.end(), 0);
    EXPECT_EQ(seen, all);
  }
}

TEST(Batching, DeterministicAndLengthBucketed) {
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < 100; ++i) lengths.push_back(5 + (i * 37) % 50);
  auto a = make_batches(lengths, 10, 5), b = make_batches(lengths, 10, 5), c = make_batches(lengths, 10, 6);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  // Buckets are contiguous runs of the length-sorted order, so their length
  // ranges never overlap.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& batch : a) {
    std::size_t lo = 1000, hi = 0;
    for (auto i : batch) lo = std::min(lo, lengths[i]), hi = std::max(hi, lengths[i]);
    ranges.emplace_back(lo, hi);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) EXPECT_LE(ranges[i - 1].second, ranges[i].first);
}

TEST(Batching, PaddingIsZeroAndTargetsEndWithEos) {
  Corpus c;
  c.ids = {"u0", "u1"};
  c.features = {ramp(3, 1.0), ramp(5, 2.0)};
  c.labels = {{0, 1}, {2}};
  Batch b = make_batch(c, {0, 1}, 3);
  EXPECT_EQ(b.features.shape(), (std::vector<std::size_t>{2, 41, 5, 3}));
  EXPECT_EQ(b.lengths, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(b.targets, (std::vector<std::vector<int>>{{0, 1, 3}, {2, 3}}));
  for (std::size_t f = 0; f < 41; ++f)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = b.features.at({0, f, t, ch});
        if (t >= 3) {
          EXPECT_EQ(v, 0.0);
        } else {
          EXPECT_EQ(v, c.features[0].at(f, t, ch));
        }
        EXPECT_EQ(b.features.at({1, f, t, ch}), c.features[1].at(f, t, ch));
      }
}

TEST(Synth, CopyTaskShapes) {
  SynthOptions o;
  o.train = 30;
  o.dev = 5;
  o.test = 2;
  auto s = synth_corpus(o);
  EXPECT_EQ(s.vocab.size(), 9u);
  EXPECT_EQ(s.records.size(), 37u);
  std::size_t dev = 0;
  for (std::size_t i = 0; i < s.records.size(); ++i) {
    const auto& src = s.sources[i];
    EXPECT_GE(src.size(), 3u);
    EXPECT_LE(src.size(), 6u);
    EXPECT_EQ(s.features[i].frames, 3 * src.size());
    EXPECT_EQ(s.vocab.encode(s.records[i].labels), src);
    dev += s.records[i].split == "dev";
  }
  EXPECT_EQ(dev, 5u);
}

TEST(Synth, ReverseAndBlockmapTargets) {
  for (SynthKind kind : {SynthKind::reverse, SynthKind::blockmap}) {
    SynthOptions o;
    o.kind = kind;
    o.train = 20;
    o.dev = 0;
    auto s = synth_corpus(o);
    std::set<int> image(s.substitution.begin(), s.substitution.end());
    EXPECT_EQ(image.size(), o.vocab);
    for (std::size_t i = 0; i < s.records.size(); ++i) {
      auto expected = s.sources[i];
      if (kind == SynthKind::reverse) std::reverse(expected.begin(), expected.end());
      else
        for (auto& t : expected) t = s.substitution[std::size_t(t)];
      EXPECT_EQ(s.vocab.encode(s.records[i].labels), expected);
    }
  }
  EXPECT_EQ(parse_synth_kind("blockmap"), SynthKind::blockmap);
  EXPECT_THROW(parse_synth_kind("shuffle"), ConfigError);
}

TEST(Synth, SameSeedSameCorpus) {
  SynthOptions o;
  o.train = 15;
  o.dev = 3;
  auto a = synth_corpus(o), b = synth_corpus(o);
  EXPECT_EQ(a.sources, b.sources);
  EXPECT_EQ(a.features, b.features);
  o.seed = 2;
  EXPECT_NE(synth_corpus(o).sources, a.sources);
}

TEST(Synth, NearestPatternRecoversSource) {
  SynthOptions o;
  o.train = 100;
  o.dev = 0;
  auto s = synth_corpus(o);
  for (const auto& src : s.sources) {
    auto clean = render_symbols(src, s.patterns, 0.0, nullptr);
    std::vector<int> decoded;
    for (std::size_t k = 0; k < src.size(); ++k) {
      int best = -1;
      double best_d = 1e300;
      for (std::size_t v = 0; v < s.patterns.size(); ++v) {
        double d = 0.0;
        for (std::size_t f = 0; f < 41; ++f)
          for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t c = 0; c < 3; ++c) {
              const double e = clean.at(f, 3 * k + t, c) - s.patterns[v].at(f, t, c);
              d += e * e;
            }
        if (d < best_d) best_d = d, best = int(v);
      }
      decoded.push_back(best);
    }
    EXPECT_EQ(decoded, src);
  }
}

TEST(Synth, WrittenCorpusLoadsBitIdentically) {
  TempDir dir;
  SynthOptions o;
  o.train = 12;
  o.dev = 4;
  auto s = synth_corpus(o);
  const auto manifest_path = write_synth_corpus(dir.path(), s);
  const auto vocab = Vocabulary::load(dir.path() / "vocab.txt");
  const auto m = load_manifest(manifest_path, &vocab);
  ASSERT_EQ(m.records.size(), 16u);
  auto train = load_corpus(m, "train", vocab);
  auto dev = load_corpus(m, "dev", vocab);
  ASSERT_EQ(train.size(), 12u);
  ASSERT_EQ(dev.size(), 4u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(train.features[i], s.features[i]);
    EXPECT_EQ(train.labels[i], s.sources[i]);
  }
  EXPECT_EQ(dev.features[3], s.features[15]);
}

}  // namespace
}  // namespace convattn::data
