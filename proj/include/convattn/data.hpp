#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "convattn/features.hpp"
#include "convattn/rng.hpp"
#include "convattn/tensor.hpp"

namespace convattn::data {

namespace fs = std::filesystem;

/// Label inventory; id = line number in the vocabulary file. The final id is
/// reserved for end-of-sequence.
class Vocabulary {
 public:
  Vocabulary() = default;
  /// `labels` must end with the end-of-sequence symbol.
  explicit Vocabulary(std::vector<std::string> labels);

  static Vocabulary load(const fs::path& path);
  void save(const fs::path& path) const;

  std::size_t size() const { return labels_.size(); }
  int eos() const { return static_cast<int>(labels_.size()) - 1; }
  const std::string& label(int id) const;
  int id(const std::string& label) const;  // throws DataError when unknown
  bool contains(const std::string& label) const { return index_.count(label) != 0; }
  const std::vector<std::string>& labels() const { return labels_; }

  std::vector<int> encode(const std::vector<std::string>& labels) const;
  /// Drops a trailing end-of-sequence id.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

struct Utterance {
  std::string id;
  fs::path path;  // absolute, or relative to the manifest's directory
  std::string split;
  std::vector<std::string> labels;
};

struct Manifest {
  fs::path base_dir;
  std::vector<Utterance> records;

  std::vector<const Utterance*> split(const std::string& name) const;
  fs::path resolve(const Utterance& u) const;
};

/// Reads "id<TAB>path<TAB>split<TAB>labels" lines. With a vocabulary, every
/// label must be known. Missing feature files, duplicate ids, bad split tags
/// and empty transcripts raise DataError.
Manifest load_manifest(const fs::path& path, const Vocabulary* vocab = nullptr);
void write_manifest(const fs::path& path, const Manifest& manifest);

/// Utterances held in memory for training or decoding.
struct Corpus {
  std::vector<std::string> ids;
  std::vector<features::FeatureTensor> features;
  std::vector<std::vector<int>> labels;  // without end-of-sequence

  std::size_t size() const { return ids.size(); }
};

/// Loads one split. When `stats` is non-null the features are normalized.
Corpus load_corpus(const Manifest& manifest, const std::string& split, const Vocabulary& vocab,
                   const features::NormStats* stats = nullptr);

struct Batch {
  std::vector<std::string> ids;
  Tensor features;                        // [B x F x T_max x C], zero padded
  std::vector<std::size_t> lengths;       // frames
  std::vector<std::vector<int>> targets;  // labels followed by end-of-sequence
};

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices, int eos);

/// Groups utterance indices into batches of similar length: shuffle, stable
/// sort by length, cut into batches, then shuffle the batch order. Every index
/// appears exactly once; the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& lengths, std::size_t batch_size,
                                                   std::uint64_t seed);

/// Fisher-Yates driven by uniform01, so orders agree across standard libraries.
void shuffle_indices(std::vector<std::size_t>& v, Rng& rng);

// ------------------------------------------------------------ synthetic

enum class SynthKind { copy, reverse, blockmap };
SynthKind parse_synth_kind(const std::string& name);
const char* to_string(SynthKind kind);

struct SynthOptions {
  SynthKind kind = SynthKind::copy;
  std::size_t vocab = 8;  // symbols, excluding end-of-sequence
  std::size_t min_len = 3;
  std::size_t max_len = 6;
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 0;
  double noise = 0.05;
  std::uint64_t seed = 1;
};

inline constexpr std::size_t kFramesPerSymbol = 3;

struct SynthCorpus {
  Vocabulary vocab;
  std::vector<features::FeatureTensor> patterns;  // one [41 x 3 x 3] pattern per symbol
  std::vector<int> substitution;                  // blockmap target per symbol
  std::vector<Utterance> records;                 // labels are the targets
  std::vector<std::vector<int>> sources;          // rendered symbol strings
  std::vector<features::FeatureTensor> features;
};

/// Random symbol strings rendered as feature tensors: each symbol becomes its
/// pattern over 3 frames plus N(0, noise^2) noise.
SynthCorpus synth_corpus(const SynthOptions& options);

/// Renders a symbol string from the patterns with the given noise level.
features::FeatureTensor render_symbols(const std::vector<int>& symbols,
                                       const std::vector<features::FeatureTensor>& patterns, double noise, Rng* rng);

/// Writes features/<id>.ften, manifest.tsv and vocab.txt under dir and
/// returns the manifest path.
fs::path write_synth_corpus(const fs::path& dir, const SynthCorpus& corpus);

}  // namespace convattn::data
