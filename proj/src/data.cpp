#include "convattn/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "convattn/errors.hpp"

namespace convattn::data {

Vocabulary::Vocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) {
  if (labels_.size() < 2) throw DataError("vocabulary needs at least one label plus end-of-sequence");
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const auto& l = labels_[i];
    if (l.empty() || l.find_first_of(" \t") != std::string::npos) {
      throw DataError("vocabulary line " + std::to_string(i + 1) + ": labels must be non-empty without whitespace");
    }
    if (!index_.emplace(l, static_cast<int>(i)).second) throw DataError("vocabulary: duplicate label " + l);
  }
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open vocabulary " + path.string());
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    labels.push_back(line);
  }
  return Vocabulary(std::move(labels));
}

void Vocabulary::save(const fs::path& path) const {
  std::ofstream os(path);
  for (const auto& l : labels_) os << l << '\n';
  if (!os) throw DataError("cannot write vocabulary " + path.string());
}

const std::string& Vocabulary::label(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= labels_.size()) {
    throw DataError("label id " + std::to_string(id) + " outside vocabulary of " + std::to_string(labels_.size()));
  }
  return labels_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) throw DataError("unknown label \"" + label + "\"");
  return it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& labels) const {
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(id(l));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == eos() && i + 1 == ids.size()) break;
    out.push_back(label(ids[i]));
  }
  return out;
}

std::vector<const Utterance*> Manifest::split(const std::string& name) const {
  std::vector<const Utterance*> out;
  for (const auto& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

fs::path Manifest::resolve(const Utterance& u) const { return u.path.is_absolute() ? u.path : base_dir / u.path; }

Manifest load_manifest(const fs::path& path, const Vocabulary* vocab) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4) throw DataError(where + "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    Utterance u{fields[0], fields[1], fields[2], {}};
    if (u.id.empty()) throw DataError(where + "empty utterance id");
    if (!seen.insert(u.id).second) throw DataError(where + "duplicate utterance id " + u.id);
    if (u.split != "train" && u.split != "dev" && u.split != "test") {
      throw DataError(where + "split must be train, dev or test, got \"" + u.split + "\"");
    }
    std::istringstream labels(fields[3]);
    for (std::string l; labels >> l;) u.labels.push_back(l);
    if (u.labels.empty()) throw DataError(where + "empty transcript for " + u.id);
    if (vocab) {
      for (const auto& l : u.labels) {
        if (!vocab->contains(l)) throw DataError(where + "unknown label \"" + l + "\" in " + u.id);
        if (vocab->id(l) == vocab->eos()) throw DataError(where + "transcript of " + u.id + " uses end-of-sequence");
      }
    }
    const fs::path resolved = u.path.is_absolute() ? u.path : m.base_dir / u.path;
    if (!fs::exists(resolved)) throw DataError(where + "feature file not found: " + resolved.string());
    m.records.push_back(std::move(u));
  }
  if (m.records.empty()) throw DataError("empty manifest: " + path.string());
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream os(path);
  for (const auto& r : manifest.records) {
    os << r.id << '\t' << r.path.generic_string() << '\t' << r.split << '\t';
    for (std::size_t i = 0; i < r.labels.size(); ++i) os << (i ? " " : "") << r.labels[i];
    os << '\n';
  }
  if (!os) throw DataError("cannot write manifest " + path.string());
}

Corpus load_corpus(const Manifest& manifest, const std::string& split, const Vocabulary& vocab,
                   const features::NormStats* stats) {
  Corpus c;
  for (const Utterance* u : manifest.split(split)) {
    auto ft = features::read_features(manifest.resolve(*u));
    if (stats) features::normalize(ft, *stats);
    c.ids.push_back(u->id);
    c.features.push_back(std::move(ft));
    c.labels.push_back(vocab.encode(u->labels));
  }
  return c;
}

Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& indices, int eos) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no utterances");
  const auto& first = corpus.features.at(indices[0]);
  const std::size_t freq = first.freq, ch = first.channels;
  std::size_t t_max = 0;
  for (auto i : indices) {
    const auto& ft = corpus.features.at(i);
    if (ft.freq != freq || ft.channels != ch) {
      throw DimensionError("make_batch: utterance " + corpus.ids[i] + " has a different feature layout");
    }
    t_max = std::max(t_max, ft.frames);
  }
  Batch b;
  std::vector<double> values(indices.size() * freq * t_max * ch, 0.0);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& ft = corpus.features[indices[k]];
    for (std::size_t f = 0; f < freq; ++f)
      for (std::size_t t = 0; t < ft.frames; ++t)
        for (std::size_t c = 0; c < ch; ++c) values[((k * freq + f) * t_max + t) * ch + c] = ft.at(f, t, c);
    b.ids.push_back(corpus.ids[indices[k]]);
    b.lengths.push_back(ft.frames);
    auto target = corpus.labels[indices[k]];
    target.push_back(eos);
    b.targets.push_back(std::move(target));
  }
  b.features = Tensor::from({indices.size(), freq, t_max, ch}, std::move(values));
  return b;
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& lengths, std::size_t batch_size,
                                                   std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be positive");
  Rng rng(seed);
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_indices(order, rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
  }
  std::vector<std::size_t> perm(batches.size());
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_indices(perm, rng);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batches.size());
  for (auto p : perm) out.push_back(std::move(batches[p]));
  return out;
}

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "copy") return SynthKind::copy;
  if (name == "reverse") return SynthKind::reverse;
  if (name == "blockmap") return SynthKind::blockmap;
  throw ConfigError("unknown synthetic task \"" + name + "\" (copy, reverse, blockmap)");
}

const char* to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::copy: return "copy";
    case SynthKind::reverse: return "reverse";
    case SynthKind::blockmap: return "blockmap";
  }
  return "?";
}

features::FeatureTensor render_symbols(const std::vector<int>& symbols,
                                       const std::vector<features::FeatureTensor>& patterns, double noise, Rng* rng) {
  features::FeatureTensor ft(features::kStaticDims, symbols.size() * kFramesPerSymbol, features::kChannels);
  for (std::size_t s = 0; s < symbols.size(); ++s) {
    const auto& p = patterns.at(static_cast<std::size_t>(symbols[s]));
    for (std::size_t f = 0; f < ft.freq; ++f)
      for (std::size_t k = 0; k < kFramesPerSymbol; ++k)
        for (std::size_t c = 0; c < ft.channels; ++c) {
          double v = p.at(f, k, c);
          if (rng && noise > 0) v += noise * normal(*rng);
          ft.at(f, s * kFramesPerSymbol + k, c) = v;
        }
  }
  return ft;
}

SynthCorpus synth_corpus(const SynthOptions& o) {
  if (o.vocab < 2) throw ConfigError("synthetic corpus needs at least 2 symbols");
  if (o.min_len == 0 || o.min_len > o.max_len) throw ConfigError("synthetic corpus: need 1 <= min_len <= max_len");
  if (o.train + o.dev + o.test == 0) throw ConfigError("synthetic corpus: no utterances requested");
  SynthCorpus out;
  std::vector<std::string> labels;
  for (std::size_t v = 0; v < o.vocab; ++v) labels.push_back("s" + std::to_string(v));
  labels.push_back("<eos>");
  out.vocab = Vocabulary(labels);

  Rng shared = make_rng(o.seed, "synth", 0);
  for (std::size_t v = 0; v < o.vocab; ++v) {
    features::FeatureTensor p(features::kStaticDims, kFramesPerSymbol, features::kChannels);
    for (auto& x : p.values) x = normal(shared);
    out.patterns.push_back(std::move(p));
  }
  std::vector<std::size_t> perm(o.vocab);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle_indices(perm, shared);
  for (auto p : perm) out.substitution.push_back(static_cast<int>(p));

  const std::size_t total = o.train + o.dev + o.test;
  for (std::size_t i = 0; i < total; ++i) {
    Rng rng = make_rng(o.seed, "synth", i + 1);
    const std::size_t span = o.max_len - o.min_len + 1;
    const std::size_t len = o.min_len + std::min(static_cast<std::size_t>(uniform01(rng) * span), span - 1);
    std::vector<int> src(len);
    for (auto& s : src) s = static_cast<int>(std::min(static_cast<std::size_t>(uniform01(rng) * o.vocab), o.vocab - 1));
    std::vector<int> tgt = src;
    if (o.kind == SynthKind::reverse) std::reverse(tgt.begin(), tgt.end());
    if (o.kind == SynthKind::blockmap) {
      for (auto& t : tgt) t = out.substitution[static_cast<std::size_t>(t)];
    }
    Utterance u;
    char id[32];
    std::snprintf(id, sizeof id, "synth%06zu", i);
    u.id = id;
    u.split = i < o.train ? "train" : (i < o.train + o.dev ? "dev" : "test");
    u.path = fs::path("features") / (u.id + ".ften");
    u.labels = out.vocab.decode(tgt);
    out.features.push_back(render_symbols(src, out.patterns, o.noise, &rng));
    out.sources.push_back(std::move(src));
    out.records.push_back(std::move(u));
  }
  return out;
}

fs::path write_synth_corpus(const fs::path& dir, const SynthCorpus& corpus) {
  fs::create_directories(dir / "features");
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    features::write_features(dir / corpus.records[i].path, corpus.features[i]);
  }
  corpus.vocab.save(dir / "vocab.txt");
  Manifest m{dir, corpus.records};
  write_manifest(dir / "manifest.tsv", m);
  return dir / "manifest.tsv";
}

}  // namespace convattn::data
