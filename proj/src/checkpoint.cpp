#include "convattn/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "binary_io.hpp"
#include "convattn/errors.hpp"

namespace convattn {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
// Guards against absurd allocations when reading a corrupt file.
constexpr std::uint32_t kMaxString = 1u << 24;

void write_string(std::ostream& os, const std::string& s) {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is, const std::string& what) {
  const auto n = io::read_le<std::uint32_t>(is, what);
  if (n > kMaxString) throw FormatError("checkpoint: implausible " + what + " length " + std::to_string(n));
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("truncated " + what);
  return s;
}

}  // namespace

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return &v;
  }
  return nullptr;
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
  if (const auto* v = find_meta(key)) return *v;
  throw FormatError("checkpoint has no \"" + key + "\" entry");
}

void Checkpoint::set_meta(const std::string& key, std::string value) {
  for (auto& [k, v] : meta) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  meta.emplace_back(key, std::move(value));
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, 4);
    io::write_le<std::uint32_t>(os, kCheckpointVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
      write_string(os, k);
      write_string(os, v);
    }
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& t : ckpt.tensors) {
      write_string(os, t.name);
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.tensor.rank()));
      for (auto d : t.tensor.shape()) io::write_le<std::uint64_t>(os, d);
      io::write_le<std::uint64_t>(os, offset);
      offset += t.tensor.numel();
    }
    io::write_le<std::uint64_t>(os, offset);
    for (const auto& t : ckpt.tensors) io::write_doubles(os, t.tensor.data().data(), t.tensor.numel());
    if (!os) throw FormatError("error writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kMagic)) throw FormatError(path.string() + " is not a checkpoint");
  const auto version = io::read_le<std::uint32_t>(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto n_meta = io::read_le<std::uint32_t>(is, "checkpoint metadata count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = read_string(is, "metadata key");
    auto v = read_string(is, "metadata value");
    ckpt.meta.emplace_back(std::move(k), std::move(v));
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries(io::read_le<std::uint32_t>(is, "checkpoint tensor count"));
  for (auto& e : entries) {
    e.name = read_string(is, "tensor name");
    const auto rank = io::read_le<std::uint32_t>(is, "tensor rank");
    if (rank > 16) throw FormatError("checkpoint: implausible rank for " + e.name);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(io::read_le<std::uint64_t>(is, "tensor shape"));
    e.offset = io::read_le<std::uint64_t>(is, "tensor offset");
  }
  const auto n_values = io::read_le<std::uint64_t>(is, "payload size");
  for (const auto& e : entries) {
    std::uint64_t n = 1;
    for (auto d : e.shape) n *= d;
    if (e.offset + n > n_values) throw FormatError("checkpoint: tensor " + e.name + " extends past the payload");
  }
  std::vector<double> payload(n_values);
  io::read_doubles(is, payload.data(), payload.size(), "checkpoint payload");
  for (const auto& e : entries) {
    std::uint64_t n = 1;
    for (auto d : e.shape) n *= d;
    const auto begin = payload.begin() + static_cast<std::ptrdiff_t>(e.offset);
    ckpt.tensors.push_back({e.name, Tensor::from(e.shape, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n)))});
  }
  return ckpt;
}

void add_model_state(Checkpoint& ckpt, const ModelParams& params) {
  for (const auto& p : params.params()) ckpt.tensors.push_back({p.name, p.value.detach()});
  for (const auto& b : params.buffers()) ckpt.tensors.push_back({b.name, b.tensor.detach()});
}

namespace {

void copy_into(const Checkpoint& ckpt, const std::string& name, Tensor target) {
  const NamedTensor* src = ckpt.find(name);
  if (!src) throw ConfigError("checkpoint is missing tensor " + name);
  if (src->tensor.shape() != target.shape()) {
    throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(src->tensor.shape()) +
                      ", model expects " + shape_str(target.shape()));
  }
  std::copy(src->tensor.data().begin(), src->tensor.data().end(), target.mutable_data().begin());
}

}  // namespace

void restore_model_state(const Checkpoint& ckpt, ModelParams& params) {
  for (const auto& p : params.params()) copy_into(ckpt, p.name, p.value);
  for (const auto& b : params.buffers()) copy_into(ckpt, b.name, b.tensor);
}

void add_optimizer_state(Checkpoint& ckpt, const ModelParams& params, const OptimizerState& opt) {
  ckpt.set_meta("opt.kind", opt.kind == OptimizerKind::adam ? "adam" : "sgd");
  ckpt.set_meta("opt.step", std::to_string(opt.step));
  const auto& ps = params.params();
  if (opt.m.size() != ps.size()) return;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (opt.m[k].empty()) continue;
    ckpt.tensors.push_back({"opt.m/" + ps[k].name, Tensor::from(ps[k].value.shape(), opt.m[k])});
    ckpt.tensors.push_back({"opt.v/" + ps[k].name, Tensor::from(ps[k].value.shape(), opt.v[k])});
  }
}

void restore_optimizer_state(const Checkpoint& ckpt, const ModelParams& params, OptimizerState& opt) {
  if (const auto* step = ckpt.find_meta("opt.step")) opt.step = std::stoull(*step);
  const auto& ps = params.params();
  opt.m.assign(ps.size(), {});
  opt.v.assign(ps.size(), {});
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const NamedTensor* m = ckpt.find("opt.m/" + ps[k].name);
    const NamedTensor* v = ckpt.find("opt.v/" + ps[k].name);
    if (!m || !v) continue;
    if (m->tensor.numel() != ps[k].value.numel() || v->tensor.numel() != ps[k].value.numel()) {
      throw ConfigError("checkpoint optimizer moments for " + ps[k].name + " do not match the parameter");
    }
    opt.m[k] = m->tensor.to_vector();
    opt.v[k] = v->tensor.to_vector();
  }
}

}  // namespace convattn
