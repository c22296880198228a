#include "convattn/features.hpp"

#include <unsupported/Eigen/FFT>
#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "convattn/errors.hpp"

namespace convattn::features {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::size_t samples_for(double ms, int sample_rate) {
  return static_cast<std::size_t>(std::llround(ms * sample_rate / 1000.0));
}

}  // namespace

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Matrix frame_signal(const Waveform& wav, const FrontEndOptions& opt, bool window) {
  if (wav.sample_rate <= 0) throw std::invalid_argument("sample rate must be positive");
  const std::size_t len = samples_for(opt.frame_ms, wav.sample_rate);
  const std::size_t hop = samples_for(opt.hop_ms, wav.sample_rate);
  if (len == 0 || hop == 0) throw std::invalid_argument("frame and hop must span at least one sample");
  if (wav.samples.size() < len) {
    throw std::invalid_argument("audio shorter than one frame: " + std::to_string(wav.samples.size()) + " < " +
                                std::to_string(len) + " samples");
  }
  const std::size_t count = 1 + (wav.samples.size() - len) / hop;
  Matrix frames(count, len);
  std::vector<double> w(len, 1.0);
  if (window && len > 1) {
    for (std::size_t n = 0; n < len; ++n) w[n] = 0.54 - 0.46 * std::cos(2.0 * kPi * n / (len - 1));
  }
  for (std::size_t t = 0; t < count; ++t) {
    for (std::size_t n = 0; n < len; ++n) frames(t, n) = wav.samples[t * hop + n] * w[n];
  }
  return frames;
}

Matrix power_spectrum(const Matrix& frames, std::size_t nfft) {
  if (nfft < static_cast<std::size_t>(frames.cols())) {
    throw std::invalid_argument("nfft " + std::to_string(nfft) + " smaller than frame length " +
                                std::to_string(frames.cols()));
  }
  const std::size_t bins = nfft / 2 + 1;
  Matrix spec(frames.rows(), bins);
  Eigen::FFT<double> fft;
  std::vector<double> buf(nfft);
  std::vector<std::complex<double>> out;
  for (Eigen::Index t = 0; t < frames.rows(); ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (Eigen::Index n = 0; n < frames.cols(); ++n) buf[n] = frames(t, n);
    fft.fwd(out, buf);
    for (std::size_t k = 0; k < bins; ++k) spec(t, k) = std::norm(out[k]) / static_cast<double>(nfft);
  }
  return spec;
}

Matrix mel_filters(std::size_t n_filters, std::size_t nfft, int sample_rate, double f_low, double f_high) {
  if (!(f_low >= 0.0 && f_low < f_high && f_high <= sample_rate / 2.0)) {
    std::ostringstream os;
    os << "invalid filterbank band edges [" << f_low << ", " << f_high << "] for sample rate " << sample_rate;
    throw std::invalid_argument(os.str());
  }
  if (n_filters == 0) throw std::invalid_argument("need at least one mel filter");
  const double lo = hz_to_mel(f_low), hi = hz_to_mel(f_high);
  std::vector<std::size_t> bin(n_filters + 2);
  for (std::size_t i = 0; i < bin.size(); ++i) {
    const double mel = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_filters + 1);
    bin[i] = static_cast<std::size_t>(std::floor((nfft + 1) * mel_to_hz(mel) / sample_rate));
  }
  const std::size_t bins = nfft / 2 + 1;
  Matrix fb = Matrix::Zero(n_filters, bins);
  for (std::size_t j = 0; j < n_filters; ++j) {
    const std::size_t l = bin[j], c = bin[j + 1], r = bin[j + 2];
    if (!(l < c && c < r)) {
      throw std::invalid_argument("mel filter " + std::to_string(j) + " collapses to zero width; use a larger nfft");
    }
    for (std::size_t i = l; i < c; ++i) fb(j, i) = static_cast<double>(i - l) / static_cast<double>(c - l);
    for (std::size_t i = c; i < r && i < bins; ++i) fb(j, i) = static_cast<double>(r - i) / static_cast<double>(r - c);
  }
  return fb;
}

Matrix mel_filterbank(const Matrix& spectrum, const FrontEndOptions& opt, int sample_rate) {
  const Matrix fb = mel_filters(opt.n_filters, opt.nfft, sample_rate, opt.f_low, opt.f_high);
  if (spectrum.cols() != fb.cols()) {
    throw std::invalid_argument("spectrum has " + std::to_string(spectrum.cols()) + " bins, filterbank expects " +
                                std::to_string(fb.cols()));
  }
  return spectrum * fb.transpose();
}

Matrix log_energies(const Matrix& fbank, const Matrix& spectrum, double floor) {
  Matrix out(fbank.rows(), fbank.cols() + 1);
  for (Eigen::Index t = 0; t < fbank.rows(); ++t) {
    for (Eigen::Index j = 0; j < fbank.cols(); ++j) out(t, j) = std::log(std::max(fbank(t, j), floor));
    out(t, fbank.cols()) = std::log(std::max(spectrum.row(t).sum(), floor));
  }
  return out;
}

Matrix delta(const Matrix& c, int window) {
  const Eigen::Index frames = c.rows();
  if (frames < 1) throw std::invalid_argument("delta of an empty sequence");
  double denom = 0.0;
  for (int n = 1; n <= window; ++n) denom += n * n;
  denom *= 2.0;
  auto clamp = [frames](Eigen::Index t) { return std::clamp<Eigen::Index>(t, 0, frames - 1); };
  Matrix d = Matrix::Zero(frames, c.cols());
  for (Eigen::Index t = 0; t < frames; ++t) {
    for (int n = 1; n <= window; ++n) d.row(t) += n * (c.row(clamp(t + n)) - c.row(clamp(t - n)));
    d.row(t) /= denom;
  }
  return d;
}

FeatureTensor compute_features(const Waveform& wav, const FrontEndOptions& opt) {
  const Matrix frames = frame_signal(wav, opt, opt.hamming);
  const Matrix spec = power_spectrum(frames, opt.nfft);
  const Matrix stat = log_energies(mel_filterbank(spec, opt, wav.sample_rate), spec, opt.log_floor);
  const Matrix d1 = delta(stat, opt.delta_window);
  const Matrix d2 = delta(d1, opt.delta_window);
  FeatureTensor ft(static_cast<std::size_t>(stat.cols()), static_cast<std::size_t>(stat.rows()), kChannels);
  for (std::size_t t = 0; t < ft.frames; ++t) {
    for (std::size_t f = 0; f < ft.freq; ++f) {
      ft.at(f, t, 0) = stat(t, f);
      ft.at(f, t, 1) = d1(t, f);
      ft.at(f, t, 2) = d2(t, f);
    }
  }
  return ft;
}

NormStats compute_norm_stats(std::span<const FeatureTensor> corpus) {
  if (corpus.empty()) throw std::invalid_argument("cannot compute normalization statistics of an empty corpus");
  const std::size_t freq = corpus[0].freq, ch = corpus[0].channels, dims = freq * ch;
  NormStats st;
  st.mean.assign(dims, 0.0);
  st.stddev.assign(dims, 0.0);
  std::size_t count = 0;
  // Two passes in a fixed order keep the result deterministic and accurate.
  for (const auto& ft : corpus) {
    if (ft.freq != freq || ft.channels != ch) throw std::invalid_argument("feature tensors disagree in layout");
    count += ft.frames;
    for (std::size_t f = 0; f < freq; ++f)
      for (std::size_t t = 0; t < ft.frames; ++t)
        for (std::size_t c = 0; c < ch; ++c) st.mean[c * freq + f] += ft.at(f, t, c);
  }
  for (auto& m : st.mean) m /= static_cast<double>(count);
  for (const auto& ft : corpus) {
    for (std::size_t f = 0; f < freq; ++f)
      for (std::size_t t = 0; t < ft.frames; ++t)
        for (std::size_t c = 0; c < ch; ++c) {
          const double d = ft.at(f, t, c) - st.mean[c * freq + f];
          st.stddev[c * freq + f] += d * d;
        }
  }
  for (auto& s : st.stddev) s = std::max(std::sqrt(s / static_cast<double>(count)), kStdFloor);
  return st;
}

void normalize(FeatureTensor& ft, const NormStats& stats) {
  if (stats.mean.size() != ft.freq * ft.channels || stats.stddev.size() != stats.mean.size()) {
    throw std::invalid_argument("normalization statistics have " + std::to_string(stats.mean.size()) +
                                " dimensions, features have " + std::to_string(ft.freq * ft.channels));
  }
  for (std::size_t f = 0; f < ft.freq; ++f)
    for (std::size_t t = 0; t < ft.frames; ++t)
      for (std::size_t c = 0; c < ft.channels; ++c) {
        const std::size_t d = c * ft.freq + f;
        ft.at(f, t, c) = (ft.at(f, t, c) - stats.mean[d]) / stats.stddev[d];
      }
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open audio file " + path.string());
  char magic[8] = {};
  is.read(magic, 8);
  if (is.gcount() >= 7 && std::string(magic, 7) == "NIST_1A") {
    throw FormatError(path.string() + ": NIST SPHERE audio is not supported; convert to 16-bit PCM WAV first");
  }
  if (is.gcount() < 8 || std::string(magic, 4) != "RIFF") throw FormatError(path.string() + ": not a RIFF/WAV file");
  char wave[4];
  is.read(wave, 4);
  if (!is || std::string(wave, 4) != "WAVE") throw FormatError(path.string() + ": missing WAVE tag");

  Waveform wav;
  bool have_fmt = false;
  while (true) {
    char id[4];
    is.read(id, 4);
    if (!is) break;
    const auto size = io::read_le<std::uint32_t>(is, "chunk header");
    const std::string cid(id, 4);
    if (cid == "fmt ") {
      const auto format = io::read_le<std::uint16_t>(is, "fmt chunk");
      const auto channels = io::read_le<std::uint16_t>(is, "fmt chunk");
      const auto rate = io::read_le<std::uint32_t>(is, "fmt chunk");
      is.ignore(6);
      const auto bits = io::read_le<std::uint16_t>(is, "fmt chunk");
      if (format != 1 || bits != 16 || channels != 1) {
        throw FormatError(path.string() + ": only 16-bit PCM mono WAV is supported (format " + std::to_string(format) +
                          ", " + std::to_string(channels) + " channels, " + std::to_string(bits) + " bits)");
      }
      wav.sample_rate = static_cast<int>(rate);
      is.ignore(static_cast<std::streamsize>(size) - 16 + (size & 1));
      have_fmt = true;
    } else if (cid == "data") {
      if (!have_fmt) throw FormatError(path.string() + ": data chunk before fmt chunk");
      wav.samples.resize(size / 2);
      for (auto& s : wav.samples) s = io::read_le<std::int16_t>(is, "sample data") / 32768.0;
      return wav;
    } else {
      is.ignore(static_cast<std::streamsize>(size) + (size & 1));
    }
  }
  throw FormatError(path.string() + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& wav) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wav.samples.size() * 2);
  os.write("RIFF", 4);
  io::write_le<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  io::write_le<std::uint32_t>(os, 16);
  io::write_le<std::uint16_t>(os, 1);
  io::write_le<std::uint16_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(wav.sample_rate));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(wav.sample_rate * 2));
  io::write_le<std::uint16_t>(os, 2);
  io::write_le<std::uint16_t>(os, 16);
  os.write("data", 4);
  io::write_le<std::uint32_t>(os, data_bytes);
  for (double s : wav.samples) {
    const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    io::write_le<std::int16_t>(os, static_cast<std::int16_t>(scaled));
  }
}

void write_features(const std::filesystem::path& path, const FeatureTensor& ft) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os.write("FTEN", 4);
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ft.freq));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ft.frames));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ft.channels));
  io::write_doubles(os, ft.values.data(), ft.values.size());
  if (!os) throw FormatError("write failed for " + path.string());
}

FeatureTensor read_features(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open feature file " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "FTEN") throw FormatError(path.string() + ": bad feature file magic");
  const auto version = io::read_le<std::uint32_t>(is, "feature header");
  if (version != 1) throw FormatError(path.string() + ": unsupported feature file version " + std::to_string(version));
  const auto f = io::read_le<std::uint32_t>(is, "feature header");
  const auto t = io::read_le<std::uint32_t>(is, "feature header");
  const auto c = io::read_le<std::uint32_t>(is, "feature header");
  if (f == 0 || t == 0 || c == 0) throw FormatError(path.string() + ": empty feature tensor");
  FeatureTensor ft(f, t, c);
  io::read_doubles(is, ft.values.data(), ft.values.size(), "feature payload in " + path.string());
  return ft;
}

void write_norm_stats(const std::filesystem::path& path, const NormStats& stats) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << std::setprecision(17);
  for (std::size_t d = 0; d < stats.mean.size(); ++d) os << stats.mean[d] << ' ' << stats.stddev[d] << '\n';
}

NormStats read_norm_stats(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  NormStats st;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double m = 0, s = 0;
    if (!(ls >> m >> s)) throw FormatError(path.string() + ": expected \"mean std\" on line " +
                                           std::to_string(st.mean.size() + 1));
    if (!(s > 0)) throw FormatError(path.string() + ": non-positive std on line " + std::to_string(st.mean.size() + 1));
    st.mean.push_back(m);
    st.stddev.push_back(s);
  }
  if (st.mean.size() != kFeatureDims) {
    throw FormatError(path.string() + ": expected " + std::to_string(kFeatureDims) + " lines, got " +
                      std::to_string(st.mean.size()));
  }
  return st;
}

}  // namespace convattn::features
