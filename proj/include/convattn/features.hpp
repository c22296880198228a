#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace convattn::features {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1)
  int sample_rate = 16000;
};

struct FrontEndOptions {
  double frame_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t nfft = 512;
  std::size_t n_filters = 40;
  double f_low = 0.0;
  double f_high = 8000.0;
  double log_floor = 1e-10;
  int delta_window = 2;
  bool hamming = true;
};

inline constexpr std::size_t kStaticDims = 41;  // 40 log-mel + energy
inline constexpr std::size_t kChannels = 3;     // static, delta, delta-delta
inline constexpr std::size_t kFeatureDims = kStaticDims * kChannels;

/// Acoustic features laid out (frequency, time, channel), row-major.
struct FeatureTensor {
  std::size_t freq = kStaticDims;
  std::size_t frames = 0;
  std::size_t channels = kChannels;
  std::vector<double> values;

  FeatureTensor() = default;
  FeatureTensor(std::size_t f, std::size_t t, std::size_t c) : freq(f), frames(t), channels(c), values(f * t * c) {}

  double& at(std::size_t f, std::size_t t, std::size_t c) { return values[(f * frames + t) * channels + c]; }
  double at(std::size_t f, std::size_t t, std::size_t c) const { return values[(f * frames + t) * channels + c]; }
  bool operator==(const FeatureTensor&) const = default;
};

/// Per-dimension statistics; dimension index = channel * freq + f.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

inline constexpr double kStdFloor = 1e-8;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Frame t starts at t * hop samples; a Hamming window is applied when
/// `window` is set.
Matrix frame_signal(const Waveform& wav, const FrontEndOptions& opt, bool window = true);

/// |FFT|^2 / nfft over the nfft/2 + 1 non-negative frequency bins.
Matrix power_spectrum(const Matrix& frames, std::size_t nfft);

/// Triangular filters spaced uniformly in mel, [n_filters x (nfft/2 + 1)].
Matrix mel_filters(std::size_t n_filters, std::size_t nfft, int sample_rate, double f_low, double f_high);

Matrix mel_filterbank(const Matrix& spectrum, const FrontEndOptions& opt, int sample_rate);

/// log(max(e, floor)) of each filter energy, followed by the log total frame
/// power as the energy column: [T x (n_filters + 1)].
Matrix log_energies(const Matrix& fbank, const Matrix& spectrum, double floor);

/// Regression deltas over +-window frames with edge replication.
Matrix delta(const Matrix& c, int window = 2);

/// Full pipeline: waveform -> (41 x T x 3) static/delta/delta-delta tensor.
FeatureTensor compute_features(const Waveform& wav, const FrontEndOptions& opt = {});

NormStats compute_norm_stats(std::span<const FeatureTensor> corpus);
void normalize(FeatureTensor& ft, const NormStats& stats);

Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& wav);

void write_features(const std::filesystem::path& path, const FeatureTensor& ft);
FeatureTensor read_features(const std::filesystem::path& path);

void write_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats read_norm_stats(const std::filesystem::path& path);

}  // namespace convattn::features
