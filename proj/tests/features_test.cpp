#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "convattn/errors.hpp"
#include "convattn/features.hpp"
#include "convattn/rng.hpp"

namespace convattn::features {
namespace {

namespace fs = std::filesystem;

Waveform noise_wave(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  w.samples.resize(n);
  for (auto& s : w.samples) s = uniform(rng, -0.5, 0.5);
  return w;
}

fs::path temp_dir() {
  auto d = fs::temp_directory_path() / ("convattn_features_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

TEST(Framing, FrameCounts) {
  FrontEndOptions opt;
  auto one_second = frame_signal(noise_wave(16000, 1), opt);
  EXPECT_EQ(one_second.rows(), 98);
  EXPECT_EQ(one_second.cols(), 400);
  EXPECT_EQ(frame_signal(noise_wave(400, 1), opt).rows(), 1);
  EXPECT_THROW(frame_signal(noise_wave(399, 1), opt), std::invalid_argument);
}

TEST(Framing, FramesStartAtHopMultiples) {
  Waveform w;
  for (int i = 0; i < 1000; ++i) w.samples.push_back(i * 1e-3);
  auto frames = frame_signal(w, {}, false);
  EXPECT_DOUBLE_EQ(frames(2, 0), 320 * 1e-3);
  EXPECT_DOUBLE_EQ(frames(3, 5), 485 * 1e-3);
}

TEST(Spectrum, ZeroAndConstantFrames) {
  Matrix zero = Matrix::Zero(2, 400);
  EXPECT_EQ(power_spectrum(zero, 512).maxCoeff(), 0.0);

  Matrix constant = Matrix::Constant(1, 512, 0.3);
  auto spec = power_spectrum(constant, 512);
  EXPECT_EQ(spec.cols(), 257);
  EXPECT_NEAR(spec(0, 0), 0.3 * 0.3 * 512, 1e-9);
  EXPECT_LT(spec.rightCols(256).maxCoeff(), 1e-18);
}

TEST(Spectrum, SinusoidPeaksAtItsBin) {
  for (int bin : {5, 40, 100, 200}) {
    Matrix frame(1, 512);
    for (int n = 0; n < 512; ++n) frame(0, n) = std::sin(2 * M_PI * bin * n / 512.0);
    auto spec = power_spectrum(frame, 512);
    Eigen::Index arg = 0;
    spec.row(0).maxCoeff(&arg);
    EXPECT_EQ(arg, bin);
  }
  EXPECT_THROW(power_spectrum(Matrix::Zero(1, 600), 512), std::invalid_argument);
}

TEST(MelFilterbank, ConstructionProperties) {
  auto fb = mel_filters(40, 512, 16000, 0, 8000);
  ASSERT_EQ(fb.rows(), 40);
  ASSERT_EQ(fb.cols(), 257);
  for (Eigen::Index j = 0; j < fb.rows(); ++j) {
    Eigen::Index arg = 0;
    EXPECT_DOUBLE_EQ(fb.row(j).maxCoeff(&arg), 1.0) << "filter " << j;
    // Centers ascend with the filter index.
    if (j > 0) {
      Eigen::Index prev = 0;
      fb.row(j - 1).maxCoeff(&prev);
      EXPECT_GT(arg, prev);
    }
  }
  FrontEndOptions opt;
  EXPECT_EQ(mel_filterbank(Matrix::Zero(3, 257), opt, 16000).maxCoeff(), 0.0);
  auto flat = mel_filterbank(Matrix::Ones(1, 257), opt, 16000);
  EXPECT_GT(flat.minCoeff(), 0.0);
}

TEST(MelFilterbank, InvalidBandEdges) {
  EXPECT_THROW(mel_filters(40, 512, 16000, 4000, 3000), std::invalid_argument);
  EXPECT_THROW(mel_filters(40, 512, 16000, 0, 9000), std::invalid_argument);
  EXPECT_THROW(mel_filters(40, 512, 16000, -1, 8000), std::invalid_argument);
}

TEST(MelScale, RoundTrip) {
  for (double hz : {0.0, 100.0, 1000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-12);
}

TEST(LogEnergies, FloorAndLog) {
  Matrix fb(1, 3);
  fb << 1.0, 0.0, std::exp(2.0);
  Matrix spec = Matrix::Constant(1, 4, 0.25);
  auto le = log_energies(fb, spec, 1e-10);
  ASSERT_EQ(le.cols(), 4);
  EXPECT_DOUBLE_EQ(le(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(le(0, 1), std::log(1e-10));
  EXPECT_NEAR(le(0, 2), 2.0, 1e-15);
  EXPECT_NEAR(le(0, 3), 0.0, 1e-15);  // total power 1
}

TEST(Delta, Examples) {
  EXPECT_EQ(delta(Matrix::Constant(7, 3, 4.2)).cwiseAbs().maxCoeff(), 0.0);

  Matrix ramp(9, 1);
  for (int t = 0; t < 9; ++t) ramp(t, 0) = t;
  auto d = delta(ramp);
  for (int t = 2; t < 7; ++t) EXPECT_NEAR(d(t, 0), 1.0, 1e-15);

  Matrix bump(3, 1);
  bump << 0, 1, 0;
  EXPECT_EQ(delta(bump)(1, 0), 0.0);
  // Edge replication: t=0 sees c_{-1} = c_{-2} = 0, c_1 = 1, c_2 = 0 -> 1/10.
  EXPECT_NEAR(delta(bump)(0, 0), 0.1, 1e-15);
}

TEST(Delta, IsLinear) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a(11, 4), b(11, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      a.data()[i] = uniform(rng, -1, 1);
      b.data()[i] = uniform(rng, -1, 1);
    }
    const double s = uniform(rng, -3, 3);
    Matrix lhs = delta(s * a + b);
    Matrix rhs = s * delta(a) + delta(b);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Pipeline, ShapeAndDeterminism) {
  auto w = noise_wave(8000, 9);
  auto a = compute_features(w);
  auto b = compute_features(w);
  EXPECT_EQ(a.freq, 41u);
  EXPECT_EQ(a.channels, 3u);
  EXPECT_EQ(a.frames, 48u);
  EXPECT_EQ(a.freq * a.channels, kFeatureDims);
  EXPECT_EQ(a, b);
}

TEST(NormStats, HandArithmeticAndFloor) {
  FeatureTensor ft(41, 2, 3);
  ft.at(0, 0, 0) = 1.0;
  ft.at(0, 1, 0) = 3.0;
  for (std::size_t f = 1; f < 41; ++f) ft.at(f, 0, 1) = ft.at(f, 1, 1) = 5.0;
  std::vector<FeatureTensor> corpus{ft};
  auto st = compute_norm_stats(corpus);
  EXPECT_DOUBLE_EQ(st.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(st.stddev[0], 1.0);
  EXPECT_DOUBLE_EQ(st.stddev[41 + 3], kStdFloor);
  normalize(ft, st);
  EXPECT_EQ(ft.at(3, 0, 1), 0.0);
  EXPECT_DOUBLE_EQ(ft.at(0, 0, 0), -1.0);
  EXPECT_THROW(compute_norm_stats(std::span<const FeatureTensor>{}), std::invalid_argument);
}

TEST(NormStats, TrainingSetBecomesStandardized) {
  std::vector<FeatureTensor> corpus;
  for (int i = 0; i < 4; ++i) corpus.push_back(compute_features(noise_wave(4000 + 800 * i, 20 + i)));
  auto st = compute_norm_stats(corpus);
  for (auto& ft : corpus) normalize(ft, st);
  auto after = compute_norm_stats(corpus);
  for (std::size_t d = 0; d < kFeatureDims; ++d) {
    EXPECT_LT(std::abs(after.mean[d]), 1e-10);
    EXPECT_NEAR(after.stddev[d] * after.stddev[d], 1.0, 1e-6);
  }
}

TEST(FileFormats, FeatureRoundTripIsBitIdentical) {
  auto dir = temp_dir();
  auto ft = compute_features(noise_wave(6000, 4));
  write_features(dir / "a.ften", ft);
  EXPECT_EQ(read_features(dir / "a.ften"), ft);
  EXPECT_EQ(fs::file_size(dir / "a.ften"), 20 + ft.values.size() * 8);

  std::ifstream is(dir / "a.ften", std::ios::binary);
  char header[20];
  is.read(header, 20);
  EXPECT_EQ(std::string(header, 4), "FTEN");
  EXPECT_EQ(static_cast<unsigned char>(header[8]), 41);
}

TEST(FileFormats, NormStatsText) {
  auto dir = temp_dir();
  NormStats st;
  for (std::size_t d = 0; d < kFeatureDims; ++d) {
    st.mean.push_back(d * 0.1);
    st.stddev.push_back(1.0 + d);
  }
  write_norm_stats(dir / "stats.txt", st);
  auto back = read_norm_stats(dir / "stats.txt");
  EXPECT_EQ(back.mean, st.mean);
  EXPECT_EQ(back.stddev, st.stddev);
}

TEST(FileFormats, WavRoundTripAndSphereRejected) {
  auto dir = temp_dir();
  Waveform w;
  for (int i = 0; i < 500; ++i) w.samples.push_back(std::round(std::sin(i * 0.1) * 1000) / 32768.0);
  write_wav(dir / "a.wav", w);
  auto back = read_wav(dir / "a.wav");
  EXPECT_EQ(back.sample_rate, 16000);
  EXPECT_EQ(back.samples, w.samples);

  std::ofstream(dir / "b.wav") << "NIST_1A\n   1024\n";
  try {
    read_wav(dir / "b.wav");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("SPHERE"), std::string::npos);
  }
}

}  // namespace
}  // namespace convattn::features
