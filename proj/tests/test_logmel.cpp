#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "milscene/logmel.hpp"

using namespace milscene;

namespace {

constexpr double kPi = 3.14159265358979323846;

AudioClip mono16k(std::vector<double> samples) {
  AudioClip clip;
  clip.sample_rate = 16000;
  clip.samples.push_back(std::move(samples));
  return clip;
}

AudioClip sine16k(double freq, double seconds, double amp = 0.5) {
  const size_t n = static_cast<size_t>(seconds * 16000);
  std::vector<double> x(n);
  for (size_t i = 0; i < n; ++i)
    x[i] = amp * std::sin(2.0 * kPi * freq * static_cast<double>(i) / 16000.0);
  return mono16k(std::move(x));
}

}  // namespace

TEST_CASE("fft matches a direct DFT on a small signal") {
  std::vector<double> re{1, 2, 3, 4, 0, -1, -2, 1};
  std::vector<double> im(8, 0.0);
  const std::vector<double> x = re;
  fft_inplace(re, im);
  for (int k = 0; k < 8; ++k) {
    double er = 0, ei = 0;
    for (int n = 0; n < 8; ++n) {
      const double ph = -2.0 * kPi * k * n / 8.0;
      er += x[static_cast<size_t>(n)] * std::cos(ph);
      ei += x[static_cast<size_t>(n)] * std::sin(ph);
    }
    CHECK(re[static_cast<size_t>(k)] == doctest::Approx(er).epsilon(1e-9));
    CHECK(im[static_cast<size_t>(k)] == doctest::Approx(ei).epsilon(1e-9));
  }
}

TEST_CASE("a 10 s clip yields the 256 x 313 shape") {
  const LogMelSpectrogram spec = logmel(sine16k(440.0, 10.0));
  CHECK(spec.n_mels == 256);
  CHECK(spec.n_frames == 313);  // 1 + floor(160000 / 512)
}

TEST_CASE("digital silence sits exactly at the log floor") {
  const LogMelSpectrogram spec = logmel(mono16k(std::vector<double>(16000, 0.0)));
  const double floor_val = std::log(1e-10);
  for (double v : spec.values) CHECK(v == doctest::Approx(floor_val));
}

TEST_CASE("shape depends only on sample count, not content") {
  const LogMelSpectrogram a = logmel(mono16k(std::vector<double>(20000, 0.0)));
  const LogMelSpectrogram b = logmel(sine16k(1234.0, 1.25));
  CHECK(a.n_frames == b.n_frames);
  CHECK(a.n_mels == b.n_mels);
}

TEST_CASE("clip shorter than one hop is rejected") {
  CHECK_THROWS(static_cast<void>(logmel(mono16k(std::vector<double>(511, 0.1)))));
  CHECK_NOTHROW(static_cast<void>(logmel(mono16k(std::vector<double>(512, 0.1)))));
}

TEST_CASE("1 kHz sine peaks at the filterbank's 1 kHz bin") {
  // Oracle from the filterbank definition: the filter with the largest
  // response at exactly 1000 Hz.
  const MelFilterBank fb = make_mel_filterbank(256, 2048, 16000, 0.0, 8000.0);
  int expected = 0;
  double best_w = -1.0;
  for (int m = 0; m < fb.n_mels; ++m) {
    // evaluate the triangle at 1 kHz by linear interpolation over bins
    const double pos = 1000.0 * 2048.0 / 16000.0;
    const int k0 = static_cast<int>(pos);
    const double frac = pos - k0;
    const double w = fb.at(m, k0) * (1.0 - frac) + fb.at(m, k0 + 1) * frac;
    if (w > best_w) {
      best_w = w;
      expected = m;
    }
  }

  const LogMelSpectrogram spec = logmel(sine16k(1000.0, 1.0));
  for (int t = 2; t < spec.n_frames - 2; ++t) {  // interior frames
    int arg = 0;
    for (int m = 1; m < spec.n_mels; ++m)
      if (spec.at(m, t) > spec.at(arg, t)) arg = m;
    CHECK(arg == expected);
  }
}

TEST_CASE("scaling a clip by 2 raises log-mel values by 2 ln 2") {
  // broadband noise keeps every cell well above the epsilon floor
  std::mt19937_64 rng(314);
  std::uniform_real_distribution<double> dist(-0.2, 0.2);
  std::vector<double> x(16000);
  for (double& v : x) v = dist(rng);
  AudioClip clip = mono16k(x);
  const LogMelSpectrogram a = logmel(clip);
  for (double& v : clip.samples[0]) v *= 2.0;
  const LogMelSpectrogram b = logmel(clip);
  int checked = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    if (a.values[i] < std::log(1e-10) + 16.0) continue;  // floor-dominated cells
    CHECK(b.values[i] - a.values[i] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));
    ++checked;
  }
  CHECK(checked > 1000);
}

TEST_CASE("mel filterbank rows are nonnegative, nonempty, with rising peaks") {
  const MelFilterBank fb = make_mel_filterbank(256, 2048, 16000, 0.0, 8000.0);
  for (int m = 0; m < fb.n_mels; ++m) {
    double row_max = 0.0;
    for (int k = 0; k < fb.n_bins; ++k) {
      CHECK(fb.at(m, k) >= 0.0);
      row_max = std::max(row_max, fb.at(m, k));
    }
    CHECK(row_max > 0.0);
    if (m > 0) CHECK(fb.peak_freqs[static_cast<size_t>(m)] >
                     fb.peak_freqs[static_cast<size_t>(m) - 1]);
  }
}

TEST_CASE("hz/mel conversions are mutual inverses on the audible range") {
  for (double f : {0.0, 100.0, 440.0, 1000.0, 4000.0, 8000.0})
    CHECK(mel_to_hz(hz_to_mel(f)) == doctest::Approx(f).epsilon(1e-9));
}

TEST_CASE("LMEL cache round trip is float32-exact") {
  const LogMelSpectrogram spec = logmel(sine16k(600.0, 0.7));
  const std::string path =
      (std::filesystem::temp_directory_path() / "milscene_cache.lmel").string();
  save_lmel(path, spec);
  const LogMelSpectrogram back = load_lmel(path);
  CHECK(back.n_mels == spec.n_mels);
  CHECK(back.n_frames == spec.n_frames);
  for (size_t i = 0; i < spec.values.size(); ++i)
    CHECK(back.values[i] == static_cast<double>(static_cast<float>(spec.values[i])));
}

TEST_CASE("LMEL loader rejects bad magic and truncation") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string bad = (dir / "milscene_bad.lmel").string();
  {
    std::ofstream out(bad, std::ios::binary);
    out << "NOPE1234";
  }
  CHECK_THROWS_WITH(static_cast<void>(load_lmel(bad)), doctest::Contains("magic"));

  const std::string trunc = (dir / "milscene_trunc.lmel").string();
  {
    std::ofstream out(trunc, std::ios::binary);
    out << "LMEL";
    const uint32_t v = 1, mels = 4, frames = 100;
    out.write(reinterpret_cast<const char*>(&v), 4);
    out.write(reinterpret_cast<const char*>(&mels), 4);
    out.write(reinterpret_cast<const char*>(&frames), 4);
    const float one = 1.0f;
    out.write(reinterpret_cast<const char*>(&one), 4);  // far too few values
  }
  CHECK_THROWS_WITH(static_cast<void>(load_lmel(trunc)), doctest::Contains("truncated"));
}
