#pragma once

#include <map>
#include <string>
#include <vector>

#include "milscene/audio.hpp"

namespace milscene {

// Fixed front-end: 128 ms Hann window, 32 ms hop at 16 kHz, 256 mel bands
// over 0-8000 Hz (HTK mel scale), natural log with a 1e-10 energy floor.
struct LogMelConfig {
  int sample_rate = 16000;
  int win_length = 2048;  // 128 ms
  int hop_length = 512;   // 32 ms
  int n_mels = 256;
  double f_min = 0.0;
  double f_max = 8000.0;
  double floor_eps = 1e-10;
};

struct LogMelSpectrogram {
  int n_mels = 0;
  int n_frames = 0;
  std::vector<double> values;  // row-major, mel-major: values[m * n_frames + t]

  double at(int m, int t) const { return values[static_cast<size_t>(m) * n_frames + t]; }
};

// Triangular mel filterbank rows over the positive-frequency FFT bins.
// Unnormalized triangles with unit peaks.
struct MelFilterBank {
  int n_mels = 0;
  int n_bins = 0;                 // fft_size/2 + 1
  std::vector<double> weights;    // row-major (n_mels, n_bins)
  std::vector<double> peak_freqs; // Hz, per filter

  double at(int m, int k) const { return weights[static_cast<size_t>(m) * n_bins + k]; }
};

MelFilterBank make_mel_filterbank(int n_mels, int fft_size, int sample_rate, double f_min,
                                  double f_max);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// In-place iterative radix-2 FFT. Size must be a power of two.
void fft_inplace(std::vector<double>& re, std::vector<double>& im);

// Requires a mono 16 kHz clip of at least one hop.
LogMelSpectrogram logmel(const AudioClip& clip, const LogMelConfig& cfg = {});

// Feature cache file: "LMEL", u32 version=1, u32 n_mels, u32 n_frames, then
// float32 little-endian values, mel-major.
void save_lmel(const std::string& path, const LogMelSpectrogram& spec);
LogMelSpectrogram load_lmel(const std::string& path);

// Memoizing clip -> log-mel provider with an optional on-disk LMEL cache.
class FeatureCache {
 public:
  FeatureCache() = default;
  explicit FeatureCache(std::string cache_dir) : cache_dir_(std::move(cache_dir)) {}

  const LogMelSpectrogram& get(const std::string& audio_path);
  static std::string cache_name(const std::string& audio_path);

 private:
  std::string cache_dir_;
  std::map<std::string, LogMelSpectrogram> memo_;
};

}  // namespace milscene
