#include "milscene/logmel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace milscene {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterBank make_mel_filterbank(int n_mels, int fft_size, int sample_rate, double f_min,
                                  double f_max) {
  MelFilterBank fb;
  fb.n_mels = n_mels;
  fb.n_bins = fft_size / 2 + 1;
  fb.weights.assign(static_cast<size_t>(n_mels) * fb.n_bins, 0.0);
  fb.peak_freqs.resize(static_cast<size_t>(n_mels));

  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[static_cast<size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / static_cast<double>(n_mels + 1));

  const double bin_hz = static_cast<double>(sample_rate) / fft_size;
  for (int m = 0; m < n_mels; ++m) {
    const double f0 = edges[static_cast<size_t>(m)];
    const double f1 = edges[static_cast<size_t>(m) + 1];
    const double f2 = edges[static_cast<size_t>(m) + 2];
    fb.peak_freqs[static_cast<size_t>(m)] = f1;
    for (int k = 0; k < fb.n_bins; ++k) {
      const double f = k * bin_hz;
      double w = 0.0;
      if (f > f0 && f < f1) {
        w = (f - f0) / (f1 - f0);
      } else if (f >= f1 && f < f2) {
        w = (f2 - f) / (f2 - f1);
      }
      fb.weights[static_cast<size_t>(m) * fb.n_bins + k] = w;
    }
  }
  return fb;
}

void fft_inplace(std::vector<double>& re, std::vector<double>& im) {
  const size_t n = re.size();
  if (n == 0 || (n & (n - 1)) != 0 || im.size() != n)
    throw std::invalid_argument("fft: size must be a power of two");

  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }

  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

namespace {

// Mirrored index without repeating the edge sample (librosa-style reflect).
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  int64_t k = i % period;
  if (k < 0) k += period;
  return k < n ? k : period - k;
}

}  // namespace

LogMelSpectrogram logmel(const AudioClip& clip, const LogMelConfig& cfg) {
  clip.validate();
  if (clip.channels() != 1)
    throw std::invalid_argument("logmel: expected a mono clip, got " +
                                std::to_string(clip.channels()) + " channels");
  if (clip.sample_rate != cfg.sample_rate)
    throw std::invalid_argument("logmel: expected " + std::to_string(cfg.sample_rate) +
                                " Hz, got " + std::to_string(clip.sample_rate));
  const int64_t n = static_cast<int64_t>(clip.length());
  if (n < cfg.hop_length)
    throw std::invalid_argument("logmel: clip shorter than one hop (" + std::to_string(n) +
                                " samples)");

  const int n_frames = 1 + static_cast<int>(n / cfg.hop_length);
  struct FbKey {
    int n_mels, win_length, sample_rate;
    double f_min, f_max;
    bool operator==(const FbKey&) const = default;
  };
  const FbKey key{cfg.n_mels, cfg.win_length, cfg.sample_rate, cfg.f_min, cfg.f_max};
  static thread_local FbKey cached_key{0, 0, 0, 0.0, 0.0};
  static thread_local MelFilterBank fb;
  if (!(key == cached_key)) {
    fb = make_mel_filterbank(cfg.n_mels, cfg.win_length, cfg.sample_rate, cfg.f_min, cfg.f_max);
    cached_key = key;
  }

  std::vector<double> window(static_cast<size_t>(cfg.win_length));
  for (int i = 0; i < cfg.win_length; ++i)
    window[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * kPi * i / static_cast<double>(cfg.win_length));

  LogMelSpectrogram spec;
  spec.n_mels = cfg.n_mels;
  spec.n_frames = n_frames;
  spec.values.assign(static_cast<size_t>(cfg.n_mels) * n_frames, 0.0);

  const int half = cfg.win_length / 2;
  const int n_bins = cfg.win_length / 2 + 1;
  std::vector<double> re(static_cast<size_t>(cfg.win_length));
  std::vector<double> im(static_cast<size_t>(cfg.win_length));
  std::vector<double> power(static_cast<size_t>(n_bins));
  const std::vector<double>& x = clip.samples[0];

  for (int t = 0; t < n_frames; ++t) {
    const int64_t start = static_cast<int64_t>(t) * cfg.hop_length - half;
    for (int i = 0; i < cfg.win_length; ++i) {
      const int64_t src = reflect_index(start + i, n);
      re[static_cast<size_t>(i)] = x[static_cast<size_t>(src)] * window[static_cast<size_t>(i)];
      im[static_cast<size_t>(i)] = 0.0;
    }
    fft_inplace(re, im);
    for (int k = 0; k < n_bins; ++k)
      power[static_cast<size_t>(k)] = re[static_cast<size_t>(k)] * re[static_cast<size_t>(k)] +
                                      im[static_cast<size_t>(k)] * im[static_cast<size_t>(k)];
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* wrow = fb.weights.data() + static_cast<size_t>(m) * n_bins;
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) acc += wrow[k] * power[static_cast<size_t>(k)];
      spec.values[static_cast<size_t>(m) * n_frames + t] = std::log(acc + cfg.floor_eps);
    }
  }
  return spec;
}

namespace {

void write_u32le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

uint32_t read_u32le(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated feature cache file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_lmel(const std::string& path, const LogMelSpectrogram& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write("LMEL", 4);
  write_u32le(out, 1);
  write_u32le(out, static_cast<uint32_t>(spec.n_mels));
  write_u32le(out, static_cast<uint32_t>(spec.n_frames));
  std::vector<float> f32(spec.values.begin(), spec.values.end());
  out.write(reinterpret_cast<const char*>(f32.data()),
            static_cast<std::streamsize>(f32.size() * sizeof(float)));
  if (!out) throw std::runtime_error(path + ": write failed");
}

LogMelSpectrogram load_lmel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "LMEL", 4) != 0)
    throw std::runtime_error(path + ": bad feature cache magic");
  const uint32_t version = read_u32le(in, path);
  if (version != 1)
    throw std::runtime_error(path + ": unsupported feature cache version " +
                             std::to_string(version));
  LogMelSpectrogram spec;
  spec.n_mels = static_cast<int>(read_u32le(in, path));
  spec.n_frames = static_cast<int>(read_u32le(in, path));
  const size_t count = static_cast<size_t>(spec.n_mels) * spec.n_frames;
  std::vector<float> f32(count);
  if (!in.read(reinterpret_cast<char*>(f32.data()),
               static_cast<std::streamsize>(count * sizeof(float))))
    throw std::runtime_error(path + ": truncated feature cache file");
  spec.values.assign(f32.begin(), f32.end());
  return spec;
}

std::string FeatureCache::cache_name(const std::string& audio_path) {
  return std::filesystem::path(audio_path).stem().string() + ".lmel";
}

const LogMelSpectrogram& FeatureCache::get(const std::string& audio_path) {
  auto it = memo_.find(audio_path);
  if (it != memo_.end()) return it->second;

  if (!cache_dir_.empty()) {
    const auto cached = std::filesystem::path(cache_dir_) / cache_name(audio_path);
    if (std::filesystem::exists(cached))
      return memo_.emplace(audio_path, load_lmel(cached.string())).first->second;
  }

  LogMelSpectrogram spec = logmel(preprocess(decode_wav(audio_path)));
  if (!cache_dir_.empty()) {
    std::filesystem::create_directories(cache_dir_);
    save_lmel((std::filesystem::path(cache_dir_) / cache_name(audio_path)).string(), spec);
  }
  return memo_.emplace(audio_path, std::move(spec)).first->second;
}

}  // namespace milscene
