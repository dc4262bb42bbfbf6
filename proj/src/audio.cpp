#include "milscene/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace milscene {

namespace {

constexpr int kTargetRate = 16000;
constexpr int kSincTaps = 32;  // per side
constexpr double kPi = 3.14159265358979323846;

uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated WAV file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t read_u16(std::istream& in, const std::string& path) {
  unsigned char b[2];
  if (!in.read(reinterpret_cast<char*>(b), 2))
    throw std::runtime_error(path + ": truncated WAV file");
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void write_u16(std::ostream& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 2);
}

}  // namespace

void AudioClip::validate() const {
  if (sample_rate <= 0) throw std::invalid_argument("audio clip: sample rate must be positive");
  if (samples.empty() || samples[0].empty())
    throw std::invalid_argument("audio clip: empty clip");
  for (const auto& ch : samples)
    if (ch.size() != samples[0].size())
      throw std::invalid_argument("audio clip: channels differ in length");
}

AudioClip decode_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");

  char riff[4];
  if (!in.read(riff, 4) || std::memcmp(riff, "RIFF", 4) != 0)
    throw std::runtime_error(path + ": not a RIFF file");
  read_u32(in, path);  // overall size, unused
  char wave[4];
  if (!in.read(wave, 4) || std::memcmp(wave, "WAVE", 4) != 0)
    throw std::runtime_error(path + ": not a WAVE file");

  uint16_t format_tag = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  bool have_fmt = false;
  std::vector<char> payload;

  while (true) {
    char id[4];
    if (!in.read(id, 4)) break;
    const uint32_t chunk_size = read_u32(in, path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw std::runtime_error(path + ": malformed fmt chunk");
      format_tag = read_u16(in, path);
      channels = read_u16(in, path);
      sample_rate = read_u32(in, path);
      read_u32(in, path);  // byte rate
      read_u16(in, path);  // block align
      bits = read_u16(in, path);
      in.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      payload.resize(chunk_size);
      if (!in.read(payload.data(), chunk_size))
        throw std::runtime_error(path + ": truncated data chunk");
      break;
    } else {
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
      if (!in) throw std::runtime_error(path + ": truncated WAV file");
    }
  }

  if (!have_fmt) throw std::runtime_error(path + ": missing fmt chunk");
  if (!((format_tag == 1 && bits == 16) || (format_tag == 3 && bits == 32)))
    throw std::runtime_error(path + ": unsupported WAV encoding (format tag " +
                             std::to_string(format_tag) + ", " + std::to_string(bits) +
                             " bits)");
  if (channels < 1 || channels > 2)
    throw std::runtime_error(path + ": unsupported channel count " + std::to_string(channels));
  if (payload.empty()) throw std::runtime_error(path + ": missing or empty data chunk");

  AudioClip clip;
  clip.sample_rate = static_cast<int>(sample_rate);

  if (format_tag == 1 && bits == 16) {
    const size_t frames = payload.size() / (2 * channels);
    clip.samples.assign(channels, std::vector<double>(frames));
    const unsigned char* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (size_t f = 0; f < frames; ++f) {
      for (int c = 0; c < channels; ++c) {
        const size_t off = (f * channels + c) * 2;
        const int16_t v = static_cast<int16_t>(p[off] | (p[off + 1] << 8));
        clip.samples[c][f] = static_cast<double>(v) / 32768.0;
      }
    }
  } else {
    const size_t frames = payload.size() / (4 * channels);
    clip.samples.assign(channels, std::vector<double>(frames));
    for (size_t f = 0; f < frames; ++f) {
      for (int c = 0; c < channels; ++c) {
        float v;
        std::memcpy(&v, payload.data() + (f * channels + c) * 4, 4);
        clip.samples[c][f] = static_cast<double>(v);
      }
    }
  }
  return clip;
}

void encode_wav_pcm16(const std::string& path, const AudioClip& clip) {
  clip.validate();
  const int channels = clip.channels();
  const uint32_t frames = static_cast<uint32_t>(clip.length());
  const uint32_t data_bytes = frames * channels * 2;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write("RIFF", 4);
  write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_u32(out, 16);
  write_u16(out, 1);  // PCM
  write_u16(out, static_cast<uint16_t>(channels));
  write_u32(out, static_cast<uint32_t>(clip.sample_rate));
  write_u32(out, static_cast<uint32_t>(clip.sample_rate * channels * 2));
  write_u16(out, static_cast<uint16_t>(channels * 2));
  write_u16(out, 16);
  out.write("data", 4);
  write_u32(out, data_bytes);
  for (uint32_t f = 0; f < frames; ++f) {
    for (int c = 0; c < channels; ++c) {
      const double v = std::clamp(clip.samples[c][f], -1.0, 1.0);
      const int q = static_cast<int>(std::lrint(v * 32767.0));
      write_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

namespace {

std::vector<double> downmix(const AudioClip& clip) {
  if (clip.channels() == 1) return clip.samples[0];
  std::vector<double> mono(clip.length());
  for (size_t i = 0; i < mono.size(); ++i)
    mono[i] = 0.5 * (clip.samples[0][i] + clip.samples[1][i]);
  return mono;
}

std::vector<double> resample_sinc(const std::vector<double>& x, int in_rate, int out_rate) {
  const double ratio = static_cast<double>(out_rate) / in_rate;
  const double cutoff = std::min(1.0, ratio);  // relative to input Nyquist
  const size_t out_len =
      static_cast<size_t>(std::floor(static_cast<double>(x.size()) * ratio));
  std::vector<double> y(out_len, 0.0);
  const int n_in = static_cast<int>(x.size());
  for (size_t n = 0; n < out_len; ++n) {
    const double center = static_cast<double>(n) / ratio;
    const int m0 = static_cast<int>(std::ceil(center)) - kSincTaps;
    const int m1 = static_cast<int>(std::floor(center)) + kSincTaps;
    double acc = 0.0;
    for (int m = std::max(0, m0); m <= std::min(n_in - 1, m1); ++m) {
      const double tau = center - m;
      double h;
      if (std::fabs(tau) < 1e-12) {
        h = cutoff;
      } else {
        h = cutoff * std::sin(kPi * cutoff * tau) / (kPi * cutoff * tau);
      }
      const double win = 0.5 * (1.0 + std::cos(kPi * tau / (kSincTaps + 1)));
      acc += x[m] * h * win;
    }
    y[n] = acc;
  }
  return y;
}

}  // namespace

AudioClip preprocess(const AudioClip& clip) {
  clip.validate();
  if (clip.channels() == 1 && clip.sample_rate == kTargetRate) return clip;

  AudioClip out;
  out.sample_rate = kTargetRate;
  std::vector<double> mono = downmix(clip);
  if (clip.sample_rate == kTargetRate) {
    out.samples.push_back(std::move(mono));
  } else {
    out.samples.push_back(resample_sinc(mono, clip.sample_rate, kTargetRate));
  }
  return out;
}

}  // namespace milscene
