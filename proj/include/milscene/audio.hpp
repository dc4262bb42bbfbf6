#pragma once

#include <string>
#include <vector>

namespace milscene {

struct AudioClip {
  std::vector<std::vector<double>> samples;  // per channel, values in [-1,1]
  int sample_rate = 0;

  int channels() const { return static_cast<int>(samples.size()); }
  size_t length() const { return samples.empty() ? 0 : samples[0].size(); }
  void validate() const;
};

// Reads a RIFF/WAVE file with PCM 16-bit or IEEE float 32-bit samples and
// 1 or 2 channels. Integer samples are scaled by 1/32768.
AudioClip decode_wav(const std::string& path);

// Writes mono or stereo 16-bit PCM.
void encode_wav_pcm16(const std::string& path, const AudioClip& clip);

// Downmixes to mono by channel average and resamples to 16 kHz with a
// Hann-windowed sinc kernel (32 taps per side). Conforming input is
// returned unchanged.
AudioClip preprocess(const AudioClip& clip);

}  // namespace milscene
