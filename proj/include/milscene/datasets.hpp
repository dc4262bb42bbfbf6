#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "milscene/milhead.hpp"

namespace milscene {

struct ClipRecord {
  std::string path;     // resolved audio path
  int scene = -1;       // taxonomy index
  std::string device;   // optional source label
};

// Tab-separated metadata with a "filename<TAB>scene_label" header and an
// optional "source_label" column, DCASE style. Paths resolve relative to
// the metadata file.
std::vector<ClipRecord> parse_meta(const std::string& path, const SceneTaxonomy& taxonomy);

// Builds a taxonomy from the scene labels present in a metadata file.
// Labels forming a subset of the TAU-10 scenes keep TAU ordering; anything
// else sorts lexicographically.
SceneTaxonomy taxonomy_from_meta(const std::string& path);

// Synthetic desk-scale corpus: shared colored-noise backgrounds (classes in
// an ambiguity pair draw from the same background family) plus a few short
// class-signature tone bursts, so only a minority of frames identify the
// class.
struct SynthConfig {
  int n_classes = 4;
  int clips_per_class = 10;
  double clip_seconds = 2.0;
  int sample_rate = 16000;
  std::vector<std::vector<double>> event_tones;     // per class; empty = defaults
  std::vector<std::pair<int, int>> ambiguity_pairs; // empty = consecutive pairs
  uint64_t seed = 0;

  void validate() const;
};

// Writes WAVs under <out_dir>/audio plus <out_dir>/meta.tsv; returns the
// meta path. Fully reproducible from the seed.
std::string synth_generate(const SynthConfig& cfg, const std::string& out_dir);

SceneTaxonomy synth_taxonomy(int n_classes);

// Default two tones per class, geometrically spaced over 400-4000 Hz.
std::vector<std::vector<double>> default_event_tones(int n_classes);

// Stable per-clip substream seed.
uint64_t mix_seed(uint64_t seed, uint64_t index);

}  // namespace milscene
