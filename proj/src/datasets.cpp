#include "milscene/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "milscene/audio.hpp"

namespace milscene {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      cols.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cols.push_back(cur);
  return cols;
}

}  // namespace

std::vector<ClipRecord> parse_meta(const std::string& path, const SceneTaxonomy& taxonomy) {
  taxonomy.validate();
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open metadata file");

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty metadata file");
  const auto header = split_tabs(line);
  int col_file = -1, col_scene = -1, col_device = -1;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "filename") col_file = static_cast<int>(i);
    if (header[i] == "scene_label") col_scene = static_cast<int>(i);
    if (header[i] == "source_label") col_device = static_cast<int>(i);
  }
  if (col_file != 0 || col_scene != 1)
    throw std::runtime_error(path + ": expected header starting 'filename\\tscene_label'");

  const auto base = std::filesystem::path(path).parent_path();
  std::vector<ClipRecord> records;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (static_cast<int>(cols.size()) <= col_scene)
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": too few columns");
    ClipRecord rec;
    rec.path = (base / cols[static_cast<size_t>(col_file)]).string();
    rec.scene = taxonomy.index_of(cols[static_cast<size_t>(col_scene)]);
    if (rec.scene < 0)
      throw std::runtime_error(path + ": row " + std::to_string(row) + ": unknown scene '" +
                               cols[static_cast<size_t>(col_scene)] + "'");
    if (col_device >= 0 && static_cast<int>(cols.size()) > col_device)
      rec.device = cols[static_cast<size_t>(col_device)];
    records.push_back(std::move(rec));
  }
  return records;
}

SceneTaxonomy taxonomy_from_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open metadata file");
  std::string line;
  std::getline(in, line);  // header
  std::set<std::string> labels;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    if (cols.size() >= 2) labels.insert(cols[1]);
  }

  const SceneTaxonomy tau = SceneTaxonomy::tau10();
  const bool tau_subset = std::all_of(labels.begin(), labels.end(), [&](const std::string& s) {
    return tau.index_of(s) >= 0;
  });

  SceneTaxonomy out;
  if (tau_subset) {
    for (const auto& name : tau.names)
      if (labels.count(name)) out.names.push_back(name);
  } else {
    out.names.assign(labels.begin(), labels.end());  // std::set: lexicographic
  }
  out.validate();
  return out;
}

void SynthConfig::validate() const {
  if (n_classes < 2) throw std::invalid_argument("synth: need at least two classes");
  if (clip_seconds < 0.5) throw std::invalid_argument("synth: clips must be >= 0.5 s");
  if (clips_per_class < 1) throw std::invalid_argument("synth: clips_per_class must be >= 1");
  if (sample_rate <= 0) throw std::invalid_argument("synth: bad sample rate");
  for (const auto& [a, b] : ambiguity_pairs)
    if (a < 0 || b < 0 || a >= n_classes || b >= n_classes || a == b)
      throw std::invalid_argument("synth: bad ambiguity pair");
  if (!event_tones.empty() && static_cast<int>(event_tones.size()) != n_classes)
    throw std::invalid_argument("synth: event_tones must list one entry per class");
}

SceneTaxonomy synth_taxonomy(int n_classes) { return SceneTaxonomy::subset(n_classes); }

std::vector<std::vector<double>> default_event_tones(int n_classes) {
  std::vector<std::vector<double>> tones(static_cast<size_t>(n_classes));
  const int total = 2 * n_classes;
  for (int k = 0; k < total; ++k) {
    const double f = 400.0 * std::pow(10.0, static_cast<double>(k) / (total - 1));
    tones[static_cast<size_t>(k / 2)].push_back(f);
  }
  return tones;
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  // splitmix64 over the combined stream id
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const auto tones = cfg.event_tones.empty() ? default_event_tones(cfg.n_classes)
                                             : cfg.event_tones;
  auto pairs = cfg.ambiguity_pairs;
  if (pairs.empty())
    for (int c = 0; c + 1 < cfg.n_classes; c += 2) pairs.emplace_back(c, c + 1);

  // Background family per class: paired classes share one.
  std::vector<int> family(static_cast<size_t>(cfg.n_classes));
  for (int c = 0; c < cfg.n_classes; ++c) family[static_cast<size_t>(c)] = c;
  for (const auto& [a, b] : pairs) {
    const int f = std::min(family[static_cast<size_t>(a)], family[static_cast<size_t>(b)]);
    family[static_cast<size_t>(a)] = f;
    family[static_cast<size_t>(b)] = f;
  }

  const SceneTaxonomy tax = synth_taxonomy(cfg.n_classes);
  const auto audio_dir = std::filesystem::path(out_dir) / "audio";
  std::filesystem::create_directories(audio_dir);

  const int n_samples = static_cast<int>(std::lround(cfg.clip_seconds * cfg.sample_rate));
  const int burst_len = static_cast<int>(std::lround(0.2 * cfg.sample_rate));

  std::ostringstream meta;
  meta << "filename\tscene_label\n";

  int clip_index = 0;
  for (int c = 0; c < cfg.n_classes; ++c) {
    // Family-specific one-pole lowpass coefficient; shared within a pair.
    const double lp = 0.35 + 0.55 * (static_cast<double>(family[static_cast<size_t>(c)]) /
                                     std::max(1, cfg.n_classes - 1));
    for (int j = 0; j < cfg.clips_per_class; ++j, ++clip_index) {
      std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<uint64_t>(clip_index)));
      std::normal_distribution<double> noise(0.0, 1.0);
      std::uniform_real_distribution<double> uni(0.0, 1.0);

      std::vector<double> x(static_cast<size_t>(n_samples));
      double state = 0.0;
      for (int i = 0; i < n_samples; ++i) {
        state = lp * state + (1.0 - lp) * noise(rng);
        x[static_cast<size_t>(i)] = state;
      }
      double rms = 0.0;
      for (double v : x) rms += v * v;
      rms = std::sqrt(rms / n_samples);
      const double bg_gain = 0.05 / std::max(rms, 1e-9);
      for (double& v : x) v *= bg_gain;

      const int n_events = 1 + static_cast<int>(rng() % 3);
      for (int ev = 0; ev < n_events; ++ev) {
        const auto& class_tones = tones[static_cast<size_t>(c)];
        const double freq = class_tones[rng() % class_tones.size()];
        const int onset = static_cast<int>(uni(rng) * (n_samples - burst_len));
        for (int i = 0; i < burst_len; ++i) {
          const double env = 0.5 - 0.5 * std::cos(2.0 * kPi * i / (burst_len - 1));
          x[static_cast<size_t>(onset + i)] +=
              0.35 * env * std::sin(2.0 * kPi * freq * i / cfg.sample_rate);
        }
      }
      for (double& v : x) v = std::clamp(v, -1.0, 1.0);

      char name[32];
      std::snprintf(name, sizeof(name), "synth_%04d.wav", clip_index);
      AudioClip clip;
      clip.sample_rate = cfg.sample_rate;
      clip.samples.push_back(std::move(x));
      encode_wav_pcm16((audio_dir / name).string(), clip);
      meta << "audio/" << name << "\t" << tax.names[static_cast<size_t>(c)] << "\n";
    }
  }

  const auto meta_path = std::filesystem::path(out_dir) / "meta.tsv";
  std::ofstream out(meta_path);
  if (!out) throw std::runtime_error(meta_path.string() + ": cannot write metadata");
  out << meta.str();
  return meta_path.string();
}

}  // namespace milscene
