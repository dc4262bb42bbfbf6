#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "milscene/evalkit.hpp"
#include "support.hpp"

using namespace milscene;
using namespace testsupport;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct EvalFixture {
  SceneTaxonomy tax = synth_taxonomy(2);
  std::vector<ClipRecord> records;
  FuseNetConfig net;
  FeatureCache features;

  EvalFixture() {
    const auto dir = temp_dir("milscene_evalkit");
    SynthConfig cfg;
    cfg.n_classes = 2;
    cfg.clips_per_class = 3;
    cfg.clip_seconds = 0.5;
    cfg.seed = 50;
    records = parse_meta(synth_generate(cfg, dir.string()), tax);
    net.n_classes = 2;
  }
};

}  // namespace

TEST_CASE("evaluate tallies match an independent per-clip prediction loop") {
  EvalFixture fx;
  FuseNet model(fx.net, 21);
  for (const auto rule : {DecisionRule::Smi, DecisionRule::Cmi}) {
    const EvalReport report = evaluate(model, fx.tax, fx.records, rule, fx.features);
    CHECK(report.n_clips == 6);
    CHECK(report.n_evaluated == 6);
    CHECK(report.n_skipped == 0);

    // independent tally
    std::vector<std::vector<int>> confusion(2, std::vector<int>(2, 0));
    int correct = 0;
    for (const auto& rec : fx.records) {
      const int pred =
          predict_class(model, fx.features.get(rec.path), rule == DecisionRule::Cmi);
      ++confusion[static_cast<size_t>(rec.scene)][static_cast<size_t>(pred)];
      if (pred == rec.scene) ++correct;
    }
    CHECK(report.confusion == confusion);
    CHECK(report.overall_accuracy == doctest::Approx(correct / 6.0));

    // rows sum to per-class clip counts; overall = trace/total
    int trace = 0;
    for (int t = 0; t < 2; ++t) {
      int row = 0;
      for (int p = 0; p < 2; ++p) row += report.confusion[t][p];
      CHECK(row == 3);
      trace += report.confusion[t][t];
    }
    CHECK(report.overall_accuracy == doctest::Approx(trace / 6.0));
    for (int t = 0; t < 2; ++t)
      CHECK(report.per_class_accuracy[static_cast<size_t>(t)] ==
            doctest::Approx(confusion[static_cast<size_t>(t)][static_cast<size_t>(t)] / 3.0));
  }
}

TEST_CASE("evaluate under cmi equals a majority vote over instance argmaxes") {
  EvalFixture fx;
  FuseNet model(fx.net, 22);
  const EvalReport report = evaluate(model, fx.tax, fx.records, DecisionRule::Cmi, fx.features);
  std::vector<std::vector<int>> confusion(2, std::vector<int>(2, 0));
  for (const auto& rec : fx.records) {
    auto conf = eval_confidences(model, fx.features.get(rec.path));
    const int pred = majority_vote_oracle(conf->data, conf->dim(0), conf->dim(1));
    ++confusion[static_cast<size_t>(rec.scene)][static_cast<size_t>(pred)];
  }
  CHECK(report.confusion == confusion);
}

TEST_CASE("evaluate skips unreadable clips with a warning count") {
  EvalFixture fx;
  FuseNet model(fx.net, 23);
  auto records = fx.records;
  records.push_back({"/nonexistent/clip.wav", 0, ""});
  const EvalReport report = evaluate(model, fx.tax, records, DecisionRule::Smi, fx.features);
  CHECK(report.n_clips == 7);
  CHECK(report.n_evaluated == 6);
  CHECK(report.n_skipped == 1);
}

TEST_CASE("confidence_stats: zero detector gives 0.5 everywhere") {
  EvalFixture fx;
  FuseNet model(fx.net, 24);
  for (double& v : model.detector_w()->data) v = 0.0;
  for (double& v : model.detector_b()->data) v = 0.0;
  const ConfidenceStats stats = confidence_stats(model, fx.tax, fx.records, fx.features);
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < 2; ++c) {
      CHECK(stats.instance_mean[t][c] == doctest::Approx(0.5));
      CHECK(stats.bag_mean[t][c] == doctest::Approx(0.5));
    }
}

TEST_CASE("confidence_stats shapes, ranges, and max-dominates-mean") {
  EvalFixture fx;
  FuseNet model(fx.net, 25);
  const ConfidenceStats stats = confidence_stats(model, fx.tax, fx.records, fx.features);
  REQUIRE(stats.instance_mean.size() == 2);
  REQUIRE(stats.bag_mean.size() == 2);
  REQUIRE(stats.positive_fraction.size() == 2);
  for (int t = 0; t < 2; ++t) {
    CHECK(stats.positive_fraction[static_cast<size_t>(t)] >= 0.0);
    CHECK(stats.positive_fraction[static_cast<size_t>(t)] <= 1.0);
    for (int c = 0; c < 2; ++c) {
      CHECK(stats.instance_mean[t][c] >= 0.0);
      CHECK(stats.instance_mean[t][c] <= 1.0);
      CHECK(stats.bag_mean[t][c] >= 0.0);
      CHECK(stats.bag_mean[t][c] <= 1.0);
      // equal instance counts per clip, so the pooled mean cannot exceed the
      // mean of per-clip maxima
      CHECK(stats.bag_mean[t][c] >= stats.instance_mean[t][c] - 1e-12);
    }
  }
}

TEST_CASE("roc endpoints: perfect separation 1.0, constant scores 0.5") {
  const RocCurve perfect = roc_from_scores({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  CHECK(perfect.auc == doctest::Approx(1.0));
  const RocCurve flat = roc_from_scores({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
  CHECK(flat.auc == doctest::Approx(0.5));
  CHECK_THROWS(static_cast<void>(roc_from_scores({0.1, 0.2}, {1, 1})));
}

TEST_CASE("roc AUC equals the pairwise-probability oracle to 1e-12") {
  std::mt19937_64 rng(60);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 17);  // up to 20 instances
    std::vector<double> scores(static_cast<size_t>(n));
    std::vector<uint8_t> labels(static_cast<size_t>(n));
    bool has_pos = false, has_neg = false;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
      // quantize some scores so ties actually occur
      double s = uni(rng);
      if (rng() % 2) s = std::round(s * 4.0) / 4.0;
      scores[static_cast<size_t>(i)] = s;
      labels[static_cast<size_t>(i)] = rng() % 2;
      (labels[static_cast<size_t>(i)] ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    const RocCurve curve = roc_from_scores(scores, labels);
    CHECK(std::fabs(curve.auc - pairwise_auc_oracle(scores, labels)) < 1e-12);
  }
}

TEST_CASE("roc AUC is invariant under strictly increasing transforms") {
  std::mt19937_64 rng(61);
  std::vector<double> scores(30);
  std::vector<uint8_t> labels(30);
  std::uniform_real_distribution<double> uni(0.01, 0.99);
  for (size_t i = 0; i < scores.size(); ++i) {
    scores[i] = uni(rng);
    labels[i] = (i % 3) == 0;
  }
  const double base = roc_from_scores(scores, labels).auc;
  std::vector<double> squashed(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) squashed[i] = std::tanh(2.0 * scores[i]);
  CHECK(roc_from_scores(squashed, labels).auc == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("instance_roc needs both positive and negative clips") {
  EvalFixture fx;
  FuseNet model(fx.net, 26);
  std::vector<ClipRecord> one_class(fx.records.begin(), fx.records.begin() + 3);
  CHECK_THROWS(static_cast<void>(
      instance_roc(model, fx.tax, one_class, 0, fx.features)));
  const RocCurve curve = instance_roc(model, fx.tax, fx.records, 0, fx.features);
  CHECK(curve.auc >= 0.0);
  CHECK(curve.auc <= 1.0);
  CHECK(curve.points.front().fpr == 0.0);
  CHECK(curve.points.back().tpr == 1.0);
}

TEST_CASE("export_masks writes CSV rows per mel bin and a valid PGM") {
  EvalFixture fx;
  FuseNet model(fx.net, 27);
  const auto dir = temp_dir("milscene_masks");
  const std::string prefix = (dir / "clip0").string();
  export_masks(model, fx.records[0].path, prefix);

  std::ifstream csv(prefix + ".csv");
  REQUIRE(csv.good());
  int rows = 0;
  int cols = -1;
  std::string line;
  while (std::getline(csv, line)) {
    ++rows;
    const int commas = static_cast<int>(std::count(line.begin(), line.end(), ','));
    if (cols < 0) cols = commas + 1;
    CHECK(commas + 1 == cols);
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const double v = std::stod(cell);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(rows == 256);
  const LogMelSpectrogram spec = fx.features.get(fx.records[0].path);
  CHECK(cols == spec.n_frames);  // upsampling covers the tail frames

  std::ifstream pgm(prefix + ".pgm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  pgm >> magic >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == spec.n_frames);
  CHECK(h == 256);
  CHECK(maxv == 255);
}

TEST_CASE("saturated detector makes the mask the normalized spectrogram") {
  EvalFixture fx;
  FuseNet model(fx.net, 28);
  for (double& v : model.detector_w()->data) v = 0.0;
  for (double& v : model.detector_b()->data) v = 40.0;  // sigmoid ~ 1
  const auto dir = temp_dir("milscene_masks_flat");
  const std::string prefix = (dir / "clip").string();
  export_masks(model, fx.records[0].path, prefix);

  const LogMelSpectrogram spec = fx.features.get(fx.records[0].path);
  double lo = spec.values[0], hi = spec.values[0];
  for (double v : spec.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ifstream csv(prefix + ".csv");
  std::string line;
  int m = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string cell;
    int t = 0;
    while (std::getline(ss, cell, ',')) {
      const double expected = (spec.at(m, t) - lo) / (hi - lo);
      CHECK(std::stod(cell) == doctest::Approx(expected).epsilon(1e-4));
      ++t;
    }
    ++m;
  }
}

TEST_CASE("export_instances row and column counts, deterministic output") {
  EvalFixture fx;
  FuseNet model(fx.net, 29);
  const auto dir = temp_dir("milscene_instances");
  const std::string csv_path = (dir / "instances.csv").string();
  export_instances(model, fx.tax, fx.records, csv_path, fx.features);

  std::ifstream csv(csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(static_cast<int>(std::count(header.begin(), header.end(), ',')) + 1 == 5 + 256);

  int64_t expected_rows = 0;
  for (const auto& rec : fx.records) {
    auto conf = eval_confidences(model, fx.features.get(rec.path));
    expected_rows += conf->dim(0);
  }
  int64_t rows = 0;
  std::string line;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == expected_rows);

  const std::string csv2 = (dir / "instances2.csv").string();
  export_instances(model, fx.tax, fx.records, csv2, fx.features);
  std::ifstream a(csv_path), b(csv2);
  const std::string sa((std::istreambuf_iterator<char>(a)), {});
  const std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("report and stats serialize to JSON with scene names") {
  EvalFixture fx;
  FuseNet model(fx.net, 30);
  const EvalReport report = evaluate(model, fx.tax, fx.records, DecisionRule::Smi, fx.features);
  const std::string text = eval_report_json(report, fx.tax);
  CHECK(text.find("\"overall_accuracy\"") != std::string::npos);
  CHECK(text.find("airport") != std::string::npos);

  const ConfidenceStats stats = confidence_stats(model, fx.tax, fx.records, fx.features);
  const std::string stats_text = confidence_stats_json(stats, fx.tax);
  CHECK(stats_text.find("\"positive_fraction\"") != std::string::npos);
}
