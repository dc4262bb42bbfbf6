#include "milscene/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "json.hpp"
#include "milscene/audio.hpp"

namespace milscene {

using nlohmann::json;

EvalReport evaluate(FuseNet& model, const SceneTaxonomy& taxonomy,
                    const std::vector<ClipRecord>& records, DecisionRule rule,
                    FeatureCache& features) {
  taxonomy.validate();
  if (records.empty()) throw std::invalid_argument("evaluate: empty record list");
  const int c = taxonomy.size();

  EvalReport report;
  report.rule = rule;
  report.n_clips = static_cast<int>(records.size());
  report.confusion.assign(static_cast<size_t>(c), std::vector<int>(static_cast<size_t>(c), 0));

  for (const auto& rec : records) {
    int predicted;
    try {
      predicted = predict_class(model, features.get(rec.path), rule == DecisionRule::Cmi);
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << rec.path << ": " << e.what() << "\n";
      ++report.n_skipped;
      continue;
    }
    ++report.n_evaluated;
    ++report.confusion[static_cast<size_t>(rec.scene)][static_cast<size_t>(predicted)];
  }

  int correct = 0;
  report.per_class_accuracy.assign(static_cast<size_t>(c), -1.0);
  for (int t = 0; t < c; ++t) {
    int row_total = 0;
    for (int p = 0; p < c; ++p) row_total += report.confusion[t][p];
    correct += report.confusion[t][t];
    if (row_total > 0)
      report.per_class_accuracy[static_cast<size_t>(t)] =
          static_cast<double>(report.confusion[t][t]) / row_total;
  }
  report.overall_accuracy =
      report.n_evaluated > 0 ? static_cast<double>(correct) / report.n_evaluated : 0.0;
  return report;
}

ConfidenceStats confidence_stats(FuseNet& model, const SceneTaxonomy& taxonomy,
                                 const std::vector<ClipRecord>& records,
                                 FeatureCache& features) {
  taxonomy.validate();
  if (records.empty()) throw std::invalid_argument("confidence_stats: empty record list");
  const int c = taxonomy.size();

  std::vector<std::vector<double>> inst_sum(static_cast<size_t>(c),
                                            std::vector<double>(static_cast<size_t>(c), 0.0));
  std::vector<std::vector<double>> bag_sum = inst_sum;
  std::vector<int64_t> inst_count(static_cast<size_t>(c), 0);
  std::vector<int64_t> clip_count(static_cast<size_t>(c), 0);
  std::vector<double> pos_sum(static_cast<size_t>(c), 0.0);

  for (const auto& rec : records) {
    auto conf = eval_confidences(model, features.get(rec.path));
    const int n = conf->dim(0);
    const size_t t = static_cast<size_t>(rec.scene);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j)
        inst_sum[t][static_cast<size_t>(j)] += conf->data[static_cast<int64_t>(i) * c + j];
    inst_count[t] += n;

    const auto smi = aggregate_smi(conf);
    for (int j = 0; j < c; ++j)
      bag_sum[t][static_cast<size_t>(j)] += smi.bag.scores->data[j];
    ++clip_count[t];

    const std::vector<int> votes = cmi_votes(conf);
    pos_sum[t] += static_cast<double>(votes[t]) / static_cast<double>(n);
  }

  ConfidenceStats stats;
  stats.instance_mean.assign(static_cast<size_t>(c),
                             std::vector<double>(static_cast<size_t>(c), 0.0));
  stats.bag_mean = stats.instance_mean;
  stats.positive_fraction.assign(static_cast<size_t>(c), 0.0);
  for (int t = 0; t < c; ++t) {
    for (int j = 0; j < c; ++j) {
      if (inst_count[static_cast<size_t>(t)] > 0)
        stats.instance_mean[t][j] = inst_sum[t][j] / inst_count[static_cast<size_t>(t)];
      if (clip_count[static_cast<size_t>(t)] > 0)
        stats.bag_mean[t][j] = bag_sum[t][j] / clip_count[static_cast<size_t>(t)];
    }
    if (clip_count[static_cast<size_t>(t)] > 0)
      stats.positive_fraction[static_cast<size_t>(t)] =
          pos_sum[static_cast<size_t>(t)] / clip_count[static_cast<size_t>(t)];
  }
  return stats;
}

RocCurve roc_from_scores(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("roc: scores and labels must be nonempty and equal length");
  int64_t n_pos = 0, n_neg = 0;
  for (uint8_t l : labels) (l ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("roc: need both positive and negative samples");

  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0, 1.0});
  int64_t tp = 0, fp = 0;
  double auc = 0.0;
  double prev_fpr = 0.0, prev_tpr = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    // consume the whole tie group so ties move diagonally in one step
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    const double fpr = static_cast<double>(fp) / n_neg;
    const double tpr = static_cast<double>(tp) / n_pos;
    auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
    curve.points.push_back({fpr, tpr, s});
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  if (curve.points.back().fpr != 1.0 || curve.points.back().tpr != 1.0)
    curve.points.push_back({1.0, 1.0, 0.0});
  curve.auc = auc;
  return curve;
}

RocCurve instance_roc(FuseNet& model, const SceneTaxonomy& taxonomy,
                      const std::vector<ClipRecord>& records, int target_class,
                      FeatureCache& features) {
  taxonomy.validate();
  if (target_class < 0 || target_class >= taxonomy.size())
    throw std::invalid_argument("instance_roc: target class out of range");

  std::vector<double> scores;
  std::vector<uint8_t> labels;
  const int c = taxonomy.size();
  for (const auto& rec : records) {
    auto conf = eval_confidences(model, features.get(rec.path));
    const int n = conf->dim(0);
    for (int i = 0; i < n; ++i) {
      scores.push_back(conf->data[static_cast<int64_t>(i) * c + target_class]);
      labels.push_back(rec.scene == target_class ? 1 : 0);
    }
  }
  return roc_from_scores(scores, labels);
}

void export_masks(FuseNet& model, const std::string& clip_path,
                  const std::string& out_prefix) {
  const LogMelSpectrogram spec = logmel(preprocess(decode_wav(clip_path)));
  auto conf = eval_confidences(model, spec);
  const auto smi = aggregate_smi(conf);
  const int n = conf->dim(0), c = conf->dim(1);
  const int upsample = 1 << model.config().pool_count();

  // Per-frame confidence of the predicted class; frames beyond the last
  // instance boundary keep the last instance's value.
  std::vector<double> mask(static_cast<size_t>(spec.n_frames));
  for (int t = 0; t < spec.n_frames; ++t) {
    const int i = std::min(t / upsample, n - 1);
    mask[static_cast<size_t>(t)] =
        conf->data[static_cast<int64_t>(i) * c + smi.predicted_class];
  }

  double lo = spec.values[0], hi = spec.values[0];
  for (double v : spec.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi > lo ? hi - lo : 1.0;

  std::ofstream csv(out_prefix + ".csv");
  if (!csv) throw std::runtime_error(out_prefix + ".csv: cannot open for writing");
  std::vector<double> masked(static_cast<size_t>(spec.n_mels) * spec.n_frames);
  for (int m = 0; m < spec.n_mels; ++m) {
    for (int t = 0; t < spec.n_frames; ++t) {
      const double norm = (spec.at(m, t) - lo) / range;
      const double v = norm * mask[static_cast<size_t>(t)];
      masked[static_cast<size_t>(m) * spec.n_frames + t] = v;
      csv << (t ? "," : "") << v;
    }
    csv << "\n";
  }

  std::ofstream pgm(out_prefix + ".pgm", std::ios::binary);
  if (!pgm) throw std::runtime_error(out_prefix + ".pgm: cannot open for writing");
  pgm << "P5\n" << spec.n_frames << " " << spec.n_mels << "\n255\n";
  for (int m = spec.n_mels - 1; m >= 0; --m) {  // low frequencies at the bottom
    for (int t = 0; t < spec.n_frames; ++t) {
      const double v = masked[static_cast<size_t>(m) * spec.n_frames + t];
      pgm.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    }
  }
}

void export_instances(FuseNet& model, const SceneTaxonomy& taxonomy,
                      const std::vector<ClipRecord>& records, const std::string& csv_path,
                      FeatureCache& features) {
  taxonomy.validate();
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error(csv_path + ": cannot open for writing");

  const int d = model.config().instance_dim;
  csv << "clip_id,true_scene,instance_index,positive,predicted_class";
  for (int k = 0; k < d; ++k) csv << ",v" << k;
  csv << "\n";
  csv.precision(9);

  for (const auto& rec : records) {
    GradPause off;
    const LogMelSpectrogram& spec = features.get(rec.path);
    auto bag = model.bag_forward(spectrogram_tensor(spec), NormMode::Eval);
    auto conf = detect_instances(bag, model.detector_w(), model.detector_b());
    const int n = bag->dim(0), c = conf->dim(1);
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      const double* row = conf->data.data() + static_cast<int64_t>(i) * c;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[arg]) arg = j;
      csv << rec.path << "," << taxonomy.names[static_cast<size_t>(rec.scene)] << "," << i
          << "," << (arg == rec.scene ? 1 : 0) << ","
          << taxonomy.names[static_cast<size_t>(arg)];
      const double* vec = bag->data.data() + static_cast<int64_t>(i) * d;
      for (int k = 0; k < d; ++k) csv << "," << vec[k];
      csv << "\n";
    }
  }
}

std::string eval_report_json(const EvalReport& report, const SceneTaxonomy& taxonomy) {
  json j;
  j["rule"] = report.rule == DecisionRule::Smi ? "smi" : "cmi";
  j["scenes"] = taxonomy.names;
  j["n_clips"] = report.n_clips;
  j["n_evaluated"] = report.n_evaluated;
  j["n_skipped"] = report.n_skipped;
  j["overall_accuracy"] = report.overall_accuracy;
  j["per_class_accuracy"] = report.per_class_accuracy;
  j["confusion"] = report.confusion;
  return j.dump(2);
}

std::string confidence_stats_json(const ConfidenceStats& stats, const SceneTaxonomy& taxonomy) {
  json j;
  j["scenes"] = taxonomy.names;
  j["instance_mean"] = stats.instance_mean;
  j["bag_mean"] = stats.bag_mean;
  j["positive_fraction"] = stats.positive_fraction;
  return j.dump(2);
}

}  // namespace milscene
