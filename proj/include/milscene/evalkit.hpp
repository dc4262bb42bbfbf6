// Measurement procedures: accuracy under the SMI/CMI decision rules,
// instance/bag confidence statistics, one-vs-rest instance ROC curves,
// confidence-masked spectrograms, and instance-vector export for external
// embedding tools.

#pragma once

#include <string>
#include <vector>

#include "milscene/datasets.hpp"
#include "milscene/fusenet.hpp"
#include "milscene/logmel.hpp"
#include "milscene/milhead.hpp"
#include "milscene/trainer.hpp"

namespace milscene {

enum class DecisionRule { Smi, Cmi };

struct EvalReport {
  DecisionRule rule = DecisionRule::Smi;
  int n_clips = 0;
  int n_evaluated = 0;
  int n_skipped = 0;
  double overall_accuracy = 0.0;
  std::vector<double> per_class_accuracy;       // -1 for classes without clips
  std::vector<std::vector<int>> confusion;      // [true][predicted]
};

EvalReport evaluate(FuseNet& model, const SceneTaxonomy& taxonomy,
                    const std::vector<ClipRecord>& records, DecisionRule rule,
                    FeatureCache& features);

struct ConfidenceStats {
  std::vector<std::vector<double>> instance_mean;  // [true class][class]
  std::vector<std::vector<double>> bag_mean;       // [true class][class]
  std::vector<double> positive_fraction;           // per true class
};

ConfidenceStats confidence_stats(FuseNet& model, const SceneTaxonomy& taxonomy,
                                 const std::vector<ClipRecord>& records,
                                 FeatureCache& features);

struct RocPoint {
  double fpr = 0.0, tpr = 0.0, threshold = 0.0;
};
struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

// One-vs-rest over instances: instances from clips of the target class are
// positives, everything else negative; scores are the target-class column.
RocCurve instance_roc(FuseNet& model, const SceneTaxonomy& taxonomy,
                      const std::vector<ClipRecord>& records, int target_class,
                      FeatureCache& features);

// ROC/AUC over raw scored samples (also the sweep core of instance_roc).
RocCurve roc_from_scores(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

// Confidence-masked spectrogram for one clip: instance confidences of the
// predicted class, nearest-neighbor upsampled along time, multiply the
// min-max normalized log-mel. Writes <out_prefix>.csv (rows = mel bins) and
// <out_prefix>.pgm.
void export_masks(FuseNet& model, const std::string& clip_path,
                  const std::string& out_prefix);

// CSV of every instance vector with clip id, true scene, instance index,
// positivity and per-instance predicted class.
void export_instances(FuseNet& model, const SceneTaxonomy& taxonomy,
                      const std::vector<ClipRecord>& records, const std::string& csv_path,
                      FeatureCache& features);

std::string eval_report_json(const EvalReport& report, const SceneTaxonomy& taxonomy);
std::string confidence_stats_json(const ConfidenceStats& stats, const SceneTaxonomy& taxonomy);

}  // namespace milscene
