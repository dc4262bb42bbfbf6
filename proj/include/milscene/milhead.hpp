// Instance detector head, bag-level decision rules for the SMI/CMI/TMI
// assumptions, dynamic positive/negative instance labeling, and the
// weighted-BCE / CE objectives built from them.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milscene/tensor.hpp"

namespace milscene {

struct SceneTaxonomy {
  std::vector<std::string> names;

  static SceneTaxonomy tau10();
  static SceneTaxonomy subset(int n_classes);  // first n TAU scenes

  int size() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& name) const;  // -1 when absent
  void validate() const;                        // unique names, >= 2 classes
};

// sigmoid(W x_i + b) per instance row. bag: (N,d), w: (C,d), b: (C) -> (N,C).
TensorPtr detect_instances(const TensorPtr& bag, const TensorPtr& w, const TensorPtr& b);

struct BagConfidence {
  TensorPtr scores;          // (C): per-class max over instances
  std::vector<int> argmax_rows;
};

// Standard MIL: per-class max over instances, then argmax over classes
// (lowest index on ties).
struct SmiDecision {
  BagConfidence bag;
  int predicted_class = -1;
};
SmiDecision aggregate_smi(const TensorPtr& scores);

// Count-based MIL: each instance votes its argmax class; most votes wins,
// lowest index on ties.
std::vector<int> cmi_votes(const TensorPtr& scores);
int decide_cmi(const TensorPtr& scores);

// Threshold-based MIL support: entry set iff score strictly exceeds theta.
struct BoolMatrix {
  int n = 0, c = 0;
  std::vector<uint8_t> values;
  bool at(int i, int j) const { return values[static_cast<size_t>(i) * c + j] != 0; }
};
BoolMatrix threshold_positives(const TensorPtr& scores, double theta);

enum class InstanceLabelMode { None, Pnl, Gt };
enum class Objective { Bce, Ce };

// Per-instance constant targets: one-hot at the ground truth for positive
// rows, all-zero otherwise. No gradient flows through the assignment.
struct InstanceLabels {
  int n = 0, c = 0;
  std::vector<double> labels;          // row-major (n, c)
  std::vector<uint8_t> positive_mask;  // per row
  int target = -1;

  int n_positive() const;
};

// pnl: row i is positive iff its argmax class equals the ground truth.
// gt: every row takes the bag-level ground truth as its label.
InstanceLabels assign_instance_labels(const TensorPtr& scores, int target,
                                      InstanceLabelMode mode);

// -(1/(M*C)) sum( alpha*y*ln(p) + (1-y)*ln(1-p) ), predictions clamped to
// [1e-7, 1-1e-7] before the logs. pred rank-1 (C) is treated as one row.
TensorPtr wbce_mean(const TensorPtr& pred, const std::vector<double>& target, double alpha);

// Categorical cross-entropy of softmax(logits) against the target class.
TensorPtr ce_loss_bag(const TensorPtr& logits, int target);

// Mean categorical cross-entropy over positive-labeled rows; zero when no
// row is positive. With uniform_negatives, zero-label rows contribute CE
// against the uniform distribution and the mean runs over all rows.
TensorPtr ce_loss_instances(const TensorPtr& logits, const InstanceLabels& labels,
                            bool uniform_negatives);

struct LossConfig {
  // Class-imbalance weight on the positive term; <= 0 defers to C-1, which
  // the trainer resolves once the taxonomy is known.
  double alpha = 0.0;
  InstanceLabelMode mode = InstanceLabelMode::Pnl;
  Objective objective = Objective::Bce;
  bool ce_uniform_negatives = false;

  static LossConfig for_classes(int n_classes);  // alpha = C-1
  void validate() const;
};

struct LossBreakdown {
  TensorPtr total;  // scalar graph node (bag + instance)
  double bag_loss = 0.0;
  double instance_loss = 0.0;
  double total_value = 0.0;
};

// bag_pred: (C) aggregated predictions; instance_pred: (N,C) per-instance
// predictions. Both are confidences under bce and logits under ce.
LossBreakdown total_loss(const TensorPtr& bag_pred, const TensorPtr& instance_pred,
                         int target, const LossConfig& cfg);

}  // namespace milscene
