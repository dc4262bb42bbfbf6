#include "milscene/milhead.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "milscene/ops.hpp"

namespace milscene {

namespace {
constexpr double kProbClamp = 1e-7;
}

SceneTaxonomy SceneTaxonomy::tau10() {
  return {{"airport", "shopping_mall", "metro_station", "street_pedestrian", "public_square",
           "street_traffic", "park", "metro", "bus", "tram"}};
}

SceneTaxonomy SceneTaxonomy::subset(int n_classes) {
  SceneTaxonomy tax = tau10();
  if (n_classes < 2 || n_classes > tax.size())
    throw std::invalid_argument("taxonomy subset: class count out of range");
  tax.names.resize(static_cast<size_t>(n_classes));
  return tax;
}

int SceneTaxonomy::index_of(const std::string& name) const {
  for (size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

void SceneTaxonomy::validate() const {
  if (names.size() < 2) throw std::invalid_argument("taxonomy: need at least two scenes");
  std::set<std::string> seen(names.begin(), names.end());
  if (seen.size() != names.size())
    throw std::invalid_argument("taxonomy: scene names must be unique");
}

TensorPtr detect_instances(const TensorPtr& bag, const TensorPtr& w, const TensorPtr& b) {
  return activate(linear_rows(bag, w, b), ActKind::Sigmoid);
}

namespace {

void require_scores(const TensorPtr& scores, const char* op) {
  if (!scores || scores->rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected (N,C) scores");
}

// Per-row argmax, lowest index on ties.
std::vector<int> row_argmax(const TensorPtr& scores) {
  const int n = scores->dim(0), c = scores->dim(1);
  std::vector<int> best(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const double* row = scores->data.data() + static_cast<int64_t>(i) * c;
    int at = 0;
    for (int j = 1; j < c; ++j)
      if (row[j] > row[at]) at = j;
    best[static_cast<size_t>(i)] = at;
  }
  return best;
}

}  // namespace

SmiDecision aggregate_smi(const TensorPtr& scores) {
  require_scores(scores, "aggregate_smi");
  RowMaxResult mx = reduce_max_rows(scores);
  int cls = 0;
  for (int j = 1; j < mx.values->dim(0); ++j)
    if (mx.values->data[j] > mx.values->data[cls]) cls = j;
  return {{mx.values, std::move(mx.argmax)}, cls};
}

std::vector<int> cmi_votes(const TensorPtr& scores) {
  require_scores(scores, "decide_cmi");
  std::vector<int> votes(static_cast<size_t>(scores->dim(1)), 0);
  for (int cls : row_argmax(scores)) ++votes[static_cast<size_t>(cls)];
  return votes;
}

int decide_cmi(const TensorPtr& scores) {
  const std::vector<int> votes = cmi_votes(scores);
  int cls = 0;
  for (size_t j = 1; j < votes.size(); ++j)
    if (votes[j] > votes[static_cast<size_t>(cls)]) cls = static_cast<int>(j);
  return cls;
}

BoolMatrix threshold_positives(const TensorPtr& scores, double theta) {
  require_scores(scores, "threshold_positives");
  if (theta < 0.0 || theta > 1.0)
    throw std::invalid_argument("threshold_positives: theta must lie in [0,1]");
  BoolMatrix out;
  out.n = scores->dim(0);
  out.c = scores->dim(1);
  out.values.resize(static_cast<size_t>(out.n) * out.c);
  for (size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = scores->data[i] > theta ? 1 : 0;
  return out;
}

int InstanceLabels::n_positive() const {
  int k = 0;
  for (uint8_t m : positive_mask) k += m;
  return k;
}

InstanceLabels assign_instance_labels(const TensorPtr& scores, int target,
                                      InstanceLabelMode mode) {
  require_scores(scores, "assign_instance_labels");
  if (mode == InstanceLabelMode::None)
    throw std::invalid_argument("assign_instance_labels: mode none assigns no labels");
  const int n = scores->dim(0), c = scores->dim(1);
  if (target < 0 || target >= c)
    throw std::invalid_argument("assign_instance_labels: target class " +
                                std::to_string(target) + " out of range for C=" +
                                std::to_string(c));
  InstanceLabels out;
  out.n = n;
  out.c = c;
  out.target = target;
  out.labels.assign(static_cast<size_t>(n) * c, 0.0);
  out.positive_mask.assign(static_cast<size_t>(n), 0);

  const std::vector<int> argmax = row_argmax(scores);
  for (int i = 0; i < n; ++i) {
    const bool positive = (mode == InstanceLabelMode::Gt) || argmax[static_cast<size_t>(i)] == target;
    if (positive) {
      out.labels[static_cast<size_t>(i) * c + target] = 1.0;
      out.positive_mask[static_cast<size_t>(i)] = 1;
    }
  }
  return out;
}

TensorPtr wbce_mean(const TensorPtr& pred, const std::vector<double>& target, double alpha) {
  if (!pred || pred->rank() < 1 || pred->rank() > 2)
    throw std::invalid_argument("wbce_mean: expected (C) or (M,C) predictions");
  if (static_cast<int64_t>(target.size()) != pred->size())
    throw std::invalid_argument("wbce_mean: target size " + std::to_string(target.size()) +
                                " does not match predictions " + shape_str(pred->shape));
  const int64_t n = pred->size();
  const double norm = 1.0 / static_cast<double>(n);

  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(pred->data[i], kProbClamp, 1.0 - kProbClamp);
    const double y = target[static_cast<size_t>(i)];
    loss -= norm * (alpha * y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }

  auto out = make_tensor({1}, loss);
  if (grad_enabled() && pred->tracked()) {
    out->parents = {pred};
    Tensor* op = out.get();
    out->backprop = [op, pred, target, alpha, norm, n]() {
      pred->ensure_grad();
      const double g = op->grad[0];
      for (int64_t i = 0; i < n; ++i) {
        const double raw = pred->data[i];
        if (raw <= kProbClamp || raw >= 1.0 - kProbClamp) continue;  // clamped: flat
        const double y = target[static_cast<size_t>(i)];
        pred->grad[i] -= g * norm * (alpha * y / raw - (1.0 - y) / (1.0 - raw));
      }
    };
  }
  return out;
}

namespace {

// log(sum(exp(row))) with max subtraction; also fills softmax probabilities.
double log_sum_exp(const double* row, int c, std::vector<double>& probs) {
  double mx = row[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  probs.resize(static_cast<size_t>(c));
  for (int j = 0; j < c; ++j) {
    probs[static_cast<size_t>(j)] = std::exp(row[j] - mx);
    sum += probs[static_cast<size_t>(j)];
  }
  for (int j = 0; j < c; ++j) probs[static_cast<size_t>(j)] /= sum;
  return mx + std::log(sum);
}

}  // namespace

TensorPtr ce_loss_bag(const TensorPtr& logits, int target) {
  if (!logits || logits->rank() != 1)
    throw std::invalid_argument("ce_loss_bag: expected rank-1 (C) logits");
  const int c = logits->dim(0);
  if (target < 0 || target >= c)
    throw std::invalid_argument("ce_loss_bag: target class out of range");

  std::vector<double> probs;
  const double lse = log_sum_exp(logits->data.data(), c, probs);
  auto out = make_tensor({1}, lse - logits->data[target]);

  if (grad_enabled() && logits->tracked()) {
    out->parents = {logits};
    Tensor* op = out.get();
    out->backprop = [op, logits, target, c, probs = std::move(probs)]() {
      logits->ensure_grad();
      const double g = op->grad[0];
      for (int j = 0; j < c; ++j)
        logits->grad[j] += g * (probs[static_cast<size_t>(j)] - (j == target ? 1.0 : 0.0));
    };
  }
  return out;
}

TensorPtr ce_loss_instances(const TensorPtr& logits, const InstanceLabels& labels,
                            bool uniform_negatives) {
  require_scores(logits, "ce_loss_instances");
  const int n = logits->dim(0), c = logits->dim(1);
  if (labels.n != n || labels.c != c)
    throw std::invalid_argument("ce_loss_instances: labels " + std::to_string(labels.n) + "x" +
                                std::to_string(labels.c) + " do not match logits " +
                                shape_str(logits->shape));

  const int n_pos = labels.n_positive();
  const int denom = uniform_negatives ? n : n_pos;
  if (denom == 0) return make_tensor({1}, 0.0);

  double loss = 0.0;
  std::vector<double> all_probs(static_cast<size_t>(n) * c);
  std::vector<double> probs;
  for (int i = 0; i < n; ++i) {
    const double* row = logits->data.data() + static_cast<int64_t>(i) * c;
    const bool pos = labels.positive_mask[static_cast<size_t>(i)] != 0;
    if (!pos && !uniform_negatives) continue;
    const double lse = log_sum_exp(row, c, probs);
    std::copy(probs.begin(), probs.end(), all_probs.begin() + static_cast<int64_t>(i) * c);
    if (pos) {
      loss += lse - row[labels.target];
    } else {
      double mean_logit = 0.0;
      for (int j = 0; j < c; ++j) mean_logit += row[j];
      loss += lse - mean_logit / c;
    }
  }
  loss /= static_cast<double>(denom);

  auto out = make_tensor({1}, loss);
  if (grad_enabled() && logits->tracked()) {
    out->parents = {logits};
    Tensor* op = out.get();
    const auto mask = labels.positive_mask;
    const int target = labels.target;
    out->backprop = [op, logits, mask, target, n, c, denom, uniform_negatives,
                     all_probs = std::move(all_probs)]() {
      logits->ensure_grad();
      const double g = op->grad[0] / static_cast<double>(denom);
      for (int i = 0; i < n; ++i) {
        const bool pos = mask[static_cast<size_t>(i)] != 0;
        if (!pos && !uniform_negatives) continue;
        const double* p = all_probs.data() + static_cast<int64_t>(i) * c;
        double* gr = logits->grad.data() + static_cast<int64_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const double y = pos ? (j == target ? 1.0 : 0.0) : 1.0 / c;
          gr[j] += g * (p[j] - y);
        }
      }
    };
  }
  return out;
}

LossConfig LossConfig::for_classes(int n_classes) {
  LossConfig cfg;
  cfg.alpha = static_cast<double>(n_classes - 1);
  return cfg;
}

void LossConfig::validate() const {
  if (alpha < 1.0) throw std::invalid_argument("loss config: alpha must be >= 1");
}

LossBreakdown total_loss(const TensorPtr& bag_pred, const TensorPtr& instance_pred,
                         int target, const LossConfig& cfg) {
  cfg.validate();
  if (!bag_pred || bag_pred->rank() != 1)
    throw std::invalid_argument("total_loss: expected rank-1 (C) bag predictions");
  require_scores(instance_pred, "total_loss");
  const int c = bag_pred->dim(0);
  if (instance_pred->dim(1) != c)
    throw std::invalid_argument("total_loss: class count mismatch between bag " +
                                shape_str(bag_pred->shape) + " and instances " +
                                shape_str(instance_pred->shape));
  if (target < 0 || target >= c)
    throw std::invalid_argument("total_loss: target class out of range");

  TensorPtr bag_node;
  if (cfg.objective == Objective::Bce) {
    std::vector<double> onehot(static_cast<size_t>(c), 0.0);
    onehot[static_cast<size_t>(target)] = 1.0;
    bag_node = wbce_mean(bag_pred, onehot, cfg.alpha);
  } else {
    bag_node = ce_loss_bag(bag_pred, target);
  }

  LossBreakdown out;
  out.bag_loss = scalar_value(bag_node);
  if (cfg.mode == InstanceLabelMode::None) {
    out.total = bag_node;
    out.instance_loss = 0.0;
  } else {
    const InstanceLabels labels = assign_instance_labels(instance_pred, target, cfg.mode);
    TensorPtr ins_node;
    if (cfg.objective == Objective::Bce) {
      ins_node = wbce_mean(instance_pred, labels.labels, cfg.alpha);
    } else {
      ins_node = ce_loss_instances(instance_pred, labels, cfg.ce_uniform_negatives);
    }
    out.instance_loss = scalar_value(ins_node);
    out.total = add(bag_node, ins_node);
  }
  out.total_value = scalar_value(out.total);
  return out;
}

}  // namespace milscene
