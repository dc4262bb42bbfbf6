#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milscene/datasets.hpp"
#include "milscene/fusenet.hpp"
#include "milscene/logmel.hpp"
#include "milscene/milhead.hpp"

namespace milscene {

struct TrainConfig {
  double initial_lr = 0.06;
  double weight_decay = 0.001;
  int batch_size = 48;
  int epochs = 100;
  int warmup_epochs = 5;
  double momentum = 0.9;
  uint64_t seed = 0;
  int eval_every = 1;
  LossConfig loss;  // loss.alpha <= 0 resolves to C-1 when training starts

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json_text(const std::string& text);
  static TrainConfig from_json_file(const std::string& path);
};

// Linear warmup to initial_lr over the first warmup_epochs, then cosine
// annealing to zero at the final epoch.
double lr_at(double epoch, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double mean_total = 0.0;
  double mean_bag = 0.0;
  double mean_instance = 0.0;
  double val_accuracy = -1.0;  // -1 when validation was skipped this epoch
  double mean_positive_fraction = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::string to_json() const;
};

// Checkpoint file: "MILC", u32 version=1, u32 epoch, u32 tensor count; per
// tensor a u16 name length, the UTF-8 name, u8 ndim, ndim x u32 dims and
// float32 little-endian data. Momentum buffers are stored as "<name>.m".
struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};
struct Checkpoint {
  int epoch = 0;
  std::vector<CheckpointTensor> tensors;
};

void save_checkpoint(const ParamSet& params, int epoch, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Restores parameters, momentum buffers and running statistics by name.
// Every checkpoint tensor must match an entry; every entry must be covered.
void apply_checkpoint(const Checkpoint& ckpt, ParamSet& params);

struct FitOptions {
  std::string checkpoint_dir;  // when set, writes last.ckpt (+ best.ckpt) per epoch
  int start_epoch = 0;         // resume point
  int stop_epoch = -1;         // interrupt after this many epochs; schedule unchanged
  bool verbose = false;
};

struct FitResult {
  TrainHistory history;
  int best_epoch = -1;
  double best_val_accuracy = -1.0;
  int final_epoch = -1;
  double final_val_accuracy = -1.0;
};

// The full recipe: seeded per-epoch shuffling, per-batch forward/backward
// through the instance generator and detector, instance-label assignment per
// the loss config, SGD with the warmup+cosine schedule, per-epoch history
// and validation. Parameters are synchronized through float32 at each epoch
// boundary so checkpoints resume bit-exactly.
FitResult fit(FuseNet& model, const SceneTaxonomy& taxonomy,
              const std::vector<ClipRecord>& train_set, const std::vector<ClipRecord>& val_set,
              const TrainConfig& cfg, FeatureCache& features, const FitOptions& options = {});

// Eval-mode SMI/CMI predictions for one clip.
int predict_class(FuseNet& model, const LogMelSpectrogram& spec, bool use_cmi = false);

// Eval-mode per-instance confidences for one clip: (N,C), graph-free.
TensorPtr eval_confidences(FuseNet& model, const LogMelSpectrogram& spec);

TensorPtr spectrogram_tensor(const LogMelSpectrogram& spec);  // (1,F,T)

}  // namespace milscene
