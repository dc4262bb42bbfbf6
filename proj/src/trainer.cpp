#include "milscene/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "milscene/ops.hpp"

namespace milscene {

namespace {
constexpr double kPi = 3.14159265358979323846;

using nlohmann::json;

std::string mode_name(InstanceLabelMode m) {
  switch (m) {
    case InstanceLabelMode::None: return "none";
    case InstanceLabelMode::Pnl: return "pnl";
    case InstanceLabelMode::Gt: return "gt";
  }
  return "none";
}

InstanceLabelMode mode_from(const std::string& s) {
  if (s == "none") return InstanceLabelMode::None;
  if (s == "pnl") return InstanceLabelMode::Pnl;
  if (s == "gt") return InstanceLabelMode::Gt;
  throw std::invalid_argument("config: unknown instance_label_mode '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (initial_lr <= 0 || weight_decay < 0 || momentum < 0)
    throw std::invalid_argument("train config: rates must be positive");
  if (batch_size < 1 || epochs < 1 || eval_every < 1)
    throw std::invalid_argument("train config: counts must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs)
    throw std::invalid_argument("train config: warmup_epochs must be < epochs");
}

std::string TrainConfig::to_json() const {
  json j;
  j["initial_lr"] = initial_lr;
  j["weight_decay"] = weight_decay;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["warmup_epochs"] = warmup_epochs;
  j["momentum"] = momentum;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["loss"] = {{"alpha", loss.alpha},
               {"instance_label_mode", mode_name(loss.mode)},
               {"objective", loss.objective == Objective::Bce ? "bce" : "ce"},
               {"ce_uniform_negatives", loss.ce_uniform_negatives}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig cfg;
  cfg.initial_lr = j.value("initial_lr", cfg.initial_lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.warmup_epochs = j.value("warmup_epochs", cfg.warmup_epochs);
  cfg.momentum = j.value("momentum", cfg.momentum);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.eval_every = j.value("eval_every", cfg.eval_every);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    cfg.loss.alpha = l.value("alpha", 0.0);  // <= 0 resolves to C-1 later
    cfg.loss.mode = mode_from(l.value("instance_label_mode", std::string("pnl")));
    const std::string obj = l.value("objective", std::string("bce"));
    if (obj == "bce") {
      cfg.loss.objective = Objective::Bce;
    } else if (obj == "ce") {
      cfg.loss.objective = Objective::Ce;
    } else {
      throw std::invalid_argument("config: unknown objective '" + obj + "'");
    }
    cfg.loss.ce_uniform_negatives = l.value("ce_uniform_negatives", false);
  } else {
    cfg.loss.alpha = 0.0;
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

double lr_at(double epoch, const TrainConfig& cfg) {
  if (epoch < cfg.warmup_epochs)
    return cfg.initial_lr * (epoch + 1.0) / static_cast<double>(cfg.warmup_epochs);
  const double span = static_cast<double>(cfg.epochs - cfg.warmup_epochs);
  const double t = (epoch - cfg.warmup_epochs) / span;
  return std::max(0.0, 0.5 * cfg.initial_lr * (1.0 + std::cos(kPi * t)));
}

std::string TrainHistory::to_json() const {
  json arr = json::array();
  for (const auto& e : epochs) {
    json r;
    r["epoch"] = e.epoch;
    r["lr"] = e.lr;
    r["mean_total_loss"] = e.mean_total;
    r["mean_bag_loss"] = e.mean_bag;
    r["mean_instance_loss"] = e.mean_instance;
    if (e.val_accuracy >= 0) {
      r["val_accuracy"] = e.val_accuracy;
    } else {
      r["val_accuracy"] = nullptr;
    }
    r["mean_positive_fraction"] = e.mean_positive_fraction;
    arr.push_back(std::move(r));
  }
  return arr.dump(2);
}

namespace {

void put_u16(std::ostream& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<char*>(b), 2);
}

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<char*>(b), 4);
}

class CkptReader {
 public:
  CkptReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void read(void* dst, size_t n) {
    if (!in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n)))
      throw std::runtime_error(path_ + ": truncated checkpoint at offset " +
                               std::to_string(offset_));
    offset_ += n;
  }
  uint16_t u16() {
    unsigned char b[2];
    read(b, 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }
  uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::string path_;
  size_t offset_ = 0;
};

void write_ckpt_tensor(std::ostream& out, const std::string& name, const Shape& shape,
                       const std::vector<double>& data) {
  put_u16(out, static_cast<uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.put(static_cast<char>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<uint32_t>(d));
  std::vector<float> f32(data.begin(), data.end());
  out.write(reinterpret_cast<const char*>(f32.data()),
            static_cast<std::streamsize>(f32.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const ParamSet& params, int epoch, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open checkpoint for writing");
  out.write("MILC", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(epoch));
  const uint32_t count = static_cast<uint32_t>(2 * params.names().size() +
                                               params.buffer_names().size());
  put_u32(out, count);
  ParamSet& mutable_params = const_cast<ParamSet&>(params);  // momentum() lazily allocates
  for (const auto& name : params.names()) {
    const TensorPtr t = params.find(name);
    write_ckpt_tensor(out, name, t->shape, t->data);
    write_ckpt_tensor(out, name + ".m", t->shape, mutable_params.momentum(name));
  }
  for (const auto& name : params.buffer_names()) {
    const TensorPtr t = params.find(name);
    write_ckpt_tensor(out, name, t->shape, t->data);
  }
  if (!out) throw std::runtime_error(path + ": checkpoint write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open checkpoint");
  CkptReader r(in, path);

  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, "MILC", 4) != 0)
    throw std::runtime_error(path + ": bad checkpoint magic at offset 0");
  const uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  Checkpoint ckpt;
  ckpt.epoch = static_cast<int>(r.u32());
  const uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const uint16_t name_len = r.u16();
    t.name.resize(name_len);
    r.read(t.name.data(), name_len);
    unsigned char ndim;
    r.read(&ndim, 1);
    int64_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<int>(r.u32()));
      n *= t.shape.back();
    }
    std::vector<float> f32(static_cast<size_t>(n));
    r.read(f32.data(), static_cast<size_t>(n) * sizeof(float));
    t.data.assign(f32.begin(), f32.end());
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, ParamSet& params) {
  size_t applied = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 2 && t.name.compare(t.name.size() - 2, 2, ".m") == 0) {
      const std::string base = t.name.substr(0, t.name.size() - 2);
      auto& v = params.momentum(base);  // throws on unknown parameter
      if (v.size() != t.data.size())
        throw std::runtime_error("checkpoint: momentum size mismatch for " + base);
      v = t.data;
    } else {
      TensorPtr dst = params.find(t.name);
      if (!dst) throw std::runtime_error("checkpoint: unknown tensor '" + t.name + "'");
      if (dst->shape != t.shape)
        throw std::runtime_error("checkpoint: shape mismatch for " + t.name + ": model " +
                                 shape_str(dst->shape) + " vs file " + shape_str(t.shape));
      dst->data = t.data;
    }
    ++applied;
  }
  const size_t expected = 2 * params.names().size() + params.buffer_names().size();
  if (applied != expected)
    throw std::runtime_error("checkpoint: tensor count " + std::to_string(applied) +
                             " does not cover the model's " + std::to_string(expected));
}

TensorPtr spectrogram_tensor(const LogMelSpectrogram& spec) {
  auto t = make_tensor({1, spec.n_mels, spec.n_frames});
  t->data = spec.values;
  return t;
}

TensorPtr eval_confidences(FuseNet& model, const LogMelSpectrogram& spec) {
  GradPause off;
  auto bag = model.bag_forward(spectrogram_tensor(spec), NormMode::Eval);
  return detect_instances(bag, model.detector_w(), model.detector_b());
}

int predict_class(FuseNet& model, const LogMelSpectrogram& spec, bool use_cmi) {
  auto conf = eval_confidences(model, spec);
  return use_cmi ? decide_cmi(conf) : aggregate_smi(conf).predicted_class;
}

namespace {

double validation_accuracy(FuseNet& model, const std::vector<ClipRecord>& val_set,
                           FeatureCache& features) {
  if (val_set.empty()) return -1.0;
  int correct = 0;
  for (const auto& rec : val_set)
    if (predict_class(model, features.get(rec.path)) == rec.scene) ++correct;
  return static_cast<double>(correct) / static_cast<double>(val_set.size());
}

}  // namespace

FitResult fit(FuseNet& model, const SceneTaxonomy& taxonomy,
              const std::vector<ClipRecord>& train_set, const std::vector<ClipRecord>& val_set,
              const TrainConfig& cfg, FeatureCache& features, const FitOptions& options) {
  cfg.validate();
  taxonomy.validate();
  if (train_set.empty()) throw std::invalid_argument("fit: empty training set");
  if (taxonomy.size() != model.config().n_classes)
    throw std::invalid_argument("fit: taxonomy size does not match the model's class count");
  for (const auto& rec : train_set)
    if (rec.scene < 0 || rec.scene >= taxonomy.size())
      throw std::invalid_argument("fit: record scene out of taxonomy range: " + rec.path);

  LossConfig loss_cfg = cfg.loss;
  if (loss_cfg.alpha <= 0.0) loss_cfg.alpha = static_cast<double>(taxonomy.size() - 1);
  loss_cfg.validate();
  reserve_tensor_heap();

  const bool use_ce = loss_cfg.objective == Objective::Ce;
  FitResult result;
  if (!options.checkpoint_dir.empty())
    std::filesystem::create_directories(options.checkpoint_dir);
  const int stop_epoch =
      options.stop_epoch > 0 ? std::min(options.stop_epoch, cfg.epochs) : cfg.epochs;

  for (int epoch = options.start_epoch; epoch < stop_epoch; ++epoch) {
    const double lr = lr_at(epoch, cfg);

    // Per-epoch derived stream keeps shuffling independent of how many
    // epochs ran before, so resumed runs see the same order.
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_total = 0.0, sum_bag = 0.0, sum_ins = 0.0, sum_posfrac = 0.0;
    size_t batch_start = 0;
    while (batch_start < order.size()) {
      const size_t batch_end = std::min(batch_start + static_cast<size_t>(cfg.batch_size),
                                        order.size());
      const size_t batch_n = batch_end - batch_start;
      int shared_frames = -1;
      for (size_t bi = batch_start; bi < batch_end; ++bi) {
        const ClipRecord& rec = train_set[order[bi]];
        const LogMelSpectrogram& spec = features.get(rec.path);
        if (shared_frames < 0) shared_frames = spec.n_frames;
        if (spec.n_frames != shared_frames)
          throw std::invalid_argument("fit: mixed-duration batch (clip " + rec.path + " has " +
                                      std::to_string(spec.n_frames) + " frames, batch has " +
                                      std::to_string(shared_frames) + ")");

        auto bag = model.bag_forward(spectrogram_tensor(spec), NormMode::Train);
        auto logits = model.detector_logits(bag);
        auto conf = activate(logits, ActKind::Sigmoid);
        const TensorPtr& instance_pred = use_ce ? logits : conf;
        auto bag_pred = reduce_max_rows(instance_pred).values;

        const LossBreakdown lb = total_loss(bag_pred, instance_pred, rec.scene, loss_cfg);
        if (!std::isfinite(lb.total_value)) {
          std::string ids;
          for (size_t k = batch_start; k < batch_end; ++k) {
            if (!ids.empty()) ids += ", ";
            ids += train_set[order[k]].path;
          }
          throw std::runtime_error("fit: NaN loss at epoch " + std::to_string(epoch) +
                                   " in batch [" + ids + "]");
        }
        // Gradients accumulate additively across the batch; one step follows.
        backward(scale(lb.total, 1.0 / static_cast<double>(batch_n)));

        sum_total += lb.total_value;
        sum_bag += lb.bag_loss;
        sum_ins += lb.instance_loss;

        const std::vector<int> votes = cmi_votes(conf);
        sum_posfrac += static_cast<double>(votes[static_cast<size_t>(rec.scene)]) /
                       static_cast<double>(conf->dim(0));
      }
      sgd_step(model.params(), lr, cfg.momentum, cfg.weight_decay);
      batch_start = batch_end;
    }

    // float32 synchronization point: checkpoints store float32, so rounding
    // here makes resumed runs bit-identical to uninterrupted ones.
    model.params().quantize_f32();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.mean_total = sum_total / static_cast<double>(train_set.size());
    rec.mean_bag = sum_bag / static_cast<double>(train_set.size());
    rec.mean_instance = sum_ins / static_cast<double>(train_set.size());
    rec.mean_positive_fraction = sum_posfrac / static_cast<double>(train_set.size());

    const bool eval_now = ((epoch + 1) % cfg.eval_every == 0) || epoch + 1 == stop_epoch;
    if (eval_now && !val_set.empty()) {
      rec.val_accuracy = validation_accuracy(model, val_set, features);
      if (rec.val_accuracy > result.best_val_accuracy) {
        result.best_val_accuracy = rec.val_accuracy;
        result.best_epoch = epoch;
        if (!options.checkpoint_dir.empty())
          save_checkpoint(model.params(), epoch + 1,
                          (std::filesystem::path(options.checkpoint_dir) / "best.ckpt").string());
      }
      result.final_val_accuracy = rec.val_accuracy;
    }
    result.final_epoch = epoch;
    result.history.epochs.push_back(rec);

    if (!options.checkpoint_dir.empty())
      save_checkpoint(model.params(), epoch + 1,
                      (std::filesystem::path(options.checkpoint_dir) / "last.ckpt").string());
    if (options.verbose) {
      std::cerr << "epoch " << epoch << " lr " << lr << " loss " << rec.mean_total;
      if (rec.val_accuracy >= 0) std::cerr << " val " << rec.val_accuracy;
      std::cerr << "\n";
    }
  }
  return result;
}

}  // namespace milscene
