#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "milscene/datasets.hpp"
#include "milscene/ops.hpp"
#include "milscene/trainer.hpp"
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

// Small 2-class corpus plus records; shared across training smoke tests.
struct TinyCorpus {
  SceneTaxonomy tax = synth_taxonomy(2);
  std::vector<ClipRecord> train;
  std::vector<ClipRecord> val;

  explicit TinyCorpus(const std::string& name, int per_class = 3) {
    const auto dir = temp_dir(name);
    SynthConfig cfg;
    cfg.n_classes = 2;
    cfg.clips_per_class = per_class;
    cfg.clip_seconds = 0.5;
    cfg.seed = 100;
    train = parse_meta(synth_generate(cfg, (dir / "train").string()), tax);
    cfg.seed = 200;
    val = parse_meta(synth_generate(cfg, (dir / "val").string()), tax);
  }
};

TrainConfig tiny_train_config(int epochs, InstanceLabelMode mode = InstanceLabelMode::Pnl) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.warmup_epochs = std::min(2, epochs - 1);
  cfg.batch_size = 8;
  cfg.initial_lr = 0.02;
  cfg.seed = 4;
  cfg.loss.mode = mode;
  cfg.loss.alpha = 0.0;  // auto C-1
  return cfg;
}

}  // namespace

TEST_CASE("lr_at reproduces the reference schedule values") {
  TrainConfig cfg;  // 0.06 peak, 5 warmup, 100 epochs
  CHECK(lr_at(5, cfg) == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(lr_at(100, cfg) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK(lr_at(52.5, cfg) == doctest::Approx(0.03).epsilon(1e-12));
}

TEST_CASE("lr_at warms up linearly and hands over continuously") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == doctest::Approx(0.06 / 5.0));
  CHECK(lr_at(1, cfg) == doctest::Approx(0.06 * 2.0 / 5.0));
  // last warmup epoch and first cosine epoch both sit at the peak
  CHECK(lr_at(cfg.warmup_epochs - 1, cfg) == doctest::Approx(cfg.initial_lr));
  CHECK(lr_at(cfg.warmup_epochs, cfg) == doctest::Approx(cfg.initial_lr));
  // cosine decays monotonically to zero
  double prev = lr_at(cfg.warmup_epochs, cfg);
  for (int e = cfg.warmup_epochs + 1; e <= cfg.epochs; ++e) {
    const double lr = lr_at(e, cfg);
    CHECK(lr < prev);
    CHECK(lr >= 0.0);
    prev = lr;
  }
}

TEST_CASE("train config JSON round trip preserves every field") {
  TrainConfig cfg;
  cfg.initial_lr = 0.05;
  cfg.weight_decay = 0.002;
  cfg.batch_size = 12;
  cfg.epochs = 40;
  cfg.warmup_epochs = 3;
  cfg.momentum = 0.8;
  cfg.seed = 99;
  cfg.eval_every = 2;
  cfg.loss.alpha = 4.0;
  cfg.loss.mode = InstanceLabelMode::Gt;
  cfg.loss.objective = Objective::Ce;
  cfg.loss.ce_uniform_negatives = true;

  const TrainConfig back = TrainConfig::from_json_text(cfg.to_json());
  CHECK(back.initial_lr == cfg.initial_lr);
  CHECK(back.weight_decay == cfg.weight_decay);
  CHECK(back.batch_size == cfg.batch_size);
  CHECK(back.epochs == cfg.epochs);
  CHECK(back.warmup_epochs == cfg.warmup_epochs);
  CHECK(back.momentum == cfg.momentum);
  CHECK(back.seed == cfg.seed);
  CHECK(back.eval_every == cfg.eval_every);
  CHECK(back.loss.alpha == cfg.loss.alpha);
  CHECK(back.loss.mode == InstanceLabelMode::Gt);
  CHECK(back.loss.objective == Objective::Ce);
  CHECK(back.loss.ce_uniform_negatives);
}

TEST_CASE("train config defaults match the reference recipe") {
  const TrainConfig cfg = TrainConfig::from_json_text("{}");
  CHECK(cfg.initial_lr == 0.06);
  CHECK(cfg.weight_decay == 0.001);
  CHECK(cfg.batch_size == 48);
  CHECK(cfg.epochs == 100);
  CHECK(cfg.warmup_epochs == 5);
  CHECK(cfg.momentum == 0.9);
  CHECK_THROWS(TrainConfig::from_json_text(R"({"warmup_epochs": 100})"));
}

TEST_CASE("checkpoint round trip is bitwise after float32 synchronization") {
  ParamSet ps;
  std::mt19937_64 rng(5);
  auto a = ps.add("layer.w", random_tensor({3, 4}, rng));
  auto b = ps.add("layer.b", random_tensor({3}, rng));
  auto buf = ps.add_buffer("layer.rm", random_tensor({3}, rng));
  auto& mom = ps.momentum("layer.w");
  for (auto& v : mom) v = 0.25;
  ps.quantize_f32();
  const std::vector<double> a0 = a->data, b0 = b->data, buf0 = buf->data;
  const std::vector<double> mom0 = ps.momentum("layer.w");

  const std::string path = (std::filesystem::temp_directory_path() / "ms.ckpt").string();
  save_checkpoint(ps, 17, path);

  const Checkpoint ckpt = load_checkpoint(path);
  CHECK(ckpt.epoch == 17);
  CHECK(ckpt.tensors.size() == 2 * 2 + 1);  // params, momenta, one buffer

  // wipe and restore
  for (auto& v : a->data) v = 0.0;
  for (auto& v : b->data) v = 0.0;
  for (auto& v : buf->data) v = 0.0;
  for (auto& v : ps.momentum("layer.w")) v = 0.0;
  apply_checkpoint(ckpt, ps);
  CHECK(a->data == a0);
  CHECK(b->data == b0);
  CHECK(buf->data == buf0);
  CHECK(ps.momentum("layer.w") == mom0);
}

TEST_CASE("checkpoint loader rejects corruption with offsets") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string bad = (dir / "bad.ckpt").string();
  {
    std::ofstream out(bad, std::ios::binary);
    out << "NOTC";
    for (int i = 0; i < 12; ++i) out.put(0);
  }
  CHECK_THROWS_WITH(static_cast<void>(load_checkpoint(bad)), doctest::Contains("magic"));

  ParamSet ps;
  ps.add("w", make_tensor({4, 4}, 1.0));
  const std::string path = (dir / "trunc.ckpt").string();
  save_checkpoint(ps, 1, path);
  const auto full_size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full_size - 10);
  CHECK_THROWS_WITH(static_cast<void>(load_checkpoint(path)),
                    doctest::Contains("truncated checkpoint at offset"));
}

TEST_CASE("apply_checkpoint verifies names, shapes, and coverage") {
  ParamSet ps;
  ps.add("w", make_tensor({2, 2}, 1.0));
  const std::string path =
      (std::filesystem::temp_directory_path() / "cover.ckpt").string();
  save_checkpoint(ps, 1, path);
  const Checkpoint ckpt = load_checkpoint(path);

  ParamSet other;
  other.add("w", make_tensor({2, 3}, 0.0));
  CHECK_THROWS_WITH(apply_checkpoint(ckpt, other), doctest::Contains("shape mismatch"));

  ParamSet renamed;
  renamed.add("v", make_tensor({2, 2}, 0.0));
  CHECK_THROWS(apply_checkpoint(ckpt, renamed));

  ParamSet bigger;
  bigger.add("w", make_tensor({2, 2}, 0.0));
  bigger.add("extra", make_tensor({1}, 0.0));
  CHECK_THROWS_WITH(apply_checkpoint(ckpt, bigger), doctest::Contains("does not cover"));
}

TEST_CASE("one epoch on a tiny synthetic set reduces the training loss") {
  TinyCorpus corpus("milscene_fit_smoke", 2);
  FuseNetConfig net;
  net.n_classes = 2;
  FuseNet model(net, 4);
  FeatureCache features;
  const FitResult r =
      fit(model, corpus.tax, corpus.train, {}, tiny_train_config(6), features);
  REQUIRE(r.history.epochs.size() == 6);
  CHECK(r.history.epochs.back().mean_total < r.history.epochs.front().mean_total);
}

TEST_CASE("identical seed and config reproduce the history exactly") {
  TinyCorpus corpus("milscene_fit_det", 2);
  const TrainConfig cfg = tiny_train_config(3);
  FeatureCache features;

  FuseNetConfig net;
  net.n_classes = 2;
  FuseNet m1(net, cfg.seed);
  FuseNet m2(net, cfg.seed);
  const FitResult r1 = fit(m1, corpus.tax, corpus.train, corpus.val, cfg, features);
  const FitResult r2 = fit(m2, corpus.tax, corpus.train, corpus.val, cfg, features);
  REQUIRE(r1.history.epochs.size() == r2.history.epochs.size());
  for (size_t e = 0; e < r1.history.epochs.size(); ++e) {
    CHECK(r1.history.epochs[e].mean_total == r2.history.epochs[e].mean_total);
    CHECK(r1.history.epochs[e].val_accuracy == r2.history.epochs[e].val_accuracy);
  }
}

TEST_CASE("interrupt and resume reproduces the uninterrupted trajectory") {
  TinyCorpus corpus("milscene_fit_resume", 2);
  const TrainConfig cfg = tiny_train_config(4);
  FeatureCache features;

  FuseNetConfig net;
  net.n_classes = 2;
  const auto dir_a = temp_dir("milscene_ckpt_a");
  FuseNet uninterrupted(net, cfg.seed);
  FitOptions opt_a;
  opt_a.checkpoint_dir = dir_a.string();
  const FitResult full =
      fit(uninterrupted, corpus.tax, corpus.train, {}, cfg, features, opt_a);

  const auto dir_b = temp_dir("milscene_ckpt_b");
  FuseNet resumed(net, cfg.seed);
  FitOptions opt_b;
  opt_b.checkpoint_dir = dir_b.string();
  opt_b.stop_epoch = 2;  // interrupt; the schedule still spans cfg.epochs
  fit(resumed, corpus.tax, corpus.train, {}, cfg, features, opt_b);

  const Checkpoint ckpt = load_checkpoint((dir_b / "last.ckpt").string());
  CHECK(ckpt.epoch == 2);
  FuseNet continued(net, 999);  // deliberately different init; checkpoint overrides
  apply_checkpoint(ckpt, continued.params());
  FitOptions opt_c;
  opt_c.start_epoch = ckpt.epoch;
  const FitResult rest = fit(continued, corpus.tax, corpus.train, {}, cfg, features, opt_c);

  const double full_final = full.history.epochs.back().mean_total;
  const double resumed_final = rest.history.epochs.back().mean_total;
  CHECK(std::fabs(full_final - resumed_final) < 1e-12);
}

TEST_CASE("mode none and pnl share the first forward, then diverge through L_ins") {
  TinyCorpus corpus("milscene_fit_modes", 2);
  FeatureCache features;
  FuseNetConfig net;
  net.n_classes = 2;

  FuseNet m_none(net, 4);
  FuseNet m_pnl(net, 4);
  const FitResult r_none = fit(m_none, corpus.tax, corpus.train, {},
                               tiny_train_config(2, InstanceLabelMode::None), features);
  const FitResult r_pnl = fit(m_pnl, corpus.tax, corpus.train, {},
                              tiny_train_config(2, InstanceLabelMode::Pnl), features);

  // identical parameters during the whole first batch -> identical bag loss
  CHECK(r_none.history.epochs[0].mean_bag == r_pnl.history.epochs[0].mean_bag);
  CHECK(r_none.history.epochs[0].mean_instance == 0.0);
  CHECK(r_pnl.history.epochs[0].mean_instance > 0.0);
  // the instance term steers the pnl run elsewhere afterwards
  CHECK(r_none.history.epochs[1].mean_bag != r_pnl.history.epochs[1].mean_bag);
}

TEST_CASE("weight decay shrinks parameters that receive zero loss gradient") {
  ParamSet ps;
  auto p = ps.add("w", make_tensor({2}, 1.0));
  p->ensure_grad();  // zero gradient
  sgd_step(ps, 0.1, 0.0, 0.5);
  CHECK(p->data[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  CHECK(std::fabs(p->data[0]) < 1.0);
}

TEST_CASE("fit rejects mixed-duration batches") {
  TinyCorpus corpus("milscene_fit_mixed", 1);
  // add a second, longer clip of the same class
  const auto dir = temp_dir("milscene_fit_mixed_extra");
  SynthConfig cfg;
  cfg.n_classes = 2;
  cfg.clips_per_class = 1;
  cfg.clip_seconds = 1.0;
  cfg.seed = 300;
  auto extra = parse_meta(synth_generate(cfg, dir.string()), corpus.tax);
  auto records = corpus.train;
  records.insert(records.end(), extra.begin(), extra.end());

  FuseNetConfig net;
  net.n_classes = 2;
  FuseNet model(net, 1);
  FeatureCache features;
  CHECK_THROWS_WITH_AS(
      fit(model, corpus.tax, records, {}, tiny_train_config(1), features),
      doctest::Contains("mixed-duration"), std::invalid_argument);
}
