// Operator entry point: dataset synthesis, feature extraction, training,
// evaluation, ROC export, clip inspection and the parameter report.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "milscene/datasets.hpp"
#include "milscene/evalkit.hpp"
#include "milscene/fusenet.hpp"
#include "milscene/logmel.hpp"
#include "milscene/milhead.hpp"
#include "milscene/trainer.hpp"

namespace {

using namespace milscene;
using nlohmann::json;

#ifndef MILSCENE_VERSION
#define MILSCENE_VERSION "0.1.0"
#endif

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

int thread_budget() {
  if (const char* env = std::getenv("MILSCENE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

SceneTaxonomy taxonomy_for(const std::string& scenes_csv, const std::string& meta_path) {
  if (!scenes_csv.empty()) {
    SceneTaxonomy tax;
    std::stringstream ss(scenes_csv);
    std::string name;
    while (std::getline(ss, name, ',')) tax.names.push_back(name);
    tax.validate();
    return tax;
  }
  return taxonomy_from_meta(meta_path);
}

// Rebuilds the model around a checkpoint: class count and instance dim come
// from the stored detector shape, the architecture is the default layout.
FuseNet model_from_checkpoint(const Checkpoint& ckpt) {
  FuseNetConfig cfg;
  for (const auto& t : ckpt.tensors) {
    if (t.name == "det.w" && t.shape.size() == 2) {
      cfg.n_classes = t.shape[0];
      cfg.instance_dim = t.shape[1];
    }
  }
  FuseNet model(cfg, 0);
  apply_checkpoint(ckpt, model.params());
  return model;
}

struct SynthArgs {
  int classes = 4;
  int per_class = 10;
  double clip_seconds = 2.0;
  uint64_t seed = 0;
  std::string out;
  std::string pairs;
};

void run_synth(const SynthArgs& a) {
  SynthConfig cfg;
  cfg.n_classes = a.classes;
  cfg.clips_per_class = a.per_class;
  cfg.clip_seconds = a.clip_seconds;
  cfg.seed = a.seed;
  if (!a.pairs.empty()) {
    std::stringstream ss(a.pairs);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw std::runtime_error("synth: --pairs expects a:b,c:d");
      cfg.ambiguity_pairs.emplace_back(std::stoi(item.substr(0, colon)),
                                       std::stoi(item.substr(colon + 1)));
    }
  }
  const std::string meta = synth_generate(cfg, a.out);
  std::cout << "wrote " << cfg.n_classes * cfg.clips_per_class << " clips, meta at " << meta
            << "\n";
}

void run_features(const std::string& meta_path, const std::string& out_dir) {
  const SceneTaxonomy tax = taxonomy_from_meta(meta_path);
  const auto records = parse_meta(meta_path, tax);
  std::filesystem::create_directories(out_dir);

  const int workers = std::min<int>(thread_budget(), static_cast<int>(records.size()));
  std::atomic<size_t> next{0};
  std::atomic<int> failures{0};
  auto worker = [&]() {
    for (size_t i = next.fetch_add(1); i < records.size(); i = next.fetch_add(1)) {
      try {
        const LogMelSpectrogram spec = logmel(preprocess(decode_wav(records[i].path)));
        const auto out = std::filesystem::path(out_dir) / FeatureCache::cache_name(records[i].path);
        save_lmel(out.string(), spec);
      } catch (const std::exception& e) {
        std::cerr << "warning: " << records[i].path << ": " << e.what() << "\n";
        ++failures;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  std::cout << "cached " << records.size() - static_cast<size_t>(failures.load()) << "/"
            << records.size() << " feature files in " << out_dir << "\n";
  if (failures.load() > 0) throw std::runtime_error("features: some clips failed");
}

struct TrainArgs {
  std::string config;
  std::string train_meta;
  std::string val_meta;
  std::string out;
  std::string features_dir;
  std::string resume;
  std::string scenes;
};

void run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json_file(a.config);
  const SceneTaxonomy tax = taxonomy_for(a.scenes, a.train_meta);
  const auto train_set = parse_meta(a.train_meta, tax);
  const auto val_set = a.val_meta.empty() ? std::vector<ClipRecord>{}
                                          : parse_meta(a.val_meta, tax);

  FuseNetConfig net_cfg;
  net_cfg.n_classes = tax.size();
  FuseNet model(net_cfg, cfg.seed);

  FitOptions options;
  options.checkpoint_dir = a.out;
  options.verbose = true;
  if (!a.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(a.resume);
    apply_checkpoint(ckpt, model.params());
    options.start_epoch = ckpt.epoch;
  }

  std::filesystem::create_directories(a.out);
  const auto manifest_path = std::filesystem::path(a.out) / "manifest.json";
  json manifest;
  manifest["version"] = MILSCENE_VERSION;
  manifest["seed"] = cfg.seed;
  manifest["config"] = json::parse(cfg.to_json());
  manifest["scenes"] = tax.names;
  manifest["train_meta"] = a.train_meta;
  manifest["val_meta"] = a.val_meta;
  manifest["started_at"] = iso_timestamp();
  manifest["outputs"] = {{"history", (std::filesystem::path(a.out) / "history.json").string()},
                         {"last_checkpoint",
                          (std::filesystem::path(a.out) / "last.ckpt").string()},
                         {"best_checkpoint",
                          (std::filesystem::path(a.out) / "best.ckpt").string()}};
  {
    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << "\n";
  }

  FeatureCache features(a.features_dir);
  const FitResult result = fit(model, tax, train_set, val_set, cfg, features, options);

  {
    std::ofstream hf(std::filesystem::path(a.out) / "history.json");
    hf << result.history.to_json() << "\n";
  }
  manifest["finished_at"] = iso_timestamp();
  manifest["final_epoch"] = result.final_epoch;
  manifest["final_val_accuracy"] = result.final_val_accuracy;
  manifest["best_epoch"] = result.best_epoch;
  manifest["best_val_accuracy"] = result.best_val_accuracy;
  {
    std::ofstream mf(manifest_path);
    mf << manifest.dump(2) << "\n";
  }
  std::cout << "final-epoch val accuracy: " << result.final_val_accuracy
            << "\nbest-epoch val accuracy: " << result.best_val_accuracy << " (epoch "
            << result.best_epoch << ")\n";
}

struct EvalArgs {
  std::string checkpoint;
  std::string meta;
  std::string rule = "smi";
  std::string json_out;
  std::string stats_out;
  std::string features_dir;
  std::string scenes;
};

void run_eval(const EvalArgs& a) {
  FuseNet model = model_from_checkpoint(load_checkpoint(a.checkpoint));
  const SceneTaxonomy tax = taxonomy_for(a.scenes, a.meta);
  if (tax.size() != model.config().n_classes)
    throw std::runtime_error("eval: metadata lists " + std::to_string(tax.size()) +
                             " scenes but the checkpoint detector has " +
                             std::to_string(model.config().n_classes));
  const auto records = parse_meta(a.meta, tax);
  FeatureCache features(a.features_dir);

  const DecisionRule rule = a.rule == "cmi" ? DecisionRule::Cmi : DecisionRule::Smi;
  const EvalReport report = evaluate(model, tax, records, rule, features);
  const std::string text = eval_report_json(report, tax);
  if (!a.json_out.empty()) {
    std::ofstream jf(a.json_out);
    jf << text << "\n";
  }
  std::cout << text << "\n";

  if (!a.stats_out.empty()) {
    const ConfidenceStats stats = confidence_stats(model, tax, records, features);
    std::ofstream sf(a.stats_out);
    sf << confidence_stats_json(stats, tax) << "\n";
  }
}

struct RocArgs {
  std::string checkpoint;
  std::string meta;
  int target_class = 0;
  std::string out;
  std::string features_dir;
  std::string scenes;
};

void run_roc(const RocArgs& a) {
  FuseNet model = model_from_checkpoint(load_checkpoint(a.checkpoint));
  const SceneTaxonomy tax = taxonomy_for(a.scenes, a.meta);
  const auto records = parse_meta(a.meta, tax);
  FeatureCache features(a.features_dir);

  const RocCurve curve = instance_roc(model, tax, records, a.target_class, features);
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw std::runtime_error(a.out + ": cannot open for writing");
    out = &file;
  }
  *out << "threshold,fpr,tpr\n";
  for (const auto& p : curve.points)
    *out << p.threshold << "," << p.fpr << "," << p.tpr << "\n";
  std::cout << "class " << tax.names[static_cast<size_t>(a.target_class)]
            << " instance AUC: " << curve.auc << "\n";
}

struct InspectArgs {
  std::string checkpoint;
  std::string clip;
  std::string out = ".";
};

void run_inspect(const InspectArgs& a) {
  FuseNet model = model_from_checkpoint(load_checkpoint(a.checkpoint));
  std::filesystem::create_directories(a.out);
  const std::string stem = std::filesystem::path(a.clip).stem().string();
  const std::string prefix = (std::filesystem::path(a.out) / (stem + "_mask")).string();
  export_masks(model, a.clip, prefix);

  // Single-clip instance export; scene names are unknown here, so the clip
  // is labeled with class indices of the checkpoint head.
  SceneTaxonomy tax;
  for (int i = 0; i < model.config().n_classes; ++i)
    tax.names.push_back("class" + std::to_string(i));
  std::vector<ClipRecord> records{{a.clip, 0, ""}};
  FeatureCache features;
  export_instances(model, tax, records,
                   (std::filesystem::path(a.out) / (stem + "_instances.csv")).string(),
                   features);
  std::cout << "wrote " << prefix << ".csv, " << prefix << ".pgm and " << stem
            << "_instances.csv\n";
}

void run_params() {
  FuseNet model(FuseNetConfig{}, 0);
  const ParamReport report = model_param_report(model);
  std::string stage;
  for (const auto& row : report.rows) {
    if (row.stage != stage) {
      stage = row.stage;
      std::cout << stage << "\n";
    }
    std::cout << "  " << row.name << " " << shape_str(row.shape) << " = " << row.count << "\n";
  }
  std::cout << "total " << report.total << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MIL acoustic scene classifier"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
  synth->add_option("--classes", synth_args.classes, "Number of scene classes");
  synth->add_option("--per-class", synth_args.per_class, "Clips per class");
  synth->add_option("--clip-seconds", synth_args.clip_seconds, "Clip duration");
  synth->add_option("--seed", synth_args.seed, "Generator seed");
  synth->add_option("--pairs", synth_args.pairs, "Ambiguity pairs, e.g. 0:1,2:3");
  synth->add_option("--out", synth_args.out, "Output directory")->required();

  std::string feat_meta, feat_out;
  auto* features = app.add_subcommand("features", "Extract log-mel feature cache");
  features->add_option("--meta", feat_meta, "Metadata TSV")->required();
  features->add_option("--out", feat_out, "Cache directory")->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", train_args.config, "Training config JSON");
  train->add_option("--train-meta", train_args.train_meta, "Training metadata")->required();
  train->add_option("--val-meta", train_args.val_meta, "Validation metadata");
  train->add_option("--out", train_args.out, "Run output directory")->required();
  train->add_option("--features", train_args.features_dir, "Feature cache directory");
  train->add_option("--resume", train_args.resume, "Checkpoint to resume from");
  train->add_option("--scenes", train_args.scenes, "Comma-separated scene list");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")->required();
  eval->add_option("--meta", eval_args.meta, "Metadata TSV")->required();
  eval->add_option("--rule", eval_args.rule, "Decision rule")
      ->check(CLI::IsMember({"smi", "cmi"}));
  eval->add_option("--json", eval_args.json_out, "Write the report JSON here");
  eval->add_option("--stats", eval_args.stats_out, "Write confidence stats JSON here");
  eval->add_option("--features", eval_args.features_dir, "Feature cache directory");
  eval->add_option("--scenes", eval_args.scenes, "Comma-separated scene list");

  RocArgs roc_args;
  auto* roc = app.add_subcommand("roc", "One-vs-rest instance ROC for a class");
  roc->add_option("--checkpoint", roc_args.checkpoint, "Model checkpoint")->required();
  roc->add_option("--meta", roc_args.meta, "Metadata TSV")->required();
  roc->add_option("--class", roc_args.target_class, "Target class index")->required();
  roc->add_option("--out", roc_args.out, "Curve CSV path");
  roc->add_option("--features", roc_args.features_dir, "Feature cache directory");
  roc->add_option("--scenes", roc_args.scenes, "Comma-separated scene list");

  InspectArgs inspect_args;
  auto* inspect = app.add_subcommand("inspect", "Masked spectrogram + instances for one clip");
  inspect->add_option("--checkpoint", inspect_args.checkpoint, "Model checkpoint")->required();
  inspect->add_option("--clip", inspect_args.clip, "Audio clip")->required();
  inspect->add_option("--out", inspect_args.out, "Output directory");

  auto* params = app.add_subcommand("params", "Print the model parameter report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) run_synth(synth_args);
    if (features->parsed()) run_features(feat_meta, feat_out);
    if (train->parsed()) run_train(train_args);
    if (eval->parsed()) run_eval(eval_args);
    if (roc->parsed()) run_roc(roc_args);
    if (inspect->parsed()) run_inspect(inspect_args);
    if (params->parsed()) run_params();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
