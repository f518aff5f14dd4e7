#include "dinomx/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "dinomx/attention.hpp"
#include "dinomx/eval.hpp"
#include "dinomx/peft.hpp"
#include "dinomx/rng.hpp"
#include "dinomx/trainer.hpp"

namespace dinomx {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSplitKey = 0xE5A1;

struct Options {
  std::string accel_config;
  std::string train_config;
  std::string resume_from;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  int k = 20;
  int limit = 16;
  int count = 200;
  int size = 32;
};

bool starts_with(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

std::string safe_id(std::string id) {
  for (char& c : id) {
    if (c == '/' || c == '\\' || c == ',' || c == ' ') c = '_';
  }
  return id;
}

TrainingData load_dataset(const TrainConfig& cfg) {
  if (cfg.dataset.dataset_path.empty()) throw ConfigError("dataset.dataset_path is required");
  return load_training_data(cfg.dataset.dataset_path);
}

/// workers and distribution recorded in a bundle's meta.txt.
AccelConfig accel_from_bundle(const fs::path& bundle) {
  AccelConfig a;
  std::ifstream meta(bundle / "meta.txt");
  if (!meta) throw std::runtime_error("checkpoint metadata missing in " + bundle.string());
  std::string line;
  while (std::getline(meta, line)) {
    std::istringstream ss(line);
    std::string key, value;
    ss >> key >> value;
    if (key == "workers") a.num_workers = std::stoi(value);
    if (key == "distribution") a.type = parse_distribution(value);
  }
  return a;
}

fs::path run_root_of(const fs::path& bundle) {
  fs::path b = bundle;
  if (!b.has_filename()) b = b.parent_path();
  return b.parent_path().parent_path();
}

int cmd_train(const Options& o, bool distill, std::ostream& out) {
  if (o.force && !o.resume_from.empty()) throw ConfigError("--force and --resume-from cannot be combined");
  const bool resume = !o.resume_from.empty();
  if (o.train_config.empty() && !resume) throw ConfigError("--train-config is required");
  TrainConfig cfg = load_train_config(o.train_config.empty() ? fs::path(o.resume_from) / "config.yaml" : fs::path(o.train_config));
  if (o.seed) cfg.train.seed = *o.seed;
  if (distill) cfg.train.do_distillation = true;
  cfg.validate();
  AccelConfig accel = !o.accel_config.empty() ? load_accel_config(o.accel_config)
                      : resume               ? accel_from_bundle(o.resume_from)
                                             : AccelConfig{};
  TrainingData data = load_dataset(cfg);

  fs::path root = !o.output_dir.empty() ? fs::path(o.output_dir)
                  : resume              ? run_root_of(o.resume_from)
                                        : fs::path("runs") / cfg.train.model_name;
  const auto mode = resume ? RunLayout::Mode::reuse : o.force ? RunLayout::Mode::force : RunLayout::Mode::fresh;
  RunLayout layout = RunLayout::create(root, mode);
  if (!resume) {
    std::ofstream(root / "config.yaml") << print_train_config(cfg);
    std::ofstream(root / "accelerate.yaml") << print_accel_config(accel);
  }
  TrainerOptions topts;
  topts.layout = layout;
  topts.echo = true;
  Trainer trainer(cfg, accel, std::move(data), topts);
  if (resume) {
    trainer.resume(o.resume_from);
    out << "resuming at iteration " << trainer.next_iteration() << '\n';
  }
  const auto records = trainer.run();
  if (!records.empty()) {
    out << fmt::format("finished {} iteration(s); last total loss {:.4f}; run directory {}\n", records.size(),
                       records.back().loss.total, root.string());
  } else {
    out << "nothing to do: max_iterations already reached\n";
  }
  return kExitOk;
}

EmbeddingSet pick(const EmbeddingSet& e, const std::vector<std::size_t>& idx) {
  EmbeddingSet s;
  const auto d = e.dim();
  std::vector<float> v;
  v.reserve(idx.size() * static_cast<std::size_t>(d));
  for (std::size_t i : idx) {
    const auto row = e.vectors.data().subspan(i * static_cast<std::size_t>(d), static_cast<std::size_t>(d));
    v.insert(v.end(), row.begin(), row.end());
    s.labels.push_back(e.labels[i]);
    s.ids.push_back(e.ids[i]);
  }
  s.vectors = Tensor({static_cast<std::int64_t>(idx.size()), d}, std::move(v));
  return s;
}

NormalizeParams norm_params(const TrainConfig& cfg) { return NormalizeParams{cfg.dataset.mean, cfg.dataset.std}; }

int cmd_evaluate(const Options& o, std::ostream& out) {
  if (o.resume_from.empty()) throw ConfigError("evaluate needs --resume-from <checkpoint bundle>");
  const TrainConfig cfg = load_train_config(o.train_config.empty() ? fs::path(o.resume_from) / "config.yaml" : fs::path(o.train_config));
  const TrainingData data = load_dataset(cfg);
  const CheckpointBackbone bb = load_checkpoint_backbone(o.resume_from, data.channels());
  const EmbeddingSet all = extract_embeddings(bb.params, bb.spec, data, cfg.dataset.normalization, norm_params(cfg));
  std::vector<std::size_t> tr, te;
  split_indices(all.size(), o.seed.value_or(cfg.train.seed), tr, te);
  const EmbeddingSet train = pick(all, tr);
  const EmbeddingSet test = pick(all, te);
  const int k = std::min<int>(o.k, static_cast<int>(train.size()));
  std::vector<EvalReport> reports{knn_classify(train, test, k), linear_probe(train, test)};

  const fs::path results = (!o.output_dir.empty() ? fs::path(o.output_dir) : run_root_of(o.resume_from)) / "results";
  fs::create_directories(results);
  write_embeddings(results / "embeddings.dmxt", all);
  const std::string dataset = fs::path(cfg.dataset.dataset_path).filename().string();
  for (const auto& r : reports) {
    append_report_csv(results / "eval.csv", dataset, r);
    out << fmt::format("{:<6} accuracy {:.4f} precision {:.4f} recall {:.4f} f1 {:.4f}\n", r.method, r.accuracy,
                       r.macro_precision, r.macro_recall, r.macro_f1);
  }
  out << fmt::format("checkpoint iteration {}; {} train / {} test samples; k = {}\n", bb.iteration, train.size(),
                     test.size(), k);
  return kExitOk;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  if (o.resume_from.empty()) throw ConfigError("analyze needs --resume-from <checkpoint bundle>");
  const TrainConfig cfg = load_train_config(o.train_config.empty() ? fs::path(o.resume_from) / "config.yaml" : fs::path(o.train_config));
  const TrainingData data = load_dataset(cfg);
  const CheckpointBackbone bb = load_checkpoint_backbone(o.resume_from, data.channels());
  const fs::path root = !o.output_dir.empty() ? fs::path(o.output_dir) : run_root_of(o.resume_from);
  fs::create_directories(root / "samples");
  fs::create_directories(root / "results");
  const fs::path csv = root / "results" / "detections.csv";
  fs::remove(csv);

  const int patch = bb.spec.vit.patch_size;
  std::vector<DetectionResult> scored;
  std::vector<RoiMask> masks;
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(o.limit, 0)), data.size());
  ForwardOptions fo;
  fo.capture_attention = true;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor img = normalize(data.images[i], cfg.dataset.normalization, norm_params(cfg));
    const auto enc = forward(bb.params, bb.spec, std::span<const Tensor>(&img, 1), fo);
    const AnalysisOutput a = analyze_attention(*enc.front().attention);
    const std::string id = safe_id(data.ids[i]);
    write_heatmap(root / "samples" / (id + "_pc0.pgm"), a.pca.components.front());
    append_detections_csv(csv, data.ids[i], a.detection);
    if (data.rois[i]) {
      scored.push_back(a.detection);
      masks.push_back(downsample_roi(*data.rois[i], patch));
    }
  }
  out << fmt::format("analyzed {} image(s); heatmaps in {}, detections in {}\n", n, (root / "samples").string(),
                     csv.string());
  if (!scored.empty()) {
    const DetectionScore s = score_detections(scored, masks);
    std::ofstream sc(root / "results" / "detection_scores.csv");
    sc << "images,tp,fp,fn,micro_precision,micro_recall,micro_f1,macro_precision,macro_recall,macro_f1,localization\n";
    sc << s.images << ',' << s.tp << ',' << s.fp << ',' << s.fn << ',' << s.precision << ',' << s.recall << ','
       << s.f1 << ',' << s.macro_precision << ',' << s.macro_recall << ',' << s.macro_f1 << ',' << s.localization
       << '\n';
    out << fmt::format("TP {} FP {} FN {}  micro P {:.4f} R {:.4f} F1 {:.4f}  macro P {:.4f} R {:.4f} F1 {:.4f}  "
                       "localization {:.4f}\n",
                       s.tp, s.fp, s.fn, s.precision, s.recall, s.f1, s.macro_precision, s.macro_recall, s.macro_f1,
                       s.localization);
  }
  return kExitOk;
}

int cmd_info(const Options& o, std::ostream& out) {
  if (o.train_config.empty()) throw ConfigError("--train-config is required");
  TrainConfig cfg = load_train_config(o.train_config);
  if (o.seed) cfg.train.seed = *o.seed;
  cfg.validate();
  out << "# training configuration\n" << print_train_config(cfg);
  if (!o.accel_config.empty()) out << "# accelerator configuration\n" << print_accel_config(load_accel_config(o.accel_config));

  ViTConfig vit = cfg.vit();
  const bool open_channels = vit.in_channels == 0;
  if (open_channels) vit.in_channels = 1;
  Rng rng(cfg.train.seed);
  BackboneSpec spec;
  spec.vit = vit;
  ParameterSet p = init_backbone(vit, rng);
  const std::size_t backbone = parameter_count(p);
  init_head(p, "head", cfg.head_config(vit.embed_dim), rng);
  if (cfg.ibot_enabled() && cfg.ibot.separate_head) init_head(p, "ibot_head", cfg.ibot_head_config(vit.embed_dim), rng);
  if (cfg.train.use_lora) inject_lora(p, spec, cfg.lora, rng);
  TrainableSet trainable = freeze_backbone_layers(p, vit.depth, cfg.train.freeze_backbone_layers);
  if (cfg.train.use_lora) freeze_base_weights(trainable);
  std::size_t n_trainable = 0;
  for (const auto& name : trainable) n_trainable += p.at(name).numel();
  out << "# model\n";
  out << fmt::format("variant: {}\nembed_dim: {}\ndepth: {}\nheads: {}\npatch_size: {}\n", cfg.variant(), vit.embed_dim,
                     vit.depth, vit.num_heads, vit.patch_size);
  out << fmt::format("backbone_parameters: {}\ntotal_parameters: {}\ntrainable_parameters: {}\n", backbone,
                     parameter_count(p), n_trainable);
  if (open_channels) out << "note: in_channels comes from the data; counts assume 1 channel\n";
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  if (o.output_dir.empty()) throw ConfigError("synth needs --output-dir");
  if (fs::exists(o.output_dir) && !fs::is_empty(o.output_dir) && !o.force) {
    throw std::runtime_error(o.output_dir + " already exists (use --force)");
  }
  if (o.force) fs::remove_all(o.output_dir);
  const TrainingData d = make_blobs_stripes(o.count, o.size, o.seed.value_or(0));
  write_dataset(o.output_dir, d);
  out << fmt::format("wrote {} images to {}\n", d.size(), o.output_dir);
  return kExitOk;
}

}  // namespace

void split_indices(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train, std::vector<std::size_t>& test) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {kSplitKey}));
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  train.clear();
  test.clear();
  for (std::size_t i = 0; i < n; ++i) (i % 5 == 4 ? test : train).push_back(perm[i]);
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
}

CheckpointBackbone load_checkpoint_backbone(const fs::path& bundle, int in_channels) {
  if (!fs::exists(bundle / "state.dmxt") || !fs::exists(bundle / "config.yaml")) {
    throw std::runtime_error("not a checkpoint bundle: " + bundle.string());
  }
  CheckpointBackbone out;
  out.config = load_train_config(bundle / "config.yaml");
  out.iteration = -1;
  std::ifstream meta(bundle / "meta.txt");
  std::string key;
  while (meta >> key) {
    if (key == "iteration") meta >> out.iteration;
  }
  out.spec.vit = out.config.vit();
  if (out.spec.vit.in_channels == 0) out.spec.vit.in_channels = in_channels;
  const std::string prefix = out.config.train.do_distillation ? "shadow/" : "teacher/";
  for (const auto& [name, t] : read_parameter_set(bundle / "state.dmxt")) {
    if (!starts_with(name, prefix)) continue;
    const std::string inner = name.substr(prefix.size());
    if (starts_with(inner, "backbone.") || starts_with(inner, "lora.")) out.params.emplace(inner, t);
  }
  if (out.params.empty()) throw std::runtime_error("checkpoint holds no encoder weights: " + bundle.string());
  if (out.config.train.use_lora) {
    out.spec.lora = out.config.lora;
    merge_adapters(out.params, out.spec);
    std::erase_if(out.params, [](const auto& kv) { return starts_with(kv.first, "lora."); });
  }
  return out;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-supervised ViT training, distillation and analysis"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--accel-config", o.accel_config, "accelerator YAML");
    sub->add_option("--train-config", o.train_config, "training YAML");
    sub->add_option("--resume-from", o.resume_from, "checkpoint bundle");
    sub->add_flag("--force", o.force, "replace an existing output directory");
    sub->add_option("--seed", o.seed, "override train.seed");
    sub->add_option("--output-dir", o.output_dir, "run directory");
  };
  auto* train = app.add_subcommand("train", "self-distillation training");
  auto* distill = app.add_subcommand("distill", "distillation from a frozen teacher");
  auto* evaluate = app.add_subcommand("evaluate", "kNN and linear probe on checkpoint embeddings");
  auto* analyze = app.add_subcommand("analyze", "attention maps, PCA and region detection");
  auto* info = app.add_subcommand("info", "print the parsed configuration and parameter counts");
  auto* synth = app.add_subcommand("synth", "write the synthetic blobs/stripes dataset");
  for (auto* s : {train, distill, evaluate, analyze, info, synth}) common(s);
  evaluate->add_option("--k", o.k, "kNN neighbours")->check(CLI::PositiveNumber);
  analyze->add_option("--limit", o.limit, "images to analyze")->check(CLI::NonNegativeNumber);
  synth->add_option("--count", o.count, "number of images")->check(CLI::PositiveNumber);
  synth->add_option("--size", o.size, "image side")->check(CLI::PositiveNumber);

  std::vector<const char*> argv{"dinomx"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(o, false, out);
    if (distill->parsed()) return cmd_train(o, true, out);
    if (evaluate->parsed()) return cmd_evaluate(o, out);
    if (analyze->parsed()) return cmd_analyze(o, out);
    if (info->parsed()) return cmd_info(o, out);
    if (synth->parsed()) return cmd_synth(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace dinomx
