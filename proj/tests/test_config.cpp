#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "dinomx/cli.hpp"
#include "support.hpp"
#include "tiny_config.hpp"

using namespace dinomx;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

// A full configuration touching every section.
const char* kFullConfig = R"(
dino_head:
  out_dim: 65536
  norm_last_layer: False
  loss_weight: 1.0
ibot:
  loss_weight: 0.0
  out_dim: 65536
  norm_last_layer: True
  mask_sample_probability: 0.5
  mask_ratio_min_max:
    - 0.1
    - 0.5
distillation:
  distilled_model_type: 'facebook/dinov2-giant'
  distilled_model_weights: ''
  load_from_disk: False
lora_config:
  lora_r: 4
  lora_alpha: 16
  lora_dropout: 0.1
crops:
  global_crops_scale:
    - 0.4
    - 1.0
  local_crops_number: 8
  global_crops_number: 2
  local_crops_scale:
    - 0.1
    - 0.4
  global_crops_size: 224
  local_crops_size: 96
dataset:
  dataset_path: dataset/pathmnist
  shuffle: true
train:
  model_name: 'training_test_fsdp'
  model_type: 'facebook/dinov2-base'
  global_batch_size: 64
  max_iterations: 2000
  do_distillation: false
  mixed_precision: true
  use_lora: true
  freeze_last_layer: 100
  warmup_teacher_temp_iterations: 500
  warmup_iterations: 1000
  teacher_temp: 0.04
  freeze_backbone_layers: 0
  momentum_teacher: 0.996
  centering: 'centering'
  ibot_separate_head: false
  use_pretrained: True
  generate_samples: True
  lr: 1e-4
  min_lr: 1e-5
  saveckp_freq: 250
)";

std::string error_of(const std::string& yaml) {
  try {
    parse_train_config(yaml);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

/// Path -> (size, mtime) for every entry under `root`.
std::map<std::string, std::pair<std::uintmax_t, fs::file_time_type>> snapshot(const fs::path& root) {
  std::map<std::string, std::pair<std::uintmax_t, fs::file_time_type>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    out[e.path().string()] = {e.is_regular_file() ? e.file_size() : 0, e.last_write_time()};
  }
  return out;
}

int run(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("full configuration parses") {
  const TrainConfig cfg = parse_train_config(kFullConfig);
  CHECK(cfg.train.max_iterations == 2000);
  CHECK(cfg.train.momentum_teacher == 0.996);
  CHECK(cfg.train.lr == 1e-4);
  CHECK(cfg.train.global_batch_size == 64);
  CHECK(cfg.train.use_lora);
  CHECK(cfg.dino_head.out_dim == 65536);
  CHECK_FALSE(cfg.dino_head.norm_last_layer);
  CHECK(cfg.ibot.norm_last_layer);
  CHECK(cfg.ibot.mask_ratio_min == 0.1);
  CHECK(cfg.ibot.mask_ratio_max == 0.5);
  CHECK(cfg.lora.r == 4);
  CHECK(cfg.lora.alpha == 16.0);
  CHECK(cfg.crops.local_crops_number == 8);
  CHECK(cfg.crops.guided_crops_number == 2);
  CHECK(cfg.distillation.distilled_model_type == "facebook/dinov2-giant");
  CHECK(cfg.variant() == "dinov1");
  CHECK(cfg.vit().embed_dim == 64);
  CHECK_NOTHROW(cfg.validate());

  TrainConfig v2 = cfg;
  v2.ibot.loss_weight = 0.5;
  CHECK(v2.variant() == "dinov2");

  const AccelConfig a = parse_accel_config("distribution:\n  type: fsdp # or ddp\n  mixed_precision: bf16\n  downcast_bf16: 'no'\n");
  CHECK(a.type == DistributionType::fsdp);
  CHECK(a.mixed_precision == "bf16");
  CHECK(a.downcast_bf16 == "no");
  CHECK(a.num_workers == 1);
}

TEST_CASE("unknown keys and bad values are rejected everywhere") {
  CHECK(error_of("train:\n  max_iteration: 10\n").find("train.max_iteration") != std::string::npos);
  for (const char* section : {"dino_head", "ibot", "distillation", "lora_config", "crops", "dataset", "train", "model"}) {
    const std::string msg = error_of(std::string(section) + ":\n  bogus_key: 1\n");
    CHECK_MESSAGE(msg.find(std::string(section) + ".bogus_key") != std::string::npos, section);
  }
  CHECK(error_of("trian:\n  lr: 1\n").find("trian") != std::string::npos);
  CHECK(error_of("train:\n  max_iterations: many\n").find("train.max_iterations") != std::string::npos);
  CHECK(error_of("train:\n  model_type: vit-colossal\n").find("vit-colossal") != std::string::npos);
  CHECK(error_of("dataset:\n  normalization: zscore\n").find("normalization") != std::string::npos);
  CHECK(error_of("crops:\n  global_crops_scale: [0.4]\n").find("global_crops_scale") != std::string::npos);
  CHECK_THROWS_AS(parse_accel_config("distribution:\n  type: horovod\n"), ConfigError);
  CHECK_THROWS_AS(parse_accel_config("distribution:\n  typ: ddp\n"), ConfigError);
  CHECK_THROWS_AS(parse_accel_config("distribution:\n  num_workers: 0\n"), ConfigError);
}

TEST_CASE("parse-print-parse fixpoint") {
  const TrainConfig a = parse_train_config(kFullConfig);
  const TrainConfig b = parse_train_config(print_train_config(a));
  CHECK(a == b);
  CHECK(print_train_config(b) == print_train_config(a));

  TrainConfig c = testutil::tiny_config(7);
  c.dataset.normalization = NormalizeMode::standardize;
  c.dataset.mean = {0.5f};
  c.dataset.std = {0.25f};
  c.lora.targets = {Projection::q, Projection::k};
  c.distillation.teacher_views = TeacherViews::all;
  c.train.seed = 1234567;
  c.train.min_lr = 3.3e-7;
  CHECK(parse_train_config(print_train_config(c)) == c);

  AccelConfig acc;
  acc.type = DistributionType::fsdp;
  acc.num_workers = 3;
  CHECK(parse_accel_config(print_accel_config(acc)) == acc);
}

TEST_CASE("presets") {
  CHECK(resolve_preset("facebook/dinov2-base").embed_dim == 64);
  CHECK(resolve_preset("tiny-giant").embed_dim == 128);
  CHECK_THROWS_AS(resolve_preset("nope"), ConfigError);
  TrainConfig cfg;
  cfg.model.depth = 3;
  CHECK(cfg.vit().depth == 3);
  CHECK(cfg.vit().in_channels == 0);
}

TEST_CASE("validation rules") {
  TrainConfig cfg = testutil::tiny_config(10);
  CHECK_NOTHROW(cfg.validate());
  auto bad = [&](auto edit) {
    TrainConfig c = testutil::tiny_config(10);
    edit(c);
    return [c] { c.validate(); };
  };
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.train.min_lr = 0.0; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.train.min_lr = 1.0; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.train.warmup_iterations = 10; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.crops.local_crops_size = 6; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.train.freeze_backbone_layers = 3; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.train.centering = "sinkhorn_knopp"; })(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) {
                    c.train.do_distillation = true;
                    c.ibot.loss_weight = 0.5;
                  })(),
                  ConfigError);
}

TEST_CASE("info is read-only and exit codes") {
  TempDir dir("cli_info");
  write_text(dir / "t.yaml", kFullConfig);
  write_text(dir / "a.yaml", "distribution:\n  type: ddp\n");
  const auto before = snapshot(dir.path);
  const auto cwd_before = snapshot(fs::current_path());
  std::string out;
  CHECK(run({"info", "--train-config", (dir / "t.yaml").string(), "--accel-config", (dir / "a.yaml").string()}, &out) ==
        kExitOk);
  CHECK(out.find("max_iterations: 2000") != std::string::npos);
  CHECK(out.find("trainable_parameters:") != std::string::npos);
  CHECK(snapshot(dir.path) == before);
  CHECK(snapshot(fs::current_path()) == cwd_before);

  std::string err;
  write_text(dir / "typo.yaml", "train:\n  max_iteration: 5\n");
  CHECK(run({"info", "--train-config", (dir / "typo.yaml").string()}, nullptr, &err) == kExitConfig);
  CHECK(err.find("max_iteration") != std::string::npos);
  CHECK(run({"info"}) == kExitConfig);
  CHECK(run({"info", "--train-config", (dir / "missing.yaml").string()}) == kExitConfig);
  CHECK(run({"frobnicate"}) == kExitConfig);
  CHECK(run({}) == kExitConfig);
  CHECK(run({"train", "--force", "--resume-from", (dir / "x").string()}) == kExitConfig);

  // A dataset path that does not exist is a runtime failure.
  TrainConfig cfg = testutil::tiny_config(4);
  cfg.dataset.dataset_path = (dir / "no_such_dataset").string();
  write_text(dir / "nodata.yaml", print_train_config(cfg));
  CHECK(run({"train", "--train-config", (dir / "nodata.yaml").string(), "--output-dir", (dir / "run").string()}) ==
        kExitRuntime);
}

TEST_CASE("end-to-end train, resume, evaluate and analyze") {
  TempDir dir("cli_e2e");
  const fs::path data = dir / "data";
  const fs::path run_dir = dir / "run";
  REQUIRE(run({"synth", "--output-dir", data.string(), "--count", "20", "--size", "16", "--seed", "3"}) == kExitOk);
  CHECK(run({"synth", "--output-dir", data.string()}) == kExitRuntime);

  TrainConfig cfg = testutil::tiny_config(6);
  cfg.train.saveckp_freq = 3;
  cfg.dataset.dataset_path = (data / "manifest.csv").string();
  write_text(dir / "t.yaml", print_train_config(cfg));
  write_text(dir / "a.yaml", "distribution:\n  type: ddp\n  num_workers: 2\n");

  const std::vector<std::string> train_args{"train", "--train-config", (dir / "t.yaml").string(), "--accel-config",
                                            (dir / "a.yaml").string(), "--output-dir", run_dir.string()};
  std::string out, err;
  REQUIRE(run(train_args, &out, &err) == kExitOk);
  for (const char* sub : {"checkpoints", "samples", "results", "logs"}) CHECK(fs::is_directory(run_dir / sub));
  CHECK(fs::exists(run_dir / "checkpoints" / "iter_000003" / "state.dmxt"));
  CHECK(fs::exists(run_dir / "checkpoints" / "iter_000005" / "state.dmxt"));
  CHECK(fs::exists(run_dir / "config.yaml"));

  // Never silently overwritten.
  CHECK(run(train_args) == kExitRuntime);

  std::ifstream log_in(run_dir / "logs" / "train.log");
  std::vector<std::string> lines;
  for (std::string l; std::getline(log_in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 6);

  REQUIRE(run({"train", "--resume-from", (run_dir / "checkpoints" / "iter_000003").string()}, &out, &err) == kExitOk);
  CHECK(out.find("resuming at iteration 4") != std::string::npos);
  std::ifstream again(run_dir / "logs" / "train.log");
  std::vector<std::string> after;
  for (std::string l; std::getline(again, l);) after.push_back(l);
  REQUIRE(after.size() == 8);
  // Timestamps differ; the record after the prefix must match.
  auto body = [](const std::string& l) { return l.substr(l.find("Total Loss")); };
  CHECK(body(after[6]) == body(lines[4]));
  CHECK(body(after[7]) == body(lines[5]));

  const std::string bundle = (run_dir / "checkpoints" / "iter_000005").string();
  REQUIRE(run({"evaluate", "--resume-from", bundle, "--k", "3"}, &out, &err) == kExitOk);
  CHECK(out.find("knn") != std::string::npos);
  CHECK(out.find("linear") != std::string::npos);
  CHECK(fs::exists(run_dir / "results" / "eval.csv"));
  CHECK(fs::exists(run_dir / "results" / "embeddings.dmxt"));

  REQUIRE(run({"analyze", "--resume-from", bundle, "--limit", "4"}, &out, &err) == kExitOk);
  CHECK(fs::exists(run_dir / "results" / "detections.csv"));
  std::size_t heatmaps = 0;
  for (const auto& e : fs::directory_iterator(run_dir / "samples")) heatmaps += e.path().extension() == ".pgm";
  CHECK(heatmaps == 4);

  CHECK(run({"evaluate"}) == kExitConfig);
  CHECK(run({"evaluate", "--resume-from", (dir / "nowhere").string()}) == kExitConfig);
}

TEST_CASE("held-out split") {
  std::vector<std::size_t> tr, te;
  split_indices(200, 0, tr, te);
  CHECK(tr.size() == 160);
  CHECK(te.size() == 40);
  std::vector<std::size_t> all = tr;
  all.insert(all.end(), te.begin(), te.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  std::vector<std::size_t> tr2, te2;
  split_indices(200, 0, tr2, te2);
  CHECK(te2 == te);
}
