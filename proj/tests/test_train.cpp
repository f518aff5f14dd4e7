#include <doctest.h>

#include <cmath>
#include <fstream>
#include <regex>
#include <thread>

#include <fmt/format.h>

#include "dinomx/trainer.hpp"
#include "support.hpp"
#include "tiny_config.hpp"

using namespace dinomx;
using testutil::TempDir;
using testutil::tiny_config;
using testutil::tiny_data;

namespace {

ScheduleConfig reference_schedule() {
  ScheduleConfig s;
  s.max_iterations = 2000;
  s.warmup_iterations = 1000;
  s.lr = 1e-4;
  s.min_lr = 1e-5;
  s.weight_decay = 0.04;
  s.weight_decay_end = 0.4;
  s.momentum_teacher = 0.996;
  return s;
}

double max_param_diff(const ParameterSet& a, const ParameterSet& b) {
  double d = 0.0;
  for (const auto& [n, t] : a) {
    const Tensor& u = b.at(n);
    for (std::size_t i = 0; i < t.numel(); ++i) d = std::max(d, static_cast<double>(std::abs(t[i] - u[i])));
  }
  return d;
}

}  // namespace

TEST_CASE("schedules at the logged iteration") {
  const ScheduleConfig s = reference_schedule();
  CHECK(lr_at(16, s) == doctest::Approx(1.6e-6).epsilon(1e-12));
  CHECK(fmt::format("{:.6f}", lr_at(16, s)) == "0.000002");
  CHECK(weight_decay_at(16, s) == doctest::Approx(0.0400568).epsilon(1e-6));
  CHECK(fmt::format("{:.6f}", weight_decay_at(16, s)) == "0.040057");
  CHECK(teacher_momentum_at(16, s) == doctest::Approx(1.0 - 0.004 * (std::cos(M_PI * 16 / 2000.0) + 1.0) / 2.0).epsilon(1e-12));
  CHECK(teacher_momentum_at(16, s) == doctest::Approx(0.9960006).epsilon(1e-7));
  CHECK(fmt::format("{:.6f}", teacher_momentum_at(16, s)) == "0.996001");
}

TEST_CASE("schedule endpoints and shape") {
  const ScheduleConfig s = reference_schedule();
  CHECK(lr_at(1000, s) == 1e-4);
  CHECK(weight_decay_at(0, s) == 0.04);
  CHECK(teacher_momentum_at(0, s) == 0.996);
  const double T = 2000, w = 1000;
  const double bound = (1e-4 - 1e-5) * (1.0 - std::cos(M_PI * (T - 1 - w) / (T - w))) / 2.0;
  CHECK(std::abs(lr_at(1999, s) - 1e-5) <= bound + 1e-15);
  double prev = 0.0;
  for (std::int64_t t = 0; t < 2000; ++t) {
    const double m = teacher_momentum_at(t, s);
    CHECK(m >= prev);
    CHECK(std::isfinite(lr_at(t, s)));
    CHECK(lr_at(t, s) >= 0.0);
    prev = m;
  }
  CHECK(teacher_momentum_at(1999, s) > 0.99999);

  ScheduleConfig flat = s;
  flat.weight_decay_end = flat.weight_decay;
  for (std::int64_t t : {0, 500, 1999}) CHECK(weight_decay_at(t, flat) == doctest::Approx(0.04).epsilon(1e-15));
}

TEST_CASE("ema update") {
  ParameterSet t{{"w", Tensor({3}, {0.0f, 0.0f, 0.0f})}};
  const ParameterSet s{{"w", Tensor({3}, {2.0f, 2.0f, 2.0f})}};
  ParameterSet a = t;
  ema_update(a, s, 1.0);
  CHECK(a.at("w")[0] == 0.0f);
  ema_update(a, s, 0.5);
  CHECK(a.at("w")[1] == 1.0f);
  ema_update(a, s, 0.0);
  CHECK(a.at("w")[2] == 2.0f);

  Rng rng(1);
  ParameterSet x{{"p", testutil::random_tensor({50}, rng)}};
  const ParameterSet same = x;
  for (double m : {0.1, 0.5, 0.996, 0.9999}) {
    ema_update(x, same, m);
    for (std::size_t i = 0; i < 50; ++i) REQUIRE(x.at("p")[i] == same.at("p")[i]);
  }
  CHECK_THROWS(ema_update(t, ParameterSet{{"v", Tensor({3}, 0.0f)}}, 0.5));
}

TEST_CASE("log line format") {
  LogRecord r;
  r.loss = LossBreakdown::combine(9.8890, 1.2194, 2.5802, 1.0, 1.0);
  r.lr = 1.6e-6;
  r.weight_decay = 0.0400568;
  r.momentum = 0.9960006;
  r.batch_size = 64;
  r.iteration = 16;
  r.max_iterations = 2000;
  r.worker = 0;
  r.memory_used_gb = 22.96;
  r.memory_total_gb = 47.32;
  CHECK(format_log_line(r) ==
        "Total Loss: 13.6886 Local DINO: 9.8890 Global DINO: 1.2194 iBOT: 2.5802 LR: 0.000002 Weight Decay: 0.040057 "
        "Teacher momentum: 0.996001 Current Batch Size: 64 Iteration: 16/2000 Worker ID: 0 Memory: 22.96/47.32");
  CHECK(format_log_line(LogRecord{}) ==
        "Total Loss: 0.0000 Local DINO: 0.0000 Global DINO: 0.0000 iBOT: 0.0000 LR: 0.000000 Weight Decay: 0.000000 "
        "Teacher momentum: 0.000000 Current Batch Size: 0 Iteration: 0/0 Worker ID: 0 Memory: 0.00/0.00");
  const std::string prefix = log_prefix(std::chrono::system_clock::now(), 3);
  CHECK(std::regex_match(prefix, std::regex(R"(\d{4}-\d\d-\d\d \d\d:\d\d:\d\d,\d{3} - dino_trainer_rank3 - INFO - )")));
}

TEST_CASE("all-reduce mean") {
  Rng rng(2);
  const ParameterSet g{{"a", testutil::random_tensor({5}, rng)}, {"b", testutil::random_tensor({2, 2}, rng)}};
  const std::vector<ParameterSet> one{g};
  const ParameterSet id = all_reduce_mean(one);
  CHECK(max_param_diff(id, g) == 0.0);

  ParameterSet neg = g;
  for (auto& [n, t] : neg) {
    for (float& v : t.data()) v = -v;
  }
  const std::vector<ParameterSet> pair{g, neg};
  for (const auto& [n, t] : all_reduce_mean(pair)) {
    for (float v : t.data()) CHECK(v == 0.0f);
  }

  std::vector<ParameterSet> four;
  for (int w = 0; w < 4; ++w) four.push_back({{"a", testutil::random_tensor({64}, rng)}});
  const ParameterSet mean = all_reduce_mean(four);
  for (std::size_t i = 0; i < 64; ++i) {
    double s = 0.0;
    for (const auto& p : four) s += p.at("a")[i];
    CHECK(std::abs(mean.at("a")[i] - s / 4.0) <= 1e-7);
  }

  // Threaded reducer agrees with the serial form on every worker.
  Reducer reducer(4);
  std::vector<ParameterSet> seen(4);
  std::vector<std::thread> threads;
  for (int w = 0; w < 4; ++w) threads.emplace_back([&, w] { seen[w] = reducer.all_reduce_mean(w, four[w]); });
  for (auto& th : threads) th.join();
  for (const auto& s : seen) CHECK(max_param_diff(s, mean) == 0.0);

  std::vector<ParameterSet> bad{{{"a", Tensor({2}, 0.0f)}}, {{"a", Tensor({3}, 0.0f)}}};
  CHECK_THROWS(all_reduce_mean(bad));
}

TEST_CASE("optimizer-state sharding") {
  ParameterSet p;
  std::set<std::string> names;
  for (int i = 0; i < 4; ++i) {
    const std::string n = "t" + std::to_string(i);
    p[n] = Tensor({i + 1}, 0.0f);
    names.insert(n);
  }
  const ShardLayout one = shard_states(p, names, 1);
  CHECK(one.owned.at(0) == names);
  const ShardLayout two = shard_states(p, names, 2);
  CHECK(two.owned.at(0).size() == 2);
  CHECK(two.owned.at(1).size() == 2);
  std::set<std::string> all;
  for (const auto& s : two.owned) {
    for (const auto& n : s) CHECK(all.insert(n).second);
  }
  CHECK(all == names);
  CHECK(two.owner_of("t3") == 0);  // largest first
  CHECK(two.owner_of("t2") == 1);
  std::set<std::string> extra = names;
  extra.insert("orphan");
  CHECK_THROWS(two.validate(extra));
}

TEST_CASE("run layout modes") {
  TempDir dir("layout");
  const auto root = dir / "run";
  const RunLayout a = RunLayout::create(root, RunLayout::Mode::fresh);
  CHECK(std::filesystem::is_directory(a.checkpoints()));
  CHECK(std::filesystem::is_directory(a.logs()));
  std::ofstream(a.results() / "marker.txt") << "x";
  CHECK_THROWS(RunLayout::create(root, RunLayout::Mode::fresh));
  RunLayout::create(root, RunLayout::Mode::reuse);
  CHECK(std::filesystem::exists(a.results() / "marker.txt"));
  RunLayout::create(root, RunLayout::Mode::force);
  CHECK_FALSE(std::filesystem::exists(a.results() / "marker.txt"));
}

TEST_CASE("training is deterministic and finite") {
  const TrainConfig cfg = tiny_config(4);
  Trainer a(cfg, AccelConfig{}, tiny_data());
  Trainer b(cfg, AccelConfig{}, tiny_data());
  for (int t = 0; t < 4; ++t) {
    const StepRecord ra = a.step();
    const StepRecord rb = b.step();
    CHECK(ra.log_line == rb.log_line);
    CHECK(ra.loss.total == rb.loss.total);
    CHECK(std::isfinite(ra.loss.total));
    CHECK(ra.loss.total == doctest::Approx(ra.loss.local_dino + ra.loss.global_dino).epsilon(1e-6));
  }
  CHECK(max_param_diff(a.replica().student, b.replica().student) == 0.0);
}

TEST_CASE("freeze_last_layer gates the final projection") {
  TrainConfig cfg = tiny_config(6);
  cfg.train.freeze_last_layer = 3;
  Trainer tr(cfg, AccelConfig{}, tiny_data());
  const Tensor v0 = tr.replica().student.at("head.last.v");
  const Tensor w0 = tr.replica().student.at("head.mlp.0.weight");
  tr.run(3);  // iterations 0, 1, 2
  const Tensor& v2 = tr.replica().student.at("head.last.v");
  for (std::size_t i = 0; i < v0.numel(); ++i) REQUIRE(v2[i] == v0[i]);
  CHECK(max_param_diff({{"w", w0}}, {{"w", tr.replica().student.at("head.mlp.0.weight")}}) > 0.0);
  tr.run(5);
  CHECK(max_param_diff({{"v", v0}}, {{"v", tr.replica().student.at("head.last.v")}}) > 0.0);
}

TEST_CASE("checkpoint resume reproduces the next log line") {
  TempDir dir("ckpt");
  TrainConfig cfg = tiny_config(8);
  cfg.train.saveckp_freq = 4;
  TrainerOptions opts;
  opts.layout = RunLayout::create(dir / "run", RunLayout::Mode::fresh);
  Trainer full(cfg, AccelConfig{}, tiny_data(), opts);
  const auto records = full.run();
  const auto bundle = opts.layout->checkpoints() / checkpoint_name(4);
  REQUIRE(std::filesystem::exists(bundle / "state.dmxt"));
  CHECK(std::filesystem::exists(opts.layout->checkpoints() / checkpoint_name(7)));

  Trainer resumed(cfg, AccelConfig{}, tiny_data());
  resumed.resume(bundle);
  CHECK(resumed.next_iteration() == 5);
  const StepRecord r5 = resumed.step();
  CHECK(r5.log_line == records.at(5).log_line);
  const StepRecord r6 = resumed.step();
  CHECK(r6.log_line == records.at(6).log_line);

  TrainConfig edited = cfg;
  edited.dino_head.out_dim = 32;
  Trainer mismatch(edited, AccelConfig{}, tiny_data());
  CHECK_THROWS_AS(mismatch.resume(bundle), ConfigError);

  std::filesystem::remove(bundle / "state.dmxt");
  Trainer partial(cfg, AccelConfig{}, tiny_data());
  CHECK_THROWS(partial.resume(bundle));
}

TEST_CASE("data parallel modes agree with a single worker") {
  const TrainConfig cfg = tiny_config(5);
  AccelConfig one;
  AccelConfig ddp;
  ddp.num_workers = 2;
  AccelConfig fsdp = ddp;
  fsdp.type = DistributionType::fsdp;
  Trainer a(cfg, one, tiny_data());
  Trainer b(cfg, ddp, tiny_data());
  Trainer c(cfg, fsdp, tiny_data());
  for (int t = 0; t < 5; ++t) {
    const StepRecord ra = a.step();
    const StepRecord rb = b.step();
    const StepRecord rc = c.step();
    CHECK(std::abs(ra.loss.total - rb.loss.total) <= 1e-4);
    CHECK(std::abs(rb.loss.total - rc.loss.total) <= 1e-4);
  }
  CHECK(max_param_diff(b.replica(0).student, b.replica(1).student) == 0.0);
  CHECK(max_param_diff(b.replica(0).student, c.replica(0).student) <= 1e-5);
  CHECK(max_param_diff(c.replica(0).student, c.replica(1).student) == 0.0);

  AccelConfig three = ddp;
  three.num_workers = 3;
  CHECK_THROWS(Trainer(cfg, three, tiny_data()));
}
