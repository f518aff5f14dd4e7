#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dinomx/config.hpp"
#include "dinomx/dataset.hpp"
#include "dinomx/distill.hpp"
#include "dinomx/optim.hpp"
#include "dinomx/parallel.hpp"

namespace dinomx {

/// theta_t <- m theta_t + (1 - m) theta_s for every tensor. Name sets must match.
void ema_update(ParameterSet& teacher, const ParameterSet& student, double m);

struct LogRecord {
  LossBreakdown loss;
  double lr = 0.0;
  double weight_decay = 0.0;
  double momentum = 0.0;
  int batch_size = 0;
  std::int64_t iteration = 0;
  std::int64_t max_iterations = 0;
  int worker = 0;
  double memory_used_gb = 0.0;
  double memory_total_gb = 0.0;
};

std::string format_log_line(const LogRecord& r);
/// "YYYY-MM-DD HH:MM:SS,mmm - dino_trainer_rank{r} - INFO - " in local time.
std::string log_prefix(std::chrono::system_clock::time_point when, int rank);

/// Output tree of one run.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path samples() const { return root / "samples"; }
  std::filesystem::path results() const { return root / "results"; }
  std::filesystem::path logs() const { return root / "logs"; }

  enum class Mode { fresh, force, reuse };
  /// fresh: `root` must not exist (or be empty). force: an existing tree is
  /// replaced. reuse: an existing tree is kept (resume).
  static RunLayout create(const std::filesystem::path& root, Mode mode);
};

struct StepRecord {
  std::int64_t iteration = 0;
  LossBreakdown loss;
  double lr = 0.0;
  double weight_decay = 0.0;
  double momentum = 0.0;
  double teacher_entropy = 0.0;  // entropy of the batch-mean teacher distribution
  std::string log_line;          // without the timestamp prefix
};

struct TrainerOptions {
  /// Reuse the first global batch (same images, same views) at every step.
  bool fixed_batch = false;
  /// When set, log lines go to logs/train.log and checkpoints to checkpoints/.
  std::optional<RunLayout> layout;
  bool echo = false;  // also print log lines to stdout
  /// Replaces the teacher that load_teacher would build (distillation only).
  std::optional<TeacherSpec> teacher;
};

/// Static model structure shared by all replicas.
struct ModelSetup {
  BackboneSpec student_spec;
  BackboneSpec teacher_spec;
  HeadConfig head;
  HeadConfig teacher_head;
  std::optional<HeadConfig> ibot_head;  // separate iBOT head
  bool distillation = false;
  bool ibot = false;
  TeacherViews teacher_views = TeacherViews::global;
  TrainableSet trainable;
  TrainableSet teacher_trainable;  // distillation: teacher-head tensors the shadow cannot drive
  std::uint64_t teacher_hash = 0;  // distillation: frozen backbone hash
};

/// One worker's copy of the training state.
struct Replica {
  ParameterSet student;
  ParameterSet teacher;
  ParameterSet shadow;  // distillation: EMA of the student
  AdamState optim;
  AdamState teacher_optim;
  DinoLossState dino;
  std::optional<DinoLossState> ibot;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, AccelConfig accel, TrainingData data, TrainerOptions opts = {});
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Runs iteration next_iteration() on every worker.
  StepRecord step();
  /// Steps until next_iteration() == until (default: max_iterations).
  std::vector<StepRecord> run(std::optional<std::int64_t> until = std::nullopt);

  std::int64_t next_iteration() const { return next_; }
  const TrainConfig& config() const { return cfg_; }
  const AccelConfig& accel() const { return accel_; }
  const ModelSetup& setup() const { return setup_; }
  const Replica& replica(int worker = 0) const { return replicas_.at(worker); }
  const ShardLayout* shard_layout() const { return shards_ ? &*shards_ : nullptr; }
  const TrainingData& data() const { return data_; }

  /// Writes checkpoints/iter_NNNNNN under `dir` semantics: the bundle holds
  /// the state after iteration next_iteration() - 1.
  std::filesystem::path save_checkpoint(const std::filesystem::path& dir) const;
  void resume(const std::filesystem::path& bundle);

  double memory_used_gb() const;

 private:
  struct WorkerResult;
  struct Batch;

  void init_state();
  Batch build_batch(int worker, std::int64_t t) const;
  WorkerResult run_worker(int worker, std::int64_t t);
  void write_samples();
  void emit_log(const std::string& line);

  TrainConfig cfg_;
  AccelConfig accel_;
  TrainingData data_;
  TrainerOptions opts_;
  ModelSetup setup_;
  std::vector<Replica> replicas_;
  std::optional<ShardLayout> shards_;
  std::unique_ptr<Reducer> reducer_;
  std::int64_t next_ = 0;
  int local_batch_ = 0;
  double memory_total_gb_ = 0.0;
  bool samples_written_ = false;
};

/// One distillation iteration; requires a trainer configured with do_distillation.
StepRecord distill_step(Trainer& trainer);

/// Checkpoint directory name for a completed iteration, e.g. iter_000250.
std::string checkpoint_name(std::int64_t iteration);

}  // namespace dinomx
