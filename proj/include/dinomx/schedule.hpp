#pragma once

#include <cstdint>

namespace dinomx {

struct ScheduleConfig {
  std::int64_t max_iterations = 2000;
  std::int64_t warmup_iterations = 1000;
  double lr = 1e-4;
  double min_lr = 1e-5;
  double weight_decay = 0.04;
  double weight_decay_end = 0.4;
  double momentum_teacher = 0.996;

  void validate() const;
};

/// Linear warmup 0 -> lr, then cosine lr -> min_lr.
double lr_at(std::int64_t t, const ScheduleConfig& cfg);
/// Cosine ramp weight_decay -> weight_decay_end over [0, T).
double weight_decay_at(std::int64_t t, const ScheduleConfig& cfg);
/// Cosine ramp m0 -> 1.
double teacher_momentum_at(std::int64_t t, const ScheduleConfig& cfg);

}  // namespace dinomx
