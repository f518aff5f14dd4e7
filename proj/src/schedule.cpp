#include "dinomx/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dinomx {

void ScheduleConfig::validate() const {
  if (max_iterations < 1) throw std::invalid_argument("max_iterations must be >= 1");
  if (warmup_iterations < 0 || warmup_iterations >= max_iterations) {
    throw std::invalid_argument("warmup_iterations must lie in [0, max_iterations)");
  }
  if (!(min_lr > 0.0 && min_lr <= lr)) throw std::invalid_argument("learning rates must satisfy 0 < min_lr <= lr");
  if (!(momentum_teacher > 0.0 && momentum_teacher < 1.0)) throw std::invalid_argument("momentum_teacher must be in (0,1)");
  if (weight_decay < 0.0 || weight_decay_end < 0.0) throw std::invalid_argument("weight decay must be >= 0");
}

double lr_at(std::int64_t t, const ScheduleConfig& cfg) {
  const auto w = cfg.warmup_iterations;
  if (t < w) return cfg.lr * static_cast<double>(t) / static_cast<double>(w);
  const double frac = static_cast<double>(t - w) / static_cast<double>(cfg.max_iterations - w);
  return cfg.lr - (cfg.lr - cfg.min_lr) * (1.0 - std::cos(std::numbers::pi * frac)) / 2.0;
}

double weight_decay_at(std::int64_t t, const ScheduleConfig& cfg) {
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.max_iterations);
  return cfg.weight_decay + (cfg.weight_decay_end - cfg.weight_decay) * (1.0 - std::cos(std::numbers::pi * frac)) / 2.0;
}

double teacher_momentum_at(std::int64_t t, const ScheduleConfig& cfg) {
  const double frac = static_cast<double>(t) / static_cast<double>(cfg.max_iterations);
  return cfg.momentum_teacher + (1.0 - cfg.momentum_teacher) * (1.0 - std::cos(std::numbers::pi * frac)) / 2.0;
}

}  // namespace dinomx
