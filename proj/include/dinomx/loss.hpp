#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dinomx/matrix.hpp"
#include "dinomx/rng.hpp"

namespace dinomx {

/// Centering + sharpening state for one teacher output space.
struct DinoLossState {
  Tensor center;  // [K]
  double center_momentum = 0.9;
  double student_temp = 0.1;
  double warmup_teacher_temp = 0.04;
  double teacher_temp = 0.04;
  std::int64_t warmup_teacher_temp_iterations = 0;

  static DinoLossState with_dim(int out_dim);
  void validate() const;
};

struct IbotConfig {
  double loss_weight = 0.0;
  double mask_sample_probability = 0.5;
  double mask_ratio_min = 0.1;
  double mask_ratio_max = 0.5;
  bool separate_head = false;
  int out_dim = 1024;
  bool norm_last_layer = true;

  void validate() const;
  bool operator==(const IbotConfig&) const = default;
};

struct LossBreakdown {
  double total = 0.0;
  double local_dino = 0.0;
  double global_dino = 0.0;
  double ibot = 0.0;

  /// total = dino_weight * (local + global) + ibot_weight * ibot
  static LossBreakdown combine(double local_dino, double global_dino, double ibot, double dino_weight,
                               double ibot_weight);
};

double teacher_temp_at(std::int64_t iter, const DinoLossState& state);

/// softmax((logits - center) / teacher_temp_at(iter)), row-wise.
Matrix<float> teacher_probs(const Matrix<float>& logits, const DinoLossState& state, std::int64_t iter);
Tensor teacher_probs(const Tensor& logits, const DinoLossState& state, std::int64_t iter);

/// Cross-entropy -sum_k t_k log softmax(s / tau_s)_k for one pair.
double cross_entropy(std::span<const float> teacher_probs, std::span<const float> student_logits, double student_temp);

struct DinoLossResult {
  double global_dino = 0.0;
  double local_dino = 0.0;
  int global_pairs = 0;
  int local_pairs = 0;
  /// d(global_dino + local_dino) / d student_logits
  Matrix<float> d_student;
  /// d(global_dino + local_dino) / d teacher_logits, through the sharpened softmax (center held fixed)
  Matrix<float> d_teacher;
};

/// Student views are ordered globals first (`num_global` of them), then
/// locals. Teacher row i was computed on student view `teacher_view[i]`; every
/// (teacher row, student view) pair with differing view index contributes.
/// Pairs landing on a global student view average into global_dino, the rest
/// into local_dino.
DinoLossResult dino_loss(const Matrix<float>& teacher_logits, std::span<const int> teacher_view,
                         const Matrix<float>& student_logits, int num_global, const DinoLossState& state,
                         std::int64_t iter, bool want_grad = true, bool want_teacher_grad = false);

/// c <- m c + (1 - m) * mean_row(batch_teacher_logits)
void update_center(DinoLossState& state, const Matrix<float>& batch_teacher_logits);
/// Same update given an already-reduced batch mean.
void update_center_with_mean(DinoLossState& state, std::span<const float> batch_mean);

/// Empty with probability 1 - p; otherwise ceil(ratio * num_patches) distinct
/// indices, ratio ~ U[min, max]. Returned sorted.
std::vector<int> sample_ibot_mask(Rng& rng, int num_patches, const IbotConfig& cfg);

struct IbotLossResult {
  double loss = 0.0;
  Matrix<float> d_student;  // rows aligned with the inputs
};

/// Mean CE over already-gathered masked rows; 0 for no rows.
IbotLossResult ibot_loss_rows(const Matrix<float>& teacher_rows, const Matrix<float>& student_rows,
                              const DinoLossState& state, std::int64_t iter, bool want_grad = true);

/// Full-grid form: logits are [num_patches, K]; only masked rows count.
double ibot_loss(const Matrix<float>& teacher_patch_logits, const Matrix<float>& student_patch_logits,
                 std::span<const int> mask, const DinoLossState& state, std::int64_t iter);

}  // namespace dinomx
