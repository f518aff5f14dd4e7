#include "dinomx/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dinomx {

DinoLossState DinoLossState::with_dim(int out_dim) {
  DinoLossState s;
  s.center = Tensor({out_dim}, 0.0f);
  return s;
}

void DinoLossState::validate() const {
  if (!(student_temp > 0.0)) throw std::invalid_argument("student_temp must be > 0");
  if (!(teacher_temp > 0.0) || !(warmup_teacher_temp > 0.0)) throw std::invalid_argument("teacher_temp must be > 0");
  if (!(center_momentum >= 0.0 && center_momentum < 1.0)) throw std::invalid_argument("center_momentum must be in [0,1)");
  if (warmup_teacher_temp_iterations < 0) throw std::invalid_argument("warmup_teacher_temp_iterations must be >= 0");
}

void IbotConfig::validate() const {
  if (!(mask_sample_probability >= 0.0 && mask_sample_probability <= 1.0)) {
    throw std::invalid_argument("ibot.mask_sample_probability must be in [0,1]");
  }
  if (!(mask_ratio_min >= 0.0 && mask_ratio_min <= mask_ratio_max && mask_ratio_max <= 1.0)) {
    throw std::invalid_argument("ibot.mask_ratio_min_max must satisfy 0 <= min <= max <= 1");
  }
  if (loss_weight < 0.0) throw std::invalid_argument("ibot.loss_weight must be >= 0");
  if (out_dim < 1) throw std::invalid_argument("ibot.out_dim must be >= 1");
}

LossBreakdown LossBreakdown::combine(double local_dino, double global_dino, double ibot, double dino_weight,
                                     double ibot_weight) {
  LossBreakdown b;
  b.local_dino = local_dino;
  b.global_dino = global_dino;
  b.ibot = ibot;
  b.total = dino_weight * (local_dino + global_dino) + ibot_weight * ibot;
  return b;
}

double teacher_temp_at(std::int64_t iter, const DinoLossState& s) {
  if (iter >= s.warmup_teacher_temp_iterations) return s.teacher_temp;
  const double frac = static_cast<double>(iter) / static_cast<double>(s.warmup_teacher_temp_iterations);
  return s.warmup_teacher_temp + (s.teacher_temp - s.warmup_teacher_temp) * frac;
}

Matrix<float> teacher_probs(const Matrix<float>& logits, const DinoLossState& state, std::int64_t iter) {
  if (logits.cols() != static_cast<Eigen::Index>(state.center.numel())) {
    throw std::invalid_argument("teacher logits width does not match the center");
  }
  const double inv_temp = 1.0 / teacher_temp_at(iter, state);
  Matrix<float> out(logits.rows(), logits.cols());
  const auto c = as_row(state.center);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Matrix<double, 1, Eigen::Dynamic> z = ((logits.row(r) - c).cast<double>()) * inv_temp;
    z.array() -= z.maxCoeff();
    z = z.array().exp().matrix();
    z /= z.sum();
    out.row(r) = z.cast<float>();
  }
  return out;
}

Tensor teacher_probs(const Tensor& logits, const DinoLossState& state, std::int64_t iter) {
  Matrix<float> row = as_row(logits);
  Matrix<float> p = teacher_probs(row, state, iter);
  return Tensor(logits.shape(), std::vector<float>(p.data(), p.data() + p.size()));
}

namespace {

/// CE for one pair; optionally accumulates scale * dCE/ds into grad and scale * -log q into neg_logq.
double pair_ce(const float* t, const float* s, Eigen::Index K, double inv_temp, float* grad, double scale,
               double* neg_logq = nullptr) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < K; ++k) mx = std::max(mx, s[k] * inv_temp);
  double sum = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) sum += std::exp(s[k] * inv_temp - mx);
  const double log_z = mx + std::log(sum);
  double ce = 0.0;
  for (Eigen::Index k = 0; k < K; ++k) {
    if (t[k] != 0.0f) ce -= t[k] * (s[k] * inv_temp - log_z);
  }
  if (grad) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const double p = std::exp(s[k] * inv_temp - log_z);
      grad[k] += static_cast<float>(scale * (p - t[k]) * inv_temp);
    }
  }
  if (neg_logq) {
    for (Eigen::Index k = 0; k < K; ++k) neg_logq[k] -= scale * (s[k] * inv_temp - log_z);
  }
  return ce;
}

}  // namespace

double cross_entropy(std::span<const float> teacher, std::span<const float> student_logits, double student_temp) {
  if (teacher.size() != student_logits.size()) throw std::invalid_argument("cross_entropy length mismatch");
  return pair_ce(teacher.data(), student_logits.data(), static_cast<Eigen::Index>(teacher.size()), 1.0 / student_temp,
                 nullptr, 0.0);
}

DinoLossResult dino_loss(const Matrix<float>& teacher_logits, std::span<const int> teacher_view,
                         const Matrix<float>& student_logits, int num_global, const DinoLossState& state,
                         std::int64_t iter, bool want_grad, bool want_teacher_grad) {
  if (static_cast<std::size_t>(teacher_logits.rows()) != teacher_view.size()) {
    throw std::invalid_argument("teacher view count mismatch");
  }
  if (teacher_logits.cols() != student_logits.cols()) throw std::invalid_argument("teacher/student K mismatch");
  if (num_global < 0 || num_global > student_logits.rows()) throw std::invalid_argument("bad global view count");
  for (int v : teacher_view) {
    if (v < 0 || v >= student_logits.rows()) throw std::invalid_argument("teacher view index out of range");
  }
  const Matrix<float> t = teacher_probs(teacher_logits, state, iter);
  const Eigen::Index K = student_logits.cols();
  const double inv_temp = 1.0 / state.student_temp;

  DinoLossResult res;
  for (std::size_t i = 0; i < teacher_view.size(); ++i) {
    for (Eigen::Index j = 0; j < student_logits.rows(); ++j) {
      if (j == teacher_view[i]) continue;
      (j < num_global ? res.global_pairs : res.local_pairs) += 1;
    }
  }
  if (want_grad) res.d_student = Matrix<float>::Zero(student_logits.rows(), K);
  const double gw = res.global_pairs ? 1.0 / res.global_pairs : 0.0;
  const double lw = res.local_pairs ? 1.0 / res.local_pairs : 0.0;
  if (want_teacher_grad) res.d_teacher = Matrix<float>::Zero(teacher_logits.rows(), K);
  std::vector<double> a(want_teacher_grad ? static_cast<std::size_t>(K) : 0);
  for (std::size_t i = 0; i < teacher_view.size(); ++i) {
    std::fill(a.begin(), a.end(), 0.0);
    for (Eigen::Index j = 0; j < student_logits.rows(); ++j) {
      if (j == teacher_view[i]) continue;
      const bool global = j < num_global;
      const double w = global ? gw : lw;
      float* grad = want_grad ? res.d_student.row(j).data() : nullptr;
      const double ce = pair_ce(t.row(static_cast<Eigen::Index>(i)).data(), student_logits.row(j).data(), K, inv_temp,
                                grad, w, want_teacher_grad ? a.data() : nullptr);
      (global ? res.global_dino : res.local_dino) += w * ce;
    }
    if (want_teacher_grad) {
      // Softmax Jacobian of the sharpened target: dL/dl = p * (a - <p, a>) / tau_t.
      const float* p = t.row(static_cast<Eigen::Index>(i)).data();
      double pa = 0.0;
      for (Eigen::Index k = 0; k < K; ++k) pa += p[k] * a[static_cast<std::size_t>(k)];
      const double inv_tt = 1.0 / teacher_temp_at(iter, state);
      float* dt = res.d_teacher.row(static_cast<Eigen::Index>(i)).data();
      for (Eigen::Index k = 0; k < K; ++k) dt[k] = static_cast<float>(inv_tt * p[k] * (a[static_cast<std::size_t>(k)] - pa));
    }
  }
  return res;
}

void update_center_with_mean(DinoLossState& state, std::span<const float> batch_mean) {
  if (batch_mean.size() != state.center.numel()) throw std::invalid_argument("center width mismatch");
  const double m = state.center_momentum;
  for (std::size_t k = 0; k < batch_mean.size(); ++k) {
    state.center[k] = static_cast<float>(m * state.center[k] + (1.0 - m) * batch_mean[k]);
  }
}

void update_center(DinoLossState& state, const Matrix<float>& batch_teacher_logits) {
  if (batch_teacher_logits.rows() == 0) throw std::invalid_argument("update_center needs a nonempty batch");
  Eigen::Matrix<double, 1, Eigen::Dynamic> mean = batch_teacher_logits.cast<double>().colwise().mean();
  std::vector<float> m(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) m[k] = static_cast<float>(mean(k));
  update_center_with_mean(state, m);
}

std::vector<int> sample_ibot_mask(Rng& rng, int num_patches, const IbotConfig& cfg) {
  if (num_patches < 1) throw std::invalid_argument("sample_ibot_mask needs at least one patch");
  if (!rng.bernoulli(cfg.mask_sample_probability)) return {};
  const double ratio = cfg.mask_ratio_min == cfg.mask_ratio_max ? cfg.mask_ratio_min
                                                                  : rng.uniform(cfg.mask_ratio_min, cfg.mask_ratio_max);
  const int count = std::min(num_patches, static_cast<int>(std::ceil(ratio * num_patches - 1e-9)));
  std::vector<int> idx(num_patches);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < count; ++i) {
    const auto j = rng.uniform_int(i, num_patches - 1);
    std::swap(idx[i], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

IbotLossResult ibot_loss_rows(const Matrix<float>& teacher_rows, const Matrix<float>& student_rows,
                              const DinoLossState& state, std::int64_t iter, bool want_grad) {
  if (teacher_rows.rows() != student_rows.rows() || teacher_rows.cols() != student_rows.cols()) {
    throw std::invalid_argument("ibot teacher/student shape mismatch");
  }
  IbotLossResult res;
  const Eigen::Index M = student_rows.rows();
  if (want_grad) res.d_student = Matrix<float>::Zero(M, student_rows.cols());
  if (M == 0) return res;
  const Matrix<float> t = teacher_probs(teacher_rows, state, iter);
  const double w = 1.0 / static_cast<double>(M);
  const double inv_temp = 1.0 / state.student_temp;
  for (Eigen::Index r = 0; r < M; ++r) {
    float* grad = want_grad ? res.d_student.row(r).data() : nullptr;
    res.loss += w * pair_ce(t.row(r).data(), student_rows.row(r).data(), student_rows.cols(), inv_temp, grad, w);
  }
  return res;
}

double ibot_loss(const Matrix<float>& teacher_patch_logits, const Matrix<float>& student_patch_logits,
                 std::span<const int> mask, const DinoLossState& state, std::int64_t iter) {
  if (teacher_patch_logits.rows() != student_patch_logits.rows()) throw std::invalid_argument("patch grid mismatch");
  Matrix<float> t(static_cast<Eigen::Index>(mask.size()), teacher_patch_logits.cols());
  Matrix<float> s(static_cast<Eigen::Index>(mask.size()), student_patch_logits.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] >= teacher_patch_logits.rows()) {
      throw std::out_of_range("ibot mask index " + std::to_string(mask[i]) + " out of range");
    }
    t.row(static_cast<Eigen::Index>(i)) = teacher_patch_logits.row(mask[i]);
    s.row(static_cast<Eigen::Index>(i)) = student_patch_logits.row(mask[i]);
  }
  return ibot_loss_rows(t, s, state, iter, false).loss;
}

}  // namespace dinomx
