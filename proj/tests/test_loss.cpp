#include <doctest.h>

#include <cmath>
#include <vector>

#include "dinomx/loss.hpp"
#include "support.hpp"

using namespace dinomx;

namespace {

DinoLossState state_k(int k, double tt = 0.04) {
  DinoLossState s = DinoLossState::with_dim(k);
  s.teacher_temp = s.warmup_teacher_temp = tt;
  return s;
}

Matrix<float> random_logits(int rows, int k, Rng& rng, double scale = 1.0) {
  Matrix<float> m(rows, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, scale));
  return m;
}

}  // namespace

TEST_CASE("teacher temperature schedule") {
  DinoLossState s = state_k(4);
  for (std::int64_t t : {0, 1, 250, 10000}) CHECK(teacher_temp_at(t, s) == doctest::Approx(0.04));
  s.warmup_teacher_temp = 0.02;
  s.teacher_temp = 0.04;
  s.warmup_teacher_temp_iterations = 500;
  CHECK(teacher_temp_at(0, s) == doctest::Approx(0.02));
  CHECK(teacher_temp_at(250, s) == doctest::Approx(0.03).epsilon(1e-12));
  CHECK(teacher_temp_at(500, s) == 0.04);
  CHECK(teacher_temp_at(9000, s) == 0.04);
}

TEST_CASE("teacher probabilities") {
  DinoLossState s = state_k(2, 1.0);
  Tensor p = teacher_probs(Tensor({2}, {0.0f, 0.0f}), s, 0);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));

  s.center = Tensor({2}, {0.7f, -1.3f});
  p = teacher_probs(Tensor({2}, {0.7f, -1.3f}), s, 0);
  CHECK(p[0] == doctest::Approx(0.5));

  DinoLossState sharp = state_k(2, 0.04);
  p = teacher_probs(Tensor({2}, {1.0f, 0.0f}), sharp, 0);
  const double expect = 1.0 / (1.0 + std::exp(-25.0));
  CHECK(std::abs(p[0] - expect) < 1e-7);  // float storage bounds this check
  CHECK(static_cast<double>(p[0]) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("teacher probabilities are distributions; centering is a shift") {
  Rng rng(3);
  DinoLossState s = state_k(64);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix<float> logits = random_logits(3, 64, rng, trial % 2 ? 10.0 : 0.1);
    for (int k = 0; k < 64; ++k) s.center[k] = static_cast<float>(rng.normal(0.0, 1.0));
    Matrix<float> p = teacher_probs(logits, s, 0);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      CHECK(p.row(r).minCoeff() >= 0.0f);
      CHECK(std::abs(p.row(r).cast<double>().sum() - 1.0) < 1e-6);
    }
    DinoLossState zero = s;
    zero.center = Tensor({64}, 0.0f);
    Matrix<float> shifted = logits.rowwise() - as_row(s.center);
    CHECK((teacher_probs(shifted, zero, 0) - p).cwiseAbs().maxCoeff() == 0.0f);
  }
}

TEST_CASE("sharpening raises the peak") {
  Rng rng(4);
  Matrix<float> logits = random_logits(1, 16, rng);
  float prev = 0.0f;
  for (double tt : {1.0, 0.5, 0.2, 0.1, 0.05}) {
    const float peak = teacher_probs(logits, state_k(16, tt), 0).maxCoeff();
    CHECK(peak > prev);
    prev = peak;
  }
}

TEST_CASE("cross entropy examples") {
  const std::vector<float> onehot{1, 0, 0, 0};
  const std::vector<float> flat(4, 0.0f);
  CHECK(cross_entropy(onehot, flat, 0.1) == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  // Student equal to teacher gives the teacher entropy, and that is the minimum.
  Rng rng(5);
  std::vector<float> s(8);
  for (float& v : s) v = static_cast<float>(rng.normal(0.0, 0.3));
  const double tau = 0.1;
  std::vector<float> t(8);
  double z = 0.0;
  for (std::size_t k = 0; k < 8; ++k) z += std::exp(s[k] / tau);
  double entropy = 0.0;
  for (std::size_t k = 0; k < 8; ++k) {
    t[k] = static_cast<float>(std::exp(s[k] / tau) / z);
    entropy -= t[k] * std::log(t[k]);
  }
  const double at_match = cross_entropy(t, s, tau);
  CHECK(at_match == doctest::Approx(entropy).epsilon(1e-5));
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> other = s;
    for (float& v : other) v += static_cast<float>(rng.normal(0.0, 0.05));
    CHECK(cross_entropy(t, other, tau) >= at_match - 1e-6);
  }
}

TEST_CASE("dino loss pair counts and nonnegativity") {
  Rng rng(6);
  const int K = 32;
  Matrix<float> teacher = random_logits(2, K, rng);
  Matrix<float> student = random_logits(10, K, rng);
  const std::vector<int> tv{0, 1};
  DinoLossResult r = dino_loss(teacher, tv, student, 2, state_k(K), 0);
  CHECK(r.global_pairs == 2);
  CHECK(r.local_pairs == 16);
  CHECK(r.global_dino >= 0.0);
  CHECK(r.local_dino >= 0.0);

  CHECK_THROWS(dino_loss(teacher, std::vector<int>{0}, student, 2, state_k(K), 0));
  CHECK_THROWS(dino_loss(teacher, tv, random_logits(10, K + 1, rng), 2, state_k(K), 0));
}

TEST_CASE("dino loss matches a direct pair enumeration") {
  Rng rng(7);
  const int K = 12;
  DinoLossState s = state_k(K);
  for (int k = 0; k < K; ++k) s.center[k] = static_cast<float>(rng.normal(0.0, 0.2));
  Matrix<float> teacher = random_logits(2, K, rng);
  Matrix<float> student = random_logits(5, K, rng);
  const std::vector<int> tv{0, 1};
  DinoLossResult r = dino_loss(teacher, tv, student, 2, s, 0);

  Matrix<float> t = teacher_probs(teacher, s, 0);
  double g = 0.0, l = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 5; ++j) {
      if (j == i) continue;
      double z = 0.0;
      for (int k = 0; k < K; ++k) z += std::exp(student(j, k) / 0.1);
      double ce = 0.0;
      for (int k = 0; k < K; ++k) ce -= t(i, k) * (student(j, k) / 0.1 - std::log(z));
      (j < 2 ? g : l) += ce;
    }
  }
  CHECK(r.global_dino == doctest::Approx(g / 2.0).epsilon(1e-6));
  CHECK(r.local_dino == doctest::Approx(l / 6.0).epsilon(1e-6));
}

TEST_CASE("dino loss gradient matches finite differences") {
  Rng rng(8);
  const int K = 10;
  DinoLossState s = state_k(K);
  Matrix<float> teacher = random_logits(2, K, rng);
  Matrix<float> student = random_logits(4, K, rng, 0.3);
  const std::vector<int> tv{0, 1};
  DinoLossResult r = dino_loss(teacher, tv, student, 2, s, 0);
  const float h = 1e-3f;
  for (int j = 0; j < 4; ++j) {
    for (int k = 0; k < K; ++k) {
      Matrix<float> p = student, m = student;
      p(j, k) += h;
      m(j, k) -= h;
      const DinoLossResult rp = dino_loss(teacher, tv, p, 2, s, 0, false);
      const DinoLossResult rm = dino_loss(teacher, tv, m, 2, s, 0, false);
      const double num = ((rp.global_dino + rp.local_dino) - (rm.global_dino + rm.local_dino)) /
                         (static_cast<double>(p(j, k)) - m(j, k));
      CHECK(r.d_student(j, k) == doctest::Approx(num).epsilon(2e-3).scale(1e-2));
    }
  }
}

TEST_CASE("dino loss teacher-side gradient matches finite differences") {
  Rng rng(12);
  const int K = 7;
  DinoLossState s = state_k(K, 0.2);
  s.center = Tensor({K}, std::vector<float>{0.1f, -0.2f, 0.0f, 0.3f, 0.05f, -0.1f, 0.2f});
  const Matrix<float> teacher = random_logits(3, K, rng);
  const Matrix<float> student = random_logits(5, K, rng, 0.3);
  const std::vector<int> tv{0, 1, 3};
  const DinoLossResult r = dino_loss(teacher, tv, student, 2, s, 0, false, true);
  REQUIRE(r.d_teacher.rows() == 3);
  for (int i = 0; i < 3; ++i) {
    double row_sum = 0.0;
    for (int k = 0; k < K; ++k) {
      row_sum += r.d_teacher(i, k);
      Matrix<float> p = teacher, m = teacher;
      p(i, k) += 1e-2f;
      m(i, k) -= 1e-2f;
      const DinoLossResult rp = dino_loss(p, tv, student, 2, s, 0, false);
      const DinoLossResult rm = dino_loss(m, tv, student, 2, s, 0, false);
      const double num = ((rp.global_dino + rp.local_dino) - (rm.global_dino + rm.local_dino)) /
                         (static_cast<double>(p(i, k)) - m(i, k));
      CHECK(std::abs(r.d_teacher(i, k) - num) <= 1e-4 + 1e-2 * std::abs(num));
    }
    CHECK(std::abs(row_sum) <= 1e-5);  // a shift of a row leaves its softmax unchanged
  }
  CHECK(dino_loss(teacher, tv, student, 2, s, 0).d_teacher.size() == 0);
}

TEST_CASE("center update") {
  DinoLossState s = state_k(3);
  Matrix<float> ones = Matrix<float>::Ones(4, 3);
  s.center_momentum = 0.9;
  update_center(s, ones);
  for (int k = 0; k < 3; ++k) CHECK(s.center[k] == doctest::Approx(0.1));

  s.center_momentum = 0.0;
  Matrix<float> batch(2, 3);
  batch << 1, 2, 3, 3, 4, 5;
  update_center(s, batch);
  CHECK(s.center[0] == 2.0f);
  CHECK(s.center[2] == 4.0f);

  // m = 1 is outside the validated range but the arithmetic still holds.
  s.center_momentum = 1.0;
  update_center(s, ones * 7.0f);
  CHECK(s.center[1] == 3.0f);

  CHECK_THROWS(update_center(s, Matrix<float>(0, 3)));
}

TEST_CASE("loss state validation") {
  DinoLossState s = state_k(4);
  CHECK_NOTHROW(s.validate());
  s.student_temp = 0.0;
  CHECK_THROWS(s.validate());
  s = state_k(4);
  s.center_momentum = 1.0;
  CHECK_THROWS(s.validate());
  IbotConfig c;
  c.mask_ratio_min = 0.6;
  c.mask_ratio_max = 0.4;
  CHECK_THROWS(c.validate());
}

TEST_CASE("iBOT mask sampling") {
  Rng rng(9);
  IbotConfig off;
  off.mask_sample_probability = 0.0;
  for (int i = 0; i < 100; ++i) CHECK(sample_ibot_mask(rng, 64, off).empty());

  IbotConfig half;
  half.mask_sample_probability = 1.0;
  half.mask_ratio_min = half.mask_ratio_max = 0.5;
  for (int i = 0; i < 20; ++i) CHECK(sample_ibot_mask(rng, 64, half).size() == 32);

  IbotConfig defaults;  // probability 0.5, ratio [0.1, 0.5]
  int nonempty = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto m = sample_ibot_mask(rng, 64, defaults);
    if (m.empty()) continue;
    ++nonempty;
    const double frac = static_cast<double>(m.size()) / 64.0;
    CHECK(frac >= 0.1);
    CHECK(frac <= 0.5 + 1.0 / 64.0);  // ceil rounding
    CHECK(std::is_sorted(m.begin(), m.end()));
    CHECK(std::adjacent_find(m.begin(), m.end()) == m.end());
  }
  CHECK(nonempty / 10000.0 == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("iBOT loss examples") {
  DinoLossState s = state_k(1024);
  Matrix<float> t = Matrix<float>::Zero(3, 1024);
  t(1, 5) = 1000.0f;  // effectively one-hot after sharpening
  Matrix<float> st = Matrix<float>::Zero(3, 1024);
  CHECK(ibot_loss(t, st, std::vector<int>{}, s, 0) == 0.0);
  CHECK(ibot_loss(t, st, std::vector<int>{1}, s, 0) == doctest::Approx(std::log(1024.0)).epsilon(1e-6));
  CHECK_THROWS(ibot_loss(t, st, std::vector<int>{3}, s, 0));

  const LossBreakdown b = LossBreakdown::combine(1.5, 0.25, 9.0, 1.0, 0.0);
  CHECK(b.total == 1.75);
  const LossBreakdown c = LossBreakdown::combine(9.8890, 1.2194, 2.0, 1.0, 0.5);
  CHECK(std::abs(c.total - (9.8890 + 1.2194 + 1.0)) < 1e-6);
}

TEST_CASE("iBOT gradient matches finite differences") {
  Rng rng(10);
  const int K = 8;
  DinoLossState s = state_k(K);
  Matrix<float> t = random_logits(3, K, rng);
  Matrix<float> st = random_logits(3, K, rng, 0.3);
  IbotLossResult r = ibot_loss_rows(t, st, s, 0);
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < K; ++k) {
      Matrix<float> p = st, m = st;
      p(i, k) += 1e-3f;
      m(i, k) -= 1e-3f;
      const double num = (ibot_loss_rows(t, p, s, 0, false).loss - ibot_loss_rows(t, m, s, 0, false).loss) /
                         (static_cast<double>(p(i, k)) - m(i, k));
      CHECK(r.d_student(i, k) == doctest::Approx(num).epsilon(2e-3).scale(1e-2));
    }
  }
}
