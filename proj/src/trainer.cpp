#include "dinomx/trainer.hpp"

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <unistd.h>

#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include "dinomx/head.hpp"
#include "dinomx/peft.hpp"

namespace dinomx {

namespace {

constexpr std::uint64_t kInitKey = 0x1A17;
constexpr std::uint64_t kShuffleKey = 0x5A0F;
constexpr std::uint64_t kViewKey = 0x71E3;
constexpr std::uint64_t kMaskKey = 0x3A5C;
constexpr std::uint64_t kDropKey = 0xD509;

constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

Matrix<float> gather_rows(const Matrix<float>& m, const std::vector<Eigen::Index>& rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

void add_column_sums(const Matrix<float>& m, Eigen::Index rows, std::vector<double>& out, std::size_t offset) {
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) out[offset + static_cast<std::size_t>(k)] += m(r, k);
  }
}

}  // namespace

void ema_update(ParameterSet& teacher, const ParameterSet& student, double m) {
  if (teacher.size() != student.size()) throw std::invalid_argument("ema_update: parameter name sets differ");
  for (auto& [name, t] : teacher) {
    auto it = student.find(name);
    if (it == student.end()) throw std::invalid_argument("ema_update: student has no '" + name + "'");
    if (it->second.shape() != t.shape()) throw std::invalid_argument("ema_update: shape mismatch for '" + name + "'");
    if (m == 1.0) continue;
    if (m == 0.0) {
      t = it->second;
      continue;
    }
    float* td = t.data().data();
    const float* sd = it->second.data().data();
    const double step = 1.0 - m;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      td[i] = static_cast<float>(td[i] + step * (static_cast<double>(sd[i]) - td[i]));
    }
  }
}

std::string format_log_line(const LogRecord& r) {
  return fmt::format(
      "Total Loss: {:.4f} Local DINO: {:.4f} Global DINO: {:.4f} iBOT: {:.4f} LR: {:.6f} Weight Decay: {:.6f} "
      "Teacher momentum: {:.6f} Current Batch Size: {} Iteration: {}/{} Worker ID: {} Memory: {:.2f}/{:.2f}",
      r.loss.total, r.loss.local_dino, r.loss.global_dino, r.loss.ibot, r.lr, r.weight_decay, r.momentum,
      r.batch_size, r.iteration, r.max_iterations, r.worker, r.memory_used_gb, r.memory_total_gb);
}

std::string log_prefix(std::chrono::system_clock::time_point when, int rank) {
  const std::time_t secs = std::chrono::system_clock::to_time_t(when);
  std::tm tm{};
  localtime_r(&secs, &tm);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(when.time_since_epoch()).count() % 1000;
  return fmt::format("{:%Y-%m-%d %H:%M:%S},{:03d} - dino_trainer_rank{} - INFO - ", tm, ms, rank);
}

RunLayout RunLayout::create(const std::filesystem::path& root, Mode mode) {
  namespace fs = std::filesystem;
  RunLayout layout{root};
  const bool exists = fs::exists(root);
  if (exists && mode == Mode::reuse) {
    for (const auto& d : {layout.checkpoints(), layout.samples(), layout.results(), layout.logs()}) {
      fs::create_directories(d);
    }
    return layout;
  }
  if (exists && !fs::is_empty(root)) {
    if (mode != Mode::force) {
      throw std::runtime_error("run directory " + root.string() + " already exists (use --force or --resume-from)");
    }
    fs::remove_all(root);
  } else if (exists) {
    fs::remove(root);
  }
  // Build the tree beside the target, then move it into place in one rename.
  fs::path tmp = root;
  tmp += ".tmp-" + std::to_string(::getpid());
  fs::remove_all(tmp);
  for (const char* sub : {"checkpoints", "samples", "results", "logs"}) fs::create_directories(tmp / sub);
  if (!root.parent_path().empty()) fs::create_directories(root.parent_path());
  fs::rename(tmp, root);
  return layout;
}

std::string checkpoint_name(std::int64_t iteration) { return fmt::format("iter_{:06d}", iteration); }

struct Trainer::Batch {
  std::vector<std::int64_t> positions;
  std::vector<Tensor> globals;       // [s * G + v]
  std::vector<Tensor> locals;        // ragged per sample, see local_offset
  std::vector<int> local_offset;     // size B + 1
  std::vector<std::vector<int>> masks;
  std::vector<std::uint64_t> global_drop;
  std::vector<std::uint64_t> local_drop;
};

struct Trainer::WorkerResult {
  LossBreakdown loss;
  double entropy = 0.0;
};

Trainer::Trainer(TrainConfig cfg, AccelConfig accel, TrainingData data, TrainerOptions opts)
    : cfg_(std::move(cfg)), accel_(std::move(accel)), data_(std::move(data)), opts_(std::move(opts)) {
  cfg_.validate();
  accel_.validate();
  data_.validate();
  const int workers = accel_.num_workers;
  if (cfg_.train.global_batch_size % workers != 0) {
    throw ConfigError("global_batch_size " + std::to_string(cfg_.train.global_batch_size) +
                      " is not divisible by num_workers " + std::to_string(workers));
  }
  local_batch_ = cfg_.train.global_batch_size / workers;
  ViTConfig vit = cfg_.vit();
  if (vit.in_channels == 0) vit.in_channels = data_.channels();
  if (vit.in_channels != data_.channels()) {
    throw ConfigError("model expects " + std::to_string(vit.in_channels) + " channel(s), data has " +
                      std::to_string(data_.channels()));
  }
  if (cfg_.dataset.normalization == NormalizeMode::standardize &&
      static_cast<int>(cfg_.dataset.mean.size()) != data_.channels()) {
    throw ConfigError("dataset.mean/std need one entry per image channel");
  }
  setup_.student_spec.vit = vit;
  setup_.head = cfg_.head_config(vit.embed_dim);
  setup_.ibot = cfg_.ibot_enabled();
  if (setup_.ibot && cfg_.ibot.separate_head) setup_.ibot_head = cfg_.ibot_head_config(vit.embed_dim);
  setup_.distillation = cfg_.train.do_distillation;
  setup_.teacher_views = cfg_.distillation.teacher_views;
  reducer_ = std::make_unique<Reducer>(workers);
  const double pages = static_cast<double>(::sysconf(_SC_PHYS_PAGES));
  const double page = static_cast<double>(::sysconf(_SC_PAGE_SIZE));
  memory_total_gb_ = pages > 0 && page > 0 ? pages * page / kGiB : 0.0;
  init_state();
}

Trainer::~Trainer() = default;

void Trainer::init_state() {
  Rng rng(derive_seed(cfg_.train.seed, {kInitKey}));
  const ViTConfig& vit = setup_.student_spec.vit;
  ParameterSet student = init_backbone(vit, rng);
  init_head(student, "head", setup_.head, rng);
  if (setup_.ibot_head) init_head(student, "ibot_head", *setup_.ibot_head, rng);
  if (cfg_.train.use_lora) inject_lora(student, setup_.student_spec, cfg_.lora, rng);

  TrainableSet trainable = freeze_backbone_layers(student, vit.depth, cfg_.train.freeze_backbone_layers);
  if (cfg_.train.use_lora) freeze_base_weights(trainable);
  if (setup_.head.norm_last_layer) trainable.erase("head.last.g");
  if (setup_.ibot_head && setup_.ibot_head->norm_last_layer) trainable.erase("ibot_head.last.g");
  setup_.trainable = std::move(trainable);

  Replica r;
  r.student = student;
  if (setup_.distillation) {
    TeacherSpec ts = opts_.teacher ? *opts_.teacher
                                   : load_teacher(cfg_.distillation, data_.channels(), cfg_.train.seed);
    if (ts.spec.vit.in_channels != vit.in_channels) throw ConfigError("teacher and student channel counts differ");
    setup_.teacher_spec = ts.spec;
    setup_.teacher_head = cfg_.head_config(ts.spec.vit.embed_dim);
    setup_.teacher_hash = ts.hash;
    r.teacher = std::move(ts.params);
    init_head(r.teacher, "head", setup_.teacher_head, rng);
    r.shadow = student;
    sync_teacher_head(r.teacher, r.shadow);
    for (const std::string& name : head_trainable_names("head", setup_.teacher_head)) {
      auto it = r.shadow.find(name);
      if (it == r.shadow.end() || it->second.shape() != r.teacher.at(name).shape()) setup_.teacher_trainable.insert(name);
    }
  } else {
    setup_.teacher_spec = setup_.student_spec;
    setup_.teacher_head = setup_.head;
    r.teacher = student;
  }
  r.dino = cfg_.dino_loss_state();
  if (setup_.ibot) r.ibot = cfg_.ibot_loss_state();
  replicas_.assign(static_cast<std::size_t>(accel_.num_workers), r);
  if (accel_.type == DistributionType::fsdp) shards_ = shard_states(student, setup_.trainable, accel_.num_workers);
  next_ = 0;
}

Trainer::Batch Trainer::build_batch(int worker, std::int64_t t) const {
  const auto& crops = cfg_.crops;
  const std::int64_t data_t = opts_.fixed_batch ? 0 : t;
  const auto n = static_cast<std::int64_t>(data_.size());
  const std::uint64_t seed = cfg_.train.seed;
  const AugmentationPolicy policy = cfg_.policy();
  const NormalizeParams norm{cfg_.dataset.mean, cfg_.dataset.std};
  const int grid = crops.global_crops_size / setup_.student_spec.vit.patch_size;
  IbotConfig mask_cfg = cfg_.ibot;

  std::map<std::int64_t, std::vector<std::size_t>> perms;
  auto index_of = [&](std::int64_t p) -> std::size_t {
    const std::int64_t epoch = p / n;
    const auto r = static_cast<std::size_t>(p % n);
    if (!cfg_.dataset.shuffle) return r;
    auto it = perms.find(epoch);
    if (it == perms.end()) {
      std::vector<std::size_t> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(derive_seed(seed, {kShuffleKey, static_cast<std::uint64_t>(epoch)}));
      std::shuffle(perm.begin(), perm.end(), rng.engine());
      it = perms.emplace(epoch, std::move(perm)).first;
    }
    return it->second[r];
  };

  Batch b;
  b.local_offset.push_back(0);
  for (int j = 0; j < local_batch_; ++j) {
    const std::int64_t p = data_t * cfg_.train.global_batch_size + static_cast<std::int64_t>(worker) * local_batch_ + j;
    const auto up = static_cast<std::uint64_t>(p);
    const std::size_t idx = index_of(p);
    b.positions.push_back(p);
    const RoiMask* roi = data_.rois[idx] ? &*data_.rois[idx] : nullptr;
    ViewSet vs = make_views(data_.images[idx], crops, policy, roi, derive_seed(seed, {kViewKey, up}));
    for (std::size_t v = 0; v < vs.global_views.size(); ++v) {
      b.globals.push_back(normalize(vs.global_views[v], cfg_.dataset.normalization, norm));
      b.global_drop.push_back(derive_seed(seed, {kDropKey, up, v}));
    }
    int count = 0;
    for (auto* group : {&vs.local_views, &vs.guided_views}) {
      for (const Tensor& view : *group) {
        b.locals.push_back(normalize(view, cfg_.dataset.normalization, norm));
        b.local_drop.push_back(derive_seed(seed, {kDropKey, up, 1000u + static_cast<std::uint64_t>(count)}));
        ++count;
      }
    }
    b.local_offset.push_back(b.local_offset.back() + count);
    if (setup_.ibot) {
      Rng mr(derive_seed(seed, {kMaskKey, up}));
      for (int v = 0; v < crops.global_crops_number; ++v) b.masks.push_back(sample_ibot_mask(mr, grid * grid, mask_cfg));
    }
  }
  return b;
}

Trainer::WorkerResult Trainer::run_worker(int worker, std::int64_t t) {
  Replica& rep = replicas_[static_cast<std::size_t>(worker)];
  const Batch b = build_batch(worker, t);
  const int workers = accel_.num_workers;
  const int B = local_batch_;
  const int G = cfg_.crops.global_crops_number;
  const int BG = B * G;
  const auto Lsum = static_cast<int>(b.locals.size());
  const int d = setup_.student_spec.vit.embed_dim;
  const int K = setup_.head.out_dim;
  const bool shared_ibot = setup_.ibot && !setup_.ibot_head;
  const bool dropout = cfg_.train.use_lora && cfg_.lora.dropout > 0.0;
  const double dino_w = cfg_.dino_head.loss_weight;
  const double ibot_w = cfg_.ibot.loss_weight;
  const TrainableSet& trainable = setup_.trainable;

  // Student forward over every view.
  ForwardOptions gopt;
  gopt.masks = b.masks;
  gopt.training = dropout;
  if (dropout) gopt.dropout_seeds = b.global_drop;
  EncoderTape gtape;
  const EncoderBatch<float> sg = encode<float>(rep.student, setup_.student_spec, b.globals, gopt, &gtape);
  EncoderTape ltape;
  EncoderBatch<float> sl;
  if (Lsum > 0) {
    ForwardOptions lopt;
    lopt.training = dropout;
    if (dropout) lopt.dropout_seeds = b.local_drop;
    sl = encode<float>(rep.student, setup_.student_spec, b.locals, lopt, &ltape);
  }

  // Teacher forward (no tape, eval mode).
  const bool t_glob = !setup_.distillation || setup_.teacher_views != TeacherViews::local;
  const bool t_loc = setup_.distillation && setup_.teacher_views != TeacherViews::global && Lsum > 0;
  EncoderBatch<float> tg;
  EncoderBatch<float> tl;
  if (t_glob) tg = encode<float>(rep.teacher, setup_.teacher_spec, b.globals, {});
  if (t_loc) tl = encode<float>(rep.teacher, setup_.teacher_spec, b.locals, {});
  const int Tc = (t_glob ? BG : 0) + (t_loc ? Lsum : 0);
  const int td = setup_.teacher_spec.vit.embed_dim;

  // Masked patch rows (iBOT), in view order.
  std::vector<Eigen::Index> mrows;
  std::vector<int> mview_start(static_cast<std::size_t>(BG) + 1, 0);
  if (setup_.ibot) {
    for (int gv = 0; gv < BG; ++gv) {
      for (int idx : b.masks[static_cast<std::size_t>(gv)]) {
        mrows.push_back(static_cast<Eigen::Index>(gv) * sg.num_patches + idx);
      }
      mview_start[static_cast<std::size_t>(gv) + 1] = static_cast<int>(mrows.size());
    }
  }
  const auto M = static_cast<int>(mrows.size());

  // Heads.
  Matrix<float> X(BG + Lsum + (shared_ibot ? M : 0), d);
  X.topRows(BG) = sg.cls;
  if (Lsum > 0) X.middleRows(BG, Lsum) = sl.cls;
  if (shared_ibot && M > 0) X.bottomRows(M) = gather_rows(sg.patches, mrows);
  HeadTape htape;
  const Matrix<float> S = head_forward<float>(rep.student, "head", setup_.head, X, &htape);

  Matrix<float> TX(Tc + (shared_ibot ? M : 0), td);
  if (t_glob) TX.topRows(BG) = tg.cls;
  if (t_loc) TX.middleRows(t_glob ? BG : 0, Lsum) = tl.cls;
  if (shared_ibot && M > 0) TX.bottomRows(M) = gather_rows(tg.patches, mrows);
  const bool teacher_grad = !setup_.teacher_trainable.empty();
  HeadTape ttape;
  const Matrix<float> TL = head_forward<float>(rep.teacher, "head", setup_.teacher_head, TX, teacher_grad ? &ttape : nullptr);

  Matrix<float> SP;
  Matrix<float> TP;
  HeadTape ptape;
  if (setup_.ibot_head && M > 0) {
    SP = head_forward<float>(rep.student, "ibot_head", *setup_.ibot_head, gather_rows(sg.patches, mrows), &ptape);
    TP = head_forward<float>(rep.teacher, "ibot_head", *setup_.ibot_head, gather_rows(tg.patches, mrows));
  }

  // DINO loss, sample by sample.
  Matrix<float> dS = Matrix<float>::Zero(S.rows(), S.cols());
  Matrix<float> dT;
  if (teacher_grad) dT = Matrix<float>::Zero(TL.rows(), TL.cols());
  double global_dino = 0.0;
  double local_dino = 0.0;
  for (int s = 0; s < B; ++s) {
    const int off = b.local_offset[static_cast<std::size_t>(s)];
    const int Ls = b.local_offset[static_cast<std::size_t>(s) + 1] - off;
    std::vector<Eigen::Index> srows;
    for (int v = 0; v < G; ++v) srows.push_back(s * G + v);
    for (int v = 0; v < Ls; ++v) srows.push_back(BG + off + v);
    std::vector<Eigen::Index> trows;
    std::vector<int> tview;
    if (t_glob) {
      for (int v = 0; v < G; ++v) {
        trows.push_back(s * G + v);
        tview.push_back(v);
      }
    }
    if (t_loc) {
      for (int v = 0; v < Ls; ++v) {
        trows.push_back((t_glob ? BG : 0) + off + v);
        tview.push_back(G + v);
      }
    }
    const DinoLossResult res =
        dino_loss(gather_rows(TL, trows), tview, gather_rows(S, srows), G, rep.dino, t, true, teacher_grad);
    global_dino += res.global_dino;
    local_dino += res.local_dino;
    const auto scale = static_cast<float>(dino_w / B);
    for (std::size_t i = 0; i < srows.size(); ++i) dS.row(srows[i]) += scale * res.d_student.row(static_cast<Eigen::Index>(i));
    if (teacher_grad) {
      for (std::size_t i = 0; i < trows.size(); ++i) dT.row(trows[i]) += scale * res.d_teacher.row(static_cast<Eigen::Index>(i));
    }
  }
  global_dino /= B;
  local_dino /= B;

  // iBOT: mean over global views of the per-view masked-token CE (0 for unmasked views).
  double ibot = 0.0;
  Matrix<float> dP;
  if (setup_.ibot && M > 0) {
    dP = Matrix<float>::Zero(M, setup_.ibot_head ? SP.cols() : S.cols());
    for (int gv = 0; gv < BG; ++gv) {
      const int a = mview_start[static_cast<std::size_t>(gv)];
      const int e = mview_start[static_cast<std::size_t>(gv) + 1];
      if (a == e) continue;
      const Matrix<float> sr = setup_.ibot_head ? Matrix<float>(SP.middleRows(a, e - a))
                                                : Matrix<float>(S.middleRows(BG + Lsum + a, e - a));
      const Matrix<float> tr = setup_.ibot_head ? Matrix<float>(TP.middleRows(a, e - a))
                                                : Matrix<float>(TL.middleRows(Tc + a, e - a));
      const IbotLossResult r = ibot_loss_rows(tr, sr, *rep.ibot, t, true);
      ibot += r.loss / BG;
      dP.middleRows(a, e - a) += static_cast<float>(ibot_w / BG) * r.d_student;
    }
  }

  // Backward.
  ParameterSet grads;
  if (shared_ibot && M > 0) dS.bottomRows(M) = dP;
  const Matrix<float> dX = head_backward(rep.student, "head", setup_.head, htape, dS, trainable, grads);
  Matrix<float> dPX;
  if (setup_.ibot_head && M > 0) {
    dPX = head_backward(rep.student, "ibot_head", *setup_.ibot_head, ptape, dP, trainable, grads);
  }
  Matrix<float> d_patch;
  if (M > 0) {
    d_patch = Matrix<float>::Zero(sg.patches.rows(), d);
    const Matrix<float>& src = shared_ibot ? dX : dPX;
    const int base = shared_ibot ? BG + Lsum : 0;
    for (int i = 0; i < M; ++i) d_patch.row(mrows[static_cast<std::size_t>(i)]) += src.row(base + i);
  }
  encode_backward(rep.student, setup_.student_spec, gtape, dX.topRows(BG), M > 0 ? &d_patch : nullptr, trainable, grads);
  if (Lsum > 0) encode_backward(rep.student, setup_.student_spec, ltape, dX.middleRows(BG, Lsum), nullptr, trainable, grads);
  // The teacher backbone stays frozen; only its head bridge learns from the target path.
  ParameterSet tgrads;
  if (teacher_grad) head_backward(rep.teacher, "head", setup_.teacher_head, ttape, dT, setup_.teacher_trainable, tgrads);

  // Center / monitor statistics.
  const int K2 = rep.ibot ? static_cast<int>(rep.ibot->center.numel()) : 0;
  std::vector<double> scalars(3 + 1 + 2 * static_cast<std::size_t>(K) + 1 + static_cast<std::size_t>(K2) + 2, 0.0);
  scalars[0] = global_dino;
  scalars[1] = local_dino;
  scalars[2] = ibot;
  scalars[3] = Tc;
  add_column_sums(TL, Tc, scalars, 4);
  add_column_sums(teacher_probs(Matrix<float>(TL.topRows(Tc)), rep.dino, t), Tc, scalars, 4 + K);
  const std::size_t ib_off = 4 + 2 * static_cast<std::size_t>(K);
  if (rep.ibot && M > 0) {
    scalars[ib_off] = M;
    if (setup_.ibot_head) {
      add_column_sums(TP, M, scalars, ib_off + 1);
    } else {
      add_column_sums(Matrix<float>(TL.bottomRows(M)), M, scalars, ib_off + 1);
    }
  }

  // Gradient reduction and optimizer step.
  const std::set<std::string>* owned = shards_ ? &shards_->owned[static_cast<std::size_t>(worker)] : nullptr;
  if (workers > 1) grads = reducer_->all_reduce_mean(worker, grads);
  if (owned) std::erase_if(grads, [&](const auto& kv) { return !owned->count(kv.first); });
  if (t < cfg_.train.freeze_last_layer) drop_gradients(grads, "head.last.");
  double sq = grad_sq_norm(grads);
  if (owned && workers > 1) sq = reducer_->all_reduce(worker, {sq}, true)[0];
  clip_to_norm(grads, std::sqrt(sq), cfg_.train.clip_grad);
  const ScheduleConfig sched = cfg_.schedule();
  adamw_step(rep.student, grads, rep.optim, lr_at(t, sched), weight_decay_at(t, sched));
  if (teacher_grad) {
    // Replicated on every worker (also under FSDP): small, and kept out of the student shards.
    if (workers > 1) tgrads = reducer_->all_reduce_mean(worker, tgrads);
    clip_to_norm(tgrads, std::sqrt(grad_sq_norm(tgrads)), cfg_.train.clip_grad);
    adamw_step(rep.teacher, tgrads, rep.teacher_optim, lr_at(t, sched), weight_decay_at(t, sched));
  }
  if (owned && workers > 1) {
    ParameterSet mine;
    for (const auto& name : *owned) mine.emplace(name, rep.student.at(name));
    for (auto& [name, tensor] : reducer_->all_gather(worker, mine)) rep.student[name] = std::move(tensor);
  }

  // Cross-worker statistics (plus a desync probe on the updated student).
  const std::uint64_t h = parameter_hash(rep.student);
  scalars[scalars.size() - 2] = static_cast<double>(h >> 32);
  scalars[scalars.size() - 1] = static_cast<double>(h & 0xFFFFFFFFu);
  if (workers > 1) {
    scalars = reducer_->all_reduce(worker, scalars, true);
    if (scalars[scalars.size() - 2] != workers * static_cast<double>(h >> 32) ||
        scalars[scalars.size() - 1] != workers * static_cast<double>(h & 0xFFFFFFFFu)) {
      throw ReducerError(fmt::format("worker desync detected at iteration {} (worker {})", t, worker));
    }
    for (int i = 0; i < 3; ++i) scalars[static_cast<std::size_t>(i)] /= workers;
  }

  WorkerResult out;
  out.loss = LossBreakdown::combine(scalars[1], scalars[0], scalars[2], dino_w, ibot_w);
  if (!std::isfinite(out.loss.total)) {
    throw std::runtime_error(fmt::format("non-finite loss at iteration {}: local {} global {} ibot {}", t,
                                         out.loss.local_dino, out.loss.global_dino, out.loss.ibot));
  }
  const double rows = scalars[3];
  if (rows > 0) {
    std::vector<float> mean(static_cast<std::size_t>(K));
    double entropy = 0.0;
    for (int k = 0; k < K; ++k) {
      mean[static_cast<std::size_t>(k)] = static_cast<float>(scalars[4 + static_cast<std::size_t>(k)] / rows);
      const double p = scalars[4 + static_cast<std::size_t>(K + k)] / rows;
      if (p > 0.0) entropy -= p * std::log(p);
    }
    out.entropy = entropy;
    update_center_with_mean(rep.dino, mean);
  }
  if (rep.ibot && scalars[ib_off] > 0) {
    std::vector<float> mean(static_cast<std::size_t>(K2));
    for (int k = 0; k < K2; ++k) {
      mean[static_cast<std::size_t>(k)] = static_cast<float>(scalars[ib_off + 1 + static_cast<std::size_t>(k)] / scalars[ib_off]);
    }
    update_center_with_mean(*rep.ibot, mean);
  }

  // Teacher side.
  const double m = teacher_momentum_at(t, sched);
  if (setup_.distillation) {
    ema_update(rep.shadow, rep.student, m);
    sync_teacher_head(rep.teacher, rep.shadow);
    verify_teacher(rep.teacher, setup_.teacher_hash);
  } else {
    ema_update(rep.teacher, rep.student, m);
  }
  return out;
}

StepRecord Trainer::step() {
  const std::int64_t t = next_;
  const std::int64_t T = cfg_.train.max_iterations;
  if (t >= T) throw std::logic_error("training already reached max_iterations");
  const int workers = accel_.num_workers;
  std::vector<WorkerResult> results(static_cast<std::size_t>(workers));
  if (workers == 1) {
    results[0] = run_worker(0, t);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    auto body = [&](int w) {
      try {
        results[static_cast<std::size_t>(w)] = run_worker(w, t);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
        reducer_->abort(e.what());
      }
    };
    std::vector<std::thread> threads;
    for (int w = 1; w < workers; ++w) threads.emplace_back(body, w);
    body(0);
    for (auto& th : threads) th.join();
    std::exception_ptr first;
    for (auto& e : errors) {
      if (!e) continue;
      try {
        std::rethrow_exception(e);
      } catch (const ReducerError&) {
        if (!first) first = e;
      } catch (...) {
        std::rethrow_exception(e);
      }
    }
    if (first) std::rethrow_exception(first);
  }

  const ScheduleConfig sched = cfg_.schedule();
  StepRecord rec;
  rec.iteration = t;
  rec.loss = results[0].loss;
  rec.lr = lr_at(t, sched);
  rec.weight_decay = weight_decay_at(t, sched);
  rec.momentum = teacher_momentum_at(t, sched);
  rec.teacher_entropy = results[0].entropy;
  LogRecord log;
  log.loss = rec.loss;
  log.lr = rec.lr;
  log.weight_decay = rec.weight_decay;
  log.momentum = rec.momentum;
  log.batch_size = cfg_.train.global_batch_size;
  log.iteration = t;
  log.max_iterations = T;
  log.worker = 0;
  log.memory_used_gb = memory_used_gb();
  log.memory_total_gb = memory_total_gb_;
  rec.log_line = format_log_line(log);
  next_ = t + 1;

  if (opts_.layout) {
    if (t % cfg_.train.log_freq == 0 || t == T - 1) emit_log(rec.log_line);
    if (cfg_.train.generate_samples && !samples_written_) write_samples();
    const auto freq = cfg_.train.saveckp_freq;
    if ((freq > 0 && t > 0 && t % freq == 0) || t == T - 1) save_checkpoint(opts_.layout->checkpoints());
  } else if (opts_.echo && t % cfg_.train.log_freq == 0) {
    std::cout << rec.log_line << std::endl;
  }
  return rec;
}

std::vector<StepRecord> Trainer::run(std::optional<std::int64_t> until) {
  const std::int64_t stop = std::min(until.value_or(cfg_.train.max_iterations), cfg_.train.max_iterations);
  std::vector<StepRecord> out;
  while (next_ < stop) out.push_back(step());
  return out;
}

double Trainer::memory_used_gb() const {
  const Replica& r = replicas_.front();
  std::size_t floats = parameter_count(r.student) + parameter_count(r.teacher) + parameter_count(r.shadow);
  for (const auto& name : setup_.trainable) floats += 2 * r.student.at(name).numel();
  return static_cast<double>(floats) * sizeof(float) / kGiB;
}

void Trainer::emit_log(const std::string& line) {
  const std::string full = log_prefix(std::chrono::system_clock::now(), 0) + line;
  std::ofstream out(opts_.layout->logs() / "train.log", std::ios::app);
  out << full << '\n';
  if (opts_.echo) std::cout << full << std::endl;
}

void Trainer::write_samples() {
  samples_written_ = true;
  const std::size_t count = std::min<std::size_t>(2, data_.size());
  for (std::size_t i = 0; i < count; ++i) {
    const RoiMask* roi = data_.rois[i] ? &*data_.rois[i] : nullptr;
    const ViewSet vs = make_views(data_.images[i], cfg_.crops, cfg_.policy(), roi, derive_seed(cfg_.train.seed, {kViewKey, i}));
    auto dump = [&](const std::vector<Tensor>& views, const char* kind) {
      for (std::size_t v = 0; v < views.size(); ++v) {
        const Tensor& view = views[v];
        const auto h = static_cast<int>(view.dim(1));
        const auto w = static_cast<int>(view.dim(2));
        write_pgm(opts_.layout->samples() / fmt::format("sample{}_{}{}.pgm", i, kind, v), h, w,
                  view.data().subspan(0, static_cast<std::size_t>(h) * w));
      }
    };
    dump(vs.global_views, "global");
    dump(vs.local_views, "local");
    dump(vs.guided_views, "guided");
  }
}

StepRecord distill_step(Trainer& trainer) {
  if (!trainer.setup().distillation) throw std::logic_error("distill_step needs a trainer with do_distillation enabled");
  return trainer.step();
}

}  // namespace dinomx
