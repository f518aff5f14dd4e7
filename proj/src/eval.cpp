#include "dinomx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

namespace dinomx {

namespace {

Matrix<double> to_double(const Tensor& t) { return as_matrix(t).cast<double>(); }

Matrix<double> unit_rows(Matrix<double> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n > 0.0) m.row(r) /= n;
  }
  return m;
}

int class_count(const EmbeddingSet& a, const EmbeddingSet& b) {
  int c = 0;
  for (int l : a.labels) c = std::max(c, l + 1);
  for (int l : b.labels) c = std::max(c, l + 1);
  return c;
}

EvalReport report_from(const std::vector<int>& truth, const std::vector<int>& pred, int classes, const char* method) {
  std::vector<std::vector<std::int64_t>> cm(static_cast<std::size_t>(classes),
                                            std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) cm[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])] += 1;
  EvalReport r = classification_metrics(cm);
  r.method = method;
  return r;
}

}  // namespace

void EmbeddingSet::validate() const {
  if (labels.empty()) throw std::invalid_argument("embedding set is empty");
  if (vectors.ndim() != 2 || static_cast<std::size_t>(vectors.dim(0)) != labels.size() || ids.size() != labels.size()) {
    throw std::invalid_argument("embedding set columns disagree");
  }
  for (int l : labels) {
    if (l < 0) throw std::invalid_argument("negative class label");
  }
}

EmbeddingSet extract_embeddings(const ParameterSet& params, const BackboneSpec& spec, const TrainingData& data,
                                NormalizeMode mode, const NormalizeParams& norm) {
  data.validate();
  const int d = spec.vit.embed_dim;
  std::vector<float> out(data.size() * static_cast<std::size_t>(d));
  // One image per forward: batched GEMM blocking would make a row depend on its batch position.
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::vector<Tensor> one{normalize(data.images[i], mode, norm)};
    const EncoderBatch<float> enc = encode<float>(params, spec, one, {});
    std::copy(enc.cls.data(), enc.cls.data() + d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  EmbeddingSet e;
  e.vectors = Tensor({static_cast<std::int64_t>(data.size()), d}, std::move(out));
  e.labels = data.labels;
  e.ids = data.ids;
  return e;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& e) {
  e.validate();
  std::vector<float> labels(e.labels.begin(), e.labels.end());
  write_tensors(path, NamedTensors{{"vectors", e.vectors},
                                   {"labels", Tensor({static_cast<std::int64_t>(labels.size())}, labels)}});
  std::ofstream ids(std::filesystem::path(path).replace_extension(".ids.txt"));
  for (const auto& id : e.ids) ids << id << '\n';
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  const ParameterSet t = read_parameter_set(path);
  EmbeddingSet e;
  e.vectors = t.at("vectors");
  for (float l : t.at("labels").data()) e.labels.push_back(static_cast<int>(l));
  std::ifstream ids(std::filesystem::path(path).replace_extension(".ids.txt"));
  std::string line;
  while (std::getline(ids, line)) e.ids.push_back(line);
  if (e.ids.size() != e.labels.size()) {
    e.ids.clear();
    for (std::size_t i = 0; i < e.labels.size(); ++i) e.ids.push_back(std::to_string(i));
  }
  e.validate();
  return e;
}

EvalReport classification_metrics(const std::vector<std::vector<std::int64_t>>& cm) {
  const std::size_t c = cm.size();
  if (c == 0) throw std::invalid_argument("empty confusion matrix");
  std::int64_t total = 0;
  std::int64_t trace = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (cm[i].size() != c) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t j = 0; j < c; ++j) {
      if (cm[i][j] < 0) throw std::invalid_argument("confusion matrix entries must be >= 0");
      total += cm[i][j];
    }
    trace += cm[i][i];
  }
  if (total == 0) throw std::invalid_argument("confusion matrix is empty");
  EvalReport r;
  r.confusion = cm;
  r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  for (std::size_t k = 0; k < c; ++k) {
    std::int64_t predicted = 0;
    std::int64_t actual = 0;
    for (std::size_t i = 0; i < c; ++i) {
      predicted += cm[i][k];
      actual += cm[k][i];
    }
    ClassMetrics m;
    m.support = actual;
    m.precision = predicted ? static_cast<double>(cm[k][k]) / static_cast<double>(predicted) : 0.0;
    m.recall = actual ? static_cast<double>(cm[k][k]) / static_cast<double>(actual) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    r.macro_precision += m.precision / static_cast<double>(c);
    r.macro_recall += m.recall / static_cast<double>(c);
    r.macro_f1 += m.f1 / static_cast<double>(c);
    r.per_class.push_back(m);
  }
  return r;
}

EvalReport knn_classify(const EmbeddingSet& train, const EmbeddingSet& test, int k) {
  if (train.size() == 0) throw std::invalid_argument("knn: empty train set");
  train.validate();
  test.validate();
  if (k < 1 || static_cast<std::size_t>(k) > train.size()) throw std::invalid_argument("knn: k must be in [1, N_train]");
  if (train.dim() != test.dim()) throw std::invalid_argument("knn: embedding dimensions differ");
  const Matrix<double> a = unit_rows(to_double(train.vectors));
  const Matrix<double> q = unit_rows(to_double(test.vectors));
  const Matrix<double> sim = q * a.transpose();
  const int classes = class_count(train, test);
  std::vector<int> pred(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    struct Cand {
      double dist;
      const std::string* id;
      int label;
    };
    std::vector<Cand> cands;
    cands.reserve(train.size());
    for (std::size_t j = 0; j < train.size(); ++j) {
      if (train.ids[j] == test.ids[i]) continue;
      cands.push_back({1.0 - sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), &train.ids[j], train.labels[j]});
    }
    if (cands.empty()) throw std::invalid_argument("knn: no neighbours left after self-exclusion");
    const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(kk), cands.end(), [](const Cand& x, const Cand& y) {
      return x.dist != y.dist ? x.dist < y.dist : *x.id < *y.id;
    });
    std::vector<int> votes(static_cast<std::size_t>(classes), 0);
    std::vector<double> dist_sum(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t n = 0; n < kk; ++n) {
      votes[static_cast<std::size_t>(cands[n].label)] += 1;
      dist_sum[static_cast<std::size_t>(cands[n].label)] += cands[n].dist;
    }
    int best = -1;
    for (int c = 0; c < classes; ++c) {
      const auto cs = static_cast<std::size_t>(c);
      if (votes[cs] == 0) continue;
      if (best < 0) {
        best = c;
        continue;
      }
      const auto bs = static_cast<std::size_t>(best);
      if (votes[cs] > votes[bs] || (votes[cs] == votes[bs] && dist_sum[cs] < dist_sum[bs])) best = c;
    }
    pred[i] = best;
  }
  return report_from(test.labels, pred, classes, "knn");
}

std::vector<int> LinearProbeModel::predict(const EmbeddingSet& e) const {
  Matrix<double> x = to_double(e.vectors);
  if (l2_normalize) x = unit_rows(std::move(x));
  const Matrix<double> logits = (x * weight.transpose()).rowwise() + bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

LinearProbeModel train_linear_probe(const EmbeddingSet& train, int num_classes, const LinearProbeConfig& cfg) {
  train.validate();
  std::set<int> present(train.labels.begin(), train.labels.end());
  if (present.size() < 2) throw std::invalid_argument("linear probe needs at least two classes in the train set");
  if (num_classes < *present.rbegin() + 1) throw std::invalid_argument("num_classes too small for the labels");
  Matrix<double> x = to_double(train.vectors);
  if (cfg.l2_normalize) x = unit_rows(std::move(x));
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Matrix<double> y = Matrix<double>::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) y(i, train.labels[static_cast<std::size_t>(i)]) = 1.0;

  LinearProbeModel model;
  model.l2_normalize = cfg.l2_normalize;
  model.weight = Matrix<double>::Zero(num_classes, d);
  model.bias = Eigen::VectorXd::Zero(num_classes);
  for (int e = 0; e < cfg.epochs; ++e) {
    Matrix<double> logits = (x * model.weight.transpose()).rowwise() + model.bias.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      logits.row(i).array() -= mx;
      const double lse = std::log(logits.row(i).array().exp().sum());
      loss -= (y.row(i).array() * (logits.row(i).array() - lse)).sum();
      logits.row(i) = (logits.row(i).array() - lse).exp().matrix();
    }
    loss /= static_cast<double>(n);
    loss += 0.5 * cfg.weight_decay * model.weight.squaredNorm();
    model.objective.push_back(loss);
    const Matrix<double> g = (logits - y) / static_cast<double>(n);
    const Matrix<double> gw = g.transpose() * x + cfg.weight_decay * model.weight;
    const Eigen::VectorXd gb = g.colwise().sum().transpose();
    const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * e / cfg.epochs));
    model.weight -= lr * gw;
    model.bias -= lr * gb;
  }
  return model;
}

EvalReport linear_probe(const EmbeddingSet& train, const EmbeddingSet& test, const LinearProbeConfig& cfg) {
  test.validate();
  if (train.dim() != test.dim()) throw std::invalid_argument("linear probe: embedding dimensions differ");
  const int classes = class_count(train, test);
  const LinearProbeModel model = train_linear_probe(train, classes, cfg);
  return report_from(test.labels, model.predict(test), classes, "linear");
}

void append_report_csv(const std::filesystem::path& path, const std::string& dataset, const EvalReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "method,dataset,accuracy,precision,f1\n";
  out << r.method << ',' << dataset << ',' << r.accuracy << ',' << r.macro_precision << ',' << r.macro_f1 << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace dinomx
