#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dinomx/dataset.hpp"
#include "dinomx/vit.hpp"

namespace dinomx {

/// CLS embeddings, one row per sample in dataset order.
struct EmbeddingSet {
  Tensor vectors;  // [N, d]
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return labels.size(); }
  int dim() const { return vectors.empty() ? 0 : static_cast<int>(vectors.dim(1)); }
  void validate() const;
};

EmbeddingSet extract_embeddings(const ParameterSet& params, const BackboneSpec& spec, const TrainingData& data,
                                NormalizeMode mode = NormalizeMode::unit, const NormalizeParams& norm = {});

void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& e);
EmbeddingSet read_embeddings(const std::filesystem::path& path);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

struct EvalReport {
  std::string method;  // "knn" or "linear"
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
};

/// Accuracy = trace / total; macro averages treat 0/0 as 0.
EvalReport classification_metrics(const std::vector<std::vector<std::int64_t>>& confusion);

/// Cosine-distance kNN with majority vote. Ties go to the smallest summed
/// distance, then the lowest class. Train rows sharing the query's id are skipped.
EvalReport knn_classify(const EmbeddingSet& train, const EmbeddingSet& test, int k);

struct LinearProbeConfig {
  int epochs = 500;
  double lr = 0.1;
  double weight_decay = 1e-4;
  bool l2_normalize = true;
};

struct LinearProbeModel {
  Matrix<double> weight;  // [C, d]
  Eigen::VectorXd bias;   // [C]
  std::vector<double> objective;  // regularized training objective before each epoch's step
  bool l2_normalize = true;

  std::vector<int> predict(const EmbeddingSet& e) const;
};

LinearProbeModel train_linear_probe(const EmbeddingSet& train, int num_classes, const LinearProbeConfig& cfg = {});
EvalReport linear_probe(const EmbeddingSet& train, const EmbeddingSet& test, const LinearProbeConfig& cfg = {});

/// Appends rows `method,dataset,accuracy,precision,f1` (header written for a new file).
void append_report_csv(const std::filesystem::path& path, const std::string& dataset, const EvalReport& report);

}  // namespace dinomx
