#pragma once

#include <chrono>
#include <condition_variable>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinomx/tensor.hpp"

namespace dinomx {

enum class DistributionType { ddp, fsdp };

std::string distribution_name(DistributionType t);
DistributionType parse_distribution(const std::string& name);

struct ReducerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mean of per-worker tensor maps, accumulated in worker-index order.
/// Names missing from a worker count as zeros; shape disagreement throws.
ParameterSet all_reduce_mean(std::span<const ParameterSet> worker_tensors);

/// Barrier-based collective shared by the worker threads of one process.
/// Every collective must be entered by all workers in the same order.
class Reducer {
 public:
  explicit Reducer(int workers, std::chrono::milliseconds timeout = std::chrono::minutes(5));

  int workers() const { return workers_; }

  ParameterSet all_reduce_mean(int worker, const ParameterSet& local);
  /// Elementwise mean (sum = false) or sum of per-worker scalar vectors.
  std::vector<double> all_reduce(int worker, const std::vector<double>& local, bool sum = false);
  /// Union of per-worker maps; a name supplied by two workers throws.
  ParameterSet all_gather(int worker, const ParameterSet& local);
  void barrier(int worker);

  /// Fails every pending and future collective with `reason`.
  void abort(const std::string& reason);

 private:
  enum class Op { mean, scalars_mean, scalars_sum, gather, barrier };
  void enter(int worker, Op op, const ParameterSet* tensors, const std::vector<double>* scalars);

  int workers_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::condition_variable cv_;
  int arrived_ = 0;
  std::uint64_t generation_ = 0;
  std::string abort_reason_;
  std::vector<const ParameterSet*> tensor_slots_;
  std::vector<const std::vector<double>*> scalar_slots_;
  std::vector<Op> ops_;
  ParameterSet tensor_result_;
  std::vector<double> scalar_result_;
};

/// Optimizer-state ownership for sharded mode: tensors sorted by size
/// (descending, ties by name) and dealt round-robin across workers.
struct ShardLayout {
  int workers = 1;
  std::map<std::string, int> owner;
  std::vector<std::set<std::string>> owned;

  int owner_of(const std::string& name) const;
  /// Every name in `names` must have exactly one owner.
  void validate(const std::set<std::string>& names) const;
};

ShardLayout shard_states(const ParameterSet& params, const std::set<std::string>& trainable, int workers);

}  // namespace dinomx
