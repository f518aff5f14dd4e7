#include "dinomx/parallel.hpp"

#include <algorithm>

namespace dinomx {

std::string distribution_name(DistributionType t) { return t == DistributionType::ddp ? "ddp" : "fsdp"; }

DistributionType parse_distribution(const std::string& name) {
  if (name == "ddp") return DistributionType::ddp;
  if (name == "fsdp") return DistributionType::fsdp;
  throw std::invalid_argument("distribution.type must be ddp or fsdp, got '" + name + "'");
}

ParameterSet all_reduce_mean(std::span<const ParameterSet> worker_tensors) {
  if (worker_tensors.empty()) throw ReducerError("all_reduce_mean: no workers");
  std::map<std::string, std::vector<double>> acc;
  std::map<std::string, Shape> shapes;
  for (const auto& w : worker_tensors) {
    for (const auto& [name, t] : w) {
      auto [it, fresh] = shapes.try_emplace(name, t.shape());
      if (!fresh && it->second != t.shape()) throw ReducerError("all_reduce_mean: shape mismatch for '" + name + "'");
      auto& a = acc[name];
      if (a.empty()) a.assign(t.numel(), 0.0);
      const float* d = t.data().data();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += d[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(worker_tensors.size());
  ParameterSet out;
  for (auto& [name, a] : acc) {
    std::vector<float> v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[i] = static_cast<float>(a[i] * inv);
    out.emplace(name, Tensor(shapes.at(name), std::move(v)));
  }
  return out;
}

Reducer::Reducer(int workers, std::chrono::milliseconds timeout)
    : workers_(workers), timeout_(timeout), tensor_slots_(workers), scalar_slots_(workers), ops_(workers) {
  if (workers < 1) throw std::invalid_argument("Reducer needs at least one worker");
}

void Reducer::abort(const std::string& reason) {
  std::lock_guard lock(mu_);
  if (abort_reason_.empty()) abort_reason_ = reason.empty() ? "aborted" : reason;
  cv_.notify_all();
}

void Reducer::enter(int worker, Op op, const ParameterSet* tensors, const std::vector<double>* scalars) {
  if (worker < 0 || worker >= workers_) throw std::invalid_argument("bad worker index");
  std::unique_lock lock(mu_);
  if (!abort_reason_.empty()) throw ReducerError(abort_reason_);
  tensor_slots_[worker] = tensors;
  scalar_slots_[worker] = scalars;
  ops_[worker] = op;
  if (++arrived_ == workers_) {
    for (int w = 1; w < workers_; ++w) {
      if (ops_[w] != ops_[0]) {
        abort_reason_ = "worker desync: mismatched collectives";
        cv_.notify_all();
        throw ReducerError(abort_reason_);
      }
    }
    try {
      switch (op) {
        case Op::mean: {
          std::vector<ParameterSet> sets;
          sets.reserve(workers_);
          for (auto* s : tensor_slots_) sets.push_back(*s);
          tensor_result_ = dinomx::all_reduce_mean(sets);
          break;
        }
        case Op::gather: {
          tensor_result_.clear();
          for (auto* s : tensor_slots_) {
            for (const auto& [name, t] : *s) {
              if (!tensor_result_.emplace(name, t).second) throw ReducerError("all_gather: '" + name + "' supplied twice");
            }
          }
          break;
        }
        case Op::scalars_mean:
        case Op::scalars_sum: {
          const std::size_t n = scalar_slots_[0]->size();
          scalar_result_.assign(n, 0.0);
          for (auto* s : scalar_slots_) {
            if (s->size() != n) throw ReducerError("all_reduce: scalar length mismatch");
            for (std::size_t i = 0; i < n; ++i) scalar_result_[i] += (*s)[i];
          }
          if (op == Op::scalars_mean) {
            for (double& v : scalar_result_) v /= workers_;
          }
          break;
        }
        case Op::barrier:
          break;
      }
    } catch (const std::exception& e) {
      abort_reason_ = e.what();
      cv_.notify_all();
      throw;
    }
    arrived_ = 0;
    ++generation_;
    cv_.notify_all();
    return;
  }
  const auto gen = generation_;
  if (!cv_.wait_for(lock, timeout_, [&] { return generation_ != gen || !abort_reason_.empty(); })) {
    abort_reason_ = "collective timed out waiting for missing worker(s)";
    cv_.notify_all();
    throw ReducerError(abort_reason_);
  }
  if (generation_ == gen) throw ReducerError(abort_reason_);
}

ParameterSet Reducer::all_reduce_mean(int worker, const ParameterSet& local) {
  enter(worker, Op::mean, &local, nullptr);
  std::lock_guard lock(mu_);
  return tensor_result_;
}

std::vector<double> Reducer::all_reduce(int worker, const std::vector<double>& local, bool sum) {
  enter(worker, sum ? Op::scalars_sum : Op::scalars_mean, nullptr, &local);
  std::lock_guard lock(mu_);
  return scalar_result_;
}

ParameterSet Reducer::all_gather(int worker, const ParameterSet& local) {
  enter(worker, Op::gather, &local, nullptr);
  std::lock_guard lock(mu_);
  return tensor_result_;
}

void Reducer::barrier(int worker) { enter(worker, Op::barrier, nullptr, nullptr); }

int ShardLayout::owner_of(const std::string& name) const {
  auto it = owner.find(name);
  if (it == owner.end()) throw std::out_of_range("no shard owner for '" + name + "'");
  return it->second;
}

void ShardLayout::validate(const std::set<std::string>& names) const {
  for (const auto& n : names) {
    if (!owner.count(n)) throw std::logic_error("orphaned tensor '" + n + "' has no shard owner");
  }
  std::size_t total = 0;
  for (const auto& s : owned) total += s.size();
  if (total != owner.size()) throw std::logic_error("shard layout assigns a tensor twice");
}

ShardLayout shard_states(const ParameterSet& params, const std::set<std::string>& trainable, int workers) {
  if (workers < 1) throw std::invalid_argument("shard_states needs at least one worker");
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& n : trainable) {
    auto it = params.find(n);
    if (it == params.end()) throw std::invalid_argument("shard_states: unknown tensor '" + n + "'");
    order.emplace_back(it->second.numel(), n);
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  ShardLayout layout;
  layout.workers = workers;
  layout.owned.resize(workers);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int w = static_cast<int>(i % workers);
    layout.owner[order[i].second] = w;
    layout.owned[w].insert(order[i].second);
  }
  layout.validate(trainable);
  return layout;
}

}  // namespace dinomx
