#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "coopdrive/rng.hpp"

namespace coopdrive {

/// Dense row-major matrix; vectors are 1 x d.
template <class T>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T(0)) {}

  std::size_t size() const { return data.size(); }
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
  T at(int r, int c) const { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)]; }
  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols); }
};

enum class Init { zeros, ones, xavier, small };

/// Named learnable tensors in a fixed order, with Adam moments. Values are kept at 64-bit.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<double> value;
    Tensor<double> m;
    Tensor<double> v;
  };

  /// Adds a parameter initialized from a stream derived from (seed, name).
  void add(const std::string& name, int rows, int cols, Init init, std::uint64_t seed);

  std::size_t size() const { return entries_.size(); }
  int index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t scalar_count() const;

  /// Bias-corrected Adam step with the given gradients (same order and shapes as the entries).
  /// Non-finite gradients raise TrainingError naming the parameter.
  void adam_step(const std::vector<Tensor<double>>& grads, double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);
  std::int64_t adam_steps() const { return adam_t_; }
  void set_adam_steps(std::int64_t t) { adam_t_ = t; }

  std::vector<Tensor<double>> zero_grads() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  std::int64_t adam_t_ = 0;
};

/// Read-only copy of the parameters at precision T, handed to forward passes.
template <class T>
struct ParamSnapshot {
  std::vector<Tensor<T>> values;
  const ParameterStore* store = nullptr;

  static ParamSnapshot from(const ParameterStore& store);
  static ParamSnapshot from(ParameterStore&&) = delete;  // the snapshot keeps a pointer to the store
  const Tensor<T>& get(int index) const { return values[static_cast<std::size_t>(index)]; }
};

/// Checkpoint: magic line, u64 manifest length, JSON manifest, float32 parameter payload, and an
/// optional float64 section (parameters and Adam moments) used to resume training exactly.
void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& meta,
                     bool with_trainer_state);
/// Loads parameters into `store` (which must already hold the same names and shapes) and returns the
/// manifest's meta object. Full-precision state is restored when present and `restore_trainer_state`.
nlohmann::json load_checkpoint(const std::string& path, ParameterStore& store, bool restore_trainer_state);
nlohmann::json read_checkpoint_meta(const std::string& path);

/// Handle to a node in a Graph.
struct Var {
  int id = -1;
};

/// Reverse-mode tape. Nodes are appended in evaluation order; backward() walks them in reverse.
template <class T>
class Graph {
 public:
  /// `grads`, when given, receives parameter gradients (accumulated, same layout as the snapshot).
  explicit Graph(const ParamSnapshot<T>* params = nullptr, std::vector<Tensor<T>>* grads = nullptr)
      : params_(params), grads_(grads) {}

  Var input(Tensor<T> value, bool requires_grad = false);
  Var param(int index);
  Var param(const std::string& name) { return param(params_->store->index_of(name)); }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.ref != nullptr ? *n.ref : n.value;
  }
  const Tensor<T>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  /// x W + b with x: n x i, W: i x o, b: 1 x o.
  Var affine(Var x, Var w, Var b);
  /// Normalizes each row to zero mean and unit variance, then applies per-column gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5));
  Var relu(Var x);
  Var add(Var x, Var y);
  Var scale(Var x, T factor);
  /// softmax(q k^T / sqrt(d)) v over entries whose mask is set. Masked entries contribute exactly zero.
  /// Every query row must have at least one unmasked key.
  Var masked_attention(Var q, Var k, Var v, const std::vector<std::uint8_t>& mask);
  Var gather_rows(Var x, const std::vector<int>& rows);
  /// Copy of `base` with row rows[i] replaced by row i of `src`.
  Var scatter_rows(Var base, Var src, const std::vector<int>& rows);
  /// Sum of the rows whose mask is set (all rows when the mask is empty), as 1 x d.
  Var sum_pool(Var x, const std::vector<std::uint8_t>& mask = {});
  /// Row-wise log-softmax over valid entries; invalid entries hold 0 and receive no gradient.
  Var masked_log_softmax(Var logits, const std::vector<std::uint8_t>& valid);
  /// Sum over rows of logp[i, actions[i]], as 1 x 1.
  Var pick_sum(Var logp, const std::vector<int>& actions);
  /// Sum over rows of -sum_a p log p restricted to valid entries, as 1 x 1.
  Var entropy_sum(Var logp, const std::vector<std::uint8_t>& valid);
  /// min(rho A, clip(rho, 1-eps, 1+eps) A) with rho = exp(logp - old_logp), as 1 x 1.
  Var clipped_surrogate(Var logp, T old_logp, T advantage, T eps);
  /// (x - target)^2 for a 1 x 1 x.
  Var squared_error(Var x, T target);
  Var sum(Var x);

  /// Seeds d(out)/d(out) = 1 for a 1 x 1 node and propagates to every node and parameter.
  void backward(Var out);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;  // parameters are read in place from the snapshot
    Tensor<T> grad;
    bool needs_grad = false;
    int param = -1;
    std::function<void()> back;
  };

  Var push(Tensor<T> value, bool needs_grad);
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  Tensor<T>& g(Var v);

  const ParamSnapshot<T>* params_;
  std::vector<Tensor<T>>* grads_;
  std::vector<Node> nodes_;
};

/// Probabilities of a masked softmax; invalid entries are exactly 0.
std::vector<double> masked_softmax(const std::vector<double>& logits, const std::vector<std::uint8_t>& valid);
int categorical_sample(const std::vector<double>& probs, Rng& rng);
double categorical_log_prob(const std::vector<double>& probs, int action);
double categorical_entropy(const std::vector<double>& probs);

extern template class Graph<float>;
extern template class Graph<double>;
extern template struct ParamSnapshot<float>;
extern template struct ParamSnapshot<double>;

}  // namespace coopdrive
