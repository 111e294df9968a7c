#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualprompt/tensor.hpp"

namespace dualprompt {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A named trainable array. Frozen parameters never receive gradients or
/// optimizer updates.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;
};

/// Named parameters with stable addresses. Iteration is in insertion order.
class ParamRegistry {
 public:
  Parameter& add(const std::string& name, Matrix value, bool frozen = false);

  bool contains(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
  void set_frozen(const std::string& prefix, bool frozen);

  void zero_grad();
  std::size_t trainable_count() const;
  std::size_t total_count() const;

  /// Copies every parameter of `other` in; names must not collide.
  void merge(const ParamRegistry& other, bool frozen);

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
};

class Graph;

/// Handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  double scalar() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order; backward walks it once in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to a registry parameter. Frozen parameters (or any parameter
  /// while recording is off) enter as constants.
  Var param(Parameter& p);
  Var param(const Parameter& p);

  /// When false, no backward closures are stored (evaluation-only graphs).
  void set_recording(bool on) noexcept { recording_ = on; }
  bool recording() const noexcept { return recording_; }

  /// Accumulates d(loss)/d(param) into every reachable unfrozen parameter.
  /// Intermediate gradients are reset first, so calling twice doubles the
  /// parameter gradients.
  void backward(Var loss);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated to the value's shape on first use.
  Matrix& grad_buffer(std::size_t id);

  /// Appends a computed node. `parents` decide whether it requires grad.
  Var emit(Matrix value, std::initializer_list<Var> parents, BackwardFn backward);
  Var emit(Matrix value, std::span<const Var> parents, BackwardFn backward);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

namespace ops {

using Segments = std::shared_ptr<const std::vector<std::size_t>>;

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product of equal shapes.
Var mul(Var a, Var b);
/// a (m x n) + row (1 x n) broadcast over rows.
Var add_row(Var a, Var row);
/// a (m x n) * row (1 x n) broadcast over rows.
Var mul_row(Var a, Var row);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// Column-wise concatenation of parts with equal row counts.
Var concat_cols(std::span<const Var> parts);
Var concat_cols(std::initializer_list<Var> parts);
/// Row-wise stacking of parts with equal column counts.
Var concat_rows(std::span<const Var> parts);
/// Vector concatenation; alias of concat_cols on 1 x n rows.
Var concat(Var a, Var b);
/// [a1, b1, a2, b2, ...] column interleave of equal shapes.
Var interleave_cols(Var a, Var b);
Var cos(Var a);
Var sin(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
/// Mean of all entries, 1 x 1.
Var mean(Var a);
Var sum(Var a);
Var gather_rows(Var a, std::vector<std::size_t> rows);
/// Rows scaled to unit L2 norm; throws on a zero row.
Var normalize_rows(Var a);
/// m x 1 column of row-wise dot products.
Var row_dot(Var a, Var b);
/// Cosine similarity of two 1 x n vectors, 1 x 1.
Var cosine_sim(Var a, Var b);
/// out_i = keys_i . queries_{seg_i}, m x 1.
Var segment_dot(Var keys, Var queries, Segments seg);
/// Softmax of an m x 1 column within each segment.
Var segment_softmax(Var scores, Segments seg, std::size_t num_segments);
/// out_s = sum_{i in s} weights_i * values_i, num_segments x d.
Var segment_weighted_sum(Var weights, Var values, Segments seg, std::size_t num_segments);
/// Mean over rows of -log softmax(logits_row)[target_row], 1 x 1.
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> targets);

}  // namespace ops

/// Max relative difference between analytic and central-difference gradients
/// over every unfrozen scalar parameter entry.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

GradCheckReport check_gradients(const std::function<Var(Graph&)>& loss_builder,
                                ParamRegistry& registry, double eps = 1e-5,
                                double abs_floor = 1e-6);

}  // namespace dualprompt
