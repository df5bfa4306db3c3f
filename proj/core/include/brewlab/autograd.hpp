#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "brewlab/tensor.hpp"

namespace brewlab {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// A differentiable primitive.
///
/// `backward` must build the input gradients from other Ops (never from raw
/// tensor arithmetic) so that, when the graph is recording, the backward pass
/// is itself differentiable.
class Op {
 public:
  virtual ~Op() = default;
  virtual const char* name() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> inputs) const = 0;
  /// `needed[i]` tells whether the gradient of input i is wanted; entries
  /// that are not needed may be returned as invalid Vars.
  virtual std::vector<Var> backward(std::span<const Var> inputs, const Var& output,
                                    const Var& grad_output,
                                    std::span<const bool> needed) const = 0;
};

struct GradOptions {
  /// Record the backward pass so its results can be differentiated again.
  bool create_graph = false;
  /// Keep the graph usable after a non-recording backward.
  bool retain_graph = false;
};

/// Single-owner arena of recorded operations in creation (= topological) order.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf node. Only leaves with `requires_grad` accumulate gradients.
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records `op` applied to `inputs`. Throws NonFiniteError naming the node
  /// when the result is not finite.
  Var apply(std::shared_ptr<const Op> op, std::vector<Var> inputs);

  /// Reverse-mode gradient of scalar `output` with respect to each of `wrt`.
  /// Inputs that `output` does not depend on receive zero tensors.
  std::vector<Var> grad(const Var& output, std::span<const Var> wrt, GradOptions options = {});

  /// True while operations applied to the graph are recorded for
  /// differentiation. Backward passes without create_graph switch it off.
  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::uint32_t id) const;
  std::span<const std::uint32_t> inputs_of(std::uint32_t id) const { return nodes_.at(id).inputs; }

  /// Re-executes every recorded operation from the recorded values of its
  /// inputs. Returns the id of the first node whose recomputed value differs
  /// bitwise from the recorded one, or -1 when the replay matches.
  long replay_mismatch() const;

  /// Scope guard that disables recording on a graph.
  class NoRecord {
   public:
    explicit NoRecord(Graph& g) : graph_(g), saved_(g.recording_) { g.recording_ = false; }
    ~NoRecord() { graph_.recording_ = saved_; }
    NoRecord(const NoRecord&) = delete;
    NoRecord& operator=(const NoRecord&) = delete;

   private:
    Graph& graph_;
    bool saved_;
  };

 private:
  struct Node {
    std::shared_ptr<const Op> op;  // null for leaves
    std::vector<std::uint32_t> inputs;
    Tensor value;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

}  // namespace brewlab
