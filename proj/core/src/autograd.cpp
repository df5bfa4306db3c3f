#include "brewlab/autograd.hpp"

#include <cstring>
#include <optional>

#include "brewlab/errors.hpp"
#include "brewlab/ops.hpp"

namespace brewlab {

Var Graph::leaf(Tensor value, bool requires_grad) {
  require_finite(value, "leaf node " + std::to_string(nodes_.size()));
  nodes_.push_back(Node{nullptr, {}, std::move(value), requires_grad});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::apply(std::shared_ptr<const Op> op, std::vector<Var> inputs) {
  std::vector<const Tensor*> values;
  std::vector<std::uint32_t> ids;
  values.reserve(inputs.size());
  ids.reserve(inputs.size());
  bool needs_grad = false;
  for (const auto& v : inputs) {
    if (!v.valid() || &v.graph() != this) {
      throw GraphError(std::string(op->name()) + ": input belongs to a different graph");
    }
    values.push_back(&nodes_[v.id()].value);
    ids.push_back(v.id());
    needs_grad = needs_grad || nodes_[v.id()].requires_grad;
  }
  Tensor out = op->forward(values);
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  require_finite(out, std::string("node ") + std::to_string(id) + " (" + op->name() + ")");
  nodes_.push_back(Node{std::move(op), std::move(ids), std::move(out), needs_grad && recording_});
  return Var(this, id);
}

const char* Graph::op_name(std::uint32_t id) const {
  const auto& n = nodes_.at(id);
  return n.op ? n.op->name() : "leaf";
}

std::vector<Var> Graph::grad(const Var& output, std::span<const Var> wrt, GradOptions options) {
  if (consumed_) throw GraphError("graph consumed: backward already ran without retain_graph");
  if (!output.valid() || &output.graph() != this) throw GraphError("output is not a node of this graph");
  if (output.value().numel() != 1) {
    throw GraphError("backward requires a scalar output, got shape " + to_string(output.shape()));
  }
  if (!nodes_[output.id()].requires_grad) {
    throw GraphError(
        "output does not depend differentiably on any leaf; if it is built from gradients, "
        "the inner backward must run with create_graph");
  }
  const std::uint32_t last = output.id();

  // Nodes through which some requested input can be reached.
  std::vector<char> relevant(last + 1, 0);
  for (const auto& w : wrt) {
    if (&w.graph() != this) throw GraphError("wrt variable belongs to a different graph");
    if (w.id() <= last) relevant[w.id()] = 1;
  }
  for (std::uint32_t id = 0; id <= last; ++id) {
    if (relevant[id]) continue;
    for (auto in : nodes_[id].inputs) {
      if (relevant[in]) {
        relevant[id] = 1;
        break;
      }
    }
  }

  std::optional<NoRecord> guard;
  if (!options.create_graph) guard.emplace(*this);

  std::vector<Var> grads(last + 1);
  grads[last] = constant(Tensor(output.shape(), 1.0));

  for (std::int64_t id = last; id >= 0; --id) {
    const auto uid = static_cast<std::uint32_t>(id);
    if (!grads[uid].valid()) continue;
    // Copy what we need: apply() below may reallocate nodes_.
    std::shared_ptr<const Op> op = nodes_[uid].op;
    if (!op || !nodes_[uid].requires_grad) continue;
    const std::vector<std::uint32_t> in_ids = nodes_[uid].inputs;

    std::vector<Var> in_vars;
    in_vars.reserve(in_ids.size());
    std::unique_ptr<bool[]> needed(new bool[in_ids.size()]);
    bool any = false;
    for (std::size_t i = 0; i < in_ids.size(); ++i) {
      in_vars.emplace_back(this, in_ids[i]);
      needed[i] = relevant[in_ids[i]] && nodes_[in_ids[i]].requires_grad;
      any = any || needed[i];
    }
    if (!any) continue;

    auto in_grads = op->backward(in_vars, Var(this, uid), grads[uid],
                                 std::span<const bool>(needed.get(), in_ids.size()));
    for (std::size_t i = 0; i < in_ids.size(); ++i) {
      if (!needed[i] || !in_grads.at(i).valid()) continue;
      auto& slot = grads[in_ids[i]];
      slot = slot.valid() ? ops::add(slot, in_grads[i]) : in_grads[i];
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    if (w.id() <= last && grads[w.id()].valid()) {
      result.push_back(grads[w.id()]);
    } else {
      result.push_back(constant(Tensor(w.shape(), 0.0)));
    }
  }
  if (!options.create_graph && !options.retain_graph) consumed_ = true;
  return result;
}

long Graph::replay_mismatch() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const auto& n = nodes_[id];
    if (!n.op) continue;
    std::vector<const Tensor*> values;
    for (auto in : n.inputs) values.push_back(&nodes_[in].value);
    Tensor again = n.op->forward(values);
    if (again.shape() != n.value.shape() ||
        std::memcmp(again.data().data(), n.value.data().data(),
                    again.numel() * sizeof(double)) != 0) {
      return static_cast<long>(id);
    }
  }
  return -1;
}

}  // namespace brewlab
