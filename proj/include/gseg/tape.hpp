#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gseg/tensor.hpp"

namespace gseg {

/// Reverse-mode gradient tape. Operations append nodes in execution order
/// (inputs always precede their consumers); backward() walks the list once
/// in reverse. Recording and backward are single-writer.
template <typename T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<int> input_nodes;         // producing node per input, -1 = leaf
    std::function<void()> backward;       // accumulates into inputs' grads
    std::shared_ptr<std::vector<T>> out_grad;  // output grad, reset per pass
  };

  /// Registers the node that produced `out` and stamps provenance on it.
  void record(const std::string& op, const std::vector<int>& input_nodes,
              Tensor<T>& out, std::function<void()> backward) {
    out.requires_grad = true;
    out.tape_id = this;
    out.node_index = static_cast<int>(nodes_.size());
    out.ensure_grad();
    nodes_.push_back(Node{op, input_nodes, std::move(backward), *out.grad});
  }

  bool owns(const Tensor<T>& t) const { return t.tape_id == this; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  void clear() { nodes_.clear(); }

  /// Populates grad buffers of every requires_grad ancestor of `loss`.
  /// Intermediate (tape-produced) grads are reset each call, so repeated
  /// calls accumulate on the leaves.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ValueError("backward: loss must be scalar, got shape " +
                       shape_str(loss.shape));
    }
    if (!owns(loss)) {
      throw ValueError("backward: loss tensor was not produced on this tape");
    }
    for (Node& n : nodes_) {
      std::fill(n.out_grad->begin(), n.out_grad->end(), T(0));
    }
    (*nodes_[static_cast<std::size_t>(loss.node_index)].out_grad)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      nodes_[i].backward();
    }
  }

 private:
  std::vector<Node> nodes_;
};

/// Free-function form used throughout: backward(tape, loss).
template <typename T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  tape.backward(loss);
}

namespace detail {

/// True when the op should record: a tape is active and some input carries
/// gradient interest (requires_grad leaf or tape-produced tensor).
template <typename T>
bool tracing(const Tape<T>* tape,
             std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins) {
    if (t->requires_grad) return true;
  }
  return false;
}

template <typename T>
int node_of(const Tape<T>& tape, const Tensor<T>& t) {
  return tape.owns(t) ? t.node_index : -1;
}

}  // namespace detail

}  // namespace gseg
