#pragma once

#include "ver/types.hpp"

#include <functional>
#include <vector>

namespace ver {

/// Reverse-mode tape over a small matrix-op vocabulary. Nodes are created in
/// topological order; backward() walks them in reverse and accumulates
/// adjoints. Values are dense row-major-batch matrices (rows = batch items).
class Tape {
 public:
  using NodeId = int;

  NodeId constant(Matrix v);
  NodeId leaf(Matrix v);  // trainable input, receives a gradient

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId cmul(NodeId a, NodeId b);
  NodeId add_rowvec(NodeId a, NodeId bias);       // bias is 1 x n
  NodeId broadcast_rows(NodeId a, int rows);      // 1 x n -> rows x n
  NodeId replicate_cols(NodeId a, int cols);      // S x 1 -> S x cols
  NodeId scale(NodeId a, Scalar s);
  NodeId add_scalar(NodeId a, Scalar c);
  NodeId tanh_op(NodeId a);
  NodeId sigmoid_op(NodeId a);
  NodeId exp_op(NodeId a);
  NodeId log_op(NodeId a);
  NodeId clip(NodeId a, Scalar lo, Scalar hi);
  NodeId cmin(NodeId a, NodeId b);
  NodeId detach(NodeId a);
  NodeId rows(NodeId a, int start, int count);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId row_sum(NodeId a);                       // S x n -> S x 1
  NodeId sum_all(NodeId a);                       // -> 1 x 1
  NodeId mean_all(NodeId a);                      // -> 1 x 1
  NodeId gather_cols(NodeId a, std::vector<int> idx);  // out(s,0) = a(s, idx[s])

  const Matrix& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  /// Seeds the (1x1) root with 1 and propagates adjoints. Throws on a
  /// non-finite root value or non-finite leaf gradients.
  void backward(NodeId root);

  /// Gradient of the last backward() wrt the given node (zero if untouched).
  Matrix grad(NodeId id) const;

  int size() const { return static_cast<int>(nodes_.size()); }
  void clear();

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::function<void(Tape&, const Matrix&)> back;
  };

  NodeId push(Matrix v, bool requires_grad, std::function<void(Tape&, const Matrix&)> back);
  void accum(NodeId id, const Matrix& g);

  std::vector<Node> nodes_;
};

}  // namespace ver
