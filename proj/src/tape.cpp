#include "ver/tape.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace ver {

Tape::NodeId Tape::push(Matrix v, bool requires_grad,
                        std::function<void(Tape&, const Matrix&)> back) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::accum(NodeId id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  n.grad += g;
}

Tape::NodeId Tape::constant(Matrix v) { return push(std::move(v), false, nullptr); }

Tape::NodeId Tape::leaf(Matrix v) {
  if (!v.allFinite()) throw ProtocolError("tape: non-finite leaf value");
  return push(std::move(v), true, nullptr);
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
  Matrix v = nodes_[a].value * nodes_[b].value;
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(v), rg, [a, b](Tape& t, const Matrix& g) {
    t.accum(a, g * t.nodes_[b].value.transpose());
    t.accum(b, t.nodes_[a].value.transpose() * g);
  });
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  Matrix v = nodes_[a].value + nodes_[b].value;
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(v), rg, [a, b](Tape& t, const Matrix& g) {
    t.accum(a, g);
    t.accum(b, g);
  });
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
  Matrix v = nodes_[a].value - nodes_[b].value;
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(v), rg, [a, b](Tape& t, const Matrix& g) {
    t.accum(a, g);
    t.accum(b, -g);
  });
}

Tape::NodeId Tape::cmul(NodeId a, NodeId b) {
  Matrix v = nodes_[a].value.cwiseProduct(nodes_[b].value);
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(v), rg, [a, b](Tape& t, const Matrix& g) {
    t.accum(a, g.cwiseProduct(t.nodes_[b].value));
    t.accum(b, g.cwiseProduct(t.nodes_[a].value));
  });
}

Tape::NodeId Tape::add_rowvec(NodeId a, NodeId bias) {
  Matrix v = nodes_[a].value.rowwise() + nodes_[bias].value.row(0);
  const bool rg = nodes_[a].requires_grad || nodes_[bias].requires_grad;
  return push(std::move(v), rg, [a, bias](Tape& t, const Matrix& g) {
    t.accum(a, g);
    t.accum(bias, g.colwise().sum());
  });
}

Tape::NodeId Tape::broadcast_rows(NodeId a, int rows) {
  Matrix v = nodes_[a].value.row(0).colwise().replicate(rows);
  return push(std::move(v), nodes_[a].requires_grad, [a](Tape& t, const Matrix& g) {
    t.accum(a, g.colwise().sum());
  });
}

Tape::NodeId Tape::replicate_cols(NodeId a, int cols) {
  Matrix v = nodes_[a].value.col(0).rowwise().replicate(cols);
  return push(std::move(v), nodes_[a].requires_grad, [a](Tape& t, const Matrix& g) {
    t.accum(a, g.rowwise().sum());
  });
}

Tape::NodeId Tape::scale(NodeId a, Scalar s) {
  Matrix v = nodes_[a].value * s;
  return push(std::move(v), nodes_[a].requires_grad,
              [a, s](Tape& t, const Matrix& g) { t.accum(a, g * s); });
}

Tape::NodeId Tape::add_scalar(NodeId a, Scalar c) {
  Matrix v = nodes_[a].value.array() + c;
  return push(std::move(v), nodes_[a].requires_grad,
              [a](Tape& t, const Matrix& g) { t.accum(a, g); });
}

Tape::NodeId Tape::tanh_op(NodeId a) {
  Matrix v = nodes_[a].value.array().tanh();
  NodeId out = push(std::move(v), nodes_[a].requires_grad, nullptr);
  nodes_[out].back = [a, out](Tape& t, const Matrix& g) {
    const Matrix& y = t.nodes_[out].value;
    t.accum(a, (g.array() * (1.0 - y.array().square())).matrix());
  };
  return out;
}

Tape::NodeId Tape::sigmoid_op(NodeId a) {
  Matrix v = (1.0 / (1.0 + (-nodes_[a].value.array()).exp())).matrix();
  NodeId out = push(std::move(v), nodes_[a].requires_grad, nullptr);
  nodes_[out].back = [a, out](Tape& t, const Matrix& g) {
    const Matrix& y = t.nodes_[out].value;
    t.accum(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  };
  return out;
}

Tape::NodeId Tape::exp_op(NodeId a) {
  Matrix v = nodes_[a].value.array().exp();
  NodeId out = push(std::move(v), nodes_[a].requires_grad, nullptr);
  nodes_[out].back = [a, out](Tape& t, const Matrix& g) {
    t.accum(a, g.cwiseProduct(t.nodes_[out].value));
  };
  return out;
}

Tape::NodeId Tape::log_op(NodeId a) {
  Matrix v = nodes_[a].value.array().log();
  return push(std::move(v), nodes_[a].requires_grad, [a](Tape& t, const Matrix& g) {
    t.accum(a, g.cwiseQuotient(t.nodes_[a].value));
  });
}

Tape::NodeId Tape::clip(NodeId a, Scalar lo, Scalar hi) {
  Matrix v = nodes_[a].value.cwiseMax(lo).cwiseMin(hi);
  return push(std::move(v), nodes_[a].requires_grad, [a, lo, hi](Tape& t, const Matrix& g) {
    const Matrix& x = t.nodes_[a].value;
    Matrix mask = ((x.array() >= lo).cast<Scalar>() * (x.array() <= hi).cast<Scalar>()).matrix();
    t.accum(a, g.cwiseProduct(mask));
  });
}

Tape::NodeId Tape::cmin(NodeId a, NodeId b) {
  Matrix v = nodes_[a].value.cwiseMin(nodes_[b].value);
  const bool rg = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(v), rg, [a, b](Tape& t, const Matrix& g) {
    const Matrix& xa = t.nodes_[a].value;
    const Matrix& xb = t.nodes_[b].value;
    Matrix mask_a = (xa.array() <= xb.array()).cast<Scalar>().matrix();
    t.accum(a, g.cwiseProduct(mask_a));
    t.accum(b, g.cwiseProduct((Matrix::Ones(g.rows(), g.cols()) - mask_a)));
  });
}

Tape::NodeId Tape::detach(NodeId a) { return push(nodes_[a].value, false, nullptr); }

Tape::NodeId Tape::rows(NodeId a, int start, int count) {
  Matrix v = nodes_[a].value.middleRows(start, count);
  return push(std::move(v), nodes_[a].requires_grad, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(t.nodes_[a].value.rows(), t.nodes_[a].value.cols());
    full.middleRows(start, count) = g;
    t.accum(a, full);
  });
}

Tape::NodeId Tape::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ProtocolError("tape: concat_rows on empty list");
  int rows = 0;
  bool rg = false;
  const int cols = static_cast<int>(nodes_[parts[0]].value.cols());
  for (NodeId p : parts) {
    rows += static_cast<int>(nodes_[p].value.rows());
    rg = rg || nodes_[p].requires_grad;
  }
  Matrix v(rows, cols);
  int at = 0;
  for (NodeId p : parts) {
    const int r = static_cast<int>(nodes_[p].value.rows());
    v.middleRows(at, r) = nodes_[p].value;
    at += r;
  }
  std::vector<NodeId> ids = parts;
  return push(std::move(v), rg, [ids](Tape& t, const Matrix& g) {
    int at = 0;
    for (NodeId p : ids) {
      const int r = static_cast<int>(t.nodes_[p].value.rows());
      t.accum(p, g.middleRows(at, r));
      at += r;
    }
  });
}

Tape::NodeId Tape::row_sum(NodeId a) {
  Matrix v = nodes_[a].value.rowwise().sum();
  return push(std::move(v), nodes_[a].requires_grad, [a](Tape& t, const Matrix& g) {
    const int cols = static_cast<int>(t.nodes_[a].value.cols());
    t.accum(a, g.col(0).rowwise().replicate(cols));
  });
}

Tape::NodeId Tape::sum_all(NodeId a) {
  Matrix v(1, 1);
  v(0, 0) = nodes_[a].value.sum();
  return push(std::move(v), nodes_[a].requires_grad, [a](Tape& t, const Matrix& g) {
    t.accum(a, Matrix::Constant(t.nodes_[a].value.rows(), t.nodes_[a].value.cols(), g(0, 0)));
  });
}

Tape::NodeId Tape::mean_all(NodeId a) {
  const Scalar inv = 1.0 / static_cast<Scalar>(nodes_[a].value.size());
  Matrix v(1, 1);
  v(0, 0) = nodes_[a].value.sum() * inv;
  return push(std::move(v), nodes_[a].requires_grad, [a, inv](Tape& t, const Matrix& g) {
    t.accum(a, Matrix::Constant(t.nodes_[a].value.rows(), t.nodes_[a].value.cols(),
                                g(0, 0) * inv));
  });
}

Tape::NodeId Tape::gather_cols(NodeId a, std::vector<int> idx) {
  const Matrix& x = nodes_[a].value;
  if (static_cast<int>(idx.size()) != x.rows()) {
    throw ProtocolError("tape: gather_cols index count mismatch");
  }
  Matrix v(x.rows(), 1);
  for (int i = 0; i < x.rows(); ++i) v(i, 0) = x(i, idx[i]);
  return push(std::move(v), nodes_[a].requires_grad,
              [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
                Matrix full = Matrix::Zero(t.nodes_[a].value.rows(), t.nodes_[a].value.cols());
                for (int i = 0; i < full.rows(); ++i) full(i, idx[i]) += g(i, 0);
                t.accum(a, full);
              });
}

void Tape::backward(NodeId root) {
  const Node& r = nodes_[root];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw ProtocolError("tape: backward root must be 1x1");
  }
  if (!std::isfinite(r.value(0, 0))) {
    throw ProtocolError("tape: non-finite loss value");
  }
  accum(root, Matrix::Ones(1, 1));
  for (NodeId id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() != 0 && n.back) {
      n.back(*this, n.grad);
    }
  }
}

Matrix Tape::grad(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  if (!n.grad.allFinite()) throw ProtocolError("tape: non-finite gradient");
  return n.grad;
}

void Tape::clear() { nodes_.clear(); }

}  // namespace ver
