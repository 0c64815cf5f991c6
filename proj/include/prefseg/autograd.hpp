#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <vector>

namespace prefseg::autograd {

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Eigen::MatrixXd& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
/// order, so a reverse sweep is a valid topological order.
class Tape {
 public:
  /// A leaf whose gradient is accumulated into *grad_sink on backward.
  /// A null sink makes the leaf a constant.
  Var leaf(const Eigen::MatrixXd& value, Eigen::MatrixXd* grad_sink = nullptr);
  Var constant(const Eigen::MatrixXd& value) { return leaf(value, nullptr); }

  using BackwardFn = std::function<void(Tape&, int self)>;
  Var push(Eigen::MatrixXd value, std::vector<int> parents, BackwardFn backward);

  const Eigen::MatrixXd& value(int id) const { return nodes_[id].value; }
  Eigen::MatrixXd& grad(int id);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and sweeps.
  void backward(Var root);
  /// Seeds arbitrary upstream gradients, then sweeps once.
  void backward(std::span<const std::pair<Var, Eigen::MatrixXd>> seeds);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;  // empty until touched
    std::vector<int> parents;
    BackwardFn backward;
    Eigen::MatrixXd* sink = nullptr;
    bool needs_grad = false;
  };

  void sweep();

  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a (r x c) + row (1 x c) broadcast over rows.
Var add_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var transpose(Var a);
Var log_softmax_rows(Var a);
Var softmax_rows(Var a);
/// Single element as a 1x1 node.
Var pick(Var a, Eigen::Index r, Eigen::Index c);
Var row(Var a, Eigen::Index r);
/// First n rows.
Var top_rows(Var a, Eigen::Index n);
Var vstack(std::span<const Var> parts);
Var sum(Var a);
/// Mean binary cross-entropy of sigmoid(logits) against {0,1} targets.
Var bce_with_logits(Var logits, const Eigen::MatrixXd& targets);
/// Soft IoU sum(p t) / sum(p + t - p t) with p = sigmoid(logits).
Var soft_iou(Var logits, const Eigen::MatrixXd& targets);
/// Softmax(q k^T / sqrt(d_k) + gamma) v, gamma on the key axis.
Var biased_attention(Var q, Var k, Var v, double d_k, std::span<const double> gamma);

}  // namespace prefseg::autograd
