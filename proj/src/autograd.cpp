#include "prefseg/autograd.hpp"

#include <cmath>

#include "prefseg/ensemble.hpp"
#include "prefseg/error.hpp"

namespace prefseg::autograd {

using Eigen::MatrixXd;

const MatrixXd& Var::value() const { return tape->value(id); }

Var Tape::leaf(const MatrixXd& value, MatrixXd* grad_sink) {
  Node n;
  n.value = value;
  n.sink = grad_sink;
  n.needs_grad = grad_sink != nullptr;
  if (grad_sink != nullptr && grad_sink->size() == 0) {
    grad_sink->setZero(value.rows(), value.cols());
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(MatrixXd value, std::vector<int> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  n.parents = std::move(parents);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

MatrixXd& Tape::grad(int id) {
  auto& n = nodes_[id];
  if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw ShapeError("backward: root must be a scalar");
  }
  std::pair<Var, MatrixXd> seed{root, MatrixXd::Ones(1, 1)};
  backward(std::span<const std::pair<Var, MatrixXd>>(&seed, 1));
}

void Tape::backward(std::span<const std::pair<Var, MatrixXd>> seeds) {
  for (const auto& [v, g] : seeds) {
    if (g.rows() != v.rows() || g.cols() != v.cols()) {
      throw ShapeError("backward: seed gradient shape mismatch");
    }
    grad(v.id) += g;
  }
  sweep();
}

void Tape::sweep() {
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, id);
    } else if (n.sink != nullptr) {
      *n.sink += n.grad;
    }
  }
}

namespace {

void accumulate(Tape& t, int id, const MatrixXd& g) {
  if (t.needs_grad(id)) t.grad(id) += g;
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  return a.tape->push(a.value() * b.value(), {a.id, b.id}, [a, b](Tape& t, int self) {
    const MatrixXd& g = t.grad(self);
    accumulate(t, a.id, g * t.value(b.id).transpose());
    accumulate(t, b.id, t.value(a.id).transpose() * g);
  });
}

Var add(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
  return a.tape->push(a.value() + b.value(), {a.id, b.id}, [a, b](Tape& t, int self) {
    accumulate(t, a.id, t.grad(self));
    accumulate(t, b.id, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("sub: shape mismatch");
  return a.tape->push(a.value() - b.value(), {a.id, b.id}, [a, b](Tape& t, int self) {
    accumulate(t, a.id, t.grad(self));
    accumulate(t, b.id, -t.grad(self));
  });
}

Var add_row(Var a, Var r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ShapeError("add_row: shape mismatch");
  MatrixXd v = a.value().rowwise() + r.value().row(0);
  return a.tape->push(std::move(v), {a.id, r.id}, [a, r](Tape& t, int self) {
    accumulate(t, a.id, t.grad(self));
    accumulate(t, r.id, t.grad(self).colwise().sum());
  });
}

Var mul(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mul: shape mismatch");
  return a.tape->push(a.value().cwiseProduct(b.value()), {a.id, b.id},
                      [a, b](Tape& t, int self) {
                        accumulate(t, a.id, t.grad(self).cwiseProduct(t.value(b.id)));
                        accumulate(t, b.id, t.grad(self).cwiseProduct(t.value(a.id)));
                      });
}

Var scale(Var a, double s) {
  return a.tape->push(a.value() * s, {a.id},
                      [a, s](Tape& t, int self) { accumulate(t, a.id, t.grad(self) * s); });
}

Var tanh(Var a) {
  MatrixXd v = a.value().array().tanh().matrix();
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    const auto& y = t.value(self).array();
    accumulate(t, a.id, (t.grad(self).array() * (1.0 - y * y)).matrix());
  });
}

Var sigmoid(Var a) {
  MatrixXd v = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    const auto& y = t.value(self).array();
    accumulate(t, a.id, (t.grad(self).array() * y * (1.0 - y)).matrix());
  });
}

Var exp(Var a) {
  MatrixXd v = a.value().array().exp().matrix();
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    accumulate(t, a.id, t.grad(self).cwiseProduct(t.value(self)));
  });
}

Var transpose(Var a) {
  return a.tape->push(a.value().transpose(), {a.id}, [a](Tape& t, int self) {
    accumulate(t, a.id, t.grad(self).transpose());
  });
}

Var log_softmax_rows(Var a) {
  MatrixXd v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    const double lse = mx + std::log((v.row(r).array() - mx).exp().sum());
    v.row(r).array() -= lse;
  }
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    const MatrixXd& g = t.grad(self);
    const MatrixXd p = t.value(self).array().exp().matrix();
    MatrixXd out = g;
    for (Eigen::Index r = 0; r < g.rows(); ++r) out.row(r) -= g.row(r).sum() * p.row(r);
    accumulate(t, a.id, out);
  });
}

Var softmax_rows(Var a) {
  MatrixXd v = a.value();
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    v.row(r) = (v.row(r).array() - mx).exp().matrix();
    v.row(r) /= v.row(r).sum();
  }
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    const MatrixXd& g = t.grad(self);
    const MatrixXd& p = t.value(self);
    MatrixXd out(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double dot = g.row(r).dot(p.row(r));
      out.row(r) = p.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    accumulate(t, a.id, out);
  });
}

Var pick(Var a, Eigen::Index r, Eigen::Index c) {
  MatrixXd v(1, 1);
  v(0, 0) = a.value()(r, c);
  return a.tape->push(std::move(v), {a.id}, [a, r, c](Tape& t, int self) {
    if (!t.needs_grad(a.id)) return;
    t.grad(a.id)(r, c) += t.grad(self)(0, 0);
  });
}

Var row(Var a, Eigen::Index r) {
  return a.tape->push(a.value().row(r), {a.id}, [a, r](Tape& t, int self) {
    if (!t.needs_grad(a.id)) return;
    t.grad(a.id).row(r) += t.grad(self).row(0);
  });
}

Var top_rows(Var a, Eigen::Index n) {
  if (n < 1 || n > a.rows()) throw ShapeError("top_rows: row count out of range");
  return a.tape->push(a.value().topRows(n), {a.id}, [a, n](Tape& t, int self) {
    if (!t.needs_grad(a.id)) return;
    t.grad(a.id).topRows(n) += t.grad(self);
  });
}

Var vstack(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("vstack: nothing to stack");
  Tape* tape = parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  MatrixXd v(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape->push(std::move(v), ids, [ids](Tape& t, int self) {
    Eigen::Index offset = 0;
    for (int id : ids) {
      const Eigen::Index n = t.value(id).rows();
      if (t.needs_grad(id)) t.grad(id) += t.grad(self).middleRows(offset, n);
      offset += n;
    }
  });
}

Var sum(Var a) {
  MatrixXd v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->push(std::move(v), {a.id}, [a](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    accumulate(t, a.id, MatrixXd::Constant(t.value(a.id).rows(), t.value(a.id).cols(), g));
  });
}

Var bce_with_logits(Var logits, const MatrixXd& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ShapeError("bce_with_logits: target shape mismatch");
  }
  const auto& x = logits.value().array();
  // max(x, 0) - x t + log(1 + exp(-|x|))
  const double n = static_cast<double>(x.size());
  MatrixXd v(1, 1);
  v(0, 0) = (x.max(0.0) - x * targets.array() + (-x.abs()).exp().log1p()).sum() / n;
  return logits.tape->push(std::move(v), {logits.id},
                           [logits, targets, n](Tape& t, int self) {
                             const double g = t.grad(self)(0, 0);
                             const MatrixXd p = t.value(logits.id).unaryExpr([](double z) {
                               return z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                                             : std::exp(z) / (1.0 + std::exp(z));
                             });
                             accumulate(t, logits.id, (p - targets) * (g / n));
                           });
}

Var soft_iou(Var logits, const MatrixXd& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw ShapeError("soft_iou: target shape mismatch");
  }
  const MatrixXd p = logits.value().unaryExpr([](double z) {
    return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  });
  const double inter = p.cwiseProduct(targets).sum();
  const double uni = (p + targets - p.cwiseProduct(targets)).sum();
  if (!(uni > 0)) throw NumericError("soft_iou: empty union");
  MatrixXd v(1, 1);
  v(0, 0) = inter / uni;
  return logits.tape->push(std::move(v), {logits.id},
                           [logits, targets, p, inter, uni](Tape& t, int self) {
                             const double g = t.grad(self)(0, 0);
                             // d iou / d p = t / U - I (1 - t) / U^2
                             MatrixXd dp = targets / uni -
                                           (inter / (uni * uni)) *
                                               (MatrixXd::Ones(p.rows(), p.cols()) - targets);
                             MatrixXd dz = dp.cwiseProduct(p.cwiseProduct(
                                 (MatrixXd::Ones(p.rows(), p.cols()) - p)));
                             accumulate(t, logits.id, dz * g);
                           });
}

Var biased_attention(Var q, Var k, Var v, double d_k, std::span<const double> gamma) {
  auto res = ensemble::biased_attention(q.value(), k.value(), v.value(), d_k, gamma);
  MatrixXd weights = std::move(res.weights);
  return q.tape->push(
      std::move(res.output), {q.id, k.id, v.id},
      [q, k, v, d_k, weights = std::move(weights)](Tape& t, int self) {
        const MatrixXd& g = t.grad(self);
        const double s = 1.0 / std::sqrt(d_k);
        accumulate(t, v.id, weights.transpose() * g);
        const MatrixXd dw = g * t.value(v.id).transpose();
        MatrixXd dlogits(weights.rows(), weights.cols());
        for (Eigen::Index r = 0; r < weights.rows(); ++r) {
          const double dot = dw.row(r).dot(weights.row(r));
          dlogits.row(r) = weights.row(r).cwiseProduct((dw.row(r).array() - dot).matrix());
        }
        accumulate(t, q.id, dlogits * t.value(k.id) * s);
        accumulate(t, k.id, dlogits.transpose() * t.value(q.id) * s);
      });
}

}  // namespace prefseg::autograd
