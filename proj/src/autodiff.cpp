#include "marlhf/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>

#include "marlhf/errors.hpp"

namespace marlhf::ad {

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::parameter(std::span<const double> value, double* grad, std::size_t rows,
                       std::size_t cols) {
  if (value.size() != rows * cols) throw ShapeError("parameter shape mismatch");
  Node n{Op::Parameter};
  n.rows = rows;
  n.cols = cols;
  n.ext_value = value.data();
  n.ext_grad = grad;
  return push(std::move(n));
}

NodeId Tape::constant(std::vector<double> value) {
  Node n{Op::Constant};
  n.rows = value.size();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::row(NodeId table, std::size_t index) {
  const Node& t = nodes_[table];
  if (index >= t.rows) throw ShapeError("row index out of range");
  Node n{Op::Row, table};
  n.rows = t.cols;
  n.index = index;
  const double* src = data(t) + index * t.cols;
  n.value.assign(src, src + t.cols);
  return push(std::move(n));
}

NodeId Tape::affine(NodeId bias, std::initializer_list<std::pair<NodeId, NodeId>> terms) {
  const Node& b = nodes_[bias];
  const std::size_t rows = b.rows * b.cols;
  Node n{Op::Affine, bias};
  n.rows = rows;
  n.index = terms_.size();
  n.count = terms.size();
  n.value.assign(data(b), data(b) + rows);
  for (const auto& [w_id, x_id] : terms) {
    const Node& w = nodes_[w_id];
    const Node& x = nodes_[x_id];
    if (w.rows != rows || w.cols != x.rows * x.cols) throw ShapeError("affine shape mismatch");
    const double* wd = data(w);
    const double* xd = data(x);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* wr = wd + i * w.cols;
      double acc = 0.0;
      for (std::size_t j = 0; j < w.cols; ++j) acc += wr[j] * xd[j];
      n.value[i] += acc;
    }
    terms_.emplace_back(w_id, x_id);
  }
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Node& x = nodes_[a];
  const Node& y = nodes_[b];
  Node n{Op::Add, a, b};
  n.rows = x.rows * x.cols;
  if (y.rows * y.cols != n.rows) throw ShapeError("add shape mismatch");
  n.value.resize(n.rows);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = data(x)[i] + data(y)[i];
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Node& x = nodes_[a];
  const Node& y = nodes_[b];
  Node n{Op::Sub, a, b};
  n.rows = x.rows * x.cols;
  if (y.rows * y.cols != n.rows) throw ShapeError("sub shape mismatch");
  n.value.resize(n.rows);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = data(x)[i] - data(y)[i];
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Node& x = nodes_[a];
  const Node& y = nodes_[b];
  Node n{Op::Mul, a, b};
  n.rows = x.rows * x.cols;
  if (y.rows * y.cols != n.rows) throw ShapeError("mul shape mismatch");
  n.value.resize(n.rows);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = data(x)[i] * data(y)[i];
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  const Node& x = nodes_[a];
  Node n{Op::Sigmoid, a};
  n.rows = x.rows * x.cols;
  n.value.resize(n.rows);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = 1.0 / (1.0 + std::exp(-data(x)[i]));
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  const Node& x = nodes_[a];
  Node n{Op::Tanh, a};
  n.rows = x.rows * x.cols;
  n.value.resize(n.rows);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = std::tanh(data(x)[i]);
  return push(std::move(n));
}

NodeId Tape::log_softmax(NodeId a) {
  const Node& x = nodes_[a];
  Node n{Op::LogSoftmax, a};
  n.rows = x.rows * x.cols;
  n.value.resize(n.rows);
  const double* xd = data(x);
  const double mx = *std::max_element(xd, xd + n.rows);
  double sum = 0.0;
  for (std::size_t i = 0; i < n.rows; ++i) sum += std::exp(xd[i] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n.rows; ++i) n.value[i] = xd[i] - lse;
  return push(std::move(n));
}

std::span<const double> Tape::value(NodeId id) const {
  const Node& n = nodes_[id];
  return {data(n), n.rows * n.cols};
}

double* Tape::grad_of(NodeId id) {
  Node& n = nodes_[id];
  if (n.op == Op::Parameter) return n.ext_grad;
  if (n.op == Op::Constant) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.rows * n.cols, 0.0);
  return n.grad.data();
}

void Tape::seed(NodeId id, std::size_t index, double g) {
  double* gr = grad_of(id);
  assert(gr != nullptr);
  gr[index] += g;
}

void Tape::backward() {
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    Node& n = nodes_[k];
    if (n.op == Op::Parameter || n.op == Op::Constant || n.grad.empty()) continue;
    // Copy out: grad_of() below may reallocate other nodes' buffers but never
    // this node's, still keep a stable local.
    std::vector<double> g = std::move(n.grad);
    n.grad.clear();
    const std::size_t size = g.size();
    switch (n.op) {
      case Op::Row: {
        double* dt = grad_of(n.a);
        if (dt == nullptr) break;
        const std::size_t cols = nodes_[n.a].cols;
        for (std::size_t i = 0; i < size; ++i) dt[n.index * cols + i] += g[i];
        break;
      }
      case Op::Affine: {
        if (double* db = grad_of(n.a)) {
          for (std::size_t i = 0; i < size; ++i) db[i] += g[i];
        }
        for (std::size_t t = 0; t < n.count; ++t) {
          const auto [w_id, x_id] = terms_[n.index + t];
          const std::size_t cols = nodes_[w_id].cols;
          const double* wd = data(nodes_[w_id]);
          const double* xd = data(nodes_[x_id]);
          if (double* dw = grad_of(w_id)) {
            for (std::size_t i = 0; i < size; ++i) {
              if (g[i] == 0.0) continue;
              double* row = dw + i * cols;
              for (std::size_t j = 0; j < cols; ++j) row[j] += g[i] * xd[j];
            }
          }
          if (double* dx = grad_of(x_id)) {
            for (std::size_t i = 0; i < size; ++i) {
              if (g[i] == 0.0) continue;
              const double* row = wd + i * cols;
              for (std::size_t j = 0; j < cols; ++j) dx[j] += g[i] * row[j];
            }
          }
        }
        break;
      }
      case Op::Add:
      case Op::Sub: {
        const double sign = n.op == Op::Add ? 1.0 : -1.0;
        if (double* da = grad_of(n.a)) {
          for (std::size_t i = 0; i < size; ++i) da[i] += g[i];
        }
        if (double* db = grad_of(n.b)) {
          for (std::size_t i = 0; i < size; ++i) db[i] += sign * g[i];
        }
        break;
      }
      case Op::Mul: {
        const double* xa = data(nodes_[n.a]);
        const double* xb = data(nodes_[n.b]);
        if (double* da = grad_of(n.a)) {
          for (std::size_t i = 0; i < size; ++i) da[i] += g[i] * xb[i];
        }
        if (double* db = grad_of(n.b)) {
          for (std::size_t i = 0; i < size; ++i) db[i] += g[i] * xa[i];
        }
        break;
      }
      case Op::Sigmoid: {
        if (double* da = grad_of(n.a)) {
          for (std::size_t i = 0; i < size; ++i) {
            da[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
          }
        }
        break;
      }
      case Op::Tanh: {
        if (double* da = grad_of(n.a)) {
          for (std::size_t i = 0; i < size; ++i) {
            da[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
          }
        }
        break;
      }
      case Op::LogSoftmax: {
        if (double* da = grad_of(n.a)) {
          double gsum = 0.0;
          for (std::size_t i = 0; i < size; ++i) gsum += g[i];
          for (std::size_t i = 0; i < size; ++i) {
            da[i] += g[i] - std::exp(n.value[i]) * gsum;
          }
        }
        break;
      }
      case Op::Parameter:
      case Op::Constant:
        break;
    }
  }
}

}  // namespace marlhf::ad
