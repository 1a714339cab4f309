#pragma once

// Minimal reverse-mode tape over dense vectors.
//
// Only the operations the policy model needs are provided. Parameter nodes
// alias external storage: their values are read in place and backward()
// accumulates straight into the bound gradient buffer.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

namespace marlhf::ad {

using NodeId = std::uint32_t;

class Tape {
 public:
  // A rows x cols row-major parameter. `grad` may be null for frozen values.
  NodeId parameter(std::span<const double> value, double* grad, std::size_t rows,
                   std::size_t cols);
  NodeId constant(std::vector<double> value);

  // Row `index` of a (parameter) table.
  NodeId row(NodeId table, std::size_t index);
  // bias + sum_k W_k x_k, with W_k a rows x cols parameter.
  NodeId affine(NodeId bias, std::initializer_list<std::pair<NodeId, NodeId>> terms);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId sigmoid(NodeId a);
  NodeId tanh(NodeId a);
  NodeId log_softmax(NodeId a);

  std::span<const double> value(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Adds `g` to d(output)/d(node[index]); call before backward().
  void seed(NodeId id, std::size_t index, double g);
  // Propagates all seeded gradients to the parameter buffers, then clears
  // the intermediate gradients so the tape can be seeded again.
  void backward();

 private:
  enum class Op : std::uint8_t {
    Parameter, Constant, Row, Affine, Add, Sub, Mul, Sigmoid, Tanh, LogSoftmax
  };
  struct Node {
    Op op;
    NodeId a = 0;
    NodeId b = 0;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t index = 0;  // Row: row index; Affine: first term in terms_
    std::size_t count = 0;  // Affine: number of terms
    std::vector<double> value;
    std::vector<double> grad;
    const double* ext_value = nullptr;
    double* ext_grad = nullptr;
  };

  NodeId push(Node node);
  const double* data(const Node& n) const {
    return n.ext_value != nullptr ? n.ext_value : n.value.data();
  }
  double* grad_of(NodeId id);

  std::vector<Node> nodes_;
  std::vector<std::pair<NodeId, NodeId>> terms_;
};

}  // namespace marlhf::ad
