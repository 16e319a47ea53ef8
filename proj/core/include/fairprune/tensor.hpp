#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fairprune/errors.hpp"

namespace fairprune {

// Dense row-major tensor of 64-bit floats with shared storage. A Tensor is a
// cheap handle; copies alias the same buffer (clone() deep-copies). Gradients
// live on leaf tensors marked requires_grad and are filled by Graph::backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(storage_); }
  const std::vector<std::size_t>& shape() const;
  std::size_t size() const;
  std::size_t rows() const;  // rank-2 helpers
  std::size_t cols() const;

  std::span<double> values();
  std::span<const double> values() const;
  double value() const;  // scalar access; ContractError if size != 1

  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  // Gradient buffer, allocated zero on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  Tensor clone() const;  // deep copy of values (not grad)

  // Identity of the underlying storage; used by Graph bookkeeping.
  const void* storage_key() const { return storage_.get(); }

 private:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched
    bool requires_grad = false;
    bool interior = false;  // produced by a Graph op
  };
  std::shared_ptr<Storage> storage_;
  friend class Graph;
};

// Reverse-mode tape. Each recorded op appends one node; backward() walks the
// nodes in reverse insertion order exactly once, accumulating adjoints in
// graph-local buffers and flushing leaf adjoints into Tensor::grad (+=, so
// repeated backward calls accumulate unless grads are cleared).
//
// A Graph and the tensors it produced are confined to one thread; distinct
// graphs may run concurrently as long as they do not share parameter tensors'
// grad buffers without external ordering.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Elementwise primitives. Binary ops require identical shapes; the only
  // broadcast is the explicit row-wise bias addition.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor relu(const Tensor& x);
  Tensor exp(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor square(const Tensor& x);

  Tensor matmul(const Tensor& a, const Tensor& b);
  // x is [m x n], bias is [n]; adds bias to every row.
  Tensor add_bias_rows(const Tensor& x, const Tensor& bias);
  Tensor sum(const Tensor& x);            // scalar
  Tensor scale(const Tensor& x, double factor);

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must be scalar.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

  // --- extension surface for fused ops (losses, convolution) ---
  // Creates an interior tensor owned by this graph's tape.
  Tensor make_output(std::vector<std::size_t> shape);
  // Registers a tensor as a node input so leaf gradients get flushed.
  void note_input(const Tensor& t);
  // Appends a backward closure; closures run in reverse insertion order.
  void record(std::function<void(Graph&)> backward_fn);
  // Adjoint of t, or an empty span if nothing has flowed into it.
  std::span<const double> adjoint_view(const Tensor& t) const;
  // Mutable adjoint buffer for t, zero-allocated on first touch.
  std::span<double> adjoint_buffer(const Tensor& t);
  // Whether a closure should bother accumulating into t.
  bool wants_adjoint(const Tensor& t) const;

 private:
  struct Node {
    std::function<void(Graph&)> backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::vector<double>> adjoints_;
  std::vector<Tensor> leaves_;
  std::unordered_set<const void*> leaf_seen_;
};

// Throws NumericError if any entry of `values` is NaN or Inf.
void ensure_finite(std::span<const double> values, const char* op_name);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h. Forward
// evaluations only, so it is independent of the backward implementation.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h);

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace fairprune
