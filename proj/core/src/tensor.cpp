#include "fairprune/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace fairprune {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

void require_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

void ensure_finite(std::span<const double> values, const char* op_name) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + ": non-finite value produced");
    }
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw ContractError("Tensor: zero extent in shape");
  }
  Tensor t;
  t.storage_ = std::make_shared<Storage>();
  t.storage_->data.assign(shape_product(shape), 0.0);
  t.storage_->shape = std::move(shape);
  t.storage_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_product(shape) != values.size()) {
    throw DimensionError("Tensor::from: " + shape_to_string(shape) +
                         " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  Tensor t = zeros(std::move(shape), requires_grad);
  std::copy(values.begin(), values.end(), t.storage_->data.begin());
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  require_defined(*this, "Tensor::shape");
  return storage_->shape;
}

std::size_t Tensor::size() const {
  require_defined(*this, "Tensor::size");
  return storage_->data.size();
}

std::size_t Tensor::rows() const {
  if (shape().size() != 2) {
    throw DimensionError("Tensor::rows: rank-2 required, got " +
                         shape_to_string(shape()));
  }
  return storage_->shape[0];
}

std::size_t Tensor::cols() const {
  if (shape().size() != 2) {
    throw DimensionError("Tensor::cols: rank-2 required, got " +
                         shape_to_string(shape()));
  }
  return storage_->shape[1];
}

std::span<double> Tensor::values() {
  require_defined(*this, "Tensor::values");
  return storage_->data;
}

std::span<const double> Tensor::values() const {
  require_defined(*this, "Tensor::values");
  return storage_->data;
}

double Tensor::value() const {
  if (size() != 1) {
    throw ContractError("Tensor::value: scalar expected, got " +
                        shape_to_string(shape()));
  }
  return storage_->data[0];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return storage_->data[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return storage_->data[r * cols() + c];
}

bool Tensor::requires_grad() const {
  require_defined(*this, "Tensor::requires_grad");
  return storage_->requires_grad;
}

std::span<double> Tensor::grad() {
  require_defined(*this, "Tensor::grad");
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), 0.0);
  return storage_->grad;
}

std::span<const double> Tensor::grad() const {
  require_defined(*this, "Tensor::grad");
  if (storage_->grad.empty()) storage_->grad.assign(storage_->data.size(), 0.0);
  return storage_->grad;
}

bool Tensor::has_grad() const {
  return defined() && !storage_->grad.empty();
}

void Tensor::zero_grad() {
  require_defined(*this, "Tensor::zero_grad");
  std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  require_defined(*this, "Tensor::clone");
  Tensor t = zeros(storage_->shape, storage_->requires_grad);
  t.storage_->data = storage_->data;
  return t;
}

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::make_output(std::vector<std::size_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.storage_->interior = true;
  return t;
}

void Graph::note_input(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return;
  if (leaf_seen_.insert(t.storage_key()).second) leaves_.push_back(t);
}

void Graph::record(std::function<void(Graph&)> backward_fn) {
  nodes_.push_back({std::move(backward_fn)});
}

std::span<const double> Graph::adjoint_view(const Tensor& t) const {
  auto it = adjoints_.find(t.storage_key());
  if (it == adjoints_.end()) return {};
  return it->second;
}

std::span<double> Graph::adjoint_buffer(const Tensor& t) {
  auto [it, inserted] = adjoints_.try_emplace(t.storage_key());
  if (inserted) it->second.assign(t.size(), 0.0);
  return it->second;
}

bool Graph::wants_adjoint(const Tensor& t) const {
  return t.defined() && (t.requires_grad() || t.storage_->interior);
}

void Graph::backward(const Tensor& loss) {
  require_defined(loss, "Graph::backward");
  if (loss.size() != 1) {
    throw ContractError("Graph::backward: loss must be scalar, got " +
                        shape_to_string(loss.shape()));
  }
  adjoints_.clear();
  adjoint_buffer(loss)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward(*this);
  }
  for (Tensor& leaf : leaves_) {
    auto adj = adjoint_view(leaf);
    if (adj.empty()) continue;
    auto g = leaf.grad();
    for (std::size_t i = 0; i < adj.size(); ++i) g[i] += adj[i];
  }
  adjoints_.clear();
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  Tensor out = make_output(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  ensure_finite(ov, "add");
  note_input(a);
  note_input(b);
  record([a, b, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty()) return;
    for (const Tensor& in : {a, b}) {
      if (!g.wants_adjoint(in)) continue;
      auto buf = g.adjoint_buffer(in);
      for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i];
    }
  });
  return out;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out = make_output(a.shape());
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  ensure_finite(ov, "mul");
  note_input(a);
  note_input(b);
  record([a, b, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty()) return;
    if (g.wants_adjoint(a)) {
      auto buf = g.adjoint_buffer(a);
      auto bv2 = b.values();
      for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] * bv2[i];
    }
    if (g.wants_adjoint(b)) {
      auto buf = g.adjoint_buffer(b);
      auto av2 = a.values();
      for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] * av2[i];
    }
  });
  return out;
}

Tensor Graph::relu(const Tensor& x) {
  require_defined(x, "relu");
  Tensor out = make_output(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  ensure_finite(ov, "relu");
  note_input(x);
  // Subgradient at 0 is taken as 0.
  record([x, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    auto xv2 = x.values();
    for (std::size_t i = 0; i < oa.size(); ++i) {
      if (xv2[i] > 0.0) buf[i] += oa[i];
    }
  });
  return out;
}

Tensor Graph::exp(const Tensor& x) {
  require_defined(x, "exp");
  Tensor out = make_output(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(xv[i]);
  ensure_finite(ov, "exp");
  note_input(x);
  record([x, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    auto ov2 = out.values();
    for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] * ov2[i];
  });
  return out;
}

Tensor Graph::log(const Tensor& x) {
  require_defined(x, "log");
  auto xv = x.values();
  for (double v : xv) {
    if (v <= 0.0) {
      throw DomainError("log: non-positive entry " + std::to_string(v));
    }
  }
  Tensor out = make_output(x.shape());
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  ensure_finite(ov, "log");
  note_input(x);
  record([x, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    auto xv2 = x.values();
    for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] / xv2[i];
  });
  return out;
}

Tensor Graph::square(const Tensor& x) {
  require_defined(x, "square");
  Tensor out = make_output(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * xv[i];
  ensure_finite(ov, "square");
  note_input(x);
  record([x, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    auto xv2 = x.values();
    for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] * 2.0 * xv2[i];
  });
  return out;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make_output({m, n});
  auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        ov[i * n + j] += aip * bv[p * n + j];
      }
    }
  }
  ensure_finite(ov, "matmul");
  note_input(a);
  note_input(b);
  record([a, b, out, m, k, n](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty()) return;
    if (g.wants_adjoint(a)) {
      // dA = dOut * B^T
      auto buf = g.adjoint_buffer(a);
      auto bv2 = b.values();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            acc += oa[i * n + j] * bv2[p * n + j];
          }
          buf[i * k + p] += acc;
        }
      }
    }
    if (g.wants_adjoint(b)) {
      // dB = A^T * dOut
      auto buf = g.adjoint_buffer(b);
      auto av2 = a.values();
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            acc += av2[i * k + p] * oa[i * n + j];
          }
          buf[p * n + j] += acc;
        }
      }
    }
  });
  return out;
}

Tensor Graph::add_bias_rows(const Tensor& x, const Tensor& bias) {
  require_defined(x, "add_bias_rows");
  require_defined(bias, "add_bias_rows");
  if (x.shape().size() != 2 || bias.shape().size() != 1 ||
      bias.shape()[0] != x.cols()) {
    throw DimensionError("add_bias_rows: " + shape_to_string(x.shape()) +
                         " with bias " + shape_to_string(bias.shape()));
  }
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = make_output({m, n});
  auto xv = x.values(), bv = bias.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
  }
  ensure_finite(ov, "add_bias_rows");
  note_input(x);
  note_input(bias);
  record([x, bias, out, m, n](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty()) return;
    if (g.wants_adjoint(x)) {
      auto buf = g.adjoint_buffer(x);
      for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i];
    }
    if (g.wants_adjoint(bias)) {
      auto buf = g.adjoint_buffer(bias);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) buf[j] += oa[i * n + j];
      }
    }
  });
  return out;
}

Tensor Graph::sum(const Tensor& x) {
  require_defined(x, "sum");
  Tensor out = make_output({1});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out.values()[0] = acc;
  ensure_finite(out.values(), "sum");
  note_input(x);
  record([x, out](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    for (double& v : buf) v += oa[0];
  });
  return out;
}

Tensor Graph::scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  Tensor out = make_output(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  ensure_finite(ov, "scale");
  note_input(x);
  record([x, out, factor](Graph& g) {
    auto oa = g.adjoint_view(out);
    if (oa.empty() || !g.wants_adjoint(x)) return;
    auto buf = g.adjoint_buffer(x);
    for (std::size_t i = 0; i < oa.size(); ++i) buf[i] += oa[i] * factor;
  });
  return out;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_difference_gradient: h must be > 0");
  Tensor probe = x.clone();
  Tensor grad = Tensor::zeros(x.shape());
  auto pv = probe.values();
  auto gv = grad.values();
  auto xv = x.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    pv[i] = xv[i] + h;
    const double up = f(probe);
    pv[i] = xv[i] - h;
    const double down = f(probe);
    pv[i] = xv[i];
    gv[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace fairprune
