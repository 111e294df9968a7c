#include "dualprompt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace dualprompt {

// ---------------------------------------------------------------------------
// ParamRegistry

Parameter& ParamRegistry::add(const std::string& name, Matrix value, bool frozen) {
  if (by_name_.count(name) != 0) {
    throw std::invalid_argument(fmt::format("parameter '{}' already registered", name));
  }
  Parameter p;
  p.name = name;
  p.grad = Matrix(value.rows(), value.cols());
  p.value = std::move(value);
  p.frozen = frozen;
  params_.push_back(std::move(p));
  by_name_.emplace(name, params_.size() - 1);
  return params_.back();
}

bool ParamRegistry::contains(const std::string& name) const { return by_name_.count(name) != 0; }

Parameter* ParamRegistry::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamRegistry::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : &params_[it->second];
}

Parameter& ParamRegistry::at(const std::string& name) {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range(fmt::format("unknown parameter '{}'", name));
}

const Parameter& ParamRegistry::at(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw std::out_of_range(fmt::format("unknown parameter '{}'", name));
}

void ParamRegistry::set_frozen(const std::string& prefix, bool frozen) {
  for (auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) p.frozen = frozen;
  }
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParamRegistry::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

std::size_t ParamRegistry::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamRegistry::merge(const ParamRegistry& other, bool frozen) {
  for (const auto& p : other) add(p.name, p.value, frozen);
}

// ---------------------------------------------------------------------------
// Var

const Matrix& Var::value() const { return graph_->value(id_); }
const Matrix& Var::grad() const { return graph_->grad(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    throw ShapeError(fmt::format("scalar(): value has shape {}", v.shape_string()));
  }
  return v[0];
}

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = recording_ && !p.frozen;
  n.param = n.requires_grad ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Graph::param(const Parameter& p) { return constant(p.value); }

Matrix& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Var Graph::emit(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
  return emit(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
              std::move(backward));
}

Var Graph::emit(Matrix value, std::span<const Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (recording_) {
    for (const Var& p : parents) {
      if (nodes_[p.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Graph::backward(Var loss) {
  if (loss.value().size() != 1) {
    throw ShapeError(
        fmt::format("backward: loss must be scalar, got {}", loss.value().shape_string()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Matrix();
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.param != nullptr) {
      Matrix& pg = n.param->grad;
      if (!pg.same_shape(n.value)) pg = Matrix(n.value.rows(), n.value.cols());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

// ---------------------------------------------------------------------------
// ops

namespace ops {
namespace {

void require(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw ShapeError(fmt::format("{}: incompatible shapes {} and {}", op, a.shape_string(),
                                 b.shape_string()));
  }
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Graph& g = a.graph();
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return g.emit(std::move(y), {a}, [ia, df](Graph& gr, std::size_t self) {
    const Matrix& x = gr.value(ia);
    const Matrix& y = gr.value(self);
    const Matrix& go = gr.grad(self);
    Matrix& ga = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += go[i] * df(x[i], y[i]);
  });
}

// c (m x p) += a (m x n) * b (n x p)
void gemm_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  if (m == 0 || n == 0 || p == 0) return;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &c(i, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b(k, 0);
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.cols() == B.rows(), "matmul", A, B);
  Matrix C(A.rows(), B.cols());
  gemm_acc(A, B, C);
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(std::move(C), {a, b}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& A = gr.value(ia);
    const Matrix& B = gr.value(ib);
    const Matrix& G = gr.grad(self);
    const std::size_t m = A.rows(), n = A.cols(), p = B.cols();
    if (m == 0 || n == 0 || p == 0) return;
    if (gr.requires_grad(ia)) {
      // G * B^T via an explicit transpose so the inner loop is a contiguous axpy
      Matrix bt(p, n);
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < p; ++j) bt(j, k) = B(k, j);
      gemm_acc(G, bt, gr.grad_buffer(ia));
    }
    if (gr.requires_grad(ib)) {
      Matrix& gB = gr.grad_buffer(ib);  // A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &G(i, 0);
        for (std::size_t k = 0; k < n; ++k) {
          const double aik = A(i, k);
          if (aik == 0.0) continue;
          double* gbrow = &gB(k, 0);
          for (std::size_t j = 0; j < p; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  Matrix T(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) T(j, i) = A(i, j);
  const std::size_t ia = a.id();
  return g.emit(std::move(T), {a}, [ia](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    Matrix& gA = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gA.rows(); ++i)
      for (std::size_t j = 0; j < gA.cols(); ++j) gA(i, j) += G(j, i);
  });
}

namespace {
Var add_like(Var a, Var b, double sign, const char* name) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.same_shape(B), name, A, B);
  Matrix C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + sign * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(std::move(C), {a, b}, [ia, ib, sign](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    if (gr.requires_grad(ia)) {
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i];
    }
    if (gr.requires_grad(ib)) {
      Matrix& gB = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < G.size(); ++i) gB[i] += sign * G[i];
    }
  });
}
}  // namespace

Var add(Var a, Var b) { return add_like(a, b, 1.0, "add"); }
Var sub(Var a, Var b) { return add_like(a, b, -1.0, "sub"); }

Var mul(Var a, Var b) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.same_shape(B), "elementwise_mul", A, B);
  Matrix C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(std::move(C), {a, b}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    if (gr.requires_grad(ia)) {
      const Matrix& B = gr.value(ib);
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i] * B[i];
    }
    if (gr.requires_grad(ib)) {
      const Matrix& A = gr.value(ia);
      Matrix& gB = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < G.size(); ++i) gB[i] += G[i] * A[i];
    }
  });
}

Var add_row(Var a, Var row) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  require(R.rows() == 1 && R.cols() == A.cols(), "add_row", A, R);
  Matrix C = A;
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) C(i, j) += R[j];
  const std::size_t ia = a.id(), ir = row.id();
  return g.emit(std::move(C), {a, row}, [ia, ir](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    if (gr.requires_grad(ia)) {
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i];
    }
    if (gr.requires_grad(ir)) {
      Matrix& gR = gr.grad_buffer(ir);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) gR[j] += G(i, j);
    }
  });
}

Var mul_row(Var a, Var row) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  require(R.rows() == 1 && R.cols() == A.cols(), "mul_row", A, R);
  Matrix C(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) C(i, j) = R[j] * A(i, j);
  const std::size_t ia = a.id(), ir = row.id();
  return g.emit(std::move(C), {a, row}, [ia, ir](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    const Matrix& A = gr.value(ia);
    const Matrix& R = gr.value(ir);
    if (gr.requires_grad(ia)) {
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) gA(i, j) += G(i, j) * R[j];
    }
    if (gr.requires_grad(ir)) {
      Matrix& gR = gr.grad_buffer(ir);
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < G.cols(); ++j) gR[j] += G(i, j) * A(i, j);
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = parts.front().graph();
  const std::size_t rows = parts.front().value().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require(p.value().rows() == rows, "concat", parts.front().value(), p.value());
    cols += p.value().cols();
  }
  Matrix C(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    if (P.cols() > 0) {
      for (std::size_t i = 0; i < rows; ++i) std::copy_n(&P(i, 0), P.cols(), &C(i, off));
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += P.cols();
  }
  return g.emit(std::move(C), parts, [ids, offsets](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!gr.requires_grad(ids[k])) continue;
      Matrix& gP = gr.grad_buffer(ids[k]);
      for (std::size_t i = 0; i < gP.rows(); ++i)
        for (std::size_t j = 0; j < gP.cols(); ++j) gP(i, j) += G(i, offsets[k] + j);
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = parts.front().graph();
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require(p.value().cols() == cols, "concat_rows", parts.front().value(), p.value());
    rows += p.value().rows();
  }
  Matrix C(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    std::copy(P.flat().begin(), P.flat().end(), C.flat().begin() + static_cast<long>(off * cols));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += P.rows();
  }
  return g.emit(std::move(C), parts, [ids, offsets, cols](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!gr.requires_grad(ids[k])) continue;
      Matrix& gP = gr.grad_buffer(ids[k]);
      for (std::size_t i = 0; i < gP.size(); ++i) gP[i] += G[offsets[k] * cols + i];
    }
  });
}

Var concat(Var a, Var b) {
  if (a.value().rows() != 1 || b.value().rows() != 1) {
    throw ShapeError(fmt::format("concat: expected vectors, got {} and {}",
                                 a.value().shape_string(), b.value().shape_string()));
  }
  return concat_cols({a, b});
}

Var interleave_cols(Var a, Var b) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.same_shape(B), "interleave_cols", A, B);
  Matrix C(A.rows(), 2 * A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < A.cols(); ++j) {
      C(i, 2 * j) = A(i, j);
      C(i, 2 * j + 1) = B(i, j);
    }
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(std::move(C), {a, b}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    const std::size_t rows = G.rows(), half = G.cols() / 2;
    if (gr.requires_grad(ia)) {
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < half; ++j) gA(i, j) += G(i, 2 * j);
    }
    if (gr.requires_grad(ib)) {
      Matrix& gB = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < half; ++j) gB(i, j) += G(i, 2 * j + 1);
    }
  });
}

Var cos(Var a) {
  return unary(a, [](double x) { return std::cos(x); },
               [](double x, double) { return -std::sin(x); });
}

Var sin(Var a) {
  return unary(a, [](double x) { return std::sin(x); },
               [](double x, double) { return std::cos(x); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var sum(Var a) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  double s = 0.0;
  for (double x : A.flat()) s += x;
  const std::size_t ia = a.id();
  return g.emit(Matrix(1, 1, s), {a}, [ia](Graph& gr, std::size_t self) {
    const double go = gr.grad(self)[0];
    Matrix& gA = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < gA.size(); ++i) gA[i] += go;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var gather_rows(Var a, std::vector<std::size_t> rows) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  Matrix C(rows.size(), A.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= A.rows()) {
      throw ShapeError(fmt::format("gather_rows: row {} out of range for {}", rows[i],
                                   A.shape_string()));
    }
    if (A.cols() > 0) std::copy_n(&A(rows[i], 0), A.cols(), &C(i, 0));
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
  return g.emit(std::move(C), {a}, [ia, idx](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    Matrix& gA = gr.grad_buffer(ia);
    const auto& r = *idx;
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t j = 0; j < G.cols(); ++j) gA(r[i], j) += G(i, j);
  });
}

Var normalize_rows(Var a) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  Matrix Y(A.rows(), A.cols());
  std::vector<double> norms(A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (double x : A.row_span(i)) s += x * x;
    const double nrm = std::sqrt(s);
    if (nrm == 0.0) {
      throw std::domain_error(fmt::format("normalize: row {} has zero norm", i));
    }
    norms[i] = nrm;
    for (std::size_t j = 0; j < A.cols(); ++j) Y(i, j) = A(i, j) / nrm;
  }
  const std::size_t ia = a.id();
  return g.emit(std::move(Y), {a}, [ia, norms = std::move(norms)](Graph& gr, std::size_t self) {
    const Matrix& Y = gr.value(self);
    const Matrix& G = gr.grad(self);
    Matrix& gA = gr.grad_buffer(ia);
    for (std::size_t i = 0; i < Y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < Y.cols(); ++j) dot += Y(i, j) * G(i, j);
      for (std::size_t j = 0; j < Y.cols(); ++j)
        gA(i, j) += (G(i, j) - Y(i, j) * dot) / norms[i];
    }
  });
}

Var row_dot(Var a, Var b) {
  Graph& g = a.graph();
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  require(A.same_shape(B), "row_dot", A, B);
  Matrix C(A.rows(), 1);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) s += A(i, j) * B(i, j);
    C[i] = s;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(std::move(C), {a, b}, [ia, ib](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    const Matrix& A = gr.value(ia);
    const Matrix& B = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Matrix& gA = gr.grad_buffer(ia);
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) gA(i, j) += G[i] * B(i, j);
    }
    if (gr.requires_grad(ib)) {
      Matrix& gB = gr.grad_buffer(ib);
      for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) gB(i, j) += G[i] * A(i, j);
    }
  });
}

Var cosine_sim(Var a, Var b) {
  if (a.value().rows() != 1 || !a.value().same_shape(b.value())) {
    throw ShapeError(fmt::format("cosine_sim: expected equal vectors, got {} and {}",
                                 a.value().shape_string(), b.value().shape_string()));
  }
  return row_dot(normalize_rows(a), normalize_rows(b));
}

Var segment_dot(Var keys, Var queries, Segments seg) {
  Graph& g = keys.graph();
  const Matrix& K = keys.value();
  const Matrix& Q = queries.value();
  require(K.cols() == Q.cols() && seg->size() == K.rows(), "segment_dot", K, Q);
  Matrix C(K.rows(), 1);
  for (std::size_t i = 0; i < K.rows(); ++i) {
    const std::size_t s = (*seg)[i];
    if (s >= Q.rows()) throw ShapeError("segment_dot: segment id out of range");
    double acc = 0.0;
    for (std::size_t j = 0; j < K.cols(); ++j) acc += K(i, j) * Q(s, j);
    C[i] = acc;
  }
  const std::size_t ik = keys.id(), iq = queries.id();
  return g.emit(std::move(C), {keys, queries}, [ik, iq, seg](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    const Matrix& K = gr.value(ik);
    const Matrix& Q = gr.value(iq);
    const bool gk = gr.requires_grad(ik), gq = gr.requires_grad(iq);
    Matrix* gK = gk ? &gr.grad_buffer(ik) : nullptr;
    Matrix* gQ = gq ? &gr.grad_buffer(iq) : nullptr;
    for (std::size_t i = 0; i < K.rows(); ++i) {
      const std::size_t s = (*seg)[i];
      for (std::size_t j = 0; j < K.cols(); ++j) {
        if (gk) (*gK)(i, j) += G[i] * Q(s, j);
        if (gq) (*gQ)(s, j) += G[i] * K(i, j);
      }
    }
  });
}

Var segment_softmax(Var scores, Segments seg, std::size_t num_segments) {
  Graph& g = scores.graph();
  const Matrix& X = scores.value();
  if (X.cols() != 1 || seg->size() != X.rows()) {
    throw ShapeError(fmt::format("segment_softmax: bad input {}", X.shape_string()));
  }
  std::vector<double> mx(num_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < X.rows(); ++i) mx[(*seg)[i]] = std::max(mx[(*seg)[i]], X[i]);
  Matrix Y(X.rows(), 1);
  std::vector<double> z(num_segments, 0.0);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    Y[i] = std::exp(X[i] - mx[(*seg)[i]]);
    z[(*seg)[i]] += Y[i];
  }
  for (std::size_t i = 0; i < X.rows(); ++i) Y[i] /= z[(*seg)[i]];
  const std::size_t ix = scores.id();
  return g.emit(std::move(Y), {scores}, [ix, seg, num_segments](Graph& gr, std::size_t self) {
    const Matrix& Y = gr.value(self);
    const Matrix& G = gr.grad(self);
    Matrix& gX = gr.grad_buffer(ix);
    std::vector<double> dot(num_segments, 0.0);
    for (std::size_t i = 0; i < Y.rows(); ++i) dot[(*seg)[i]] += G[i] * Y[i];
    for (std::size_t i = 0; i < Y.rows(); ++i) gX[i] += Y[i] * (G[i] - dot[(*seg)[i]]);
  });
}

Var segment_weighted_sum(Var weights, Var values, Segments seg, std::size_t num_segments) {
  Graph& g = weights.graph();
  const Matrix& W = weights.value();
  const Matrix& V = values.value();
  require(W.cols() == 1 && W.rows() == V.rows() && seg->size() == V.rows(),
          "segment_weighted_sum", W, V);
  Matrix C(num_segments, V.cols());
  for (std::size_t i = 0; i < V.rows(); ++i) {
    const std::size_t s = (*seg)[i];
    if (s >= num_segments) throw ShapeError("segment_weighted_sum: segment id out of range");
    for (std::size_t j = 0; j < V.cols(); ++j) C(s, j) += W[i] * V(i, j);
  }
  const std::size_t iw = weights.id(), iv = values.id();
  return g.emit(std::move(C), {weights, values}, [iw, iv, seg](Graph& gr, std::size_t self) {
    const Matrix& G = gr.grad(self);
    const Matrix& W = gr.value(iw);
    const Matrix& V = gr.value(iv);
    const bool gw = gr.requires_grad(iw), gv = gr.requires_grad(iv);
    Matrix* gW = gw ? &gr.grad_buffer(iw) : nullptr;
    Matrix* gV = gv ? &gr.grad_buffer(iv) : nullptr;
    for (std::size_t i = 0; i < V.rows(); ++i) {
      const std::size_t s = (*seg)[i];
      double acc = 0.0;
      for (std::size_t j = 0; j < V.cols(); ++j) {
        acc += G(s, j) * V(i, j);
        if (gv) (*gV)(i, j) += W[i] * G(s, j);
      }
      if (gw) (*gW)[i] += acc;
    }
  });
}

Var softmax_cross_entropy(Var logits, std::vector<std::size_t> targets) {
  Graph& g = logits.graph();
  const Matrix& L = logits.value();
  if (targets.size() != L.rows() || L.rows() == 0) {
    throw ShapeError(fmt::format("softmax_cross_entropy: {} targets for logits {}",
                                 targets.size(), L.shape_string()));
  }
  Matrix P(L.rows(), L.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < L.rows(); ++i) {
    if (targets[i] >= L.cols()) throw ShapeError("softmax_cross_entropy: target out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : L.row_span(i)) mx = std::max(mx, x);
    double z = 0.0;
    for (std::size_t j = 0; j < L.cols(); ++j) {
      P(i, j) = std::exp(L(i, j) - mx);
      z += P(i, j);
    }
    for (std::size_t j = 0; j < L.cols(); ++j) P(i, j) /= z;
    total += (std::log(z) + mx) - L(i, targets[i]);
  }
  const double n = static_cast<double>(L.rows());
  const std::size_t il = logits.id();
  return g.emit(Matrix(1, 1, total / n), {logits},
                [il, P = std::move(P), targets = std::move(targets), n](Graph& gr,
                                                                        std::size_t self) {
                  const double go = gr.grad(self)[0];
                  Matrix& gL = gr.grad_buffer(il);
                  for (std::size_t i = 0; i < P.rows(); ++i)
                    for (std::size_t j = 0; j < P.cols(); ++j) {
                      const double onehot = (j == targets[i]) ? 1.0 : 0.0;
                      gL(i, j) += go * (P(i, j) - onehot) / n;
                    }
                });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// gradient check

GradCheckReport check_gradients(const std::function<Var(Graph&)>& loss_builder,
                                ParamRegistry& registry, double eps, double abs_floor) {
  registry.zero_grad();
  {
    Graph g;
    Var loss = loss_builder(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g;
    g.set_recording(false);
    return loss_builder(g).scalar();
  };

  GradCheckReport report;
  for (Parameter& p : registry) {
    if (p.frozen) continue;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double orig = p.value[k];
      p.value[k] = orig + eps;
      const double fp = eval();
      p.value[k] = orig - eps;
      const double fm = eval();
      p.value[k] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = p.grad[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p.name;
        report.worst_index = k;
      }
    }
  }
  registry.zero_grad();
  return report;
}

}  // namespace dualprompt
