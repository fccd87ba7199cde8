#include "brnn/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <string_view>

namespace brnn {

std::atomic<std::uint64_t> Tape::epoch_counter_{0};

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_finite(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": non-finite value produced");
    }
  }
}

double in64(const std::shared_ptr<detail::Node>& n) {
  return n->has_scalar64 ? n->scalar64 : static_cast<double>(n->value[0]);
}

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> value) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_size(shape);
  return wrap(new_node(std::move(shape), std::vector<float>(n, 0.0f)));
}

Tensor Tensor::full(Shape shape, double v) {
  std::size_t n = shape_size(shape);
  auto node = new_node(std::move(shape),
                       std::vector<float>(n, static_cast<float>(v)));
  if (n == 1) {
    node->scalar64 = v;
    node->has_scalar64 = true;
  }
  return wrap(node);
}

Tensor Tensor::from(Shape shape, std::vector<float> data) {
  if (shape_size(shape) != data.size()) {
    throw DimensionError("from: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  return wrap(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double v) { return full(Shape{}, v); }

const Shape& Tensor::shape() const {
  if (!n_) throw ContractError("shape: undefined tensor");
  return n_->shape;
}

std::size_t Tensor::size() const {
  if (!n_) throw ContractError("size: undefined tensor");
  return n_->value.size();
}

std::span<const float> Tensor::values() const {
  if (!n_) throw ContractError("values: undefined tensor");
  return n_->value;
}

std::span<float> Tensor::values_mut() {
  if (!n_) throw ContractError("values_mut: undefined tensor");
  n_->has_scalar64 = false;
  return n_->value;
}

float Tensor::at(std::size_t i) const {
  if (i >= size()) throw IndexError("at: index out of range");
  return n_->value[i];
}

float Tensor::at2(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at2: rank-2 tensor required");
  if (i >= n_->shape[0] || j >= n_->shape[1]) {
    throw IndexError("at2: index out of range");
  }
  return n_->value[i * n_->shape[1] + j];
}

double Tensor::scalar_value() const {
  if (size() != 1) throw ContractError("scalar_value: tensor is not size 1");
  return n_->has_scalar64 ? n_->scalar64 : static_cast<double>(n_->value[0]);
}

Tensor Tensor::clone() const {
  auto n = new_node(shape(), std::vector<float>(n_->value));
  n->scalar64 = n_->scalar64;
  n->has_scalar64 = n_->has_scalar64;
  n->requires_grad = n_->requires_grad;
  return wrap(n);
}

Tensor Tensor::detach() const {
  auto n = new_node(shape(), std::vector<float>(n_->value));
  n->scalar64 = n_->scalar64;
  n->has_scalar64 = n_->has_scalar64;
  return wrap(n);
}

Tensor& Tensor::set_requires_grad(bool v) {
  if (!n_) throw ContractError("set_requires_grad: undefined tensor");
  n_->requires_grad = v;
  return *this;
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

Tensor Tensor::grad() const {
  if (!n_) throw ContractError("grad: undefined tensor");
  if (n_->grad) return wrap(n_->grad);
  return zeros(n_->shape);
}

// ---------------------------------------------------------------------------
// Tape internals

Tensor Tape::make_out(Shape shape, std::vector<float> value,
                      std::span<const Tensor> inputs, const char* opname) {
  check_finite(value, opname);
  auto n = new_node(std::move(shape), std::move(value));
  if (recording_) {
    n->producer = this;
    for (const Tensor& t : inputs) {
      if (t.requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
  }
  return Tensor::wrap(n);
}

void Tape::record(OpRec rec) {
  if (recording_ && rec.out->requires_grad) ops_.push_back(std::move(rec));
}

void Tape::accumulate(const std::shared_ptr<detail::Node>& n, const Tensor& g) {
  if (!n->requires_grad) return;
  if (g.size() != shape_size(n->shape)) {
    throw DimensionError("backward: gradient shape mismatch");
  }
  if (n->grad_epoch != cur_epoch_) {
    n->grad = g.node();
    n->grad_epoch = cur_epoch_;
  } else {
    n->grad = add(Tensor::wrap(n->grad), g).node();
  }
}

void Tape::backward(const Tensor& loss, bool create_graph) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a defined scalar");
  }
  if (loss.node()->producer != this) {
    throw ContractError("backward: loss was not produced on this tape");
  }
  cur_epoch_ = ++epoch_counter_;
  const std::size_t upto = ops_.size();
  const bool saved = recording_;
  recording_ = create_graph;
  accumulate(loss.node(), Tensor::scalar(1.0));
  for (std::size_t i = upto; i-- > 0;) {
    // Copy: closures may append ops and reallocate ops_.
    OpRec rec = ops_[i];
    if (!rec.out->requires_grad || rec.out->grad_epoch != cur_epoch_) continue;
    rec.back(*this, rec);
  }
  recording_ = saved;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

double apply_unary(ElementwiseKind k, double x) {
  switch (k) {
    case ElementwiseKind::Sigmoid:
      return 1.0 / (1.0 + std::exp(-x));
    case ElementwiseKind::Tanh:
      return std::tanh(x);
    case ElementwiseKind::Exp:
      return std::exp(x);
    case ElementwiseKind::Log:
      return std::log(x);
    case ElementwiseKind::Softplus:
      return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    default:
      throw ContractError("apply_unary: not a unary kind");
  }
}

double apply_binary(ElementwiseKind k, double a, double b) {
  switch (k) {
    case ElementwiseKind::Add:
      return a + b;
    case ElementwiseKind::Sub:
      return a - b;
    case ElementwiseKind::Mul:
      return a * b;
    default:
      throw ContractError("apply_binary: not a binary kind");
  }
}

const char* kind_name(ElementwiseKind k) {
  switch (k) {
    case ElementwiseKind::Add:
      return "add";
    case ElementwiseKind::Sub:
      return "sub";
    case ElementwiseKind::Mul:
      return "mul";
    case ElementwiseKind::Sigmoid:
      return "sigmoid";
    case ElementwiseKind::Tanh:
      return "tanh";
    case ElementwiseKind::Exp:
      return "exp";
    case ElementwiseKind::Log:
      return "log";
    case ElementwiseKind::Softplus:
      return "softplus";
  }
  return "elementwise";
}

// Reduce a full-shaped gradient contribution to an operand's shape: identity
// for matching shapes, total sum for a broadcast size-1 operand.
Tensor reduce_to(Tape& t, const Tensor& contrib, const Shape& shape) {
  if (contrib.shape() == shape) return contrib;
  if (shape_size(shape) == 1) return t.reshape(t.sum_all(contrib), shape);
  throw DimensionError("backward: cannot reduce gradient to operand shape");
}

}  // namespace

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: size mismatch " + shape_str(a.shape()) +
                         " -> " + shape_str(shape));
  }
  std::vector<float> out(a.values().begin(), a.values().end());
  Tensor in[] = {a};
  Tensor res = make_out(shape, std::move(out), in, "reshape");
  if (a.size() == 1 && a.node()->has_scalar64) {
    res.node()->scalar64 = a.node()->scalar64;
    res.node()->has_scalar64 = true;
  }
  Shape orig = a.shape();
  record({{a.node()},
          res.node(),
          [orig](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.reshape(Tensor::wrap(r.out->grad), orig));
          }});
  return res;
}

Tensor Tape::binary_op(const Tensor& a, const Tensor& b, const char* name,
                       ElementwiseKind kind) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
    throw DimensionError(std::string(name) + ": shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are incompatible");
  }
  const Shape& oshape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_size(oshape);
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(n);
  const bool is_div = std::string_view(name) == "div";
  for (std::size_t i = 0; i < n; ++i) {
    double x = av[a_scalar ? 0 : i];
    double y = bv[b_scalar ? 0 : i];
    double r = is_div ? x / y : apply_binary(kind, x, y);
    out[i] = static_cast<float>(r);
  }
  Tensor in[] = {a, b};
  Tensor res = make_out(oshape, std::move(out), in, name);
  if (n == 1 && a_scalar && b_scalar) {
    double r = is_div ? in64(a.node()) / in64(b.node())
                      : apply_binary(kind, in64(a.node()), in64(b.node()));
    res.node()->scalar64 = r;
    res.node()->has_scalar64 = true;
    res.node()->value[0] = static_cast<float>(r);
  }
  return res;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  Tensor res = binary_op(a, b, "add", ElementwiseKind::Add);
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], reduce_to(t, g, r.inputs[0]->shape));
            t.accumulate(r.inputs[1], reduce_to(t, g, r.inputs[1]->shape));
          }});
  return res;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  Tensor res = binary_op(a, b, "sub", ElementwiseKind::Sub);
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], reduce_to(t, g, r.inputs[0]->shape));
            t.accumulate(r.inputs[1],
                         reduce_to(t, t.neg(g), r.inputs[1]->shape));
          }});
  return res;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  Tensor res = binary_op(a, b, "mul", ElementwiseKind::Mul);
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor ta = Tensor::wrap(r.inputs[0]);
            Tensor tb = Tensor::wrap(r.inputs[1]);
            t.accumulate(r.inputs[0],
                         reduce_to(t, t.mul(g, tb), r.inputs[0]->shape));
            t.accumulate(r.inputs[1],
                         reduce_to(t, t.mul(g, ta), r.inputs[1]->shape));
          }});
  return res;
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
  Tensor res = binary_op(a, b, "div", ElementwiseKind::Mul /*unused*/);
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor ta = Tensor::wrap(r.inputs[0]);
            Tensor tb = Tensor::wrap(r.inputs[1]);
            t.accumulate(r.inputs[0],
                         reduce_to(t, t.div(g, tb), r.inputs[0]->shape));
            Tensor db = t.neg(t.div(t.mul(g, ta), t.mul(tb, tb)));
            t.accumulate(r.inputs[1], reduce_to(t, db, r.inputs[1]->shape));
          }});
  return res;
}

Tensor Tape::unary_op(const Tensor& a, const char* name, ElementwiseKind kind) {
  if (kind == ElementwiseKind::Log) {
    for (float x : a.values()) {
      if (!(x > 0.0f)) throw NumericError("log: non-positive input");
    }
  }
  auto av = a.values();
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(apply_unary(kind, av[i]));
  }
  Tensor in[] = {a};
  Tensor res = make_out(a.shape(), std::move(out), in, name);
  if (a.size() == 1) {
    double r = apply_unary(kind, in64(a.node()));
    res.node()->scalar64 = r;
    res.node()->has_scalar64 = true;
    res.node()->value[0] = static_cast<float>(r);
  }
  return res;
}

Tensor Tape::sigmoid(const Tensor& a) {
  Tensor res = unary_op(a, "sigmoid", ElementwiseKind::Sigmoid);
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor y = Tensor::wrap(r.out);
            Tensor one_minus = t.add_scalar(t.neg(y), 1.0);
            t.accumulate(r.inputs[0], t.mul(g, t.mul(y, one_minus)));
          }});
  return res;
}

Tensor Tape::tanh_(const Tensor& a) {
  Tensor res = unary_op(a, "tanh", ElementwiseKind::Tanh);
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor y = Tensor::wrap(r.out);
            Tensor one_minus_sq = t.add_scalar(t.neg(t.mul(y, y)), 1.0);
            t.accumulate(r.inputs[0], t.mul(g, one_minus_sq));
          }});
  return res;
}

Tensor Tape::exp_(const Tensor& a) {
  Tensor res = unary_op(a, "exp", ElementwiseKind::Exp);
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.mul(g, Tensor::wrap(r.out)));
          }});
  return res;
}

Tensor Tape::log_(const Tensor& a) {
  Tensor res = unary_op(a, "log", ElementwiseKind::Log);
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.div(g, Tensor::wrap(r.inputs[0])));
          }});
  return res;
}

Tensor Tape::softplus(const Tensor& a) {
  Tensor res = unary_op(a, "softplus", ElementwiseKind::Softplus);
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0],
                         t.mul(g, t.sigmoid(Tensor::wrap(r.inputs[0]))));
          }});
  return res;
}

Tensor Tape::neg(const Tensor& a) {
  auto av = a.values();
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -av[i];
  Tensor in[] = {a};
  Tensor res = make_out(a.shape(), std::move(out), in, "neg");
  if (a.size() == 1) {
    res.node()->scalar64 = -in64(a.node());
    res.node()->has_scalar64 = true;
  }
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0], t.neg(Tensor::wrap(r.out->grad)));
          }});
  return res;
}

Tensor Tape::scale(const Tensor& a, double c) {
  auto av = a.values();
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(av[i]) * c);
  }
  Tensor in[] = {a};
  Tensor res = make_out(a.shape(), std::move(out), in, "scale");
  if (a.size() == 1) {
    res.node()->scalar64 = in64(a.node()) * c;
    res.node()->has_scalar64 = true;
    res.node()->value[0] = static_cast<float>(res.node()->scalar64);
  }
  record({{a.node()},
          res.node(),
          [c](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0], t.scale(Tensor::wrap(r.out->grad), c));
          }});
  return res;
}

Tensor Tape::add_scalar(const Tensor& a, double c) {
  auto av = a.values();
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(av[i]) + c);
  }
  Tensor in[] = {a};
  Tensor res = make_out(a.shape(), std::move(out), in, "add_scalar");
  if (a.size() == 1) {
    res.node()->scalar64 = in64(a.node()) + c;
    res.node()->has_scalar64 = true;
    res.node()->value[0] = static_cast<float>(res.node()->scalar64);
  }
  record({{a.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0], Tensor::wrap(r.out->grad));
          }});
  return res;
}

Tensor Tape::elementwise(ElementwiseKind kind, const Tensor& a,
                         const Tensor* b) {
  switch (kind) {
    case ElementwiseKind::Add:
    case ElementwiseKind::Sub:
    case ElementwiseKind::Mul:
      if (!b) {
        throw ContractError(std::string(kind_name(kind)) +
                            ": second operand required");
      }
      break;
    default:
      if (b) {
        throw ContractError(std::string(kind_name(kind)) +
                            ": unary kind takes one operand");
      }
  }
  switch (kind) {
    case ElementwiseKind::Add:
      return add(a, *b);
    case ElementwiseKind::Sub:
      return sub(a, *b);
    case ElementwiseKind::Mul:
      return mul(a, *b);
    case ElementwiseKind::Sigmoid:
      return sigmoid(a);
    case ElementwiseKind::Tanh:
      return tanh_(a);
    case ElementwiseKind::Exp:
      return exp_(a);
    case ElementwiseKind::Log:
      return log_(a);
    case ElementwiseKind::Softplus:
      return softplus(a);
  }
  throw ContractError("elementwise: unknown kind");
}

// ---------------------------------------------------------------------------
// Matrix products. Inner loops accumulate in double.

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": rank-2 tensor required, got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const std::size_t n = b.shape()[1];
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(av[i * k + p]) *
               static_cast<double>(bv[p * n + j]);
      }
      out[i * n + j] = static_cast<float>(acc);
    }
  }
  Tensor in[] = {a, b};
  Tensor res = make_out({m, n}, std::move(out), in, "matmul");
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.matmul_nt(g, Tensor::wrap(r.inputs[1])));
            t.accumulate(r.inputs[1], t.matmul_tn(Tensor::wrap(r.inputs[0]), g));
          }});
  return res;
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (b.shape()[1] != n) {
    throw DimensionError("matmul_nt: inner dimensions " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  const std::size_t k = b.shape()[0];
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(m * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < n; ++p) {
        acc += static_cast<double>(av[i * n + p]) *
               static_cast<double>(bv[j * n + p]);
      }
      out[i * k + j] = static_cast<float>(acc);
    }
  }
  Tensor in[] = {a, b};
  Tensor res = make_out({m, k}, std::move(out), in, "matmul_nt");
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.matmul(g, Tensor::wrap(r.inputs[1])));
            t.accumulate(r.inputs[1], t.matmul_tn(g, Tensor::wrap(r.inputs[0])));
          }});
  return res;
}

Tensor Tape::matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  if (b.shape()[0] != m) {
    throw DimensionError("matmul_tn: inner dimensions " + shape_str(a.shape()) +
                         "^T x " + shape_str(b.shape()));
  }
  const std::size_t n = b.shape()[1];
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(k * n);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < m; ++p) {
        acc += static_cast<double>(av[p * k + i]) *
               static_cast<double>(bv[p * n + j]);
      }
      out[i * n + j] = static_cast<float>(acc);
    }
  }
  Tensor in[] = {a, b};
  Tensor res = make_out({k, n}, std::move(out), in, "matmul_tn");
  record({{a.node(), b.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.matmul_nt(Tensor::wrap(r.inputs[1]), g));
            t.accumulate(r.inputs[1], t.matmul(Tensor::wrap(r.inputs[0]), g));
          }});
  return res;
}

// ---------------------------------------------------------------------------
// Structure ops

Tensor Tape::concat_cols(const Tensor& a, const Tensor& b) {
  require_rank2(a, "concat_cols");
  require_rank2(b, "concat_cols");
  const std::size_t m = a.shape()[0];
  if (b.shape()[0] != m) {
    throw DimensionError("concat_cols: row counts differ");
  }
  const std::size_t p = a.shape()[1], q = b.shape()[1];
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(m * (p + q));
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(&out[i * (p + q)], &av[i * p], p * sizeof(float));
    std::memcpy(&out[i * (p + q) + p], &bv[i * q], q * sizeof(float));
  }
  Tensor in[] = {a, b};
  Tensor res = make_out({m, p + q}, std::move(out), in, "concat_cols");
  record({{a.node(), b.node()},
          res.node(),
          [p, q](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], t.slice_cols(g, 0, p));
            t.accumulate(r.inputs[1], t.slice_cols(g, p, q));
          }});
  return res;
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
  require_rank2(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (start + len > n) throw DimensionError("slice_cols: range out of bounds");
  auto av = a.values();
  std::vector<float> out(m * len);
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(&out[i * len], &av[i * n + start], len * sizeof(float));
  }
  Tensor in[] = {a};
  Tensor res = make_out({m, len}, std::move(out), in, "slice_cols");
  record({{a.node()},
          res.node(),
          [start, n](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.pad_cols(Tensor::wrap(r.out->grad), start, n));
          }});
  return res;
}

Tensor Tape::pad_cols(const Tensor& a, std::size_t start, std::size_t total) {
  require_rank2(a, "pad_cols");
  const std::size_t m = a.shape()[0], l = a.shape()[1];
  if (start + l > total) throw DimensionError("pad_cols: range out of bounds");
  auto av = a.values();
  std::vector<float> out(m * total, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    std::memcpy(&out[i * total + start], &av[i * l], l * sizeof(float));
  }
  Tensor in[] = {a};
  Tensor res = make_out({m, total}, std::move(out), in, "pad_cols");
  record({{a.node()},
          res.node(),
          [start, l](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.slice_cols(Tensor::wrap(r.out->grad), start, l));
          }});
  return res;
}

Tensor Tape::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts[0].shape().size() == 2 ? parts[0].shape()[1] : 0;
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.shape()[1] != n) {
      throw DimensionError("concat_rows: column counts differ");
    }
    rows += p.shape()[0];
  }
  std::vector<float> out;
  out.reserve(rows * n);
  for (const Tensor& p : parts) {
    auto pv = p.values();
    out.insert(out.end(), pv.begin(), pv.end());
  }
  std::vector<std::size_t> row_counts;
  for (const Tensor& p : parts) row_counts.push_back(p.shape()[0]);
  Tensor res = make_out({rows, n}, std::move(out), parts, "concat_rows");
  std::vector<std::shared_ptr<detail::Node>> in_nodes;
  for (const Tensor& p : parts) in_nodes.push_back(p.node());
  record({std::move(in_nodes),
          res.node(),
          [row_counts](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            std::size_t off = 0;
            for (std::size_t i = 0; i < r.inputs.size(); ++i) {
              t.accumulate(r.inputs[i], t.slice_rows(g, off, row_counts[i]));
              off += row_counts[i];
            }
          }});
  return res;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t start, std::size_t len) {
  require_rank2(a, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (start + len > m) throw DimensionError("slice_rows: range out of bounds");
  auto av = a.values();
  std::vector<float> out(av.begin() + start * n, av.begin() + (start + len) * n);
  Tensor in[] = {a};
  Tensor res = make_out({len, n}, std::move(out), in, "slice_rows");
  record({{a.node()},
          res.node(),
          [start, m](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.pad_rows(Tensor::wrap(r.out->grad), start, m));
          }});
  return res;
}

Tensor Tape::pad_rows(const Tensor& a, std::size_t start, std::size_t total) {
  require_rank2(a, "pad_rows");
  const std::size_t l = a.shape()[0], n = a.shape()[1];
  if (start + l > total) throw DimensionError("pad_rows: range out of bounds");
  auto av = a.values();
  std::vector<float> out(total * n, 0.0f);
  std::memcpy(&out[start * n], av.data(), l * n * sizeof(float));
  Tensor in[] = {a};
  Tensor res = make_out({total, n}, std::move(out), in, "pad_rows");
  record({{a.node()},
          res.node(),
          [start, l](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.slice_rows(Tensor::wrap(r.out->grad), start, l));
          }});
  return res;
}

Tensor Tape::gather_rows(const Tensor& table,
                         std::span<const std::int32_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("gather_rows: id out of range");
    }
  }
  auto tv = table.values();
  std::vector<float> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(&out[i * d], &tv[static_cast<std::size_t>(ids[i]) * d],
                d * sizeof(float));
  }
  std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
  Tensor in[] = {table};
  Tensor res = make_out({ids.size(), d}, std::move(out), in, "gather_rows");
  record({{table.node()},
          res.node(),
          [ids_copy, v](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.scatter_rows(Tensor::wrap(r.out->grad), ids_copy, v));
          }});
  return res;
}

Tensor Tape::scatter_rows(const Tensor& x, std::span<const std::int32_t> ids,
                          std::size_t rows) {
  require_rank2(x, "scatter_rows");
  if (ids.size() != x.shape()[0]) {
    throw DimensionError("scatter_rows: id count must match rows of input");
  }
  const std::size_t d = x.shape()[1];
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw IndexError("scatter_rows: id out of range");
    }
  }
  auto xv = x.values();
  std::vector<float> out(rows * d, 0.0f);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    float* dst = &out[static_cast<std::size_t>(ids[i]) * d];
    const float* src = &xv[i * d];
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
  Tensor in[] = {x};
  Tensor res = make_out({rows, d}, std::move(out), in, "scatter_rows");
  record({{x.node()},
          res.node(),
          [ids_copy](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.gather_rows(Tensor::wrap(r.out->grad), ids_copy));
          }});
  return res;
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_rowvec");
  if (bias.rank() != 1 || bias.shape()[0] != x.shape()[1]) {
    throw DimensionError("add_rowvec: bias shape " + shape_str(bias.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  }
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  }
  Tensor in[] = {x, bias};
  Tensor res = make_out({m, n}, std::move(out), in, "add_rowvec");
  record({{x.node(), bias.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            t.accumulate(r.inputs[0], g);
            t.accumulate(r.inputs[1], t.col_sum(g));
          }});
  return res;
}

Tensor Tape::row_sum(const Tensor& x) {
  require_rank2(x, "row_sum");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  auto xv = x.values();
  std::vector<float> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += xv[i * n + j];
    out[i] = static_cast<float>(acc);
  }
  Tensor in[] = {x};
  Tensor res = make_out({m}, std::move(out), in, "row_sum");
  record({{x.node()},
          res.node(),
          [n](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.col_broadcast(Tensor::wrap(r.out->grad), n));
          }});
  return res;
}

Tensor Tape::col_sum(const Tensor& x) {
  require_rank2(x, "col_sum");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  auto xv = x.values();
  std::vector<float> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += xv[i * n + j];
    out[j] = static_cast<float>(acc);
  }
  Tensor in[] = {x};
  Tensor res = make_out({n}, std::move(out), in, "col_sum");
  record({{x.node()},
          res.node(),
          [m](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.row_broadcast(Tensor::wrap(r.out->grad), m));
          }});
  return res;
}

Tensor Tape::col_broadcast(const Tensor& v, std::size_t cols) {
  if (v.rank() != 1) throw DimensionError("col_broadcast: rank-1 required");
  const std::size_t m = v.shape()[0];
  auto vv = v.values();
  std::vector<float> out(m * cols);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = vv[i];
  }
  Tensor in[] = {v};
  Tensor res = make_out({m, cols}, std::move(out), in, "col_broadcast");
  record({{v.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0], t.row_sum(Tensor::wrap(r.out->grad)));
          }});
  return res;
}

Tensor Tape::row_broadcast(const Tensor& v, std::size_t rows) {
  if (v.rank() != 1) throw DimensionError("row_broadcast: rank-1 required");
  const std::size_t n = v.shape()[0];
  auto vv = v.values();
  std::vector<float> out(rows * n);
  for (std::size_t i = 0; i < rows; ++i) {
    std::memcpy(&out[i * n], vv.data(), n * sizeof(float));
  }
  Tensor in[] = {v};
  Tensor res = make_out({rows, n}, std::move(out), in, "row_broadcast");
  record({{v.node()},
          res.node(),
          [](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0], t.col_sum(Tensor::wrap(r.out->grad)));
          }});
  return res;
}

Tensor Tape::broadcast_full(const Tensor& s, Shape shape) {
  if (s.size() != 1) throw ContractError("broadcast_full: scalar required");
  const std::size_t n = shape_size(shape);
  std::vector<float> out(n, s.values()[0]);
  Tensor in[] = {s};
  Shape sshape = s.shape();
  Tensor res = make_out(std::move(shape), std::move(out), in, "broadcast_full");
  record({{s.node()},
          res.node(),
          [sshape](Tape& t, const OpRec& r) {
            Tensor g = t.sum_all(Tensor::wrap(r.out->grad));
            t.accumulate(r.inputs[0], t.reshape(g, sshape));
          }});
  return res;
}

Tensor Tape::sum_all(const Tensor& x) {
  auto xv = x.values();
  double acc = 0.0;
  for (float v : xv) acc += v;
  Tensor in[] = {x};
  Tensor res = make_out(Shape{}, {static_cast<float>(acc)}, in, "sum_all");
  res.node()->scalar64 = acc;
  res.node()->has_scalar64 = true;
  Shape xshape = x.shape();
  record({{x.node()},
          res.node(),
          [xshape](Tape& t, const OpRec& r) {
            t.accumulate(r.inputs[0],
                         t.broadcast_full(Tensor::wrap(r.out->grad), xshape));
          }});
  return res;
}

// ---------------------------------------------------------------------------
// Softmax family. Probabilities are formed in double from 32-bit logits with
// row-max subtraction.

Tensor Tape::softmax_rows(const Tensor& logits) {
  require_rank2(logits, "softmax_rows");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  auto lv = logits.values();
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) {
      mx = std::max(mx, static_cast<double>(lv[i * n + j]));
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      denom += std::exp(static_cast<double>(lv[i * n + j]) - mx);
    }
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = static_cast<float>(
          std::exp(static_cast<double>(lv[i * n + j]) - mx) / denom);
    }
  }
  Tensor in[] = {logits};
  Tensor res = make_out({m, n}, std::move(out), in, "softmax_rows");
  record({{logits.node()},
          res.node(),
          [n](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor p = Tensor::wrap(r.out);
            Tensor inner = t.row_sum(t.mul(g, p));
            t.accumulate(r.inputs[0],
                         t.mul(p, t.sub(g, t.col_broadcast(inner, n))));
          }});
  return res;
}

Tensor Tape::log_softmax_nll(const Tensor& logits,
                             std::span<const std::int32_t> targets) {
  require_rank2(logits, "log_softmax_nll");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != m) {
    throw DimensionError("log_softmax_nll: one target per logit row required");
  }
  for (std::int32_t y : targets) {
    if (y < 0 || static_cast<std::size_t>(y) >= n) {
      throw IndexError("log_softmax_nll: target id out of range");
    }
  }
  auto lv = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) {
      mx = std::max(mx, static_cast<double>(lv[i * n + j]));
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      denom += std::exp(static_cast<double>(lv[i * n + j]) - mx);
    }
    double ly = static_cast<double>(lv[i * n + targets[i]]) - mx;
    total -= ly - std::log(denom);
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  Tensor in[] = {logits};
  Tensor res =
      make_out(Shape{}, {static_cast<float>(total)}, in, "log_softmax_nll");
  res.node()->scalar64 = total;
  res.node()->has_scalar64 = true;
  record({{logits.node()},
          res.node(),
          [tgt, n](Tape& t, const OpRec& r) {
            Tensor g = Tensor::wrap(r.out->grad);
            Tensor logits_in = Tensor::wrap(r.inputs[0]);
            Tensor p = t.softmax_rows(logits_in);
            std::vector<float> oh(tgt.size() * n, 0.0f);
            for (std::size_t i = 0; i < tgt.size(); ++i) {
              oh[i * n + static_cast<std::size_t>(tgt[i])] = 1.0f;
            }
            Tensor onehot = Tensor::from({tgt.size(), n}, std::move(oh));
            t.accumulate(r.inputs[0], t.mul(t.sub(p, onehot), g));
          }});
  return res;
}

double global_norm(std::span<const Tensor> ts) {
  double acc = 0.0;
  for (const Tensor& t : ts) {
    for (float v : t.values()) {
      acc += static_cast<double>(v) * static_cast<double>(v);
    }
  }
  return std::sqrt(acc);
}

}  // namespace brnn
