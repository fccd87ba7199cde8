#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "brnn/errors.hpp"

namespace brnn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

namespace detail {

// One node per tensor value. Gradient slots are stamped with a globally unique
// backward epoch so several tapes and repeated backward calls never mix grads.
struct Node {
  Shape shape;
  std::vector<float> value;
  double scalar64 = 0.0;     // double-precision mirror for size-1 reductions
  bool has_scalar64 = false;
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the producing op
  std::uint64_t grad_epoch = 0;
  std::shared_ptr<Node> grad;
};

}  // namespace detail

// Value-semantics handle to a tensor. Row-major, 32-bit storage. Reductions
// additionally keep a 64-bit result so scalar losses are differenced and
// logged at double precision.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<float> data);
  static Tensor scalar(double v);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const float> values() const;
  std::span<float> values_mut();  // in-place update of a leaf (optimizer step)

  float at(std::size_t i) const;
  float at2(std::size_t i, std::size_t j) const;  // rank-2 convenience
  double scalar_value() const;                    // requires size() == 1

  Tensor clone() const;   // deep copy, keeps requires_grad, drops tape link
  Tensor detach() const;  // deep copy, requires_grad off

  Tensor& set_requires_grad(bool v);
  bool requires_grad() const;

  // Gradient accumulated by the most recent backward() that touched this
  // tensor; zeros if none ever did.
  Tensor grad() const;

  std::shared_ptr<detail::Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> n_;
};

enum class ElementwiseKind { Add, Sub, Mul, Sigmoid, Tanh, Exp, Log, Softplus };

// Define-by-run tape. Operations compute values eagerly and, while recording
// is on, push a backward closure. Backward closures are themselves written in
// terms of tape operations, so backward(create_graph=true) yields gradients
// that stay differentiable (needed for the second-order sharpening path).
// Single-threaded; instantiate one per worker.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool v) { recording_ = v; }
  std::size_t op_count() const { return ops_.size(); }

  // Elementwise. Binary kinds accept equal shapes or a size-1 operand, which
  // broadcasts against the other side.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor neg(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor tanh_(const Tensor& a);
  Tensor exp_(const Tensor& a);
  Tensor log_(const Tensor& a);
  Tensor softplus(const Tensor& a);
  Tensor scale(const Tensor& a, double c);       // c is a constant, no grad
  Tensor add_scalar(const Tensor& a, double c);  // constant shift
  Tensor elementwise(ElementwiseKind kind, const Tensor& a,
                     const Tensor* b = nullptr);

  // Matrix products, rank-2 only. nt/tn variants multiply by a transposed
  // operand without materialising the transpose.
  Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
  Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a x b^T
  Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T x b

  // Structure ops.
  Tensor concat_cols(const Tensor& a, const Tensor& b);
  Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len);
  Tensor pad_cols(const Tensor& a, std::size_t start, std::size_t total);
  Tensor concat_rows(std::span<const Tensor> parts);
  Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len);
  Tensor pad_rows(const Tensor& a, std::size_t start, std::size_t total);
  Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids);
  Tensor scatter_rows(const Tensor& x, std::span<const std::int32_t> ids,
                      std::size_t rows);
  Tensor add_rowvec(const Tensor& x, const Tensor& bias);  // bias shape [cols]
  Tensor row_sum(const Tensor& x);                         // [m,n] -> [m]
  Tensor col_sum(const Tensor& x);                         // [m,n] -> [n]
  Tensor col_broadcast(const Tensor& v, std::size_t cols);  // [m] -> [m,cols]
  Tensor row_broadcast(const Tensor& v, std::size_t rows);  // [n] -> [rows,n]
  Tensor broadcast_full(const Tensor& s, Shape shape);      // scalar -> shape
  Tensor sum_all(const Tensor& x);                          // -> scalar

  Tensor reshape(const Tensor& a, Shape shape);  // size-preserving

  Tensor softmax_rows(const Tensor& logits);
  // Total negative log-likelihood of targets under row-wise softmax; scalar.
  Tensor log_softmax_nll(const Tensor& logits,
                         std::span<const std::int32_t> targets);

  // Reverse pass from a scalar loss produced on this tape. With create_graph
  // the gradient computation is recorded too, so grads remain differentiable.
  // May be called repeatedly; each call accumulates into fresh grad slots.
  void backward(const Tensor& loss, bool create_graph = false);

 private:
  struct OpRec {
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> out;
    std::function<void(Tape&, const OpRec&)> back;
  };

  Tensor make_out(Shape shape, std::vector<float> value,
                  std::span<const Tensor> inputs, const char* opname);
  void record(OpRec rec);
  void accumulate(const std::shared_ptr<detail::Node>& n, const Tensor& g);

  Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                   ElementwiseKind kind);
  Tensor unary_op(const Tensor& a, const char* name, ElementwiseKind kind);

  std::vector<OpRec> ops_;
  bool recording_ = true;
  std::uint64_t cur_epoch_ = 0;

  static std::atomic<std::uint64_t> epoch_counter_;
};

// Flat L2 norm over a set of tensors, accumulated in double.
double global_norm(std::span<const Tensor> ts);

}  // namespace brnn
