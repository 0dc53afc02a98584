#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "error.hpp"

namespace mmsim {

class Rng;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // tape that produced this tensor; 0 for leaves

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense float64 tensor handle with row-major storage. Copies share storage.
/// Storage is immutable after creation except for parameter updates between
/// training steps (via mutable data()).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  const std::vector<double>& grad() const;
  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  void zero_grad() { if (impl_) impl_->grad.assign(impl_->data.size(), 0.0); }

  double value() const;  // scalar tensors only
  double at(std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend class Tape;
  friend Tensor wrap_impl(std::shared_ptr<TensorImpl>);
};

/// Records executed ops (in topological order, since execution is eager) so
/// backward() can visit them exactly once in reverse. One tape may be active
/// per thread; ops record themselves only while a tape is active and some
/// input requires grad.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  /// Computes gradients for every requires_grad tensor reachable from loss.
  /// loss must be a scalar produced on this tape.
  void backward(const Tensor& loss);

  void record(const char* op, std::shared_ptr<TensorImpl> out, std::function<void()> backward_fn);

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorImpl> out;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  std::uint64_t id_ = 0;
  bool backward_done_ = false;
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// x[..., H] + bias[H]; the only broadcast in the engine.
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// 2-D [m,k]x[k,n] or batched 3-D [N,m,k]x[N,k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape to);
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
/// Gather rows of a 2-D table; also the embedding lookup.
Tensor rows(const Tensor& table, const std::vector<std::size_t>& idx);
/// Inverse of rows(): out[idx[r], :] = src[r, :], remaining rows zero.
Tensor scatter_rows(const Tensor& src, std::size_t n_rows, const std::vector<std::size_t>& idx);
/// [B, L, H] -> [B*n_heads, L, H/n_heads]
Tensor split_heads(const Tensor& x, std::size_t n_heads);
/// [B*n_heads, L, d] -> [B, L, d*n_heads]
Tensor merge_heads(const Tensor& x, std::size_t n_heads);
/// Row-wise over the last axis, max-subtracted.
Tensor softmax(const Tensor& a);
/// Per position over the last axis, learnable gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12);
Tensor gelu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);
Tensor l2_norm_axis(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
/// Mean softmax cross-entropy of [N, C] logits against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);
/// Mean element-wise binary cross-entropy with logits.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
/// Inverted-scale dropout; rate 0 is the identity.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

}  // namespace ops

/// Max over elements of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
/// using central differences with step h. f must be scalar-valued and
/// deterministic (checked with two forward passes).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

}  // namespace mmsim
