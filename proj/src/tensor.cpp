#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "rng.hpp"

namespace mmsim {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << " x ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

void validate_shape(const Shape& s) {
  if (s.empty()) fail(Status::Shape, "tensor shape must have at least one dimension");
  for (auto d : s)
    if (d == 0) fail(Status::Shape, "tensor shape has zero dimension " + shape_str(s));
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) fail(Status::Numeric, std::string(op) + ": non-finite output");
}

}  // namespace

Tensor wrap_impl(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size())
    fail(Status::Shape, "tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& x : t.data()) x = rng.normal(0.0, stddev);
  return t;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) fail(Status::Invalid, "tensor has no gradient; run backward first");
  return impl_->grad;
}

double Tensor::value() const {
  if (numel() != 1)
    fail(Status::Shape, "value() requires a scalar tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local std::uint64_t g_tape_counter = 0;
}  // namespace

Tape::Tape() {
  if (g_active_tape) fail(Status::Invalid, "a tape is already active on this thread");
  id_ = ++g_tape_counter;
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::shared_ptr<TensorImpl> out,
                  std::function<void()> backward_fn) {
  out->tape_id = id_;
  entries_.push_back({op, std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail(Status::Shape,
         "backward requires a scalar loss, got " +
             (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (loss.impl()->tape_id != id_)
    fail(Status::Invalid, "backward: loss was not produced on the current tape");
  if (backward_done_) fail(Status::Invalid, "backward already ran on this tape");
  backward_done_ = true;

  for (auto& e : entries_) e.out->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward_fn();
}

// ---------------------------------------------------------------------------
// Ops

namespace ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool tape_wants(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Builds the output tensor and, when a tape is active and some input needs a
// gradient, installs the backward closure produced by make_backward(out_impl).
template <typename MakeBackward>
Tensor finish(const char* op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
  check_finite(data, op);
  Tensor out = wrap_impl(std::make_shared<TensorImpl>());
  out.impl()->shape = std::move(shape);
  out.impl()->data = std::move(data);
  if (shape_numel(out.impl()->shape) != out.impl()->data.size())
    fail(Status::Shape, std::string(op) + ": internal shape/data mismatch");
  if (tape_wants(inputs)) {
    out.impl()->requires_grad = true;
    Tape::active()->record(op, out.impl(), make_backward(out.impl()));
  }
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(Status::Shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

// outer = product of dims before axis, inner = product after
void axis_spans(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto ai = a.impl(), bi = b.impl();
  return finish("add", a.shape(), std::move(out), {&a, &b}, [ai, bi](ImplPtr oi) {
    return [ai, bi, oi]() {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto ai = a.impl(), bi = b.impl();
  return finish("sub", a.shape(), std::move(out), {&a, &b}, [ai, bi](ImplPtr oi) {
    return [ai, bi, oi]() {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.impl(), bi = b.impl();
  return finish("mul", a.shape(), std::move(out), {&a, &b}, [ai, bi](ImplPtr oi) {
    return [ai, bi, oi]() {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
      }
    };
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  auto ai = a.impl(), bi = b.impl();
  return finish("div", a.shape(), std::move(out), {&a, &b}, [ai, bi](ImplPtr oi) {
    return [ai, bi, oi]() {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] / bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
          bi->grad[i] -= g[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
      }
    };
  });
}

Tensor scale(const Tensor& a, double s) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto ai = a.impl();
  return finish("scale", a.shape(), std::move(out), {&a}, [ai, s](ImplPtr oi) {
    return [ai, s, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * s;
    };
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || x.shape().back() != bias.dim(0))
    fail(Status::Shape, "add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                            shape_str(bias.shape()));
  const std::size_t h = bias.dim(0);
  const std::size_t rows_n = x.numel() / h;
  const auto& xv = x.data();
  const auto& bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows_n; ++r)
    for (std::size_t c = 0; c < h; ++c) out[r * h + c] = xv[r * h + c] + bv[c];
  auto xi = x.impl(), bi = bias.impl();
  return finish("add_bias", x.shape(), std::move(out), {&x, &bias}, [xi, bi, rows_n, h](ImplPtr oi) {
    return [xi, bi, rows_n, h, oi]() {
      const auto& g = oi->grad;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t r = 0; r < rows_n; ++r)
          for (std::size_t c = 0; c < h; ++c) bi->grad[c] += g[r * h + c];
      }
    };
  });
}

namespace {

// C[m,n] += A[m,k] * B[k,n], row-major, fixed accumulation order
void mm_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = arow[p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

// dA[m,k] += G[m,n] * B^T  (B is [k,n])
void mm_acc_gbt(const double* G, const double* B, double* dA, std::size_t m, std::size_t n,
                std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = G + i * n;
    double* darow = dA + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = B + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      darow[p] += s;
    }
  }
}

// dB[k,n] += A^T * G  (A is [m,k], G is [m,n])
void mm_acc_atg(const double* A, const double* G, double* dB, std::size_t m, std::size_t k,
                std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    const double* grow = G + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = arow[p];
      double* dbrow = dB + p * n;
      for (std::size_t j = 0; j < n; ++j) dbrow[j] += a * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.ndim() == 3 && b.ndim() == 3;
  if (!batched && !(a.ndim() == 2 && b.ndim() == 2))
    fail(Status::Shape,
         "matmul: expects 2-D x 2-D or 3-D x 3-D, got " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
  const std::size_t nb = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(batched ? 1 : 0);
  const std::size_t k = a.dim(batched ? 2 : 1);
  const std::size_t kb = b.dim(batched ? 1 : 0);
  const std::size_t n = b.dim(batched ? 2 : 1);
  if (k != kb || (batched && b.dim(0) != nb))
    fail(Status::Shape,
         "matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

  std::vector<double> out(nb * m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t t = 0; t < nb; ++t)
    mm_acc(A + t * m * k, B + t * k * n, out.data() + t * m * n, m, k, n);

  Shape oshape = batched ? Shape{nb, m, n} : Shape{m, n};
  auto ai = a.impl(), bi = b.impl();
  return finish("matmul", std::move(oshape), std::move(out), {&a, &b},
                [ai, bi, nb, m, k, n](ImplPtr oi) {
                  return [ai, bi, nb, m, k, n, oi]() {
                    const double* G = oi->grad.data();
                    if (ai->requires_grad) {
                      ai->ensure_grad();
                      for (std::size_t t = 0; t < nb; ++t)
                        mm_acc_gbt(G + t * m * n, bi->data.data() + t * k * n,
                                   ai->grad.data() + t * m * k, m, n, k);
                    }
                    if (bi->requires_grad) {
                      bi->ensure_grad();
                      for (std::size_t t = 0; t < nb; ++t)
                        mm_acc_atg(ai->data.data() + t * m * k, G + t * m * n,
                                   bi->grad.data() + t * k * n, m, k, n);
                    }
                  };
                });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() != 2 && a.ndim() != 3)
    fail(Status::Shape, "transpose_last2: expects 2-D or 3-D, got " + shape_str(a.shape()));
  const std::size_t nb = a.ndim() == 3 ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.ndim() - 2);
  const std::size_t n = a.dim(a.ndim() - 1);
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t t = 0; t < nb; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[t * m * n + j * m + i] = av[t * m * n + i * n + j];
  Shape oshape = a.shape();
  std::swap(oshape[a.ndim() - 2], oshape[a.ndim() - 1]);
  auto ai = a.impl();
  return finish("transpose_last2", std::move(oshape), std::move(out), {&a},
                [ai, nb, m, n](ImplPtr oi) {
                  return [ai, nb, m, n, oi]() {
                    if (!ai->requires_grad) return;
                    ai->ensure_grad();
                    const auto& g = oi->grad;
                    for (std::size_t t = 0; t < nb; ++t)
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j)
                          ai->grad[t * m * n + i * n + j] += g[t * m * n + j * m + i];
                  };
                });
}

Tensor reshape(const Tensor& a, Shape to) {
  validate_shape(to);
  if (shape_numel(to) != a.numel())
    fail(Status::Shape,
         "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(to));
  std::vector<double> out = a.data();
  auto ai = a.impl();
  return finish("reshape", std::move(to), std::move(out), {&a}, [ai](ImplPtr oi) {
    return [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    };
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) fail(Status::Shape, "concat: empty input list");
  const Shape& base = xs[0].shape();
  if (axis >= base.size()) fail(Status::Shape, "concat: axis out of range");
  std::size_t axis_total = 0;
  for (const Tensor& x : xs) {
    if (x.ndim() != base.size())
      fail(Status::Shape, "concat: rank mismatch " + shape_str(base) + " vs " + shape_str(x.shape()));
    for (std::size_t d = 0; d < base.size(); ++d)
      if (d != axis && x.dim(d) != base[d])
        fail(Status::Shape,
             "concat: shape mismatch " + shape_str(base) + " vs " + shape_str(x.shape()));
    axis_total += x.dim(axis);
  }
  Shape oshape = base;
  oshape[axis] = axis_total;
  std::size_t outer, inner;
  axis_spans(oshape, axis, outer, inner);

  std::vector<double> out(shape_numel(oshape));
  std::size_t axis_off = 0;
  for (const Tensor& x : xs) {
    const std::size_t ax = x.dim(axis);
    const auto& xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + axis_off) * inner,
                  xv.data() + o * ax * inner, ax * inner * sizeof(double));
    axis_off += ax;
  }

  std::vector<ImplPtr> impls;
  std::vector<std::size_t> axes;
  for (const Tensor& x : xs) {
    impls.push_back(x.impl());
    axes.push_back(x.dim(axis));
  }
  bool wants = false;
  for (const Tensor& x : xs) wants = wants || x.requires_grad();
  // finish() takes an initializer_list; concat has a dynamic input list, so
  // handle recording manually.
  check_finite(out, "concat");
  Tensor result = wrap_impl(std::make_shared<TensorImpl>());
  result.impl()->shape = std::move(oshape);
  result.impl()->data = std::move(out);
  if (Tape::active() && wants) {
    result.impl()->requires_grad = true;
    auto oi = result.impl();
    Tape::active()->record("concat", oi, [impls, axes, axis_total, outer, inner, oi]() {
      std::size_t axis_off = 0;
      for (std::size_t xidx = 0; xidx < impls.size(); ++xidx) {
        const std::size_t ax = axes[xidx];
        auto& in = impls[xidx];
        if (in->requires_grad) {
          in->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* g = oi->grad.data() + (o * axis_total + axis_off) * inner;
            double* dst = in->grad.data() + o * ax * inner;
            for (std::size_t i = 0; i < ax * inner; ++i) dst[i] += g[i];
          }
        }
        axis_off += ax;
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.ndim()) fail(Status::Shape, "slice: axis out of range");
  if (len == 0 || start + len > a.dim(axis))
    fail(Status::Shape, "slice: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of bounds for " +
                            shape_str(a.shape()));
  Shape oshape = a.shape();
  oshape[axis] = len;
  std::size_t outer, inner;
  axis_spans(a.shape(), axis, outer, inner);
  const std::size_t ax = a.dim(axis);
  const auto& av = a.data();
  std::vector<double> out(shape_numel(oshape));
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, av.data() + (o * ax + start) * inner,
                len * inner * sizeof(double));
  auto ai = a.impl();
  return finish("slice", std::move(oshape), std::move(out), {&a},
                [ai, outer, inner, ax, start, len](ImplPtr oi) {
                  return [ai, outer, inner, ax, start, len, oi]() {
                    if (!ai->requires_grad) return;
                    ai->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                      const double* g = oi->grad.data() + o * len * inner;
                      double* dst = ai->grad.data() + (o * ax + start) * inner;
                      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                    }
                  };
                });
}

Tensor rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  if (table.ndim() != 2)
    fail(Status::Shape, "rows: expects a 2-D table, got " + shape_str(table.shape()));
  if (idx.empty()) fail(Status::Shape, "rows: empty index list");
  const std::size_t r = table.dim(0), c = table.dim(1);
  for (std::size_t i : idx)
    if (i >= r)
      fail(Status::Shape, "rows: index " + std::to_string(i) + " out of range for " +
                              shape_str(table.shape()));
  const auto& tv = table.data();
  std::vector<double> out(idx.size() * c);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::memcpy(out.data() + k * c, tv.data() + idx[k] * c, c * sizeof(double));
  auto ti = table.impl();
  return finish("rows", Shape{idx.size(), c}, std::move(out), {&table}, [ti, idx, c](ImplPtr oi) {
    return [ti, idx, c, oi]() {
      if (!ti->requires_grad) return;
      ti->ensure_grad();
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double* g = oi->grad.data() + k * c;
        double* dst = ti->grad.data() + idx[k] * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
      }
    };
  });
}

Tensor scatter_rows(const Tensor& src, std::size_t n_rows, const std::vector<std::size_t>& idx) {
  if (src.ndim() != 2)
    fail(Status::Shape, "scatter_rows: expects a 2-D source, got " + shape_str(src.shape()));
  if (idx.size() != src.dim(0))
    fail(Status::Shape, "scatter_rows: index count " + std::to_string(idx.size()) +
                            " does not match source rows " + std::to_string(src.dim(0)));
  const std::size_t c = src.dim(1);
  for (std::size_t i : idx)
    if (i >= n_rows)
      fail(Status::Shape, "scatter_rows: index " + std::to_string(i) + " out of range for " +
                              std::to_string(n_rows) + " rows");
  const auto& sv = src.data();
  std::vector<double> out(n_rows * c, 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    double* dst = out.data() + idx[k] * c;
    const double* s = sv.data() + k * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += s[j];
  }
  auto si = src.impl();
  return finish("scatter_rows", Shape{n_rows, c}, std::move(out), {&src}, [si, idx, c](ImplPtr oi) {
    return [si, idx, c, oi]() {
      if (!si->requires_grad) return;
      si->ensure_grad();
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const double* g = oi->grad.data() + idx[k] * c;
        double* dst = si->grad.data() + k * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
      }
    };
  });
}

Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  if (x.ndim() != 3) fail(Status::Shape, "split_heads: expects 3-D, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), h = x.dim(2);
  if (n_heads == 0 || h % n_heads != 0)
    fail(Status::Shape, "split_heads: hidden " + std::to_string(h) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
  const std::size_t d = h / n_heads;
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t hi = 0; hi < n_heads; ++hi)
        std::memcpy(out.data() + ((bi * n_heads + hi) * l + li) * d,
                    xv.data() + (bi * l + li) * h + hi * d, d * sizeof(double));
  auto xi = x.impl();
  return finish("split_heads", Shape{b * n_heads, l, d}, std::move(out), {&x},
                [xi, b, l, h, n_heads, d](ImplPtr oi) {
                  return [xi, b, l, h, n_heads, d, oi]() {
                    if (!xi->requires_grad) return;
                    xi->ensure_grad();
                    for (std::size_t bi = 0; bi < b; ++bi)
                      for (std::size_t li = 0; li < l; ++li)
                        for (std::size_t hi = 0; hi < n_heads; ++hi) {
                          const double* g = oi->grad.data() + ((bi * n_heads + hi) * l + li) * d;
                          double* dst = xi->grad.data() + (bi * l + li) * h + hi * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                        }
                  };
                });
}

Tensor merge_heads(const Tensor& x, std::size_t n_heads) {
  if (x.ndim() != 3) fail(Status::Shape, "merge_heads: expects 3-D, got " + shape_str(x.shape()));
  const std::size_t bn = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (n_heads == 0 || bn % n_heads != 0)
    fail(Status::Shape, "merge_heads: batch " + std::to_string(bn) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
  const std::size_t b = bn / n_heads;
  const std::size_t h = d * n_heads;
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t hi = 0; hi < n_heads; ++hi)
        std::memcpy(out.data() + (bi * l + li) * h + hi * d,
                    xv.data() + ((bi * n_heads + hi) * l + li) * d, d * sizeof(double));
  auto xi = x.impl();
  return finish("merge_heads", Shape{b, l, h}, std::move(out), {&x},
                [xi, b, l, h, n_heads, d](ImplPtr oi) {
                  return [xi, b, l, h, n_heads, d, oi]() {
                    if (!xi->requires_grad) return;
                    xi->ensure_grad();
                    for (std::size_t bi = 0; bi < b; ++bi)
                      for (std::size_t li = 0; li < l; ++li)
                        for (std::size_t hi = 0; hi < n_heads; ++hi) {
                          const double* g = oi->grad.data() + (bi * l + li) * h + hi * d;
                          double* dst = xi->grad.data() + ((bi * n_heads + hi) * l + li) * d;
                          for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                        }
                  };
                });
}

Tensor softmax(const Tensor& a) {
  const std::size_t c = a.shape().back();
  const std::size_t n = a.numel() / c;
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = av.data() + r * c;
    double* y = out.data() + r * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) y[j] *= inv;
  }
  auto ai = a.impl();
  return finish("softmax", a.shape(), std::move(out), {&a}, [ai, n, c](ImplPtr oi) {
    return [ai, n, c, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        const double* y = oi->data.data() + r * c;
        const double* g = oi->grad.data() + r * c;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
        double* dst = ai->grad.data() + r * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += y[j] * (g[j] - dot);
      }
    };
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t h = x.shape().back();
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != h || bias.dim(0) != h)
    fail(Status::Shape, "layer_norm: gain/bias must be [" + std::to_string(h) + "], got " +
                            shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  const std::size_t n = x.numel() / h;
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data() + r * h;
    double* yr = out.data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h; ++j) yr[j] = gv[j] * ((xr[j] - mean) * inv) + bv[j];
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
  return finish("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
                [xi, gi, bi, n, h, eps](ImplPtr oi) {
                  return [xi, gi, bi, n, h, eps, oi]() {
                    std::vector<double> xhat(h), dyg(h);
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* xr = xi->data.data() + r * h;
                      const double* g = oi->grad.data() + r * h;
                      double mean = 0.0;
                      for (std::size_t j = 0; j < h; ++j) mean += xr[j];
                      mean /= static_cast<double>(h);
                      double var = 0.0;
                      for (std::size_t j = 0; j < h; ++j) {
                        const double d = xr[j] - mean;
                        var += d * d;
                      }
                      var /= static_cast<double>(h);
                      const double inv = 1.0 / std::sqrt(var + eps);
                      for (std::size_t j = 0; j < h; ++j) xhat[j] = (xr[j] - mean) * inv;
                      if (gi->requires_grad) {
                        gi->ensure_grad();
                        for (std::size_t j = 0; j < h; ++j) gi->grad[j] += g[j] * xhat[j];
                      }
                      if (bi->requires_grad) {
                        bi->ensure_grad();
                        for (std::size_t j = 0; j < h; ++j) bi->grad[j] += g[j];
                      }
                      if (xi->requires_grad) {
                        xi->ensure_grad();
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < h; ++j) {
                          dyg[j] = g[j] * gi->data[j];
                          m1 += dyg[j];
                          m2 += dyg[j] * xhat[j];
                        }
                        m1 /= static_cast<double>(h);
                        m2 /= static_cast<double>(h);
                        double* dst = xi->grad.data() + r * h;
                        for (std::size_t j = 0; j < h; ++j)
                          dst[j] += inv * (dyg[j] - m1 - xhat[j] * m2);
                      }
                    }
                  };
                });
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto ai = a.impl();
  return finish("gelu", a.shape(), std::move(out), {&a}, [ai](ImplPtr oi) {
    return [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ai->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ai->grad[i] += g[i] * (cdf + x * pdf);
      }
    };
  });
}

Tensor tanh(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  auto ai = a.impl();
  return finish("tanh", a.shape(), std::move(out), {&a}, [ai](ImplPtr oi) {
    return [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = oi->data[i];
        ai->grad[i] += g[i] * (1.0 - y * y);
      }
    };
  });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(av[i]);
  auto ai = a.impl();
  return finish("sigmoid", a.shape(), std::move(out), {&a}, [ai](ImplPtr oi) {
    return [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = oi->data[i];
        ai->grad[i] += g[i] * y * (1.0 - y);
      }
    };
  });
}

namespace {

enum class Reduce { Sum, Mean, L2 };

Tensor reduce_axis(const char* name, Reduce kind, const Tensor& a, std::size_t axis) {
  if (axis >= a.ndim()) fail(Status::Shape, std::string(name) + ": axis out of range");
  if (a.ndim() == 1 && a.dim(0) == 1)
    fail(Status::Shape, std::string(name) + ": cannot reduce a scalar");
  std::size_t outer, inner;
  axis_spans(a.shape(), axis, outer, inner);
  const std::size_t ax = a.dim(axis);
  const auto& av = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < ax; ++k) {
      const double* src = av.data() + (o * ax + k) * inner;
      double* dst = out.data() + o * inner;
      if (kind == Reduce::L2)
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * src[i];
      else
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (kind == Reduce::Mean)
    for (auto& v : out) v /= static_cast<double>(ax);
  if (kind == Reduce::L2)
    for (auto& v : out) v = std::sqrt(v);

  Shape oshape;
  for (std::size_t d = 0; d < a.ndim(); ++d)
    if (d != axis) oshape.push_back(a.dim(d));
  if (oshape.empty()) oshape.push_back(1);

  auto ai = a.impl();
  return finish(name, std::move(oshape), std::move(out), {&a},
                [ai, kind, outer, inner, ax](ImplPtr oi) {
                  return [ai, kind, outer, inner, ax, oi]() {
                    if (!ai->requires_grad) return;
                    ai->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t k = 0; k < ax; ++k) {
                        double* dst = ai->grad.data() + (o * ax + k) * inner;
                        const double* g = oi->grad.data() + o * inner;
                        const double* y = oi->data.data() + o * inner;
                        const double* x = ai->data.data() + (o * ax + k) * inner;
                        switch (kind) {
                          case Reduce::Sum:
                            for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
                            break;
                          case Reduce::Mean:
                            for (std::size_t i = 0; i < inner; ++i)
                              dst[i] += g[i] / static_cast<double>(ax);
                            break;
                          case Reduce::L2:
                            for (std::size_t i = 0; i < inner; ++i)
                              if (y[i] > 0.0) dst[i] += g[i] * x[i] / y[i];
                            break;
                        }
                      }
                  };
                });
}

}  // namespace

Tensor sum_axis(const Tensor& a, std::size_t axis) { return reduce_axis("sum_axis", Reduce::Sum, a, axis); }
Tensor mean_axis(const Tensor& a, std::size_t axis) { return reduce_axis("mean_axis", Reduce::Mean, a, axis); }
Tensor l2_norm_axis(const Tensor& a, std::size_t axis) { return reduce_axis("l2_norm_axis", Reduce::L2, a, axis); }

Tensor sum_all(const Tensor& a) {
  const auto& av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  auto ai = a.impl();
  return finish("sum_all", Shape{1}, std::vector<double>{s}, {&a}, [ai](ImplPtr oi) {
    return [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0];
      for (auto& v : ai->grad) v += g;
    };
  });
}

Tensor mean_all(const Tensor& a) {
  const auto& av = a.data();
  double s = 0.0;
  for (double v : av) s += v;
  s /= static_cast<double>(av.size());
  auto ai = a.impl();
  const double n = static_cast<double>(av.size());
  return finish("mean_all", Shape{1}, std::vector<double>{s}, {&a}, [ai, n](ImplPtr oi) {
    return [ai, n, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0] / n;
      for (auto& v : ai->grad) v += g;
    };
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 2)
    fail(Status::Shape, "cross_entropy: expects 2-D logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n)
    fail(Status::Shape, "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(n) + " rows");
  for (std::size_t y : labels)
    if (y >= c) fail(Status::Shape, "cross_entropy: label " + std::to_string(y) + " out of range");
  const auto& lv = logits.data();
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = lv.data() + r * c;
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
    total += mx + std::log(sum) - x[labels[r]];
  }
  total /= static_cast<double>(n);
  auto li = logits.impl();
  return finish("cross_entropy", Shape{1}, std::vector<double>{total}, {&logits},
                [li, labels, n, c](ImplPtr oi) {
                  return [li, labels, n, c, oi]() {
                    if (!li->requires_grad) return;
                    li->ensure_grad();
                    const double g = oi->grad[0] / static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r) {
                      const double* x = li->data.data() + r * c;
                      double* dst = li->grad.data() + r * c;
                      double mx = x[0];
                      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
                      double sum = 0.0;
                      for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
                      const double inv = 1.0 / sum;
                      for (std::size_t j = 0; j < c; ++j) {
                        const double p = std::exp(x[j] - mx) * inv;
                        dst[j] += g * (p - (j == labels[r] ? 1.0 : 0.0));
                      }
                    }
                  };
                });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape("bce_with_logits", logits, targets);
  const auto& xv = logits.data();
  const auto& tv = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    // max(x,0) - x*t + log(1 + exp(-|x|))
    total += std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(xv.size());
  total /= n;
  auto li = logits.impl(), ti = targets.impl();
  return finish("bce_with_logits", Shape{1}, std::vector<double>{total}, {&logits, &targets},
                [li, ti, n](ImplPtr oi) {
                  return [li, ti, n, oi]() {
                    const double g = oi->grad[0] / n;
                    if (li->requires_grad) {
                      li->ensure_grad();
                      for (std::size_t i = 0; i < li->data.size(); ++i)
                        li->grad[i] += g * (stable_sigmoid(li->data[i]) - ti->data[i]);
                    }
                    if (ti->requires_grad) {
                      ti->ensure_grad();
                      for (std::size_t i = 0; i < ti->data.size(); ++i)
                        ti->grad[i] += g * (-li->data[i]);
                    }
                  };
                });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    fail(Status::Invalid, "dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  const double scl = 1.0 / keep;
  const auto& xv = x.data();
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < keep ? scl : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  auto xi = x.impl();
  return finish("dropout", x.shape(), std::move(out), {&x}, [xi, mask](ImplPtr oi) {
    return [xi, mask, oi]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i] * (*mask)[i];
    };
  });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

bool bits_equal(double a, double b) {
  std::uint64_t ua, ub;
  std::memcpy(&ua, &a, 8);
  std::memcpy(&ub, &b, 8);
  return ua == ub;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (Tape::active()) fail(Status::Invalid, "grad_check: cannot run inside an active tape");

  auto eval = [&](const std::vector<double>& vals) {
    Tensor probe = Tensor::from(x.shape(), vals, false);
    Tensor y = f(probe);
    if (y.numel() != 1)
      fail(Status::Shape, "grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    return y.value();
  };

  const std::vector<double> base = x.data();
  const double y1 = eval(base);
  const double y2 = eval(base);
  if (!bits_equal(y1, y2)) fail(Status::Invalid, "grad_check: f is not deterministic");

  // analytic gradient
  std::vector<double> analytic(base.size(), 0.0);
  {
    Tensor probe = Tensor::from(x.shape(), base, true);
    Tape tape;
    Tensor y = f(probe);
    if (y.numel() != 1)
      fail(Status::Shape, "grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    tape.backward(y);
    if (probe.has_grad()) analytic = probe.grad();
  }

  // central differences
  double max_err = 0.0;
  std::vector<double> vals = base;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double saved = vals[i];
    vals[i] = saved + h;
    const double yp = eval(vals);
    vals[i] = saved - h;
    const double ym = eval(vals);
    vals[i] = saved;
    const double numeric = (yp - ym) / (2.0 * h);
    const double denom = std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
  }
  return max_err;
}

}  // namespace mmsim
