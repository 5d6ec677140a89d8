#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duet/common.hpp"

namespace duet {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

inline bool grad_mode_flag(int delta = 0) {
  thread_local int depth = 0;
  depth += delta;
  return depth == 0;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in scope (finite-difference probes, sampling).
class NoGradGuard {
 public:
  NoGradGuard() { detail::grad_mode_flag(+1); }
  ~NoGradGuard() { detail::grad_mode_flag(-1); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Populated by backward() for leaves; accumulates across calls until
  // zero_grad. Interior nodes hold the value of the most recent pass.
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl& self)> backward_fn;

  int64_t numel() const { return numel_of(shape); }
  bool is_leaf() const { return !backward_fn; }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(data.size()));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    auto n = static_cast<std::size_t>(numel_of(shape));
    return from_data(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    auto n = static_cast<std::size_t>(numel_of(shape));
    std::vector<double> d(n);
    for (auto& x : d) x = stddev * rng.normal();
    return from_data(std::move(shape), std::move(d));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return check().shape; }
  int64_t ndim() const { return static_cast<int64_t>(shape().size()); }
  int64_t numel() const { return check().numel(); }
  int64_t extent(int64_t dim) const {
    const Shape& s = shape();
    if (dim < 0) dim += static_cast<int64_t>(s.size());
    if (dim < 0 || dim >= static_cast<int64_t>(s.size()))
      throw ShapeError("extent: dim out of range");
    return s[static_cast<std::size_t>(dim)];
  }

  std::vector<double>& data() { return check().data; }
  const std::vector<double>& data() const { return check().data; }

  double item() const {
    if (numel() != 1)
      throw ContractError("item: tensor has " + std::to_string(numel()) +
                          " elements, expected 1");
    return check().data[0];
  }

  bool requires_grad() const { return check().requires_grad; }

  Tensor& set_requires_grad(bool value) {
    if (!check().is_leaf())
      throw ContractError("set_requires_grad: only valid on leaf tensors");
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !check().grad.empty(); }
  const std::vector<double>& grad() const {
    if (!has_grad()) throw ContractError("grad: not populated");
    return impl_->grad;
  }
  void zero_grad() { check().grad.clear(); }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  TensorImpl& check() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline Tensor make_op_result(
    Shape shape, std::vector<double> data,
    std::vector<std::shared_ptr<TensorImpl>> parents,
    std::function<void(TensorImpl&)> backward_fn) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const auto& p : parents)
      if (p->requires_grad) {
        track = true;
        break;
      }
  }
  if (track) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor::wrap(std::move(impl));
}

// b may equal a's shape, or be a suffix of it (leading-batch expansion).
// Returns the number of leading rows a spans over b, or -1 if incompatible.
inline int64_t broadcast_rows(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return -1;
  const std::size_t off = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i)
    if (a[off + i] != b[i]) return -1;
  int64_t rows = 1;
  for (std::size_t i = 0; i < off; ++i) rows *= a[i];
  return rows;
}

inline void accumulate(std::vector<double>& dst, const double* src,
                       std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  // Orient so the broadcast (suffix-shaped) operand is `small`.
  const int64_t rows_ab = broadcast_rows(a.shape(), b.shape());
  const int64_t rows_ba = broadcast_rows(b.shape(), a.shape());
  if (rows_ab < 0 && rows_ba < 0)
    throw ShapeError(std::string(name) + ": incompatible shapes " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool b_small = rows_ab >= 0;
  const Tensor& big = b_small ? a : b;
  const Tensor& small = b_small ? b : a;
  const int64_t rows = b_small ? rows_ab : rows_ba;
  const auto small_n = static_cast<std::size_t>(small.numel());

  std::vector<double> out(static_cast<std::size_t>(big.numel()));
  const auto& bd = big.data();
  const auto& sd = small.data();
  for (int64_t r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * small_n;
    for (std::size_t i = 0; i < small_n; ++i) {
      const double x = bd[base + i];
      const double y = sd[i];
      out[base + i] = b_small ? fwd(x, y) : fwd(y, x);
    }
  }

  auto big_impl = big.impl_ptr();
  auto small_impl = small.impl_ptr();
  return make_op_result(
      big.shape(), std::move(out), {a.impl_ptr(), b.impl_ptr()},
      [big_impl, small_impl, rows, small_n, b_small, bwd_a,
       bwd_b](TensorImpl& self) {
        const auto& g = self.grad;
        const auto& bd2 = big_impl->data;
        const auto& sd2 = small_impl->data;
        // Either operand may be the broadcast one; route grads accordingly.
        if (big_impl->requires_grad) {
          auto& gb = big_impl->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * small_n;
            for (std::size_t i = 0; i < small_n; ++i) {
              const double x = bd2[base + i];
              const double y = sd2[i];
              gb[base + i] += g[base + i] * (b_small ? bwd_a(x, y)
                                                     : bwd_b(y, x));
            }
          }
        }
        if (small_impl->requires_grad) {
          auto& gs = small_impl->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * small_n;
            for (std::size_t i = 0; i < small_n; ++i) {
              const double x = bd2[base + i];
              const double y = sd2[i];
              gs[i] += g[base + i] * (b_small ? bwd_b(x, y) : bwd_a(y, x));
            }
          }
        }
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= s;
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      a.shape(), std::move(out), {a_impl}, [a_impl, s](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] += s * self.grad[i];
      });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v += c;
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      a.shape(), std::move(out), {a_impl}, [a_impl](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        detail::accumulate(ga, self.grad.data(), ga.size());
      });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void mm_nn(const double* a, const double* b, double* c, int64_t m_ext,
                  int64_t k_ext, int64_t n_ext) {
  for (int64_t m = 0; m < m_ext; ++m) {
    const double* arow = a + m * k_ext;
    double* crow = c + m * n_ext;
    for (int64_t k = 0; k < k_ext; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b + k * n_ext;
      for (int64_t n = 0; n < n_ext; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[M,K] += A[M,N] * B[K,N]^T
inline void mm_nt(const double* a, const double* b, double* c, int64_t m_ext,
                  int64_t n_ext, int64_t k_ext) {
  for (int64_t m = 0; m < m_ext; ++m) {
    const double* arow = a + m * n_ext;
    double* crow = c + m * k_ext;
    for (int64_t k = 0; k < k_ext; ++k) {
      const double* brow = b + k * n_ext;
      double acc = 0.0;
      for (int64_t n = 0; n < n_ext; ++n) acc += arow[n] * brow[n];
      crow[k] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void mm_tn(const double* a, const double* b, double* c, int64_t m_ext,
                  int64_t k_ext, int64_t n_ext) {
  for (int64_t m = 0; m < m_ext; ++m) {
    const double* arow = a + m * k_ext;
    const double* brow = b + m * n_ext;
    for (int64_t k = 0; k < k_ext; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      double* crow = c + k * n_ext;
      for (int64_t n = 0; n < n_ext; ++n) crow[n] += av * brow[n];
    }
  }
}

}  // namespace detail

// Supported forms: [.., M, K] x [K, N] (weight contraction over flattened
// leading dims) and [B.., M, K] x [B.., K, N] with identical leading dims.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: operands must have rank >= 2");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const int64_t k_ext = as[as.size() - 1];
  const int64_t m_ext = as[as.size() - 2];

  if (b.ndim() == 2) {
    if (bs[0] != k_ext)
      throw ShapeError("matmul: inner extents differ: " + shape_str(as) +
                       " x " + shape_str(bs));
    const int64_t n_ext = bs[1];
    int64_t batch = 1;
    for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
    const int64_t rows = batch * m_ext;
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n_ext);
    std::vector<double> out(static_cast<std::size_t>(rows * n_ext), 0.0);
    detail::mm_nn(a.data().data(), b.data().data(), out.data(), rows, k_ext,
                  n_ext);
    auto a_impl = a.impl_ptr();
    auto b_impl = b.impl_ptr();
    return detail::make_op_result(
        std::move(out_shape), std::move(out), {a_impl, b_impl},
        [a_impl, b_impl, rows, k_ext, n_ext](TensorImpl& self) {
          const double* g = self.grad.data();
          if (a_impl->requires_grad) {
            auto& ga = a_impl->ensure_grad();
            detail::mm_nt(g, b_impl->data.data(), ga.data(), rows, n_ext,
                          k_ext);
          }
          if (b_impl->requires_grad) {
            auto& gb = b_impl->ensure_grad();
            detail::mm_tn(a_impl->data.data(), g, gb.data(), rows, k_ext,
                          n_ext);
          }
        });
  }

  if (a.ndim() != b.ndim())
    throw ShapeError("matmul: rank mismatch: " + shape_str(as) + " x " +
                     shape_str(bs));
  for (std::size_t i = 0; i + 2 < as.size(); ++i)
    if (as[i] != bs[i])
      throw ShapeError("matmul: batch extents differ: " + shape_str(as) +
                       " x " + shape_str(bs));
  if (bs[bs.size() - 2] != k_ext)
    throw ShapeError("matmul: inner extents differ: " + shape_str(as) +
                     " x " + shape_str(bs));
  const int64_t n_ext = bs[bs.size() - 1];
  int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n_ext);
  std::vector<double> out(static_cast<std::size_t>(batch * m_ext * n_ext),
                          0.0);
  for (int64_t t = 0; t < batch; ++t)
    detail::mm_nn(a.data().data() + t * m_ext * k_ext,
                  b.data().data() + t * k_ext * n_ext,
                  out.data() + t * m_ext * n_ext, m_ext, k_ext, n_ext);
  auto a_impl = a.impl_ptr();
  auto b_impl = b.impl_ptr();
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {a_impl, b_impl},
      [a_impl, b_impl, batch, m_ext, k_ext, n_ext](TensorImpl& self) {
        const double* g = self.grad.data();
        if (a_impl->requires_grad) {
          auto& ga = a_impl->ensure_grad();
          for (int64_t t = 0; t < batch; ++t)
            detail::mm_nt(g + t * m_ext * n_ext,
                          b_impl->data.data() + t * k_ext * n_ext,
                          ga.data() + t * m_ext * k_ext, m_ext, n_ext, k_ext);
        }
        if (b_impl->requires_grad) {
          auto& gb = b_impl->ensure_grad();
          for (int64_t t = 0; t < batch; ++t)
            detail::mm_tn(a_impl->data.data() + t * m_ext * k_ext,
                          g + t * m_ext * n_ext,
                          gb.data() + t * k_ext * n_ext, m_ext, k_ext, n_ext);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (numel_of(new_shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  std::vector<double> out(a.data());
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      std::move(new_shape), std::move(out), {a_impl},
      [a_impl](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        detail::accumulate(ga, self.grad.data(), ga.size());
      });
}

namespace detail {

inline std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Materialized copy with dims d0 and d1 swapped.
inline void permute_two(const double* src, double* dst, const Shape& in_shape,
                        int64_t d0, int64_t d1) {
  const auto rank = static_cast<int64_t>(in_shape.size());
  Shape out_shape = in_shape;
  std::swap(out_shape[d0], out_shape[d1]);
  const auto in_st = row_strides(in_shape);
  const auto out_st = row_strides(out_shape);
  const int64_t n = numel_of(in_shape);
  std::vector<int64_t> idx(in_shape.size(), 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat;
    int64_t src_off = 0;
    for (int64_t d = 0; d < rank; ++d) {
      idx[d] = rem / out_st[d];
      rem %= out_st[d];
    }
    std::swap(idx[d0], idx[d1]);
    for (int64_t d = 0; d < rank; ++d) src_off += idx[d] * in_st[d];
    dst[flat] = src[src_off];
  }
}

}  // namespace detail

inline Tensor transpose_dims(const Tensor& a, int64_t d0, int64_t d1) {
  const auto rank = a.ndim();
  if (d0 < 0) d0 += rank;
  if (d1 < 0) d1 += rank;
  if (d0 < 0 || d0 >= rank || d1 < 0 || d1 >= rank)
    throw ShapeError("transpose_dims: dim out of range");
  Shape out_shape = a.shape();
  std::swap(out_shape[d0], out_shape[d1]);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  detail::permute_two(a.data().data(), out.data(), a.shape(), d0, d1);
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      std::move(out_shape), std::move(out), {a_impl},
      [a_impl, d0, d1](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        std::vector<double> tmp(ga.size());
        detail::permute_two(self.grad.data(), tmp.data(), self.shape, d0, d1);
        detail::accumulate(ga, tmp.data(), ga.size());
      });
}

inline Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  return transpose_dims(a, a.ndim() - 2, a.ndim() - 1);
}

inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.empty()) throw ShapeError("concat_lastdim: rank must be >= 1");
  int64_t last_total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw ShapeError("concat_lastdim: rank mismatch");
    for (std::size_t i = 0; i + 1 < s.size(); ++i)
      if (s[i] != s0[i])
        throw ShapeError("concat_lastdim: leading extents differ");
    last_total += s.back();
  }
  Shape out_shape = s0;
  out_shape.back() = last_total;
  const int64_t rows = numel_of(out_shape) / last_total;
  std::vector<double> out(static_cast<std::size_t>(rows * last_total));
  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(parts.size());
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    impls.push_back(p.impl_ptr());
    widths.push_back(p.shape().back());
  }
  for (int64_t r = 0; r < rows; ++r) {
    int64_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const int64_t w = widths[pi];
      std::memcpy(out.data() + r * last_total + off,
                  impls[pi]->data.data() + r * w,
                  static_cast<std::size_t>(w) * sizeof(double));
      off += w;
    }
  }
  return detail::make_op_result(
      std::move(out_shape), std::move(out), impls,
      [impls, widths, rows, last_total](TensorImpl& self) {
        int64_t off = 0;
        for (std::size_t pi = 0; pi < impls.size(); ++pi) {
          const int64_t w = widths[pi];
          if (impls[pi]->requires_grad) {
            auto& gp = impls[pi]->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < w; ++j)
                gp[r * w + j] += self.grad[r * last_total + off + j];
          }
          off += w;
        }
      });
}

inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  return concat_lastdim(std::vector<Tensor>{a, b});
}

inline std::vector<Tensor> chunk(const Tensor& a, int64_t k) {
  if (a.ndim() < 1) throw ShapeError("chunk: rank must be >= 1");
  const int64_t last = a.shape().back();
  if (k < 1 || last % k != 0)
    throw ShapeError("chunk: last extent " + std::to_string(last) +
                     " not divisible by " + std::to_string(k));
  const int64_t w = last / k;
  const int64_t rows = a.numel() / last;
  Shape piece_shape = a.shape();
  piece_shape.back() = w;
  auto a_impl = a.impl_ptr();
  std::vector<Tensor> pieces;
  pieces.reserve(static_cast<std::size_t>(k));
  for (int64_t c = 0; c < k; ++c) {
    std::vector<double> out(static_cast<std::size_t>(rows * w));
    for (int64_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * w, a.data().data() + r * last + c * w,
                  static_cast<std::size_t>(w) * sizeof(double));
    pieces.push_back(detail::make_op_result(
        piece_shape, std::move(out), {a_impl},
        [a_impl, c, w, rows, last](TensorImpl& self) {
          if (!a_impl->requires_grad) return;
          auto& ga = a_impl->ensure_grad();
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j)
              ga[r * last + c * w + j] += self.grad[r * w + j];
        }));
  }
  return pieces;
}

// ---------------------------------------------------------------------------
// Nonlinearities / normalization / reductions
// ---------------------------------------------------------------------------

inline Tensor softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("softmax_lastdim: rank must be >= 1");
  const int64_t last = a.shape().back();
  if (last < 1) throw ShapeError("softmax_lastdim: empty last extent");
  const int64_t rows = a.numel() / last;
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * last;
    double* yr = out.data() + r * last;
    double mx = xr[0];
    for (int64_t j = 0; j < last; ++j) {
      if (std::isnan(xr[j]))
        throw NumericError("softmax_lastdim: NaN input");
      mx = std::max(mx, xr[j]);
    }
    double denom = 0.0;
    for (int64_t j = 0; j < last; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      denom += yr[j];
    }
    for (int64_t j = 0; j < last; ++j) yr[j] /= denom;
  }
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      a.shape(), std::move(out), {a_impl},
      [a_impl, rows, last](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
          const double* yr = y.data() + r * last;
          const double* gr = g.data() + r * last;
          double dot = 0.0;
          for (int64_t j = 0; j < last; ++j) dot += yr[j] * gr[j];
          for (int64_t j = 0; j < last; ++j)
            ga[r * last + j] += yr[j] * (gr[j] - dot);
        }
      });
}

// x * weight / sqrt(mean(x^2, last) + eps); weight spans the last extent.
inline Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  if (eps <= 0.0) throw ConfigError("rmsnorm: eps must be > 0");
  if (x.ndim() < 1) throw ShapeError("rmsnorm: rank must be >= 1");
  const int64_t last = x.shape().back();
  if (weight.ndim() != 1 || weight.extent(0) != last)
    throw ShapeError("rmsnorm: weight shape " + shape_str(weight.shape()) +
                     " does not match last extent " + std::to_string(last));
  const int64_t rows = x.numel() / last;
  const auto& xd = x.data();
  const auto& wd = weight.data();
  std::vector<double> out(xd.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * last;
    double ss = 0.0;
    for (int64_t j = 0; j < last; ++j) ss += xr[j] * xr[j];
    const double rms = std::sqrt(ss / static_cast<double>(last) + eps);
    for (int64_t j = 0; j < last; ++j)
      out[r * last + j] = xr[j] * wd[j] / rms;
  }
  auto x_impl = x.impl_ptr();
  auto w_impl = weight.impl_ptr();
  return detail::make_op_result(
      x.shape(), std::move(out), {x_impl, w_impl},
      [x_impl, w_impl, rows, last, eps](TensorImpl& self) {
        const auto& xd2 = x_impl->data;
        const auto& wd2 = w_impl->data;
        const auto& g = self.grad;
        for (int64_t r = 0; r < rows; ++r) {
          const double* xr = xd2.data() + r * last;
          const double* gr = g.data() + r * last;
          double ss = 0.0;
          for (int64_t j = 0; j < last; ++j) ss += xr[j] * xr[j];
          const double rms = std::sqrt(ss / static_cast<double>(last) + eps);
          if (x_impl->requires_grad) {
            auto& gx = x_impl->ensure_grad();
            double dot = 0.0;  // sum_i g_i w_i x_i
            for (int64_t j = 0; j < last; ++j) dot += gr[j] * wd2[j] * xr[j];
            const double r3 = rms * rms * rms;
            for (int64_t j = 0; j < last; ++j)
              gx[r * last + j] += gr[j] * wd2[j] / rms -
                                  xr[j] * dot /
                                      (static_cast<double>(last) * r3);
          }
          if (w_impl->requires_grad) {
            auto& gw = w_impl->ensure_grad();
            for (int64_t j = 0; j < last; ++j)
              gw[j] += gr[j] * xr[j] / rms;
          }
        }
      });
}

inline Tensor gelu(const Tensor& a) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  const auto& x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      a.shape(), std::move(out), {a_impl}, [a_impl](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        const auto& xd = a_impl->data;
        for (std::size_t i = 0; i < ga.size(); ++i) {
          const double x = xd[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          ga[i] += self.grad[i] * (cdf + x * pdf);
        }
      });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      {}, {acc}, {a_impl}, [a_impl](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        const double g = self.grad[0];
        for (auto& v : ga) v += g;
      });
}

inline Tensor mean(const Tensor& a) {
  const auto n = static_cast<double>(a.numel());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  acc /= n;
  auto a_impl = a.impl_ptr();
  return detail::make_op_result(
      {}, {acc}, {a_impl}, [a_impl, n](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        auto& ga = a_impl->ensure_grad();
        const double g = self.grad[0] / n;
        for (auto& v : ga) v += g;
      });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  if (bias.defined()) y = add(y, bias);
  return y;
}

inline Tensor linear(const Tensor& x, const Tensor& w) {
  return linear(x, w, Tensor());
}

inline Tensor embedding(const Tensor& table, std::span<const int64_t> ids) {
  if (table.ndim() != 2) throw ShapeError("embedding: table must be rank 2");
  const int64_t vocab = table.extent(0);
  const int64_t dim = table.extent(1);
  std::vector<double> out(ids.size() * static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int64_t id = ids[i];
    if (id < 0 || id >= vocab)
      throw ShapeError("embedding: id " + std::to_string(id) +
                       " out of range [0, " + std::to_string(vocab) + ")");
    std::memcpy(out.data() + i * static_cast<std::size_t>(dim),
                table.data().data() + id * dim,
                static_cast<std::size_t>(dim) * sizeof(double));
  }
  auto t_impl = table.impl_ptr();
  std::vector<int64_t> ids_copy(ids.begin(), ids.end());
  return detail::make_op_result(
      {static_cast<int64_t>(ids.size()), dim}, std::move(out), {t_impl},
      [t_impl, ids_copy, dim](TensorImpl& self) {
        if (!t_impl->requires_grad) return;
        auto& gt = t_impl->ensure_grad();
        for (std::size_t i = 0; i < ids_copy.size(); ++i)
          for (int64_t j = 0; j < dim; ++j)
            gt[ids_copy[i] * dim + j] +=
                self.grad[i * static_cast<std::size_t>(dim) + j];
      });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Reverse-mode tape reconstructed from the value DAG: `order` is
// topologically sorted so every node's inputs precede it.
struct Graph {
  std::vector<TensorImpl*> order;

  static Graph from(const Tensor& root) {
    Graph g;
    std::unordered_set<TensorImpl*> visited;
    // Iterative post-order DFS.
    struct Frame {
      TensorImpl* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    TensorImpl* r = root.impl();
    if (!r || !r->requires_grad) return g;
    stack.push_back({r, 0});
    visited.insert(r);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        TensorImpl* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        g.order.push_back(f.node);
        stack.pop_back();
      }
    }
    return g;
  }
};

// Populates grads of every reachable requires_grad leaf. Leaf grads
// accumulate across calls; zero_grad resets them. Interior node grads are
// recomputed from scratch on each call.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ContractError("backward: loss does not require grad");
  Graph graph = Graph::from(loss);
  for (TensorImpl* node : graph.order)
    if (!node->is_leaf())
      node->grad.assign(static_cast<std::size_t>(node->numel()), 0.0);
  loss.impl()->ensure_grad()[0] += 1.0;
  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Binary tensor file format:
//   magic "TNSR" | u32 version=1 | u32 rank | u64 extents[rank] | f64 data
// All integers and doubles little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
  return v;
}
inline uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string tensor_to_bytes(const Tensor& t) {
  std::string out;
  const Shape& s = t.shape();
  out.reserve(12 + 8 * s.size() + 8 * static_cast<std::size_t>(t.numel()));
  out += "TNSR";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<uint32_t>(s.size()));
  for (int64_t e : s) detail::put_u64(out, static_cast<uint64_t>(e));
  for (double v : t.data()) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    detail::put_u64(out, bits);
  }
  return out;
}

inline Tensor tensor_from_bytes(std::string_view bytes,
                                const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "TNSR", 4) != 0)
    throw IoError("bad tensor header in " + origin);
  const uint32_t version = detail::get_u32(p + 4);
  if (version != 1)
    throw IoError("unsupported tensor version " + std::to_string(version) +
                  " in " + origin);
  const uint32_t rank = detail::get_u32(p + 8);
  std::size_t off = 12;
  if (bytes.size() < off + 8ull * rank)
    throw IoError("truncated tensor header in " + origin);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int64_t>(detail::get_u64(p + off));
    if (shape[i] <= 0) throw IoError("non-positive extent in " + origin);
    off += 8;
  }
  const auto n = static_cast<std::size_t>(numel_of(shape));
  if (bytes.size() != off + 8 * n)
    throw IoError("tensor payload size mismatch in " + origin);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const uint64_t bits = detail::get_u64(p + off + 8 * i);
    std::memcpy(&data[i], &bits, 8);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  atomic_write_file(path, tensor_to_bytes(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  return tensor_from_bytes(read_file(path), path.string());
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace duet
