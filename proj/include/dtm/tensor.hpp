#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dtm/errors.hpp"
#include "dtm/gemm.hpp"
#include "dtm/rng.hpp"

namespace dtm {

template <typename T>
struct TensorT;

template <typename T>
using TensorPtr = std::shared_ptr<TensorT<T>>;

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

}  // namespace detail

/// Disables graph construction in scope; forwards run without closures or grads.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Dense row-major tensor of rank 1-4 with an optional gradient buffer.
/// Non-leaf tensors carry the closure that propagates gradients to their
/// parents; backward() runs the closures in reverse topological order.
template <typename T>
struct TensorT : std::enable_shared_from_this<TensorT<T>> {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;  // sized like data iff requires_grad
  bool requires_grad = false;

  std::vector<TensorPtr<T>> parents;
  std::function<void()> backward_fn;

  static TensorPtr<T> create(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<TensorT<T>>();
    t->shape = std::move(shape);
    std::size_t n = 1;
    for (int d : t->shape) {
      if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + detail::shape_str(t->shape));
      n *= static_cast<std::size_t>(d);
    }
    t->data.assign(n, T(0));
    t->requires_grad = requires_grad;
    if (requires_grad) t->grad.assign(n, T(0));
    return t;
  }

  static TensorPtr<T> from_data(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    auto t = std::make_shared<TensorT<T>>();
    t->shape = std::move(shape);
    std::size_t n = 1;
    for (int d : t->shape) {
      if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + detail::shape_str(t->shape));
      n *= static_cast<std::size_t>(d);
    }
    if (values.size() != n)
      throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " +
                       detail::shape_str(t->shape));
    t->data = std::move(values);
    t->requires_grad = requires_grad;
    if (requires_grad) t->grad.assign(n, T(0));
    return t;
  }

  static TensorPtr<T> full(std::vector<int> shape, T value, bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
  }

  static TensorPtr<T> scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  static TensorPtr<T> randn(std::vector<int> shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    auto t = create(std::move(shape), requires_grad);
    for (auto& v : t->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  void ensure_grad() {
    requires_grad = true;
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  bool is_leaf() const { return !backward_fn; }

  /// Deep copy of values only; the copy is detached from any graph.
  TensorPtr<T> clone(bool with_requires_grad = false) const {
    auto t = std::make_shared<TensorT<T>>();
    t->shape = shape;
    t->data = data;
    t->requires_grad = with_requires_grad;
    if (with_requires_grad) t->grad.assign(data.size(), T(0));
    return t;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + detail::shape_str(shape));
    return data[0];
  }

  /// Reverse-mode pass from a scalar root. Gradients accumulate into every
  /// tensor on the path that has requires_grad; everything else stays zero.
  void backward() {
    if (numel() != 1) throw ShapeError("backward: root must be scalar, got " + detail::shape_str(shape));
    if (!requires_grad) throw NumericError("backward: root does not require grad");

    std::vector<TensorT<T>*> topo;
    std::unordered_set<TensorT<T>*> pushed;
    std::vector<std::pair<TensorT<T>*, std::size_t>> stack;
    stack.emplace_back(this, 0);
    pushed.insert(this);
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->parents.size()) {
        TensorT<T>* p = top.first->parents[top.second++].get();
        if (pushed.insert(p).second) stack.emplace_back(p, 0);
      } else {
        topo.push_back(top.first);
        stack.pop_back();
      }
    }
    grad[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
      if ((*it)->backward_fn) (*it)->backward_fn();
  }
};

namespace detail {

template <typename T>
TensorPtr<T> make_op_output(std::vector<int> shape, std::initializer_list<TensorPtr<T>> inputs) {
  bool req = false;
  if (grad_enabled())
    for (const auto& in : inputs) req = req || in->requires_grad;
  auto out = TensorT<T>::create(std::move(shape), req);
  if (req)
    for (const auto& in : inputs)
      out->parents.push_back(in);
  return out;
}

template <typename T>
void check_same_shape(const TensorPtr<T>& a, const TensorPtr<T>& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---- elementwise and scalar ops ----

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_op_output<T>(a->shape, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a, b]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) b->grad[i] += o->grad[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> sub(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_op_output<T>(a->shape, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a, b]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) b->grad[i] -= o->grad[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_op_output<T>(a->shape, {a, b});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a, b]() {
      if (a->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * b->data[i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < o->numel(); ++i) b->grad[i] += o->grad[i] * a->data[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& a, T s) {
  auto out = detail::make_op_output<T>(a->shape, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * s;
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a, s]() {
      for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i] * s;
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> add_scalar(const TensorPtr<T>& a, T s) {
  auto out = detail::make_op_output<T>(a->shape, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + s;
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a]() {
      for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> sum(const TensorPtr<T>& a) {
  auto out = detail::make_op_output<T>({1}, {a});
  T s = T(0);
  for (std::size_t i = 0; i < a->numel(); ++i) s += a->data[i];
  out->data[0] = s;
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a]() {
      const T g = o->grad[0];
      for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += g;
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> mean(const TensorPtr<T>& a) {
  auto out = sum(a);
  return scale(out, T(1) / static_cast<T>(a->numel()));
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// log(1 + exp(x)) without overflow.
template <typename T>
T softplus(T x) {
  const T ax = x < T(0) ? -x : x;
  const T m = x > T(0) ? x : T(0);
  return m + std::log1p(std::exp(-ax));
}

template <typename T>
TensorPtr<T> sigmoid(const TensorPtr<T>& a) {
  auto out = detail::make_op_output<T>(a->shape, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = stable_sigmoid(a->data[i]);
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a]() {
      for (std::size_t i = 0; i < o->numel(); ++i) {
        const T y = o->data[i];
        a->grad[i] += o->grad[i] * y * (T(1) - y);
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> relu(const TensorPtr<T>& a) {
  auto out = detail::make_op_output<T>(a->shape, {a});
  for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] > T(0) ? a->data[i] : T(0);
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a]() {
      for (std::size_t i = 0; i < o->numel(); ++i)
        if (a->data[i] > T(0)) a->grad[i] += o->grad[i];
    };
  }
  return out;
}

// ---- structural ops ----

template <typename T>
TensorPtr<T> concat(const std::vector<TensorPtr<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int rank = xs[0]->rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  std::vector<int> out_shape = xs[0]->shape;
  for (std::size_t t = 1; t < xs.size(); ++t) {
    if (xs[t]->rank() != rank)
      throw ShapeError("concat: rank mismatch between input 0 and input " + std::to_string(t));
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (xs[t]->dim(d) != xs[0]->dim(d))
        throw ShapeError("concat: input " + std::to_string(t) + " differs from input 0 on axis " +
                         std::to_string(d) + " (" + std::to_string(xs[t]->dim(d)) + " vs " +
                         std::to_string(xs[0]->dim(d)) + ")");
    }
    out_shape[static_cast<std::size_t>(axis)] += xs[t]->dim(axis);
  }

  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(xs[0]->dim(d));
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(xs[0]->dim(d));

  bool req = false;
  if (grad_enabled())
    for (const auto& x : xs) req = req || x->requires_grad;
  auto out = TensorT<T>::create(out_shape, req);
  if (req) out->parents.assign(xs.begin(), xs.end());

  const std::size_t out_axis = static_cast<std::size_t>(out->dim(axis));
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t ax = static_cast<std::size_t>(x->dim(axis));
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x->data.data() + o * ax * inner, ax * inner,
                  out->data.data() + (o * out_axis + offset) * inner);
    offset += ax;
  }
  if (req) {
    TensorT<T>* o = out.get();
    auto inputs = xs;
    out->backward_fn = [o, inputs, outer, inner, out_axis, axis]() {
      std::size_t offset = 0;
      for (const auto& x : inputs) {
        const std::size_t ax = static_cast<std::size_t>(x->dim(axis));
        if (x->requires_grad)
          for (std::size_t ou = 0; ou < outer; ++ou) {
            const T* g = o->grad.data() + (ou * out_axis + offset) * inner;
            T* xg = x->grad.data() + ou * ax * inner;
            for (std::size_t i = 0; i < ax * inner; ++i) xg[i] += g[i];
          }
        offset += ax;
      }
    };
  }
  return out;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& a, std::vector<int> new_shape) {
  std::size_t n = 1;
  for (int d : new_shape) n *= static_cast<std::size_t>(d);
  if (n != a->numel())
    throw ShapeError("reshape: cannot view " + detail::shape_str(a->shape) + " as " +
                     detail::shape_str(new_shape));
  auto out = detail::make_op_output<T>(std::move(new_shape), {a});
  out->data = a->data;
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, a]() {
      for (std::size_t i = 0; i < o->numel(); ++i) a->grad[i] += o->grad[i];
    };
  }
  return out;
}

/// out[:, j] = x[:, perm[j]] for a rank-2 input.
template <typename T>
TensorPtr<T> permute_columns(const TensorPtr<T>& x, const std::vector<int>& perm) {
  if (x->rank() != 2) throw ShapeError("permute_columns: rank-2 input required, got " + detail::shape_str(x->shape));
  const int n = x->dim(0), c = x->dim(1);
  if (static_cast<int>(perm.size()) != c)
    throw ShapeError("permute_columns: permutation length " + std::to_string(perm.size()) +
                     " does not match axis 1 size " + std::to_string(c));
  std::vector<char> seen(static_cast<std::size_t>(c), 0);
  for (int p : perm) {
    if (p < 0 || p >= c || seen[static_cast<std::size_t>(p)])
      throw ShapeError("permute_columns: not a permutation of axis 1");
    seen[static_cast<std::size_t>(p)] = 1;
  }
  auto out = detail::make_op_output<T>({n, c}, {x});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out->data[static_cast<std::size_t>(i) * c + j] = x->data[static_cast<std::size_t>(i) * c + perm[j]];
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    auto p = perm;
    out->backward_fn = [o, x, p, n, c]() {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
          x->grad[static_cast<std::size_t>(i) * c + p[j]] += o->grad[static_cast<std::size_t>(i) * c + j];
    };
  }
  return out;
}

/// out[:, k, :, :] = x[:, idx[k], :, :] for a rank-4 input.
template <typename T>
TensorPtr<T> select_channels(const TensorPtr<T>& x, const std::vector<int>& idx) {
  if (x->rank() != 4) throw ShapeError("select_channels: rank-4 input required, got " + detail::shape_str(x->shape));
  const int n = x->dim(0), c = x->dim(1);
  const std::size_t plane = static_cast<std::size_t>(x->dim(2)) * x->dim(3);
  for (int i : idx)
    if (i < 0 || i >= c) throw ShapeError("select_channels: channel index " + std::to_string(i) + " out of range");
  const int k = static_cast<int>(idx.size());
  auto out = detail::make_op_output<T>({n, k, x->dim(2), x->dim(3)}, {x});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      std::copy_n(x->data.data() + (static_cast<std::size_t>(i) * c + idx[j]) * plane, plane,
                  out->data.data() + (static_cast<std::size_t>(i) * k + j) * plane);
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    auto id = idx;
    out->backward_fn = [o, x, id, n, c, k, plane]() {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
          const T* g = o->grad.data() + (static_cast<std::size_t>(i) * k + j) * plane;
          T* xg = x->grad.data() + (static_cast<std::size_t>(i) * c + id[j]) * plane;
          for (std::size_t s = 0; s < plane; ++s) xg[s] += g[s];
        }
    };
  }
  return out;
}

// ---- convolution ----

namespace detail {

template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
  const int S = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * S;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          T* dst = row + static_cast<std::size_t>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst, Wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* img) {
  const int S = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * S;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          const T* src = row + static_cast<std::size_t>(oh) * Wo;
          T* dst = img + (static_cast<std::size_t>(c) * H + ih) * W;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip) of an NCHW input with an
/// (out_channels, in_channels, k, k) kernel. No bias term.
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& input, const TensorPtr<T>& kernel, int stride = 1, int padding = 0) {
  if (input->rank() != 4)
    throw ShapeError("conv2d: input must be rank 4 (N,C,H,W), got " + detail::shape_str(input->shape));
  if (kernel->rank() != 4)
    throw ShapeError("conv2d: kernel must be rank 4 (O,C,k,k), got " + detail::shape_str(kernel->shape));
  if (kernel->dim(2) != kernel->dim(3))
    throw ShapeError("conv2d: kernel axes 2 and 3 must match, got " + detail::shape_str(kernel->shape));
  if (input->dim(1) != kernel->dim(1))
    throw ShapeError("conv2d: input channels (axis 1 = " + std::to_string(input->dim(1)) +
                     ") do not match kernel channels (axis 1 = " + std::to_string(kernel->dim(1)) + ")");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");

  const int N = input->dim(0), C = input->dim(1), H = input->dim(2), W = input->dim(3);
  const int O = kernel->dim(0), k = kernel->dim(2);
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw ShapeError("conv2d: kernel size " + std::to_string(k) + " exceeds padded input " +
                     detail::shape_str(input->shape));
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (W + 2 * padding - k) / stride + 1;
  const int K = C * k * k;
  const int S = Ho * Wo;

  auto out = detail::make_op_output<T>({N, O, Ho, Wo}, {input, kernel});
  // im2col writes every element of its column block, so the buffer is left
  // uninitialized rather than value-constructed.
  std::shared_ptr<T[]> cols(new T[static_cast<std::size_t>(N) * K * S]);
  for (int n = 0; n < N; ++n) {
    T* col = cols.get() + static_cast<std::size_t>(n) * K * S;
    detail::im2col(input->data.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, k, stride, padding,
                   Ho, Wo, col);
    detail::gemm_nn(out->data.data() + static_cast<std::size_t>(n) * O * S, kernel->data.data(), col, O, S, K);
  }

  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, input, kernel, cols, N, C, H, W, O, k, K, S, stride, padding]() {
      const int Ho = (H + 2 * padding - k) / stride + 1;
      const int Wo = (W + 2 * padding - k) / stride + 1;
      std::vector<T> gcol;
      if (input->requires_grad) gcol.resize(static_cast<std::size_t>(K) * S);
      for (int n = 0; n < N; ++n) {
        const T* gout = o->grad.data() + static_cast<std::size_t>(n) * O * S;
        const T* col = cols.get() + static_cast<std::size_t>(n) * K * S;
        if (kernel->requires_grad) detail::gemm_nt(kernel->grad.data(), gout, col, O, K, S);
        if (input->requires_grad) {
          detail::gemm_tn_set(gcol.data(), kernel->data.data(), gout, K, S, O);
          detail::col2im_add(gcol.data(), C, H, W, k, stride, padding, Ho, Wo,
                             input->grad.data() + static_cast<std::size_t>(n) * C * H * W);
        }
      }
    };
  } else {
    cols.reset();
  }
  return out;
}

// ---- batch normalization ----

enum class BnMode { Train, Eval };
enum class BnVariant { Spatial, Vector };

/// Per-channel affine normalization state. `Spatial` computes statistics over
/// (N,H,W) slices of a rank-4 input; `Vector` over the N rows of a rank-2 input.
template <typename T>
struct BatchNormState {
  TensorPtr<T> gamma;
  TensorPtr<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.1);
  BnMode mode = BnMode::Train;
  BnVariant variant = BnVariant::Spatial;
  bool affine = true;

  static BatchNormState make(int channels, BnVariant variant) {
    BatchNormState st;
    st.gamma = TensorT<T>::full({channels}, T(1), true);
    st.beta = TensorT<T>::full({channels}, T(0), true);
    st.running_mean.assign(static_cast<std::size_t>(channels), T(0));
    st.running_var.assign(static_cast<std::size_t>(channels), T(1));
    st.variant = variant;
    return st;
  }

  int channels() const { return gamma ? gamma->dim(0) : 0; }

  BatchNormState clone() const {
    BatchNormState st = *this;
    st.gamma = gamma->clone(true);
    st.beta = beta->clone(true);
    return st;
  }
};

template <typename T>
TensorPtr<T> batchnorm(const TensorPtr<T>& x, BatchNormState<T>& st) {
  int N, C, S;
  if (st.variant == BnVariant::Spatial) {
    if (x->rank() != 4)
      throw ShapeError("batchnorm(spatial): rank-4 input required, got " + detail::shape_str(x->shape));
    N = x->dim(0);
    C = x->dim(1);
    S = x->dim(2) * x->dim(3);
  } else {
    if (x->rank() != 2)
      throw ShapeError("batchnorm(vector): rank-2 input required, got " + detail::shape_str(x->shape));
    N = x->dim(0);
    C = x->dim(1);
    S = 1;
  }
  if (C != st.channels())
    throw ShapeError("batchnorm: input channels (axis 1 = " + std::to_string(C) + ") do not match state channels (" +
                     std::to_string(st.channels()) + ")");
  if (st.eps <= T(0)) throw NumericError("batchnorm: eps must be positive");

  const std::size_t M = static_cast<std::size_t>(N) * S;
  const bool train = st.mode == BnMode::Train;
  if (train && M < 2)
    throw NumericError("batchnorm: degenerate batch (" + std::to_string(M) +
                       " value(s) per channel gives zero variance in train mode)");

  std::vector<T> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  auto xhat = std::make_shared<std::vector<T>>(x->numel());

  auto channel_value = [&](int n, int c, int s) -> T {
    return x->data[(static_cast<std::size_t>(n) * C + c) * S + s];
  };

  if (train) {
    for (int c = 0; c < C; ++c) {
      T m = T(0);
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < S; ++s) m += channel_value(n, c, s);
      m /= static_cast<T>(M);
      T v = T(0);
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < S; ++s) {
          const T d = channel_value(n, c, s) - m;
          v += d * d;
        }
      v /= static_cast<T>(M);
      mean[static_cast<std::size_t>(c)] = m;
      inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(v + st.eps);
      // Running stats take the unbiased variance estimate.
      const T v_unbiased = v * static_cast<T>(M) / static_cast<T>(M - 1);
      st.running_mean[static_cast<std::size_t>(c)] =
          (T(1) - st.momentum) * st.running_mean[static_cast<std::size_t>(c)] + st.momentum * m;
      st.running_var[static_cast<std::size_t>(c)] =
          (T(1) - st.momentum) * st.running_var[static_cast<std::size_t>(c)] + st.momentum * v_unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      if (st.running_var[static_cast<std::size_t>(c)] <= T(0))
        throw NumericError("batchnorm: running_var must be strictly positive (channel " + std::to_string(c) + ")");
      mean[static_cast<std::size_t>(c)] = st.running_mean[static_cast<std::size_t>(c)];
      inv_std[static_cast<std::size_t>(c)] = T(1) / std::sqrt(st.running_var[static_cast<std::size_t>(c)] + st.eps);
    }
  }

  auto out = st.affine ? detail::make_op_output<T>(x->shape, {x, st.gamma, st.beta})
                       : detail::make_op_output<T>(x->shape, {x});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
      const T m = mean[static_cast<std::size_t>(c)];
      const T is = inv_std[static_cast<std::size_t>(c)];
      const T g = st.affine ? st.gamma->data[static_cast<std::size_t>(c)] : T(1);
      const T b = st.affine ? st.beta->data[static_cast<std::size_t>(c)] : T(0);
      for (int s = 0; s < S; ++s) {
        const T xh = (x->data[base + s] - m) * is;
        (*xhat)[base + s] = xh;
        out->data[base + s] = g * xh + b;
      }
    }

  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    auto gamma = st.gamma;
    auto beta = st.beta;
    const bool affine = st.affine;
    out->backward_fn = [o, x, gamma, beta, affine, xhat, inv_std, N, C, S, train]() {
      const std::size_t M = static_cast<std::size_t>(N) * S;
      for (int c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gx = T(0);
        for (int n = 0; n < N; ++n) {
          const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
          for (int s = 0; s < S; ++s) {
            sum_g += o->grad[base + s];
            sum_gx += o->grad[base + s] * (*xhat)[base + s];
          }
        }
        if (affine) {
          if (gamma->requires_grad) gamma->grad[static_cast<std::size_t>(c)] += sum_gx;
          if (beta->requires_grad) beta->grad[static_cast<std::size_t>(c)] += sum_g;
        }
        if (!x->requires_grad) continue;
        const T g = affine ? gamma->data[static_cast<std::size_t>(c)] : T(1);
        const T is = inv_std[static_cast<std::size_t>(c)];
        if (train) {
          const T mean_g = sum_g / static_cast<T>(M);
          const T mean_gx = sum_gx / static_cast<T>(M);
          for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
            for (int s = 0; s < S; ++s)
              x->grad[base + s] += g * is * (o->grad[base + s] - mean_g - (*xhat)[base + s] * mean_gx);
          }
        } else {
          for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * S;
            for (int s = 0; s < S; ++s) x->grad[base + s] += g * is * o->grad[base + s];
          }
        }
      }
    };
  }
  return out;
}

// ---- pooling ----

/// Global average pooling, NCHW -> NC.
template <typename T>
TensorPtr<T> gap(const TensorPtr<T>& x) {
  if (x->rank() != 4) throw ShapeError("gap: rank-4 input required, got " + detail::shape_str(x->shape));
  const int N = x->dim(0), C = x->dim(1), S = x->dim(2) * x->dim(3);
  auto out = detail::make_op_output<T>({N, C}, {x});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->data.data() + (static_cast<std::size_t>(n) * C + c) * S;
      T s = T(0);
      for (int i = 0; i < S; ++i) s += p[i];
      out->data[static_cast<std::size_t>(n) * C + c] = s / static_cast<T>(S);
    }
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, x, N, C, S]() {
      const T inv = T(1) / static_cast<T>(S);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T g = o->grad[static_cast<std::size_t>(n) * C + c] * inv;
          T* xg = x->grad.data() + (static_cast<std::size_t>(n) * C + c) * S;
          for (int i = 0; i < S; ++i) xg[i] += g;
        }
    };
  }
  return out;
}

template <typename T>
struct GmpResult {
  TensorPtr<T> values;       // (N, C)
  std::vector<int> argmax;   // flat spatial index per (n, c), row-major
};

/// Global max pooling, NCHW -> NC. Backward routes each incoming gradient to
/// the recorded argmax position only. Ties break to the lowest flat index.
template <typename T>
GmpResult<T> gmp(const TensorPtr<T>& x) {
  if (x->rank() != 4) throw ShapeError("gmp: rank-4 input required, got " + detail::shape_str(x->shape));
  const int N = x->dim(0), C = x->dim(1), S = x->dim(2) * x->dim(3);
  auto out = detail::make_op_output<T>({N, C}, {x});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(N) * C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* p = x->data.data() + (static_cast<std::size_t>(n) * C + c) * S;
      int best = 0;
      for (int i = 1; i < S; ++i)
        if (p[i] > p[best]) best = i;
      out->data[static_cast<std::size_t>(n) * C + c] = p[best];
      (*argmax)[static_cast<std::size_t>(n) * C + c] = best;
    }
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, x, argmax, N, C, S]() {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const std::size_t nc = static_cast<std::size_t>(n) * C + c;
          x->grad[nc * S + (*argmax)[nc]] += o->grad[nc];
        }
    };
  }
  return {out, std::vector<int>(argmax->begin(), argmax->end())};
}

// ---- linear ----

/// out(N x J) = x(N x C) * W(J x C)^T
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& weight) {
  if (x->rank() != 2) throw ShapeError("linear: input must be rank 2, got " + detail::shape_str(x->shape));
  if (weight->rank() != 2) throw ShapeError("linear: weight must be rank 2, got " + detail::shape_str(weight->shape));
  if (x->dim(1) != weight->dim(1))
    throw ShapeError("linear: input features (axis 1 = " + std::to_string(x->dim(1)) +
                     ") do not match weight features (axis 1 = " + std::to_string(weight->dim(1)) + ")");
  const int N = x->dim(0), C = x->dim(1), J = weight->dim(0);
  auto out = detail::make_op_output<T>({N, J}, {x, weight});
  detail::gemm_nt(out->data.data(), x->data.data(), weight->data.data(), N, J, C);
  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    out->backward_fn = [o, x, weight, N, C, J]() {
      if (weight->requires_grad) detail::gemm_tn(weight->grad.data(), o->grad.data(), x->data.data(), J, C, N);
      if (x->requires_grad) detail::gemm_nn(x->grad.data(), o->grad.data(), weight->data.data(), N, C, J);
    };
  }
  return out;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace dtm
