#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "magicvid/gemm.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// Reverse-mode autodiff over dense tensors. Each op computes its value
// eagerly and records a closure that scatters the output gradient into its
// parents. Graphs are built per forward pass and freed when the last Var
// handle goes out of scope. Backward visits nodes in reverse topological
// order; the order is fully determined by graph construction, so gradient
// accumulation is deterministic.

template <typename T>
struct ADNode {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<ADNode>> parents;
  std::function<void(ADNode&)> backward_fn;

  Tensor<T>& ensure_grad() {
    if (grad.numel() == 0) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<ADNode<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = true) {
    auto n = std::make_shared<ADNode<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::shared_ptr<ADNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<ADNode<T>> node_;
};

namespace detail {

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(ADNode<T>&)> backward) {
  auto n = std::make_shared<ADNode<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + Tensor<T>::shape_str(a.shape()) +
                                " vs " + Tensor<T>::shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn](ADNode<T>& n) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn](ADNode<T>& n) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn](ADNode<T>& n) {
    if (an->requires_grad) {
      Tensor<T>& g = an->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * an->value[i];
    }
  });
}

// alpha * x + beta, constants.
template <typename T>
Var<T> affine_const(const Var<T>& x, T alpha, T beta) {
  Tensor<T> out = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * out[i] + beta;
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, alpha](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += alpha * n.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T alpha) {
  return affine_const(x, alpha, T(0));
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) {
    T s = T(1) / (T(1) + std::exp(-out[i]));
    out[i] = out[i] * s;
  }
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      T v = xn->value[i];
      T s = T(1) / (T(1) + std::exp(-v));
      g[i] += n.grad[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
  auto xn = x.node();
  auto bw = [xn, val = out](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * val[i] * (T(1) - val[i]);
  };
  return detail::make_op<T>(std::move(out), {x}, std::move(bw));
}

template <typename T>
Var<T> vexp(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  auto xn = x.node();
  auto bw = [xn, val = out](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * val[i];
  };
  return detail::make_op<T>(std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * shape[i + 1];
  }
  return s;
}

// For each output linear index of the permuted tensor, the source index.
inline void permute_index_map(const std::vector<int>& in_shape, const std::vector<int>& axes,
                              std::vector<int64_t>& map) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<int> out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  auto in_strides = row_major_strides(in_shape);
  int64_t n = 1;
  for (int d : out_shape) n *= d;
  map.resize(static_cast<size_t>(n));
  std::vector<int> idx(r, 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) src += static_cast<int64_t>(idx[i]) * in_strides[axes[i]];
    map[static_cast<size_t>(o)] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> axes) {
  const auto& in_shape = x.value().shape();
  if (axes.size() != in_shape.size()) throw std::invalid_argument("permute: axes rank mismatch");
  std::vector<int> out_shape(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = in_shape[axes[i]];
  auto map = std::make_shared<std::vector<int64_t>>();
  detail::permute_index_map(in_shape, axes, *map);
  Tensor<T> out(out_shape);
  const Tensor<T>& v = x.value();
  for (int64_t o = 0; o < out.numel(); ++o) out[o] = v[(*map)[static_cast<size_t>(o)]];
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, map](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t o = 0; o < n.grad.numel(); ++o) g[(*map)[static_cast<size_t>(o)]] += n.grad[o];
  });
}

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, int axis) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != sb.size()) throw std::invalid_argument("concat: rank mismatch");
  for (size_t i = 0; i < sa.size(); ++i) {
    if (static_cast<int>(i) != axis && sa[i] != sb[i]) {
      throw std::invalid_argument("concat: non-concat dims must match");
    }
  }
  std::vector<int> out_shape = sa;
  out_shape[axis] += sb[axis];
  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= sa[i];
  int64_t inner = 1;
  for (size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const int64_t wa = sa[axis] * inner, wb = sb[axis] * inner;
  Tensor<T> out(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(a.value().data() + o * wa, a.value().data() + (o + 1) * wa, out.data() + o * (wa + wb));
    std::copy(b.value().data() + o * wb, b.value().data() + (o + 1) * wb,
              out.data() + o * (wa + wb) + wa);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn, outer, wa, wb](ADNode<T>& n) {
    for (int64_t o = 0; o < outer; ++o) {
      const T* gsrc = n.grad.data() + o * (wa + wb);
      if (an->requires_grad) {
        T* ga = an->ensure_grad().data() + o * wa;
        for (int64_t i = 0; i < wa; ++i) ga[i] += gsrc[i];
      }
      if (bn->requires_grad) {
        T* gb = bn->ensure_grad().data() + o * wb;
        for (int64_t i = 0; i < wb; ++i) gb[i] += gsrc[wa + i];
      }
    }
  });
}

// rows [start, start+len) along axis 0
template <typename T>
Var<T> slice_axis0(const Var<T>& x, int start, int len) {
  const auto& s = x.value().shape();
  if (start < 0 || len < 0 || start + len > s[0]) throw std::invalid_argument("slice_axis0: out of range");
  int64_t inner = x.value().numel() / s[0];
  std::vector<int> out_shape = s;
  out_shape[0] = len;
  Tensor<T> out(out_shape);
  std::copy(x.value().data() + start * inner, x.value().data() + (start + len) * inner, out.data());
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, start, inner](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    T* dst = g.data() + start * inner;
    for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += n.grad[i];
  });
}

// x repeated `times` along a new leading block: out batch i maps to x batch i % B.
template <typename T>
Var<T> tile_axis0(const Var<T>& x, int times) {
  const auto& s = x.value().shape();
  std::vector<int> out_shape = s;
  out_shape[0] *= times;
  Tensor<T> out(out_shape);
  int64_t block = x.value().numel();
  for (int t = 0; t < times; ++t) {
    std::copy(x.value().data(), x.value().data() + block, out.data() + t * block);
  }
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, times, block](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int t = 0; t < times; ++t) {
      const T* src = n.grad.data() + t * block;
      for (int64_t i = 0; i < block; ++i) g[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[K,N] += A^T B with A [M,K], B [M,N]
template <typename T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c) {
  auto body = [&](int64_t k0, int64_t k1) {
    for (int64_t kk = k0; kk < k1; ++kk) {
      T* crow = c + kk * n;
      for (int64_t i = 0; i < m; ++i) {
        T av = a[i * k + kk];
        if (av == T(0)) continue;
        const T* brow = b + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  if (m * n * k > (1 << 16)) {
    parallel_for(k, body);
  } else {
    body(0, k);
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + Tensor<T>::shape_str(sa) + " x " +
                                Tensor<T>::shape_str(sb));
  }
  const int64_t m = sa[0], k = sa[1], n = sb[1];
  Tensor<T> out({static_cast<int>(m), static_cast<int>(n)});
  gemm_nn(m, n, k, a.value().data(), k, b.value().data(), n, out.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn, m, n, k](ADNode<T>& node) {
    if (an->requires_grad) {
      gemm_nt(m, k, n, node.grad.data(), n, bn->value.data(), n, an->ensure_grad().data(), k);
    }
    if (bn->requires_grad) {
      detail::gemm_tn(m, n, k, an->value.data(), node.grad.data(), bn->ensure_grad().data());
    }
  });
}

// Batched A[B,M,K] x B[Bb,K,N] -> [B,M,N]; Bb must divide B, batch i uses i % Bb.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[2] != sb[1] || sa[0] % sb[0] != 0) {
    throw std::invalid_argument("bmm: incompatible shapes");
  }
  const int64_t bs = sa[0], m = sa[1], k = sa[2], n = sb[2], bb = sb[0];
  Tensor<T> out({static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)});
  for (int64_t i = 0; i < bs; ++i) {
    gemm_nn(m, n, k, a.value().data() + i * m * k, k, b.value().data() + (i % bb) * k * n, n,
            out.data() + i * m * n, n);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn, bs, m, n, k, bb](ADNode<T>& node) {
    for (int64_t i = 0; i < bs; ++i) {
      const T* g = node.grad.data() + i * m * n;
      if (an->requires_grad) {
        gemm_nt(m, k, n, g, n, bn->value.data() + (i % bb) * k * n, n,
                an->ensure_grad().data() + i * m * k, k);
      }
      if (bn->requires_grad) {
        detail::gemm_tn(m, n, k, an->value.data() + i * m * k, g,
                        bn->ensure_grad().data() + (i % bb) * k * n);
      }
    }
  });
}

// Batched A[B,M,K] x B[Bb,N,K]^T -> [B,M,N]
template <typename T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[2] != sb[2] || sa[0] % sb[0] != 0) {
    throw std::invalid_argument("bmm_nt: incompatible shapes");
  }
  const int64_t bs = sa[0], m = sa[1], k = sa[2], n = sb[1], bb = sb[0];
  Tensor<T> out({static_cast<int>(bs), static_cast<int>(m), static_cast<int>(n)});
  for (int64_t i = 0; i < bs; ++i) {
    gemm_nt(m, n, k, a.value().data() + i * m * k, k, b.value().data() + (i % bb) * n * k, k,
            out.data() + i * m * n, n);
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {a, b}, [an, bn, bs, m, n, k, bb](ADNode<T>& node) {
    for (int64_t i = 0; i < bs; ++i) {
      const T* g = node.grad.data() + i * m * n;
      if (an->requires_grad) {
        gemm_nn(m, k, n, g, n, bn->value.data() + (i % bb) * n * k, k,
                an->ensure_grad().data() + i * m * k, k);
      }
      if (bn->requires_grad) {
        detail::gemm_tn(m, k, n, g, an->value.data() + i * m * k,
                        bn->ensure_grad().data() + (i % bb) * n * k);
      }
    }
  });
}

template <typename T>
Var<T> add_rowbias(const Var<T>& x, const Var<T>& b) {
  const auto& sx = x.value().shape();
  const auto& sb = b.value().shape();
  if (sb.size() != 1 || sx.back() != sb[0]) throw std::invalid_argument("add_rowbias: width mismatch");
  const int64_t d = sb[0], rows = x.value().numel() / d;
  Tensor<T> out = x.value();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) row[j] += b.value()[j];
  }
  auto xn = x.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {x, b}, [xn, bn, rows, d](ADNode<T>& n) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      Tensor<T>& g = bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* grow = n.grad.data() + r * d;
        for (int64_t j = 0; j < d; ++j) g[j] += grow[j];
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_rowbias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// normalization & softmax
// ---------------------------------------------------------------------------

// Normalizes the last dim to zero mean / unit variance; no learned affine.
template <typename T>
Var<T> layernorm_lastdim(const Var<T>& x, T eps = T(1e-5)) {
  const auto& s = x.value().shape();
  const int64_t d = s.back(), rows = x.value().numel() / d;
  Tensor<T> out(s);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = x.value().data() + r * d;
    T mean = T(0);
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    T* orow = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) orow[j] = (row[j] - mean) * is;
  }
  auto xn = x.node();
  auto bw = [xn, inv_std, rows, d, xhat = out](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* grow = n.grad.data() + r * d;
      const T* hrow = xhat.data() + r * d;
      T* dst = g.data() + r * d;
      T mg = T(0), mgh = T(0);
      for (int64_t j = 0; j < d; ++j) {
        mg += grow[j];
        mgh += grow[j] * hrow[j];
      }
      mg /= static_cast<T>(d);
      mgh /= static_cast<T>(d);
      T is = (*inv_std)[static_cast<size_t>(r)];
      for (int64_t j = 0; j < d; ++j) dst[j] += (grow[j] - mg - hrow[j] * mgh) * is;
    }
  };
  return detail::make_op<T>(std::move(out), {x}, std::move(bw));
}

// Softmax over the last dim of [B,M,N]; `mask` (optional, [M,N]) is added to
// the logits of every batch slice. -inf entries give exactly zero weight.
template <typename T>
Var<T> softmax_lastdim(const Var<T>& x, const Tensor<T>* mask = nullptr) {
  const auto& s = x.value().shape();
  const int64_t ncol = s.back(), rows = x.value().numel() / ncol;
  int64_t mask_rows = 1;
  if (mask) {
    if (mask->rank() != 2 || mask->dim(1) != ncol) throw std::invalid_argument("softmax: bad mask shape");
    mask_rows = mask->dim(0);
    if ((rows % mask_rows) != 0) throw std::invalid_argument("softmax: mask rows must divide");
  }
  Tensor<T> out(s);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = x.value().data() + r * ncol;
    const T* mrow = mask ? mask->data() + (r % mask_rows) * ncol : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < ncol; ++j) {
      T v = row[j] + (mrow ? mrow[j] : T(0));
      if (v > mx) mx = v;
    }
    T sum = T(0);
    T* orow = out.data() + r * ncol;
    for (int64_t j = 0; j < ncol; ++j) {
      T v = row[j] + (mrow ? mrow[j] : T(0));
      T e = std::exp(v - mx);
      orow[j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < ncol; ++j) orow[j] *= inv;
  }
  auto xn = x.node();
  auto bw = [xn, rows, ncol, y = out](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* grow = n.grad.data() + r * ncol;
      const T* yrow = y.data() + r * ncol;
      T* dst = g.data() + r * ncol;
      T dot = T(0);
      for (int64_t j = 0; j < ncol; ++j) dot += grow[j] * yrow[j];
      for (int64_t j = 0; j < ncol; ++j) dst[j] += yrow[j] * (grow[j] - dot);
    }
  };
  return detail::make_op<T>(std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// conv / pooling (NCHW, stride 1, odd kernel, zero pad to keep spatial size)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, Tensor<T>& col) {
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ph = kh / 2, pw = kw / 2;
  const int64_t cols = static_cast<int64_t>(b) * h * w;
  // col rows indexed by (c, ky, kx)
  parallel_for(static_cast<int64_t>(c) * kh * kw, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const int kx = static_cast<int>(r % kw);
      const int ky = static_cast<int>((r / kw) % kh);
      const int ci = static_cast<int>(r / (kw * kh));
      T* dst = col.data() + r * cols;
      for (int bi = 0; bi < b; ++bi) {
        const T* src = x.data() + (static_cast<int64_t>(bi) * c + ci) * h * w;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - ph;
          T* drow = dst + (static_cast<int64_t>(bi) * h + y) * w;
          if (sy < 0 || sy >= h) {
            for (int xi = 0; xi < w; ++xi) drow[xi] = T(0);
            continue;
          }
          const T* srow = src + static_cast<int64_t>(sy) * w;
          for (int xi = 0; xi < w; ++xi) {
            const int sx = xi + kx - pw;
            drow[xi] = (sx >= 0 && sx < w) ? srow[sx] : T(0);
          }
        }
      }
    }
  });
}

template <typename T>
void col2im_accum(const Tensor<T>& col, int b, int c, int h, int w, int kh, int kw, Tensor<T>& gx) {
  const int ph = kh / 2, pw = kw / 2;
  const int64_t cols = static_cast<int64_t>(b) * h * w;
  // Each channel's gradient rows are disjoint across (c); accumulate serially
  // over (ky,kx) within a channel for a fixed order.
  parallel_for(c, [&](int64_t c0, int64_t c1) {
    for (int64_t ci = c0; ci < c1; ++ci) {
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const int64_t r = (ci * kh + ky) * kw + kx;
          const T* src = col.data() + r * cols;
          for (int bi = 0; bi < b; ++bi) {
            T* dst = gx.data() + (static_cast<int64_t>(bi) * c + ci) * h * w;
            for (int y = 0; y < h; ++y) {
              const int sy = y + ky - ph;
              if (sy < 0 || sy >= h) continue;
              const T* srow = src + (static_cast<int64_t>(bi) * h + y) * w;
              T* drow = dst + static_cast<int64_t>(sy) * w;
              for (int xi = 0; xi < w; ++xi) {
                const int sx = xi + kx - pw;
                if (sx >= 0 && sx < w) drow[sx] += srow[xi];
              }
            }
          }
        }
      }
    }
  });
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const auto& sx = x.value().shape();
  const auto& sw = w.value().shape();
  if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) {
    throw std::invalid_argument("conv2d: incompatible shapes " + Tensor<T>::shape_str(sx) + " w " +
                                Tensor<T>::shape_str(sw));
  }
  if (sw[2] % 2 == 0 || sw[2] != sw[3]) throw std::invalid_argument("conv2d: kernel must be odd square");
  const int b = sx[0], c = sx[1], h = sx[2], wd = sx[3];
  const int oc = sw[0], k = sw[2];
  const int64_t ckk = static_cast<int64_t>(c) * k * k;
  const int64_t cols = static_cast<int64_t>(b) * h * wd;

  Tensor<T> col({static_cast<int>(ckk), static_cast<int>(cols)});
  detail::im2col(x.value(), k, k, col);
  Tensor<T> outp({oc, static_cast<int>(cols)});
  gemm_nn(oc, cols, ckk, w.value().data(), ckk, col.data(), cols, outp.data(), cols);

  Tensor<T> out({b, oc, h, wd});
  const int64_t hw = static_cast<int64_t>(h) * wd;
  for (int o = 0; o < oc; ++o) {
    const T* src = outp.data() + static_cast<int64_t>(o) * cols;
    const T bv = bias.value()[o];
    for (int bi = 0; bi < b; ++bi) {
      T* dst = out.data() + (static_cast<int64_t>(bi) * oc + o) * hw;
      const T* s2 = src + static_cast<int64_t>(bi) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] = s2[i] + bv;
    }
  }

  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return detail::make_op<T>(std::move(out), {x, w, bias},
                            [xn, wn, bn, b, c, h, wd, oc, k, ckk, cols, hw](ADNode<T>& n) {
    // regroup grad to [oc, b*hw]
    Tensor<T> gp({oc, static_cast<int>(cols)});
    for (int bi = 0; bi < b; ++bi) {
      for (int o = 0; o < oc; ++o) {
        const T* src = n.grad.data() + (static_cast<int64_t>(bi) * oc + o) * hw;
        T* dst = gp.data() + static_cast<int64_t>(o) * cols + static_cast<int64_t>(bi) * hw;
        std::copy(src, src + hw, dst);
      }
    }
    if (bn->requires_grad) {
      Tensor<T>& gb = bn->ensure_grad();
      for (int o = 0; o < oc; ++o) {
        const T* row = gp.data() + static_cast<int64_t>(o) * cols;
        T acc[8] = {};
        int64_t i = 0;
        for (; i + 8 <= cols; i += 8) {
          for (int l = 0; l < 8; ++l) acc[l] += row[i + l];
        }
        T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for (; i < cols; ++i) s += row[i];
        gb[o] += s;
      }
    }
    if (wn->requires_grad || xn->requires_grad) {
      Tensor<T> col({static_cast<int>(ckk), static_cast<int>(cols)});
      detail::im2col(xn->value, k, k, col);
      if (wn->requires_grad) {
        gemm_nt(oc, ckk, cols, gp.data(), cols, col.data(), cols, wn->ensure_grad().data(), ckk);
      }
      if (xn->requires_grad) {
        Tensor<T> gcol({static_cast<int>(ckk), static_cast<int>(cols)});
        detail::gemm_tn(oc, cols, ckk, wn->value.data(), gp.data(), gcol.data());
        detail::col2im_accum(gcol, b, c, h, wd, k, k, xn->ensure_grad());
      }
    }
  });
}

template <typename T>
Var<T> avgpool2(const Var<T>& x) {
  const auto& s = x.value().shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw std::invalid_argument("avgpool2: need even spatial dims");
  const int b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<T> out({b, c, h / 2, w / 2});
  const int oh = h / 2, ow = w / 2;
  for (int64_t bc = 0; bc < static_cast<int64_t>(b) * c; ++bc) {
    const T* src = x.value().data() + bc * h * w;
    T* dst = out.data() + bc * oh * ow;
    for (int y = 0; y < oh; ++y) {
      for (int xi = 0; xi < ow; ++xi) {
        dst[y * ow + xi] = (src[(2 * y) * w + 2 * xi] + src[(2 * y) * w + 2 * xi + 1] +
                            src[(2 * y + 1) * w + 2 * xi] + src[(2 * y + 1) * w + 2 * xi + 1]) *
                           T(0.25);
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, b, c, h, w, oh, ow](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t bc = 0; bc < static_cast<int64_t>(b) * c; ++bc) {
      const T* gs = n.grad.data() + bc * oh * ow;
      T* gd = g.data() + bc * h * w;
      for (int y = 0; y < oh; ++y) {
        for (int xi = 0; xi < ow; ++xi) {
          T v = gs[y * ow + xi] * T(0.25);
          gd[(2 * y) * w + 2 * xi] += v;
          gd[(2 * y) * w + 2 * xi + 1] += v;
          gd[(2 * y + 1) * w + 2 * xi] += v;
          gd[(2 * y + 1) * w + 2 * xi + 1] += v;
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  const auto& s = x.value().shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest2: need rank-4");
  const int b = s[0], c = s[1], h = s[2], w = s[3];
  Tensor<T> out({b, c, h * 2, w * 2});
  for (int64_t bc = 0; bc < static_cast<int64_t>(b) * c; ++bc) {
    const T* src = x.value().data() + bc * h * w;
    T* dst = out.data() + bc * 4 * h * w;
    for (int y = 0; y < h; ++y) {
      for (int xi = 0; xi < w; ++xi) {
        T v = src[y * w + xi];
        dst[(2 * y) * 2 * w + 2 * xi] = v;
        dst[(2 * y) * 2 * w + 2 * xi + 1] = v;
        dst[(2 * y + 1) * 2 * w + 2 * xi] = v;
        dst[(2 * y + 1) * 2 * w + 2 * xi + 1] = v;
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<T>(std::move(out), {x}, [xn, b, c, h, w](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    for (int64_t bc = 0; bc < static_cast<int64_t>(b) * c; ++bc) {
      const T* gs = n.grad.data() + bc * 4 * h * w;
      T* gd = g.data() + bc * h * w;
      for (int y = 0; y < h; ++y) {
        for (int xi = 0; xi < w; ++xi) {
          gd[y * w + xi] += gs[(2 * y) * 2 * w + 2 * xi] + gs[(2 * y) * 2 * w + 2 * xi + 1] +
                            gs[(2 * y + 1) * 2 * w + 2 * xi] + gs[(2 * y + 1) * 2 * w + 2 * xi + 1];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// broadcast adds / per-frame affine
// ---------------------------------------------------------------------------

// out[f,c,:,:] = s[f,c] * h[f,c,:,:] + b[f,c]
template <typename T>
Var<T> frame_channel_affine(const Var<T>& h, const Var<T>& s, const Var<T>& b) {
  const auto& sh = h.value().shape();
  const auto& ss = s.value().shape();
  if (sh.size() != 4 || ss.size() != 2) throw std::invalid_argument("frame_channel_affine: bad rank");
  detail::check_same_shape(s.value(), b.value(), "frame_channel_affine");
  if (ss[0] != sh[0] || ss[1] != sh[1]) {
    throw std::invalid_argument("frame_channel_affine: param grid " + Tensor<T>::shape_str(ss) +
                                " does not match input " + Tensor<T>::shape_str(sh));
  }
  const int f = sh[0], c = sh[1];
  const int64_t hw = static_cast<int64_t>(sh[2]) * sh[3];
  Tensor<T> out(sh);
  for (int64_t fc = 0; fc < static_cast<int64_t>(f) * c; ++fc) {
    const T sv = s.value()[fc], bv = b.value()[fc];
    const T* src = h.value().data() + fc * hw;
    T* dst = out.data() + fc * hw;
    for (int64_t i = 0; i < hw; ++i) dst[i] = sv * src[i] + bv;
  }
  auto hn = h.node(), sn = s.node(), bn = b.node();
  return detail::make_op<T>(std::move(out), {h, s, b}, [hn, sn, bn, f, c, hw](ADNode<T>& n) {
    for (int64_t fc = 0; fc < static_cast<int64_t>(f) * c; ++fc) {
      const T* g = n.grad.data() + fc * hw;
      if (hn->requires_grad) {
        const T sv = sn->value[fc];
        T* gh = hn->ensure_grad().data() + fc * hw;
        for (int64_t i = 0; i < hw; ++i) gh[i] += sv * g[i];
      }
      if (sn->requires_grad) {
        const T* hv = hn->value.data() + fc * hw;
        T acc = T(0);
        for (int64_t i = 0; i < hw; ++i) acc += g[i] * hv[i];
        sn->ensure_grad()[fc] += acc;
      }
      if (bn->requires_grad) {
        T acc = T(0);
        for (int64_t i = 0; i < hw; ++i) acc += g[i];
        bn->ensure_grad()[fc] += acc;
      }
    }
  });
}

// x[b,c,h,w] + v[c], broadcast over batch and spatial dims
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  const auto& sx = x.value().shape();
  const auto& sv = v.value().shape();
  if (sx.size() != 4 || sv.size() != 1 || sv[0] != sx[1]) {
    throw std::invalid_argument("add_channel_bias: bad shapes");
  }
  const int b = sx[0], c = sx[1];
  const int64_t hw = static_cast<int64_t>(sx[2]) * sx[3];
  Tensor<T> out = x.value();
  for (int bi = 0; bi < b; ++bi) {
    for (int ci = 0; ci < c; ++ci) {
      T* dst = out.data() + (static_cast<int64_t>(bi) * c + ci) * hw;
      const T bv = v.value()[ci];
      for (int64_t i = 0; i < hw; ++i) dst[i] += bv;
    }
  }
  auto xn = x.node(), vn = v.node();
  return detail::make_op<T>(std::move(out), {x, v}, [xn, vn, b, c, hw](ADNode<T>& n) {
    if (xn->requires_grad) {
      Tensor<T>& g = xn->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (vn->requires_grad) {
      Tensor<T>& g = vn->ensure_grad();
      for (int bi = 0; bi < b; ++bi) {
        for (int ci = 0; ci < c; ++ci) {
          const T* src = n.grad.data() + (static_cast<int64_t>(bi) * c + ci) * hw;
          T acc = T(0);
          for (int64_t i = 0; i < hw; ++i) acc += src[i];
          g[ci] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions & losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (int64_t i = 0; i < x.value().numel(); ++i) s += x.value()[i];
  auto xn = x.node();
  return detail::make_op<T>(Tensor<T>::scalar(s), {x}, [xn](ADNode<T>& n) {
    Tensor<T>& g = xn->ensure_grad();
    const T gv = n.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

// mean((pred - target)^2), target is a constant tensor.
template <typename T>
Var<T> mse_to(const Var<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape(pred.value(), target, "mse_to");
  const int64_t n = pred.value().numel();
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = pred.value()[i] - target[i];
    s += d * d;
  }
  s /= static_cast<T>(n);
  auto pn = pred.node();
  auto tgt = std::make_shared<Tensor<T>>(target);
  return detail::make_op<T>(Tensor<T>::scalar(s), {pred}, [pn, tgt, n](ADNode<T>& node) {
    Tensor<T>& g = pn->ensure_grad();
    const T c = node.grad[0] * T(2) / static_cast<T>(n);
    for (int64_t i = 0; i < n; ++i) g[i] += c * (pn->value[i] - (*tgt)[i]);
  });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  auto root = loss.node();
  if (!root->requires_grad) return;
  // iterative post-order DFS
  std::vector<ADNode<T>*> order;
  std::unordered_set<ADNode<T>*> visited;
  std::vector<std::pair<ADNode<T>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      ADNode<T>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    ADNode<T>* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

}  // namespace magicvid
