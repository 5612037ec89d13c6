#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "magicvid/autodiff.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// Condition token sequence standing in for a text/vision encoder output.
enum class CondSource { kTextProxy, kFrameProxy, kNull };

template <typename T>
struct ConditionEmbedding {
  Tensor<T> tokens;  // [L, D]
  CondSource source = CondSource::kNull;

  static ConditionEmbedding null_cond(int width) {
    ConditionEmbedding c;
    c.tokens = Tensor<T>::zeros({1, width});
    c.source = CondSource::kNull;
    return c;
  }
};

// Projection set for one attention module. wq is [C,C]; wk/wv map the
// key/value source width (C for self/temporal, cond width for cross) to C;
// wo is [C,C].
template <typename T>
struct AttnVars {
  Var<T> wq, wk, wv, wo;
  int heads = 1;

  int channels() const { return wq.value().shape()[0]; }
  int kv_width() const { return wk.value().shape()[0]; }
};

template <typename T>
struct SpatialAttnVars {
  AttnVars<T> self_attn;
  AttnVars<T> cross_attn;
};

// Additive causal mask over frames: query p may read keys q <= p.
template <typename T>
Tensor<T> causal_frame_mask(int frames) {
  Tensor<T> m({frames, frames});
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int p = 0; p < frames; ++p) {
    for (int q = 0; q < frames; ++q) m.at(p, q) = (q <= p) ? T(0) : neg_inf;
  }
  return m;
}

namespace detail {

// [N, C] tokens -> [B*heads, M, d] with B the leading token group count.
template <typename T>
Var<T> split_heads(const Var<T>& tok, int groups, int m, int heads, int d) {
  Var<T> r = reshape(tok, {groups, m, heads, d});
  r = permute(r, {0, 2, 1, 3});
  return reshape(r, {groups * heads, m, d});
}

template <typename T>
Var<T> merge_heads(const Var<T>& x, int groups, int m, int heads, int d) {
  Var<T> r = reshape(x, {groups, heads, m, d});
  r = permute(r, {0, 2, 1, 3});
  return reshape(r, {groups * m, heads * d});
}

}  // namespace detail

// Per-frame, per-channel affine on a conv output; identity at S=1, B=0.
template <typename T>
Var<T> adaptor_apply(const Var<T>& h, const Var<T>& s, const Var<T>& b) {
  return frame_channel_affine(h, s, b);
}

// Multi-head attention over the frame axis, applied independently at every
// spatial location, with a causal mask so frame p only reads frames <= p.
// Residual included. If attn_out is non-null the softmax weights
// [HW*heads, F, F] are copied there.
template <typename T>
Var<T> directed_temporal_attention(const Var<T>& z, const AttnVars<T>& p,
                                   Tensor<T>* attn_out = nullptr) {
  const auto& s = z.value().shape();
  if (s.size() != 4) throw std::invalid_argument("temporal attention: need [F,C,H,W]");
  const int f = s[0], c = s[1], h = s[2], w = s[3];
  if (p.channels() != c) {
    throw std::invalid_argument("temporal attention: channel mismatch (params " +
                                std::to_string(p.channels()) + ", input " + std::to_string(c) + ")");
  }
  if (c % p.heads != 0) throw std::invalid_argument("temporal attention: heads must divide channels");
  const int hw = h * w, heads = p.heads, d = c / heads;

  Var<T> tok = reshape(permute(z, {2, 3, 0, 1}), {hw * f, c});  // [HW*F, C]
  Var<T> q = detail::split_heads(matmul(tok, p.wq), hw, f, heads, d);
  Var<T> k = detail::split_heads(matmul(tok, p.wk), hw, f, heads, d);
  Var<T> v = detail::split_heads(matmul(tok, p.wv), hw, f, heads, d);

  Tensor<T> mask = causal_frame_mask<T>(f);
  Var<T> logits = scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  Var<T> attn = softmax_lastdim(logits, &mask);
  if (attn_out) *attn_out = attn.value();

  Var<T> ctx = detail::merge_heads(bmm(attn, v), hw, f, heads, d);
  Var<T> out = matmul(ctx, p.wo);
  out = permute(reshape(out, {h, w, f, c}), {2, 3, 0, 1});
  return add(z, out);
}

// Per frame: pre-norm self-attention over spatial tokens, then pre-norm
// cross-attention against the condition tokens; residuals around each.
template <typename T>
Var<T> spatial_self_attention(const Var<T>& z, const SpatialAttnVars<T>& p, const Var<T>& cond,
                              Tensor<T>* attn_out = nullptr) {
  const auto& s = z.value().shape();
  if (s.size() != 4) throw std::invalid_argument("spatial attention: need [F,C,H,W]");
  const int f = s[0], c = s[1], h = s[2], w = s[3];
  if (p.self_attn.channels() != c) throw std::invalid_argument("spatial attention: channel mismatch");
  if (c % p.self_attn.heads != 0) throw std::invalid_argument("spatial attention: heads must divide");
  const auto& sc = cond.value().shape();
  if (sc.size() != 2 || sc[1] != p.cross_attn.kv_width()) {
    throw std::invalid_argument("spatial attention: cond width " +
                                std::to_string(sc.size() == 2 ? sc[1] : -1) +
                                " does not match cross-attention kv width " +
                                std::to_string(p.cross_attn.kv_width()));
  }
  const int hw = h * w, heads = p.self_attn.heads, d = c / heads;
  const int cl = sc[0];

  Var<T> tok = reshape(permute(z, {0, 2, 3, 1}), {f * hw, c});  // [F*HW, C]

  // self-attention
  {
    Var<T> ln = layernorm_lastdim(tok);
    Var<T> q = detail::split_heads(matmul(ln, p.self_attn.wq), f, hw, heads, d);
    Var<T> k = detail::split_heads(matmul(ln, p.self_attn.wk), f, hw, heads, d);
    Var<T> v = detail::split_heads(matmul(ln, p.self_attn.wv), f, hw, heads, d);
    Var<T> attn = softmax_lastdim(scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(d)))));
    if (attn_out) *attn_out = attn.value();
    Var<T> ctx = detail::merge_heads(bmm(attn, v), f, hw, heads, d);
    tok = add(tok, matmul(ctx, p.self_attn.wo));
  }

  // cross-attention to condition tokens
  {
    const int xheads = p.cross_attn.heads;
    if (c % xheads != 0) throw std::invalid_argument("cross attention: heads must divide");
    const int xd = c / xheads;
    Var<T> ln = layernorm_lastdim(tok);
    Var<T> q = detail::split_heads(matmul(ln, p.cross_attn.wq), f, hw, xheads, xd);
    Var<T> k = detail::split_heads(matmul(cond, p.cross_attn.wk), 1, cl, xheads, xd);  // [heads, L, d]
    Var<T> v = detail::split_heads(matmul(cond, p.cross_attn.wv), 1, cl, xheads, xd);
    Var<T> attn = softmax_lastdim(scale(bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(double(xd)))));
    Var<T> ctx = detail::merge_heads(bmm(attn, v), f, hw, xheads, xd);
    tok = add(tok, matmul(ctx, p.cross_attn.wo));
  }

  return permute(reshape(tok, {f, h, w, c}), {0, 3, 1, 2});
}

// Parallel spatial + temporal branches on the same input, summed and halved
// so both branches at identity keep the block an exact identity. A missing
// temporal branch (image mode) contributes its residual copy of z.
template <typename T>
Var<T> st_attn_block(const Var<T>& z, const SpatialAttnVars<T>& spatial,
                     const AttnVars<T>* temporal, const Var<T>& cond) {
  Var<T> s = spatial_self_attention(z, spatial, cond);
  Var<T> t = temporal ? directed_temporal_attention(z, *temporal) : z;
  return scale(add(s, t), T(0.5));
}

// Image-mode block: no temporal branch, the residual copy stands in for it.
template <typename T>
Var<T> st_attn_block(const Var<T>& z, const SpatialAttnVars<T>& spatial, const Var<T>& cond) {
  return st_attn_block(z, spatial, static_cast<const AttnVars<T>*>(nullptr), cond);
}

// Sinusoidal encoding of a scalar at even width: [sin(x*w_i) | cos(x*w_i)]
// with w_i = 10000^(-2i/width).
template <typename T>
Tensor<T> sinusoid_encode(double x, int width) {
  if (width < 2 || width % 2 != 0) throw std::invalid_argument("sinusoid_encode: width must be even");
  const int half = width / 2;
  Tensor<T> out({width});
  for (int i = 0; i < half; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::sin(x * freq));
    out[half + i] = static_cast<T>(std::cos(x * freq));
  }
  return out;
}

template <typename T>
struct EmbedMlpVars {
  Var<T> w1, b1, w2, b2;  // [C,C], [C], [C,C], [C]
};

// Linear(SiLU(Linear(Sin(nu)))), the frames-per-second conditioning vector.
template <typename T>
Var<T> fps_embedding(double nu, const EmbedMlpVars<T>& mlp, int width) {
  if (!(nu > 0.0)) throw std::invalid_argument("fps_embedding: nu must be positive");
  Var<T> x = Var<T>::constant(sinusoid_encode<T>(nu, width).reshaped({1, width}));
  Var<T> h = linear(x, mlp.w1, mlp.b1);
  h = silu(h);
  h = linear(h, mlp.w2, mlp.b2);
  return reshape(h, {width});
}

// Same two-layer perceptron over the sinusoid of the step index.
template <typename T>
Var<T> timestep_embedding(int t, const EmbedMlpVars<T>& mlp, int width) {
  if (t < 0) throw std::invalid_argument("timestep_embedding: t must be >= 0");
  Var<T> x = Var<T>::constant(sinusoid_encode<T>(static_cast<double>(t), width).reshaped({1, width}));
  Var<T> h = linear(x, mlp.w1, mlp.b1);
  h = silu(h);
  h = linear(h, mlp.w2, mlp.b2);
  return reshape(h, {width});
}

}  // namespace magicvid
