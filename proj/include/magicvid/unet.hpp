#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "magicvid/blocks.hpp"
#include "magicvid/params.hpp"
#include "magicvid/rng.hpp"
#include "magicvid/schedule.hpp"

namespace magicvid {

// Denoiser layout: a small encoder-decoder over latent frames. Shared 2D
// convolutions process the frame axis as batch; adaptors and directed
// temporal attention carry all cross-frame structure. `temporal=false`
// builds the image-mode network (no adaptors, no temporal attention).
struct UNetConfig {
  int in_channels = 4;
  int out_channels = 4;
  int base_width = 32;
  std::vector<int> channel_multipliers = {1, 2, 4};
  int frames = 16;
  std::vector<int> attn_levels = {1, 2};  // level i runs at 1/2^i resolution
  int heads = 4;
  int cond_width = 16;
  int emb_width = 64;
  bool temporal = true;
  PredictionTarget prediction_target = PredictionTarget::kEpsilon;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int width(int level) const { return base_width * channel_multipliers[static_cast<size_t>(level)]; }

  bool has_attn(int level) const {
    return std::find(attn_levels.begin(), attn_levels.end(), level) != attn_levels.end();
  }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || base_width < 1 || frames < 1 || heads < 1 ||
        cond_width < 1 || emb_width < 2 || emb_width % 2) {
      throw std::invalid_argument("unet config: bad sizes");
    }
    if (channel_multipliers.empty()) throw std::invalid_argument("unet config: need at least one level");
    for (int l : attn_levels) {
      if (l < 0 || l >= levels()) throw std::invalid_argument("unet config: attn level out of range");
      if (width(l) % heads) throw std::invalid_argument("unet config: heads must divide attn width");
    }
    if (width(levels() - 1) % heads) {
      throw std::invalid_argument("unet config: heads must divide mid width");
    }
  }
};

namespace unet_detail {

inline std::string level_prefix(const char* path, int i) { return std::string(path) + "." + std::to_string(i); }

template <typename T>
void init_conv(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int out_c, int in_c, int k,
               bool zero = false) {
  Tensor<T> w({out_c, in_c, k, k});
  if (!zero) {
    double std = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
    rng.fill_gaussian(w, std);
  }
  ps.add(prefix + ".w", std::move(w));
  ps.add(prefix + ".b", Tensor<T>::zeros({out_c}));
}

template <typename T>
void init_matrix(ParamStore<T>& ps, Rng& rng, const std::string& name, int rows, int cols,
                 bool zero = false) {
  Tensor<T> w({rows, cols});
  if (!zero) rng.fill_gaussian(w, 1.0 / std::sqrt(static_cast<double>(rows)));
  ps.add(name, std::move(w));
}

template <typename T>
void init_adaptor(ParamStore<T>& ps, const std::string& prefix, int frames, int channels) {
  ps.add(prefix + ".s", Tensor<T>::full({frames, channels}, T(1)));
  ps.add(prefix + ".b", Tensor<T>::zeros({frames, channels}));
}

// self attention: all projections random except nothing; cross/temporal: wo zero
template <typename T>
void init_attn(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int c, int kv, bool zero_wo) {
  init_matrix(ps, rng, prefix + ".wq", c, c);
  init_matrix(ps, rng, prefix + ".wk", kv, c);
  init_matrix(ps, rng, prefix + ".wv", kv, c);
  init_matrix(ps, rng, prefix + ".wo", c, c, zero_wo);
}

template <typename T>
void init_mlp(ParamStore<T>& ps, Rng& rng, const std::string& prefix, int width) {
  init_matrix(ps, rng, prefix + ".w1", width, width);
  ps.add(prefix + ".b1", Tensor<T>::zeros({width}));
  init_matrix(ps, rng, prefix + ".w2", width, width);
  ps.add(prefix + ".b2", Tensor<T>::zeros({width}));
}

template <typename T>
void init_resblock(ParamStore<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& prefix,
                   int in_c, int out_c) {
  init_conv(ps, rng, prefix + ".conv1", out_c, in_c, 3);
  if (cfg.temporal) init_adaptor(ps, prefix + ".adaptor1", cfg.frames, out_c);
  init_matrix(ps, rng, prefix + ".emb", cfg.emb_width, out_c);
  ps.add(prefix + ".emb.b", Tensor<T>::zeros({out_c}));
  init_conv(ps, rng, prefix + ".conv2", out_c, out_c, 3);
  if (cfg.temporal) init_adaptor(ps, prefix + ".adaptor2", cfg.frames, out_c);
  if (in_c != out_c) init_conv(ps, rng, prefix + ".skip", out_c, in_c, 1);
}

template <typename T>
void init_st_attn(ParamStore<T>& ps, Rng& rng, const UNetConfig& cfg, const std::string& prefix, int c) {
  init_attn(ps, rng, prefix + ".self", c, c, false);
  init_attn(ps, rng, prefix + ".cross", c, cfg.cond_width, true);
  if (cfg.temporal) init_attn(ps, rng, prefix + ".t_attn", c, c, true);
}

}  // namespace unet_detail

// Fresh denoiser weights; deterministic for a given seed.
template <typename T>
ParamStore<T> build_denoiser_weights(const UNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  using namespace unet_detail;
  ParamStore<T> ps;
  Rng rng(splitmix64(seed));
  const int levels = cfg.levels();

  init_mlp(ps, rng, "temb", cfg.emb_width);
  init_mlp(ps, rng, "femb", cfg.emb_width);
  init_conv(ps, rng, "stem", cfg.width(0), cfg.in_channels, 3);
  if (cfg.temporal) init_adaptor(ps, "stem.adaptor", cfg.frames, cfg.width(0));

  for (int i = 0; i < levels; ++i) {
    const int in_c = cfg.width(std::max(i - 1, 0));
    const std::string p = level_prefix("down", i);
    init_resblock(ps, rng, cfg, p, in_c, cfg.width(i));
    if (cfg.has_attn(i)) init_st_attn(ps, rng, cfg, p + ".attn", cfg.width(i));
  }

  const int mid_c = cfg.width(levels - 1);
  init_resblock(ps, rng, cfg, "mid.0", mid_c, mid_c);
  init_st_attn(ps, rng, cfg, "mid.attn", mid_c);
  init_resblock(ps, rng, cfg, "mid.1", mid_c, mid_c);

  for (int i = levels - 1; i >= 0; --i) {
    // entering width: W_{i+1} after the upsample from the deeper level, or
    // mid width at the deepest level; skip concat adds W_i
    const int enter_c = (i == levels - 1) ? mid_c : cfg.width(i + 1);
    const std::string p = level_prefix("up", i);
    init_resblock(ps, rng, cfg, p, enter_c + cfg.width(i), cfg.width(i));
    if (cfg.has_attn(i)) init_st_attn(ps, rng, cfg, p + ".attn", cfg.width(i));
  }

  init_conv(ps, rng, "head", cfg.out_channels, cfg.width(0), 3, /*zero=*/true);
  return ps;
}

namespace unet_detail {

// Parameter-free per-frame normalization; keeps the residual stack's forward
// gain bounded without introducing any cross-frame coupling.
template <typename T>
Var<T> frame_norm(const Var<T>& x) {
  const auto& s = x.value().shape();
  Var<T> flat = reshape(x, {s[0], s[1] * s[2] * s[3]});
  return reshape(layernorm_lastdim(flat), s);
}

template <typename T>
Var<T> maybe_adaptor(VarMap<T>& vm, const UNetConfig& cfg, const std::string& prefix, const Var<T>& h,
                     int f_rt) {
  if (!cfg.temporal) return h;
  Var<T> s = vm[prefix + ".s"];
  Var<T> b = vm[prefix + ".b"];
  if (f_rt != cfg.frames) {
    s = slice_axis0(s, 0, f_rt);
    b = slice_axis0(b, 0, f_rt);
  }
  return adaptor_apply(h, s, b);
}

template <typename T>
Var<T> resblock(VarMap<T>& vm, const UNetConfig& cfg, const std::string& prefix, const Var<T>& x,
                const Var<T>& emb_row, int f_rt) {
  Var<T> h = silu(frame_norm(x));
  h = conv2d(h, vm[prefix + ".conv1.w"], vm[prefix + ".conv1.b"]);
  h = maybe_adaptor(vm, cfg, prefix + ".adaptor1", h, f_rt);
  Var<T> proj = reshape(linear(emb_row, vm[prefix + ".emb"], vm[prefix + ".emb.b"]),
                        {h.value().dim(1)});
  h = add_channel_bias(h, proj);
  h = silu(frame_norm(h));
  h = conv2d(h, vm[prefix + ".conv2.w"], vm[prefix + ".conv2.b"]);
  h = maybe_adaptor(vm, cfg, prefix + ".adaptor2", h, f_rt);
  Var<T> sk = vm.has(prefix + ".skip.w")
                  ? conv2d(x, vm[prefix + ".skip.w"], vm[prefix + ".skip.b"])
                  : x;
  return add(sk, h);
}

template <typename T>
AttnVars<T> attn_vars(VarMap<T>& vm, const std::string& prefix, int heads) {
  return AttnVars<T>{vm[prefix + ".wq"], vm[prefix + ".wk"], vm[prefix + ".wv"], vm[prefix + ".wo"],
                     heads};
}

template <typename T>
Var<T> st_attn(VarMap<T>& vm, const UNetConfig& cfg, const std::string& prefix, const Var<T>& h,
               const Var<T>& cond) {
  SpatialAttnVars<T> sp;
  sp.self_attn = attn_vars(vm, prefix + ".self", cfg.heads);
  sp.cross_attn = attn_vars(vm, prefix + ".cross", cfg.heads);
  if (cfg.temporal) {
    AttnVars<T> tp = attn_vars(vm, prefix + ".t_attn", cfg.heads);
    return st_attn_block(h, sp, &tp, cond);
  }
  return st_attn_block(h, sp, cond);
}

}  // namespace unet_detail

// Full denoiser forward. zt is [F,C,H,W] with F <= config.frames; cond is a
// [L,D] token Var; returns a prediction with out_channels channels.
template <typename T>
Var<T> denoise_predict(const Var<T>& zt, int t, const Var<T>& cond, double nu, VarMap<T>& vm,
                       const UNetConfig& cfg) {
  using namespace unet_detail;
  const auto& s = zt.value().shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw std::invalid_argument("denoise_predict: input must be [F," + std::to_string(cfg.in_channels) +
                                ",H,W], got " + Tensor<T>::shape_str(s));
  }
  const int f_rt = s[0];
  if (f_rt > cfg.frames) throw std::invalid_argument("denoise_predict: more frames than configured");
  const int levels = cfg.levels();
  const int div = 1 << (levels - 1);
  if (s[2] % div || s[3] % div) {
    throw std::invalid_argument("denoise_predict: spatial dims must be divisible by " +
                                std::to_string(div));
  }
  if (t < 0) throw std::invalid_argument("denoise_predict: t must be >= 0");

  EmbedMlpVars<T> temb_mlp{vm["temb.w1"], vm["temb.b1"], vm["temb.w2"], vm["temb.b2"]};
  EmbedMlpVars<T> femb_mlp{vm["femb.w1"], vm["femb.b1"], vm["femb.w2"], vm["femb.b2"]};
  Var<T> emb = add(timestep_embedding(t, temb_mlp, cfg.emb_width), fps_embedding(nu, femb_mlp, cfg.emb_width));
  Var<T> emb_row = reshape(emb, {1, cfg.emb_width});

  Var<T> h = conv2d(zt, vm["stem.w"], vm["stem.b"]);
  h = maybe_adaptor(vm, cfg, "stem.adaptor", h, f_rt);

  std::vector<Var<T>> skips;
  for (int i = 0; i < levels; ++i) {
    const std::string p = level_prefix("down", i);
    h = resblock(vm, cfg, p, h, emb_row, f_rt);
    if (cfg.has_attn(i)) h = st_attn(vm, cfg, p + ".attn", h, cond);
    skips.push_back(h);
    if (i < levels - 1) h = avgpool2(h);
  }

  h = resblock(vm, cfg, "mid.0", h, emb_row, f_rt);
  h = st_attn(vm, cfg, "mid.attn", h, cond);
  h = resblock(vm, cfg, "mid.1", h, emb_row, f_rt);

  for (int i = levels - 1; i >= 0; --i) {
    const std::string p = level_prefix("up", i);
    h = concat(h, skips[static_cast<size_t>(i)], 1);
    h = resblock(vm, cfg, p, h, emb_row, f_rt);
    if (cfg.has_attn(i)) h = st_attn(vm, cfg, p + ".attn", h, cond);
    if (i > 0) h = upsample_nearest2(h);
  }

  h = silu(unet_detail::frame_norm(h));
  return conv2d(h, vm["head.w"], vm["head.b"]);
}

// Inference wrapper over plain tensors.
template <typename T>
Tensor<T> denoise_predict(const Tensor<T>& zt, int t, const ConditionEmbedding<T>& cond, double nu,
                          const ParamStore<T>& weights, const UNetConfig& cfg) {
  VarMap<T> vm = VarMap<T>::from(weights, /*requires_grad=*/false);
  Var<T> c = Var<T>::constant(cond.tokens);
  return denoise_predict(Var<T>::constant(zt), t, c, nu, vm, cfg).value();
}

inline bool is_temporal_param(const std::string& name) {
  return name.find(".adaptor") != std::string::npos || name.find(".t_attn.") != std::string::npos;
}

// Sum over adaptor sites of 2*F*C; the whole budget of the "2D+adaptor"
// temporal path apart from attention.
inline int64_t adaptor_param_count(const UNetConfig& cfg) {
  if (!cfg.temporal) return 0;
  int64_t widths = cfg.width(0);  // stem
  const int levels = cfg.levels();
  for (int i = 0; i < levels; ++i) widths += 2 * cfg.width(i);             // down resblocks
  widths += 2 * cfg.width(levels - 1) + 2 * cfg.width(levels - 1);        // mid.0, mid.1
  for (int i = 0; i < levels; ++i) widths += 2 * cfg.width(i);             // up resblocks
  return 2ll * cfg.frames * widths;
}

// Image weights (no temporal parts) -> video weights: conv and spatial
// attention tensors are copied bitwise; adaptors enter at identity and
// temporal attention with a zero output projection, so the video model on
// stacked copies of one frame reproduces the image model exactly.
template <typename T>
ParamStore<T> videofy_image_weights(const ParamStore<T>& image_weights, const UNetConfig& video_cfg,
                                    uint64_t seed = 0x7669646575ULL) {
  if (!video_cfg.temporal) throw std::invalid_argument("videofy: target config must be temporal");
  UNetConfig image_cfg = video_cfg;
  image_cfg.temporal = false;
  // template stores give the canonical name sets and shapes
  ParamStore<T> video_template = build_denoiser_weights<T>(video_cfg, seed);
  ParamStore<T> out;
  for (const auto& name : video_template.names()) {
    if (is_temporal_param(name)) {
      out.add(name, video_template.get(name));
    } else {
      const Tensor<T>& src = image_weights.get(name);
      if (!src.same_shape(video_template.get(name))) {
        throw std::invalid_argument("videofy: shape mismatch for " + name);
      }
      out.add(name, src);
    }
  }
  return out;
}

// Drop adaptors and temporal attention, recovering image-mode weights.
template <typename T>
ParamStore<T> strip_temporal_parts(const ParamStore<T>& video_weights) {
  ParamStore<T> out;
  for (const auto& name : video_weights.names()) {
    if (!is_temporal_param(name)) out.add(name, video_weights.get(name));
  }
  return out;
}

}  // namespace magicvid
