#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "magicvid/blocks.hpp"
#include "magicvid/params.hpp"
#include "magicvid/rng.hpp"
#include "magicvid/unet.hpp"

namespace magicvid {

// Frame-wise RGB <-> latent codec. The encoder is strictly per-frame. The
// decoder exists in two modes over the same weights: frame-independent, and
// the video mode with two directed temporal attention layers after the two
// lowest-resolution decoder stages.
struct VaeConfig {
  int base_width = 16;
  int latent_channels = 4;
  int downsample = 4;  // f, spatial reduction factor
  int temporal_heads = 2;

  int stages() const { return downsample == 4 ? 2 : 3; }

  void validate() const {
    if (downsample != 4 && downsample != 8) throw std::invalid_argument("vae config: f must be 4 or 8");
    if (base_width < 1 || latent_channels < 1 || temporal_heads < 1) {
      throw std::invalid_argument("vae config: bad sizes");
    }
    if ((2 * base_width) % temporal_heads || base_width % temporal_heads) {
      throw std::invalid_argument("vae config: heads must divide widths");
    }
  }
};

template <typename T>
ParamStore<T> build_vae_weights(const VaeConfig& cfg, uint64_t seed) {
  cfg.validate();
  using unet_detail::init_attn;
  using unet_detail::init_conv;
  ParamStore<T> ps;
  Rng rng(splitmix64(seed ^ 0x76616520ULL));
  const int w = cfg.base_width, c = cfg.latent_channels;

  init_conv(ps, rng, "enc.conv_in", w, 3, 3);
  init_conv(ps, rng, "enc.conv0", w, w, 3);          // full res, pooled after
  init_conv(ps, rng, "enc.conv1", 2 * w, w, 3);      // half res, pooled after
  if (cfg.downsample == 8) init_conv(ps, rng, "enc.conv2", 2 * w, 2 * w, 3);  // pooled again
  init_conv(ps, rng, "enc.mid", 2 * w, 2 * w, 3);
  init_conv(ps, rng, "enc.mu", c, 2 * w, 3);
  init_conv(ps, rng, "enc.logvar", c, 2 * w, 3, /*zero=*/true);

  init_conv(ps, rng, "dec.conv_in", 2 * w, c, 3);
  init_conv(ps, rng, "dec.mid", 2 * w, 2 * w, 3);
  init_attn(ps, rng, "dec.tattn0", 2 * w, 2 * w, /*zero_wo=*/true);  // lowest res
  if (cfg.downsample == 8) init_conv(ps, rng, "dec.conv2", 2 * w, 2 * w, 3);
  init_conv(ps, rng, "dec.conv0", w, 2 * w, 3);
  init_attn(ps, rng, "dec.tattn1", w, w, /*zero_wo=*/true);          // next stage up
  init_conv(ps, rng, "dec.conv1", w, w, 3);
  init_conv(ps, rng, "dec.out", 3, w, 3);
  return ps;
}

namespace vae_detail {

template <typename T>
Var<T> conv_silu(VarMap<T>& vm, const std::string& prefix, const Var<T>& x) {
  return silu(conv2d(x, vm[prefix + ".w"], vm[prefix + ".b"]));
}

}  // namespace vae_detail

// Per-frame encoder; returns the posterior mean and log-variance maps.
template <typename T>
std::pair<Var<T>, Var<T>> encode_frames_dist(const Var<T>& x, VarMap<T>& vm, const VaeConfig& cfg) {
  const auto& s = x.value().shape();
  if (s.size() != 4 || s[1] != 3) throw std::invalid_argument("encode_frames: need [F,3,H,W]");
  if (s[2] % cfg.downsample || s[3] % cfg.downsample) {
    throw std::invalid_argument("encode_frames: spatial dims must be divisible by f=" +
                                std::to_string(cfg.downsample));
  }
  using vae_detail::conv_silu;
  Var<T> h = conv_silu(vm, "enc.conv_in", x);
  h = avgpool2(conv_silu(vm, "enc.conv0", h));
  h = avgpool2(conv_silu(vm, "enc.conv1", h));
  if (cfg.downsample == 8) h = avgpool2(conv_silu(vm, "enc.conv2", h));
  h = conv_silu(vm, "enc.mid", h);
  Var<T> mu = conv2d(h, vm["enc.mu.w"], vm["enc.mu.b"]);
  Var<T> logvar = conv2d(h, vm["enc.logvar.w"], vm["enc.logvar.b"]);
  return {mu, logvar};
}

// Deterministic encode (posterior mean), the form used for diffusion.
template <typename T>
Tensor<T> encode_frames(const Tensor<T>& x, const ParamStore<T>& weights, const VaeConfig& cfg) {
  VarMap<T> vm = VarMap<T>::from(weights, false);
  return encode_frames_dist(Var<T>::constant(x), vm, cfg).first.value();
}

template <typename T>
Var<T> decode_frames_impl(const Var<T>& z, VarMap<T>& vm, const VaeConfig& cfg, bool video_mode) {
  const auto& s = z.value().shape();
  if (s.size() != 4 || s[1] != cfg.latent_channels) {
    throw std::invalid_argument("decode_frames: need [F," + std::to_string(cfg.latent_channels) +
                                ",h,w], got " + Tensor<T>::shape_str(s));
  }
  using unet_detail::attn_vars;
  using vae_detail::conv_silu;
  Var<T> h = conv_silu(vm, "dec.conv_in", z);
  h = conv_silu(vm, "dec.mid", h);
  if (video_mode) {
    AttnVars<T> a = attn_vars(vm, "dec.tattn0", cfg.temporal_heads);
    h = directed_temporal_attention(h, a);
  }
  h = upsample_nearest2(h);
  if (cfg.downsample == 8) {
    h = conv_silu(vm, "dec.conv2", h);
    h = upsample_nearest2(h);
  }
  h = conv_silu(vm, "dec.conv0", h);
  if (video_mode) {
    AttnVars<T> a = attn_vars(vm, "dec.tattn1", cfg.temporal_heads);
    h = directed_temporal_attention(h, a);
  }
  h = upsample_nearest2(h);
  h = conv_silu(vm, "dec.conv1", h);
  return conv2d(h, vm["dec.out.w"], vm["dec.out.b"]);
}

template <typename T>
Tensor<T> decode_frames_independent(const Tensor<T>& z, const ParamStore<T>& weights,
                                    const VaeConfig& cfg) {
  VarMap<T> vm = VarMap<T>::from(weights, false);
  return decode_frames_impl(Var<T>::constant(z), vm, cfg, /*video_mode=*/false).value();
}

template <typename T>
Tensor<T> decode_frames_video(const Tensor<T>& z, const ParamStore<T>& weights, const VaeConfig& cfg) {
  VarMap<T> vm = VarMap<T>::from(weights, false);
  return decode_frames_impl(Var<T>::constant(z), vm, cfg, /*video_mode=*/true).value();
}

template <typename T>
struct VaeLoss {
  Var<T> total;
  Var<T> recon_mse;     // mean squared reconstruction error
  Var<T> kl_per_elem;   // KL(q || N(0,1)) averaged over latent elements
};

// recon MSE + beta_kl * mean-per-element KL. With mu=1, logvar=0 and a
// perfect reconstruction the KL component is exactly 0.5.
template <typename T>
VaeLoss<T> vae_training_loss(const Tensor<T>& x, const Var<T>& reconstruction, const Var<T>& mu,
                             const Var<T>& logvar, T beta_kl) {
  if (!reconstruction.value().same_shape(x)) {
    throw std::invalid_argument("vae_training_loss: reconstruction/input shape mismatch");
  }
  if (!mu.value().same_shape(logvar.value())) {
    throw std::invalid_argument("vae_training_loss: mu/logvar shape mismatch");
  }
  VaeLoss<T> out;
  out.recon_mse = mse_to(reconstruction, x);
  // 0.5 * (mu^2 + exp(logvar) - 1 - logvar), averaged
  Var<T> kl_elem = add(add(mul(mu, mu), vexp(logvar)), affine_const(logvar, T(-1), T(-1)));
  out.kl_per_elem = scale(mean(kl_elem), T(0.5));
  out.total = add(out.recon_mse, scale(out.kl_per_elem, beta_kl));
  return out;
}

}  // namespace magicvid
