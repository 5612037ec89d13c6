#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "magicvid/unet.hpp"

namespace magicvid {

// One interpolation problem: denoise the mid-frame latents between a fixed
// pair of adjacent keyframe latents. The conditioning frames ride along two
// ways: concatenated per-frame onto the input channels, and as proxy
// embedding tokens through cross-attention.
template <typename T>
struct InterpBatch {
  Tensor<T> prev_latent;  // [C,H,W]
  Tensor<T> next_latent;  // [C,H,W]
  Tensor<T> noisy_mid;    // [M,C,H,W]
  ConditionEmbedding<T> cond;
};

// The interpolation denoiser reuses the keyframe architecture with the input
// channel count tripled; adaptor grids keep the keyframe frame budget so the
// parameter delta is exactly the widened stem.
inline UNetConfig interp_config_from_keyframe(const UNetConfig& key_cfg) {
  UNetConfig cfg = key_cfg;
  cfg.in_channels = 3 * key_cfg.in_channels;
  cfg.out_channels = key_cfg.out_channels;
  return cfg;
}

// Builds [M, 3C, H, W]: each mid position carries its noisy slice plus the
// prev/next conditioning latents broadcast to all positions.
template <typename T>
Tensor<T> assemble_interp_input(const InterpBatch<T>& batch) {
  const auto& s = batch.noisy_mid.shape();
  if (s.size() != 4) throw std::invalid_argument("interp input: noisy_mid must be [M,C,H,W]");
  const int m = s[0], c = s[1], h = s[2], w = s[3];
  std::vector<int> frame_shape = {c, h, w};
  if (batch.prev_latent.shape() != frame_shape || batch.next_latent.shape() != frame_shape) {
    throw std::invalid_argument("interp input: conditioning latents must share [C,H,W]");
  }
  Tensor<T> out({m, 3 * c, h, w});
  const int64_t plane = static_cast<int64_t>(c) * h * w;
  for (int i = 0; i < m; ++i) {
    T* dst = out.data() + static_cast<int64_t>(i) * 3 * plane;
    std::copy(batch.noisy_mid.data() + i * plane, batch.noisy_mid.data() + (i + 1) * plane, dst);
    std::copy(batch.prev_latent.data(), batch.prev_latent.data() + plane, dst + plane);
    std::copy(batch.next_latent.data(), batch.next_latent.data() + plane, dst + 2 * plane);
  }
  return out;
}

template <typename T>
Var<T> interp_predict(const InterpBatch<T>& batch, int t, double nu, VarMap<T>& vm,
                      const UNetConfig& interp_cfg) {
  Tensor<T> input = assemble_interp_input(batch);
  if (input.dim(1) != interp_cfg.in_channels) {
    throw std::invalid_argument("interp_predict: channel mismatch (input " +
                                std::to_string(input.dim(1)) + ", model " +
                                std::to_string(interp_cfg.in_channels) + ")");
  }
  Var<T> cond = Var<T>::constant(batch.cond.tokens);
  return denoise_predict(Var<T>::constant(input), t, cond, nu, vm, interp_cfg);
}

template <typename T>
Tensor<T> interp_predict(const InterpBatch<T>& batch, int t, double nu, const ParamStore<T>& weights,
                         const UNetConfig& interp_cfg) {
  VarMap<T> vm = VarMap<T>::from(weights, false);
  return interp_predict(batch, t, nu, vm, interp_cfg).value();
}

// Keyframe weights -> interpolation weights. Shared tensors are copied
// bitwise; the stem gains 2C zero-initialized input-channel slices so the
// fresh model sees only the noisy slice.
template <typename T>
ParamStore<T> init_interp_from_keyframe(const ParamStore<T>& key_weights, const UNetConfig& key_cfg) {
  UNetConfig interp_cfg = interp_config_from_keyframe(key_cfg);
  const Tensor<T>& stem = key_weights.get("stem.w");
  const int w0 = stem.dim(0), c = stem.dim(1), k = stem.dim(2);
  if (c != key_cfg.in_channels) throw std::invalid_argument("init_interp: stem/config mismatch");
  ParamStore<T> out;
  for (const auto& name : key_weights.names()) {
    if (name == "stem.w") {
      Tensor<T> wide({w0, 3 * c, k, k});
      for (int o = 0; o < w0; ++o) {
        for (int ci = 0; ci < c; ++ci) {
          for (int y = 0; y < k; ++y) {
            for (int x = 0; x < k; ++x) wide.at(o, ci, y, x) = stem.at(o, ci, y, x);
          }
        }
      }
      out.add(name, std::move(wide));
    } else {
      out.add(name, key_weights.get(name));
    }
  }
  return out;
}

// k0 m01 m02 m03 k1 ... ; keyframes land bit-exactly at stride mids+1.
template <typename T>
Tensor<T> assemble_interpolated_video(const Tensor<T>& keyframes, const Tensor<T>& mids) {
  const auto& ks = keyframes.shape();
  const auto& ms = mids.shape();
  if (ks.size() != 4 || ms.size() != 5) {
    throw std::invalid_argument("assemble: keyframes [K,C,H,W], mids [K-1,M,C,H,W]");
  }
  const int k = ks[0], m = ms[1];
  if (ms[0] != k - 1 || ms[2] != ks[1] || ms[3] != ks[2] || ms[4] != ks[3]) {
    throw std::invalid_argument("assemble: mid group count must be K-1 with matching frame shape");
  }
  const int64_t plane = static_cast<int64_t>(ks[1]) * ks[2] * ks[3];
  Tensor<T> out({k + (k - 1) * m, ks[1], ks[2], ks[3]});
  int64_t pos = 0;
  for (int i = 0; i < k; ++i) {
    std::copy(keyframes.data() + i * plane, keyframes.data() + (i + 1) * plane, out.data() + pos * plane);
    ++pos;
    if (i + 1 < k) {
      const T* group = mids.data() + (static_cast<int64_t>(i) * m) * plane;
      std::copy(group, group + m * plane, out.data() + pos * plane);
      pos += m;
    }
  }
  return out;
}

}  // namespace magicvid
