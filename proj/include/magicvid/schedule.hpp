#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "magicvid/tensor.hpp"

namespace magicvid {

enum class PredictionTarget { kEpsilon, kX0 };

inline const char* to_string(PredictionTarget t) {
  return t == PredictionTarget::kEpsilon ? "epsilon" : "x0";
}

inline PredictionTarget prediction_target_from_string(const std::string& s) {
  if (s == "epsilon") return PredictionTarget::kEpsilon;
  if (s == "x0") return PredictionTarget::kX0;
  throw std::invalid_argument("unknown prediction target: " + s);
}

// Gaussian diffusion tables. alpha_bars has T+1 entries with alpha_bars[0]=1,
// so step index t in [1, T] reads alpha_bars[t] directly; tables are kept in
// double regardless of the latent scalar type.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;       // T entries, betas[t-1] is beta_t
  std::vector<double> alphas;      // T entries
  std::vector<double> alpha_bars;  // T+1 entries

  double beta(int t) const { return betas[static_cast<size_t>(t - 1)]; }
  double alpha(int t) const { return alphas[static_cast<size_t>(t - 1)]; }
  double alpha_bar(int t) const { return alpha_bars[static_cast<size_t>(t)]; }

  void check_step(int t) const {
    if (t < 1 || t > T) {
      throw std::invalid_argument("schedule: step " + std::to_string(t) + " outside [1, " +
                                  std::to_string(T) + "]");
    }
  }
};

// Linear beta interpolation between beta_start and beta_end.
inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<size_t>(T));
  s.alphas.resize(static_cast<size_t>(T));
  s.alpha_bars.resize(static_cast<size_t>(T) + 1);
  s.alpha_bars[0] = 1.0;
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = (T == 1) ? beta_start
                        : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                           static_cast<double>(T - 1);
    s.betas[static_cast<size_t>(t)] = b;
    s.alphas[static_cast<size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bars[static_cast<size_t>(t) + 1] = prod;
  }
  return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. t=0 is the identity.
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  if (!z0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: shape mismatch");
  if (t != 0) sched.check_step(t);
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

// Mean squared error against the active target (eps or z0), averaged over all
// elements of the frame sequence.
template <typename T>
T training_loss(const Tensor<T>& z0, int /*t*/, const Tensor<T>& eps, const Tensor<T>& prediction,
                PredictionTarget target) {
  if (!z0.same_shape(eps) || !z0.same_shape(prediction)) {
    throw std::invalid_argument("training_loss: shape mismatch");
  }
  const Tensor<T>& ref = (target == PredictionTarget::kEpsilon) ? eps : z0;
  double acc = 0.0;
  for (int64_t i = 0; i < ref.numel(); ++i) {
    double d = static_cast<double>(prediction[i]) - static_cast<double>(ref[i]);
    acc += d * d;
  }
  return static_cast<T>(acc / static_cast<double>(ref.numel()));
}

namespace detail {

// Convert an x0-mode prediction to an epsilon estimate at step t.
template <typename T>
Tensor<T> as_epsilon(const Tensor<T>& zt, int t, const Tensor<T>& prediction, PredictionTarget target,
                     const NoiseSchedule& sched) {
  if (target == PredictionTarget::kEpsilon) return prediction;
  const double ab = sched.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(1.0 - ab);
  const double sa = std::sqrt(ab);
  Tensor<T> eps(zt.shape());
  for (int64_t i = 0; i < eps.numel(); ++i) {
    eps[i] = static_cast<T>((static_cast<double>(zt[i]) - sa * static_cast<double>(prediction[i])) * inv);
  }
  return eps;
}

}  // namespace detail

// Ancestral DDPM step: posterior mean plus sigma_t * xi with sigma_t^2 =
// beta_t; no noise is added on the final step (t = 1).
template <typename T>
Tensor<T> denoise_step_ddpm(const Tensor<T>& zt, int t, const Tensor<T>& prediction,
                            PredictionTarget target, const NoiseSchedule& sched, const Tensor<T>& xi) {
  sched.check_step(t);
  if (!zt.same_shape(prediction) || !zt.same_shape(xi)) {
    throw std::invalid_argument("denoise_step_ddpm: shape mismatch");
  }
  Tensor<T> eps = detail::as_epsilon(zt, t, prediction, target, sched);
  const double beta = sched.beta(t);
  const double inv_sqrt_a = 1.0 / std::sqrt(sched.alpha(t));
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
  const double sigma = (t == 1) ? 0.0 : std::sqrt(beta);
  Tensor<T> out(zt.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double mean = inv_sqrt_a * (static_cast<double>(zt[i]) - coef * static_cast<double>(eps[i]));
    out[i] = static_cast<T>(mean + sigma * static_cast<double>(xi[i]));
  }
  return out;
}

// Deterministic DDIM step (eta = 0). t_prev may be 0 (final step) and may
// equal t, in which case the update is the identity up to roundoff.
template <typename T>
Tensor<T> denoise_step_ddim(const Tensor<T>& zt, int t, int t_prev, const Tensor<T>& prediction,
                            PredictionTarget target, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (t_prev > t || t_prev < 0) {
    throw std::invalid_argument("denoise_step_ddim: t_prev must satisfy 0 <= t_prev <= t");
  }
  if (!zt.same_shape(prediction)) throw std::invalid_argument("denoise_step_ddim: shape mismatch");
  Tensor<T> eps = detail::as_epsilon(zt, t, prediction, target, sched);
  const double ab = sched.alpha_bar(t);
  const double abp = sched.alpha_bar(t_prev);
  const double inv_sa = 1.0 / std::sqrt(ab);
  const double sb = std::sqrt(1.0 - ab);
  const double sap = std::sqrt(abp);
  const double sbp = std::sqrt(1.0 - abp);
  Tensor<T> out(zt.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    double e = static_cast<double>(eps[i]);
    double z0 = (static_cast<double>(zt[i]) - sb * e) * inv_sa;
    out[i] = static_cast<T>(sap * z0 + sbp * e);
  }
  return out;
}

// Descending timestep sequence for a DDIM run with `steps` model evaluations:
// T = t_1 > t_2 > ... > t_steps >= 1, consumed pairwise with t_prev appended 0.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("ddim_timesteps: need 1 <= steps <= T");
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    double f = (steps == 1) ? 1.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    int t = static_cast<int>(std::lround(static_cast<double>(T) - f * static_cast<double>(T - 1)));
    if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
    if (t < 1) t = 1;
    ts.push_back(t);
  }
  return ts;
}

}  // namespace magicvid
