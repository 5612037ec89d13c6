#include "magicvid/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "magicvid/errors.hpp"

namespace magicvid {

void LossTrace::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write loss trace: " + path);
  for (const auto& [step, value] : entries) f << step << " " << value << "\n";
}

SgdOptimizer::SgdOptimizer(const ParamStore<float>& params, const TrainConfig& cfg)
    : lr_(cfg.lr),
      momentum_(cfg.momentum),
      ema_decay_(cfg.ema_decay),
      adam_(cfg.optimizer == "adam"),
      ema_has_(cfg.ema_decay >= 0.0) {
  for (const auto& name : params.names()) {
    velocity_.add(name, TensorF::zeros(params.get(name).shape()));
    if (adam_) second_.add(name, TensorF::zeros(params.get(name).shape()));
    if (ema_has_) ema_.add(name, params.get(name));
  }
}

void SgdOptimizer::apply(ParamStore<float>& params, VarMap<float>& grads) {
  ++step_;
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
  for (const auto& name : velocity_.names()) {
    TensorF& w = params.get(name);
    TensorF& v = velocity_.get(name);
    const TensorF& g = grads[name].grad();
    if (adam_) {
      TensorF& s = second_.get(name);
      for (int64_t i = 0; i < w.numel(); ++i) {
        v[i] = static_cast<float>(kBeta1 * v[i] + (1.0 - kBeta1) * g[i]);
        s[i] = static_cast<float>(kBeta2 * s[i] + (1.0 - kBeta2) * static_cast<double>(g[i]) * g[i]);
        const double mhat = v[i] / bc1;
        const double vhat = s[i] / bc2;
        w[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + kEps));
      }
    } else {
      for (int64_t i = 0; i < w.numel(); ++i) {
        v[i] = static_cast<float>(momentum_ * v[i] + g[i]);
        w[i] -= static_cast<float>(lr_) * v[i];
      }
    }
    if (ema_has_) {
      TensorF& e = ema_.get(name);
      for (int64_t i = 0; i < w.numel(); ++i) {
        e[i] = static_cast<float>(ema_decay_ * e[i] + (1.0 - ema_decay_) * w[i]);
      }
    }
  }
}

namespace {

// Clips cached in memory; training revisits them constantly.
struct ClipCache {
  const Corpus& corpus;
  std::vector<TensorF> loaded;

  explicit ClipCache(const Corpus& c) : corpus(c), loaded(c.clips.size()) {}

  const TensorF& get(int i) {
    if (loaded[static_cast<size_t>(i)].numel() == 0) loaded[static_cast<size_t>(i)] = corpus.clip(i);
    return loaded[static_cast<size_t>(i)];
  }
};

void check_finite_loss(double loss, int step) {
  if (!std::isfinite(loss)) {
    throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
  }
}

int pick_window_len(const std::vector<int>& choices, int clip_len, Rng& rng) {
  std::vector<int> valid;
  for (int l : choices) {
    if (l <= clip_len) valid.push_back(l);
  }
  if (valid.empty()) valid.push_back(16);
  return valid[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(valid.size())))];
}

TensorF scale_tensor(const TensorF& t, double s) {
  TensorF out = t;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(out[i] * s);
  return out;
}

}  // namespace

TensorF encode_clip_latents(const TensorF& frames, const ParamStore<float>& vae_weights,
                            const VaeConfig& vae_cfg, double latent_scale) {
  return scale_tensor(encode_frames(frames, vae_weights, vae_cfg), latent_scale);
}

TensorF decode_latents(const TensorF& latents, const ParamStore<float>& vae_weights,
                       const VaeConfig& vae_cfg, double latent_scale, bool video_decoder) {
  TensorF raw = scale_tensor(latents, 1.0 / latent_scale);
  return video_decoder ? decode_frames_video(raw, vae_weights, vae_cfg)
                       : decode_frames_independent(raw, vae_weights, vae_cfg);
}

double compute_latent_scale(const Corpus& corpus, const ParamStore<float>& vae_weights,
                            const VaeConfig& vae_cfg, int max_clips) {
  double sum = 0.0, sum2 = 0.0;
  int64_t n = 0;
  const int clips = std::min<int>(max_clips, static_cast<int>(corpus.clips.size()));
  for (int i = 0; i < clips; ++i) {
    TensorF z = encode_frames(corpus.clip(i), vae_weights, vae_cfg);
    for (int64_t j = 0; j < z.numel(); ++j) {
      sum += z[j];
      sum2 += static_cast<double>(z[j]) * z[j];
    }
    n += z.numel();
  }
  if (n == 0) return 1.0;
  const double var = sum2 / static_cast<double>(n) - (sum / n) * (sum / n);
  const double std = std::sqrt(std::max(var, 1e-12));
  return 1.0 / std::max(std, 1e-6);
}

VaeTrainResult train_vae(const Corpus& corpus, const TrainConfig& cfg, const VaeConfig& vae_cfg,
                         bool video_mode, const ParamStore<float>* init) {
  cfg.validate();
  vae_cfg.validate();
  VaeTrainResult res;
  res.weights = init ? *init : build_vae_weights<float>(vae_cfg, cfg.seed);
  SgdOptimizer opt(res.weights, cfg);
  Rng rng(splitmix64(cfg.seed ^ 0x766165ULL));
  ClipCache cache(corpus);
  const int frames_per_window = 8;  // video-mode window length

  for (int step = 1; step <= cfg.steps; ++step) {
    VarMap<float> vm = VarMap<float>::from(res.weights, true);
    Var<float> total;
    const int batch = video_mode ? std::max(1, cfg.batch_size / 4) : cfg.batch_size;
    for (int b = 0; b < batch; ++b) {
      const int ci = static_cast<int>(rng.uniform_int(static_cast<int64_t>(corpus.clips.size())));
      const TensorF& clip = cache.get(ci);
      TensorF x;
      if (video_mode) {
        const int f = std::min(frames_per_window, clip.dim(0));
        const int start = static_cast<int>(rng.uniform_int(clip.dim(0) - f + 1));
        x = TensorF({f, 3, clip.dim(2), clip.dim(3)});
        const int64_t fsz = x.numel() / f;
        std::copy(clip.data() + start * fsz, clip.data() + (start + f) * fsz, x.data());
      } else {
        const int fi = static_cast<int>(rng.uniform_int(clip.dim(0)));
        x = TensorF({1, 3, clip.dim(2), clip.dim(3)});
        std::copy(clip.data() + fi * x.numel(), clip.data() + (fi + 1) * x.numel(), x.data());
      }
      auto [mu, logvar] = encode_frames_dist(Var<float>::constant(x), vm, vae_cfg);
      TensorF noise = rng.gaussian_tensor<float>(mu.value().shape());
      Var<float> z = add(mu, mul(vexp(scale(logvar, 0.5f)), Var<float>::constant(noise)));
      Var<float> recon = decode_frames_impl(z, vm, vae_cfg, video_mode);
      Var<float> loss = vae_training_loss(x, recon, mu, logvar, static_cast<float>(cfg.beta_kl)).total;
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0f / static_cast<float>(batch));
    const double loss_val = total.value()[0];
    check_finite_loss(loss_val, step);
    backward(total);
    opt.apply(res.weights, vm);
    if (step == 1 || step % cfg.log_interval == 0 || step == cfg.steps) res.trace.log(step, loss_val);
  }
  res.latent_scale = compute_latent_scale(corpus, res.weights, vae_cfg);
  return res;
}

namespace {

struct DiffusionBatchItem {
  TensorF z0;
  TensorF eps;
  int t = 1;
  double nu = 0.0;
  ConditionEmbedding<float> cond;
};

Var<float> diffusion_loss(const DiffusionBatchItem& item, VarMap<float>& vm, const UNetConfig& cfg,
                          const NoiseSchedule& sched, PredictionTarget target) {
  TensorF zt = forward_diffuse(item.z0, item.t, item.eps, sched);
  Var<float> cond = Var<float>::constant(item.cond.tokens);
  Var<float> pred = denoise_predict(Var<float>::constant(zt), item.t, cond, item.nu, vm, cfg);
  const TensorF& ref = (target == PredictionTarget::kEpsilon) ? item.eps : item.z0;
  return mse_to(pred, ref);
}

}  // namespace

DiffusionTrainResult train_keyframe(const Corpus& corpus, const TrainConfig& cfg,
                                    const UNetConfig& unet_cfg, const NoiseSchedule& sched,
                                    const ParamStore<float>& vae_weights, const VaeConfig& vae_cfg,
                                    double latent_scale, CondMode mode, const ParamStore<float>* init) {
  cfg.validate();
  unet_cfg.validate();
  if (cfg.prediction_target != unet_cfg.prediction_target) {
    throw std::invalid_argument("train_keyframe: prediction target differs between train and model config");
  }
  DiffusionTrainResult res;
  res.weights = init ? *init : build_denoiser_weights<float>(unet_cfg, cfg.seed);
  SgdOptimizer opt(res.weights, cfg);
  Rng rng(splitmix64(cfg.seed ^ 0x6b657966ULL));
  ClipCache cache(corpus);
  const std::vector<int> lens = default_window_lengths();

  for (int step = 1; step <= cfg.steps; ++step) {
    VarMap<float> vm = VarMap<float>::from(res.weights, true);
    Var<float> total;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int ci = static_cast<int>(rng.uniform_int(static_cast<int64_t>(corpus.clips.size())));
      const ClipParams& params = corpus.clips[static_cast<size_t>(ci)];
      const TensorF& clip = cache.get(ci);

      DiffusionBatchItem item;
      if (unet_cfg.frames == 1) {
        // image-mode pretraining: single frames, nu folds to the clip rate
        const int fi = static_cast<int>(rng.uniform_int(clip.dim(0)));
        TensorF frame({1, 3, clip.dim(2), clip.dim(3)});
        std::copy(clip.data() + fi * frame.numel(), clip.data() + (fi + 1) * frame.numel(), frame.data());
        item.z0 = encode_clip_latents(frame, vae_weights, vae_cfg, latent_scale);
        item.nu = params.fps;
        item.cond = (mode == CondMode::kTextProxy)
                        ? encode_condition_text(params, unet_cfg.cond_width, cfg.cond_tokens)
                        : encode_condition_unsupervised(frame, unet_cfg.cond_width, cfg.cond_tokens,
                                                        rng.next_u64());
      } else {
        const int ls = pick_window_len(lens, clip.dim(0), rng);
        TrainingWindow w = sample_training_window(clip, params.fps, ls, rng);
        item.z0 = encode_clip_latents(w.frames, vae_weights, vae_cfg, latent_scale);
        item.nu = w.nu;
        item.cond = (mode == CondMode::kTextProxy)
                        ? encode_condition_text(params, unet_cfg.cond_width, cfg.cond_tokens)
                        : encode_condition_unsupervised(w.frames, unet_cfg.cond_width, cfg.cond_tokens,
                                                        rng.next_u64());
      }
      item.t = 1 + static_cast<int>(rng.uniform_int(sched.T));
      item.eps = rng.gaussian_tensor<float>(item.z0.shape());

      Var<float> loss = diffusion_loss(item, vm, unet_cfg, sched, cfg.prediction_target);
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
    const double loss_val = total.value()[0];
    check_finite_loss(loss_val, step);
    backward(total);
    opt.apply(res.weights, vm);
    if (step == 1 || step % cfg.log_interval == 0 || step == cfg.steps) res.trace.log(step, loss_val);
  }
  if (opt.has_ema()) res.ema_weights = opt.ema();
  return res;
}

DiffusionTrainResult train_interp(const Corpus& corpus, const TrainConfig& cfg,
                                  const UNetConfig& key_cfg, const NoiseSchedule& sched,
                                  const ParamStore<float>& vae_weights, const VaeConfig& vae_cfg,
                                  double latent_scale, const ParamStore<float>& key_weights) {
  cfg.validate();
  if (cfg.prediction_target != key_cfg.prediction_target) {
    throw std::invalid_argument("train_interp: prediction target differs between train and model config");
  }
  const UNetConfig interp_cfg = interp_config_from_keyframe(key_cfg);
  DiffusionTrainResult res;
  res.weights = init_interp_from_keyframe(key_weights, key_cfg);
  SgdOptimizer opt(res.weights, cfg);
  Rng rng(splitmix64(cfg.seed ^ 0x696e7470ULL));
  ClipCache cache(corpus);
  const int mids = 3;

  for (int step = 1; step <= cfg.steps; ++step) {
    VarMap<float> vm = VarMap<float>::from(res.weights, true);
    Var<float> total;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int ci = static_cast<int>(rng.uniform_int(static_cast<int64_t>(corpus.clips.size())));
      const ClipParams& params = corpus.clips[static_cast<size_t>(ci)];
      const TensorF& clip = cache.get(ci);
      if (clip.dim(0) < mids + 2) throw std::invalid_argument("train_interp: clips too short");
      const int start = static_cast<int>(rng.uniform_int(clip.dim(0) - (mids + 1)));

      // five consecutive frames: k0, three mids, k1
      TensorF stack({mids + 2, 3, clip.dim(2), clip.dim(3)});
      const int64_t fsz = stack.numel() / (mids + 2);
      std::copy(clip.data() + start * fsz, clip.data() + (start + mids + 2) * fsz, stack.data());
      TensorF lat = encode_clip_latents(stack, vae_weights, vae_cfg, latent_scale);

      const int64_t zsz = lat.numel() / (mids + 2);
      TensorF prev({lat.dim(1), lat.dim(2), lat.dim(3)});
      TensorF next(prev.shape());
      std::copy(lat.data(), lat.data() + zsz, prev.data());
      std::copy(lat.data() + (mids + 1) * zsz, lat.data() + (mids + 2) * zsz, next.data());
      TensorF z0({mids, lat.dim(1), lat.dim(2), lat.dim(3)});
      std::copy(lat.data() + zsz, lat.data() + (mids + 1) * zsz, z0.data());

      // adjacent-frame proxies: one embedding per conditioning frame
      TensorF k0({1, 3, clip.dim(2), clip.dim(3)});
      TensorF k1(k0.shape());
      std::copy(stack.data(), stack.data() + fsz, k0.data());
      std::copy(stack.data() + (mids + 1) * fsz, stack.data() + (mids + 2) * fsz, k1.data());
      ConditionEmbedding<float> cond;
      {
        ConditionEmbedding<float> a =
            encode_condition_unsupervised(k0, key_cfg.cond_width, cfg.cond_tokens, 0);
        ConditionEmbedding<float> bb =
            encode_condition_unsupervised(k1, key_cfg.cond_width, cfg.cond_tokens, 0);
        cond.tokens = TensorF({2 * cfg.cond_tokens, key_cfg.cond_width});
        std::copy(a.tokens.data(), a.tokens.data() + a.tokens.numel(), cond.tokens.data());
        std::copy(bb.tokens.data(), bb.tokens.data() + bb.tokens.numel(),
                  cond.tokens.data() + a.tokens.numel());
        cond.source = CondSource::kFrameProxy;
      }

      InterpBatch<float> batch;
      batch.prev_latent = std::move(prev);
      batch.next_latent = std::move(next);
      const int t = 1 + static_cast<int>(rng.uniform_int(sched.T));
      TensorF eps = rng.gaussian_tensor<float>(z0.shape());
      batch.noisy_mid = forward_diffuse(z0, t, eps, sched);
      batch.cond = std::move(cond);

      Var<float> pred = interp_predict(batch, t, params.fps, vm, interp_cfg);
      const TensorF& ref = (cfg.prediction_target == PredictionTarget::kEpsilon) ? eps : z0;
      Var<float> loss = mse_to(pred, ref);
      total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
    const double loss_val = total.value()[0];
    check_finite_loss(loss_val, step);
    backward(total);
    opt.apply(res.weights, vm);
    if (step == 1 || step % cfg.log_interval == 0 || step == cfg.steps) res.trace.log(step, loss_val);
  }
  if (opt.has_ema()) res.ema_weights = opt.ema();
  return res;
}

namespace {

void check_finite_latents(const TensorF& z, int t) {
  if (!z.all_finite()) {
    throw NumericError("sampling diverged: non-finite latents at step t=" + std::to_string(t));
  }
}

}  // namespace

TensorF sample_latents(const ParamStore<float>& weights, const UNetConfig& cfg,
                       const NoiseSchedule& sched, const ConditionEmbedding<float>& cond, double nu,
                       int frames, int height, int width, const std::string& sampler, int steps,
                       uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x73616d70ULL));
  TensorF z = rng.gaussian_tensor<float>({frames, cfg.in_channels, height, width});
  if (sampler == "ddim") {
    std::vector<int> ts = ddim_timesteps(sched.T, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
      const int t = ts[i];
      const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
      TensorF pred = denoise_predict(z, t, cond, nu, weights, cfg);
      z = denoise_step_ddim(z, t, t_prev, pred, cfg.prediction_target, sched);
      check_finite_latents(z, t);
    }
  } else if (sampler == "ddpm") {
    for (int t = sched.T; t >= 1; --t) {
      TensorF pred = denoise_predict(z, t, cond, nu, weights, cfg);
      TensorF xi = rng.gaussian_tensor<float>(z.shape());
      z = denoise_step_ddpm(z, t, pred, cfg.prediction_target, sched, xi);
      check_finite_latents(z, t);
    }
  } else {
    throw std::invalid_argument("sample_latents: sampler must be ddpm or ddim");
  }
  return z;
}

TensorF sample_interp_mids(const ParamStore<float>& weights, const UNetConfig& interp_cfg,
                           const NoiseSchedule& sched, const TensorF& prev_latent,
                           const TensorF& next_latent, const ConditionEmbedding<float>& cond, double nu,
                           int mids, const std::string& sampler, int steps, uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x6d696473ULL));
  InterpBatch<float> batch;
  batch.prev_latent = prev_latent;
  batch.next_latent = next_latent;
  batch.cond = cond;
  batch.noisy_mid =
      rng.gaussian_tensor<float>({mids, prev_latent.dim(0), prev_latent.dim(1), prev_latent.dim(2)});
  auto predict = [&](int t) { return interp_predict(batch, t, nu, weights, interp_cfg); };
  if (sampler == "ddim") {
    std::vector<int> ts = ddim_timesteps(sched.T, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
      const int t = ts[i];
      const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : 0;
      TensorF pred = predict(t);
      batch.noisy_mid =
          denoise_step_ddim(batch.noisy_mid, t, t_prev, pred, interp_cfg.prediction_target, sched);
      check_finite_latents(batch.noisy_mid, t);
    }
  } else if (sampler == "ddpm") {
    for (int t = sched.T; t >= 1; --t) {
      TensorF pred = predict(t);
      TensorF xi = rng.gaussian_tensor<float>(batch.noisy_mid.shape());
      batch.noisy_mid =
          denoise_step_ddpm(batch.noisy_mid, t, pred, interp_cfg.prediction_target, sched, xi);
      check_finite_latents(batch.noisy_mid, t);
    }
  } else {
    throw std::invalid_argument("sample_interp_mids: sampler must be ddpm or ddim");
  }
  return batch.noisy_mid;
}

}  // namespace magicvid
