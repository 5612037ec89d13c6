#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "magicvid/data.hpp"
#include "magicvid/interp.hpp"
#include "magicvid/params.hpp"
#include "magicvid/schedule.hpp"
#include "magicvid/unet.hpp"
#include "magicvid/vae.hpp"

namespace magicvid {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 4;
  int steps = 100;
  uint64_t seed = 0;
  PredictionTarget prediction_target = PredictionTarget::kEpsilon;
  std::string optimizer = "sgd";  // sgd (momentum) or adam
  double momentum = 0.9;
  double ema_decay = -1.0;  // < 0 disables EMA tracking
  int log_interval = 50;
  double beta_kl = 1e-4;
  int cond_tokens = 2;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("train config: lr must be >= 0");
    if (steps < 1) throw std::invalid_argument("train config: steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (log_interval < 1) throw std::invalid_argument("train config: log interval must be >= 1");
    if (optimizer != "sgd" && optimizer != "adam") {
      throw std::invalid_argument("train config: optimizer must be sgd or adam");
    }
  }
};

// One "step value" pair per logged step, plain text serializable.
struct LossTrace {
  std::vector<std::pair<int, double>> entries;

  void log(int step, double value) { entries.emplace_back(step, value); }
  void save(const std::string& path) const;
  double first() const { return entries.empty() ? 0.0 : entries.front().second; }
  double last() const { return entries.empty() ? 0.0 : entries.back().second; }
};

// SGD with momentum (default) or Adam; state buffers live in registration
// order as named tensors, so updates are deterministic. EMA weights tracked
// when decay >= 0.
class SgdOptimizer {
 public:
  SgdOptimizer(const ParamStore<float>& params, const TrainConfig& cfg);

  void apply(ParamStore<float>& params, VarMap<float>& grads);

  bool has_ema() const { return ema_has_; }
  const ParamStore<float>& ema() const { return ema_; }
  ParamStore<float>& velocity() { return velocity_; }

 private:
  double lr_, momentum_, ema_decay_;
  bool adam_;
  bool ema_has_;
  int64_t step_ = 0;
  ParamStore<float> velocity_;  // momentum buffer / Adam first moment
  ParamStore<float> second_;    // Adam second moment
  ParamStore<float> ema_;
};

enum class CondMode { kTextProxy, kFrameProxy };

inline const char* to_string(CondMode m) { return m == CondMode::kTextProxy ? "text_proxy" : "frame_proxy"; }
inline CondMode cond_mode_from_string(const std::string& s) {
  if (s == "text_proxy") return CondMode::kTextProxy;
  if (s == "frame_proxy") return CondMode::kFrameProxy;
  throw std::invalid_argument("unknown condition mode: " + s);
}

struct VaeTrainResult {
  ParamStore<float> weights;
  LossTrace trace;
  double latent_scale = 1.0;
};

// Standard VAE training on single frames; video_mode finetunes with the
// temporally attentive decoder over whole windows instead.
VaeTrainResult train_vae(const Corpus& corpus, const TrainConfig& cfg, const VaeConfig& vae_cfg,
                         bool video_mode = false, const ParamStore<float>* init = nullptr);

// Latent scale so diffusion sees unit-variance data: 1/std over a corpus
// latent sample.
double compute_latent_scale(const Corpus& corpus, const ParamStore<float>& vae_weights,
                            const VaeConfig& vae_cfg, int max_clips = 16);

struct DiffusionTrainResult {
  ParamStore<float> weights;
  std::optional<ParamStore<float>> ema_weights;
  LossTrace trace;
};

DiffusionTrainResult train_keyframe(const Corpus& corpus, const TrainConfig& cfg,
                                    const UNetConfig& unet_cfg, const NoiseSchedule& sched,
                                    const ParamStore<float>& vae_weights, const VaeConfig& vae_cfg,
                                    double latent_scale, CondMode mode,
                                    const ParamStore<float>* init = nullptr);

// Interpolation training; weights start from the widened keyframe model.
DiffusionTrainResult train_interp(const Corpus& corpus, const TrainConfig& cfg,
                                  const UNetConfig& key_cfg, const NoiseSchedule& sched,
                                  const ParamStore<float>& vae_weights, const VaeConfig& vae_cfg,
                                  double latent_scale, const ParamStore<float>& key_weights);

// Reverse-process sampling of keyframe latents (normalized space). sampler
// is "ddim" (deterministic) or "ddpm" (ancestral). Raises NumericError if a
// non-finite value appears.
TensorF sample_latents(const ParamStore<float>& weights, const UNetConfig& cfg,
                       const NoiseSchedule& sched, const ConditionEmbedding<float>& cond, double nu,
                       int frames, int height, int width, const std::string& sampler, int steps,
                       uint64_t seed);

// Denoise the mid-frame latents between one keyframe pair.
TensorF sample_interp_mids(const ParamStore<float>& weights, const UNetConfig& interp_cfg,
                           const NoiseSchedule& sched, const TensorF& prev_latent,
                           const TensorF& next_latent, const ConditionEmbedding<float>& cond, double nu,
                           int mids, const std::string& sampler, int steps, uint64_t seed);

// Frame-by-frame VAE encode with the normalization scale applied.
TensorF encode_clip_latents(const TensorF& frames, const ParamStore<float>& vae_weights,
                            const VaeConfig& vae_cfg, double latent_scale);

// Inverse of encode_clip_latents followed by either decoder.
TensorF decode_latents(const TensorF& latents, const ParamStore<float>& vae_weights,
                       const VaeConfig& vae_cfg, double latent_scale, bool video_decoder);

}  // namespace magicvid
