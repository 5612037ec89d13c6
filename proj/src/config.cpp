#include "magicvid/config.hpp"

#include <fstream>
#include <set>

#include "magicvid/errors.hpp"

using nlohmann::json;

namespace magicvid {

namespace {

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

TrainConfig train_config_from_json(const json& j, const std::string& where,
                                   PredictionTarget default_target) {
  check_keys(j, where,
             {"lr", "momentum", "batch_size", "steps", "seed", "optimizer", "prediction_target",
              "ema_decay", "log_interval", "beta_kl", "cond_tokens"});
  TrainConfig cfg;
  cfg.prediction_target = default_target;
  read(j, "optimizer", cfg.optimizer);
  read(j, "lr", cfg.lr);
  read(j, "momentum", cfg.momentum);
  read(j, "batch_size", cfg.batch_size);
  read(j, "steps", cfg.steps);
  read(j, "seed", cfg.seed);
  read(j, "ema_decay", cfg.ema_decay);
  read(j, "log_interval", cfg.log_interval);
  read(j, "beta_kl", cfg.beta_kl);
  read(j, "cond_tokens", cfg.cond_tokens);
  if (j.contains("prediction_target")) {
    cfg.prediction_target = prediction_target_from_string(j.at("prediction_target").get<std::string>());
  }
  return cfg;
}

CorpusSpec corpus_spec_from_json(const json& j) {
  check_keys(j, "corpus",
             {"dir", "clips", "height", "width", "length", "fps", "kinds", "colors", "velocities",
              "seed"});
  CorpusSpec spec;
  read(j, "clips", spec.clips);
  read(j, "height", spec.height);
  read(j, "width", spec.width);
  read(j, "length", spec.length);
  read(j, "fps", spec.fps);
  read(j, "seed", spec.seed);
  if (j.contains("kinds")) spec.kinds = j.at("kinds").get<std::vector<std::string>>();
  if (j.contains("colors")) spec.colors = j.at("colors").get<std::vector<std::array<double, 3>>>();
  if (j.contains("velocities")) {
    spec.velocities = j.at("velocities").get<std::vector<std::array<double, 2>>>();
  }
  return spec;
}

}  // namespace

json unet_config_to_json(const UNetConfig& cfg) {
  return json{{"in_channels", cfg.in_channels},
              {"out_channels", cfg.out_channels},
              {"base_width", cfg.base_width},
              {"channel_multipliers", cfg.channel_multipliers},
              {"frames", cfg.frames},
              {"attn_levels", cfg.attn_levels},
              {"heads", cfg.heads},
              {"cond_width", cfg.cond_width},
              {"emb_width", cfg.emb_width},
              {"temporal", cfg.temporal},
              {"prediction_target", std::string(to_string(cfg.prediction_target))}};
}

UNetConfig unet_config_from_json(const json& j) {
  check_keys(j, "unet",
             {"in_channels", "out_channels", "base_width", "channel_multipliers", "frames",
              "attn_levels", "heads", "cond_width", "emb_width", "temporal", "prediction_target"});
  UNetConfig cfg;
  read(j, "in_channels", cfg.in_channels);
  cfg.out_channels = cfg.in_channels;
  read(j, "out_channels", cfg.out_channels);
  read(j, "base_width", cfg.base_width);
  if (j.contains("channel_multipliers")) {
    cfg.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  }
  read(j, "frames", cfg.frames);
  if (j.contains("attn_levels")) cfg.attn_levels = j.at("attn_levels").get<std::vector<int>>();
  read(j, "heads", cfg.heads);
  read(j, "cond_width", cfg.cond_width);
  read(j, "emb_width", cfg.emb_width);
  read(j, "temporal", cfg.temporal);
  if (j.contains("prediction_target")) {
    cfg.prediction_target = prediction_target_from_string(j.at("prediction_target").get<std::string>());
  }
  cfg.validate();
  return cfg;
}

json vae_config_to_json(const VaeConfig& cfg) {
  return json{{"base_width", cfg.base_width},
              {"latent_channels", cfg.latent_channels},
              {"downsample", cfg.downsample},
              {"temporal_heads", cfg.temporal_heads}};
}

VaeConfig vae_config_from_json(const json& j) {
  check_keys(j, "vae", {"base_width", "latent_channels", "downsample", "temporal_heads"});
  VaeConfig cfg;
  read(j, "base_width", cfg.base_width);
  read(j, "latent_channels", cfg.latent_channels);
  read(j, "downsample", cfg.downsample);
  read(j, "temporal_heads", cfg.temporal_heads);
  cfg.validate();
  return cfg;
}

json schedule_spec_to_json(const ScheduleSpec& s) {
  return json{{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

ScheduleSpec schedule_spec_from_json(const json& j) {
  check_keys(j, "schedule", {"T", "beta_start", "beta_end"});
  ScheduleSpec s;
  read(j, "T", s.T);
  read(j, "beta_start", s.beta_start);
  read(j, "beta_end", s.beta_end);
  return s;
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, "config root",
             {"threads", "corpus", "vae", "unet", "schedule", "train_vae", "train_vae_video_mode",
              "train_keyframe", "train_interp", "sample", "interp"});
  RunConfig cfg;
  read(j, "threads", cfg.threads);
  if (cfg.threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (j.contains("corpus")) {
    cfg.corpus = corpus_spec_from_json(j.at("corpus"));
    if (j.at("corpus").contains("dir")) cfg.corpus_dir = j.at("corpus").at("dir").get<std::string>();
  }
  if (j.contains("vae")) cfg.vae = vae_config_from_json(j.at("vae"));
  if (j.contains("unet")) cfg.unet = unet_config_from_json(j.at("unet"));
  if (j.contains("schedule")) cfg.schedule = schedule_spec_from_json(j.at("schedule"));
  // train sections inherit the model's prediction target unless set explicitly
  if (j.contains("train_vae")) {
    cfg.train_vae = train_config_from_json(j.at("train_vae"), "train_vae", cfg.unet.prediction_target);
  }
  read(j, "train_vae_video_mode", cfg.train_vae_video_mode);
  if (j.contains("train_keyframe")) {
    cfg.train_keyframe =
        train_config_from_json(j.at("train_keyframe"), "train_keyframe", cfg.unet.prediction_target);
  }
  if (j.contains("train_interp")) {
    cfg.train_interp =
        train_config_from_json(j.at("train_interp"), "train_interp", cfg.unet.prediction_target);
  }
  if (j.contains("sample")) {
    check_keys(j.at("sample"), "sample", {"frames", "steps", "sampler", "fps", "cond_tokens"});
    read(j.at("sample"), "frames", cfg.sample.frames);
    read(j.at("sample"), "steps", cfg.sample.steps);
    read(j.at("sample"), "sampler", cfg.sample.sampler);
    read(j.at("sample"), "fps", cfg.sample.fps);
    read(j.at("sample"), "cond_tokens", cfg.sample.cond_tokens);
  }
  if (j.contains("interp")) {
    check_keys(j.at("interp"), "interp", {"mid_frames"});
    read(j.at("interp"), "mid_frames", cfg.interp.mid_frames);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace magicvid
