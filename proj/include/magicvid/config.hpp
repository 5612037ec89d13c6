#pragma once

#include <string>

#include "json.hpp"
#include "magicvid/data.hpp"
#include "magicvid/schedule.hpp"
#include "magicvid/train.hpp"
#include "magicvid/unet.hpp"
#include "magicvid/vae.hpp"

namespace magicvid {

struct ScheduleSpec {
  int T = 50;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule build() const { return build_schedule(T, beta_start, beta_end); }
};

struct SampleSpec {
  int frames = 16;
  int steps = 50;
  std::string sampler = "ddim";
  double fps = 30.0;
  int cond_tokens = 2;
};

struct InterpSpec {
  int mid_frames = 3;
};

// The structured configuration document every command reads. Unknown keys
// anywhere in the file are rejected.
struct RunConfig {
  int threads = 1;
  CorpusSpec corpus;
  std::string corpus_dir = "corpus";
  VaeConfig vae;
  UNetConfig unet;
  ScheduleSpec schedule;
  TrainConfig train_vae;
  bool train_vae_video_mode = false;
  TrainConfig train_keyframe;
  TrainConfig train_interp;
  SampleSpec sample;
  InterpSpec interp;
};

RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json(const nlohmann::json& j);

nlohmann::json unet_config_to_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const nlohmann::json& j);
nlohmann::json vae_config_to_json(const VaeConfig& cfg);
VaeConfig vae_config_from_json(const nlohmann::json& j);
nlohmann::json schedule_spec_to_json(const ScheduleSpec& s);
ScheduleSpec schedule_spec_from_json(const nlohmann::json& j);

}  // namespace magicvid
