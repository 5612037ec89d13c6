// Command-line front end: synthetic-corpus generation, VAE / keyframe /
// interpolation training, latent sampling, interpolation, decoding to PPM
// frames, and evaluation. Every command takes --config and is re-runnable;
// with fixed seeds and --threads 1 reruns are byte-identical.
//
// Exit codes: 0 success, 2 flag/config errors, 3 I/O failures, 4 numeric
// divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "magicvid/checkpoint.hpp"
#include "magicvid/config.hpp"
#include "magicvid/errors.hpp"
#include "magicvid/eval.hpp"
#include "magicvid/parallel.hpp"
#include "magicvid/ppm.hpp"
#include "magicvid/raw_io.hpp"
#include "magicvid/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace magicvid;

namespace {

uint64_t resolve_seed(const std::optional<uint64_t>& flag_seed, uint64_t fallback) {
  if (flag_seed) return *flag_seed;
  if (const char* env = std::getenv("MAGICVID_SEED")) {
    return static_cast<uint64_t>(std::strtoull(env, nullptr, 10));
  }
  return fallback;
}

std::array<double, 2> parse_pair(const std::string& s, const char* what) {
  std::array<double, 2> out{};
  if (std::sscanf(s.c_str(), "%lf,%lf", &out[0], &out[1]) != 2) {
    throw std::invalid_argument(std::string(what) + " must be \"x,y\", got " + s);
  }
  return out;
}

std::array<double, 3> parse_triple(const std::string& s, const char* what) {
  std::array<double, 3> out{};
  if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &out[0], &out[1], &out[2]) != 3) {
    throw std::invalid_argument(std::string(what) + " must be \"r,g,b\", got " + s);
  }
  return out;
}

struct VaeBundle {
  ParamStore<float> weights;
  VaeConfig config;
  double latent_scale = 1.0;
};

VaeBundle load_vae(const std::string& dir) {
  LoadedCheckpoint lc = load_checkpoint(dir);
  if (lc.meta.value("kind", "") != "vae") throw IoError("checkpoint " + dir + " is not a vae checkpoint");
  VaeBundle b;
  b.weights = std::move(lc.params);
  b.config = vae_config_from_json(lc.meta.at("vae_config"));
  b.latent_scale = lc.meta.value("latent_scale", 1.0);
  return b;
}

struct DenoiserBundle {
  ParamStore<float> weights;
  UNetConfig config;
  NoiseSchedule schedule;
  double latent_scale = 1.0;
  json meta;
};

DenoiserBundle load_denoiser(const std::string& dir, const char* expected_kind) {
  LoadedCheckpoint lc = load_checkpoint(dir);
  if (lc.meta.value("kind", "") != expected_kind) {
    throw IoError("checkpoint " + dir + " is not a " + expected_kind + " checkpoint");
  }
  DenoiserBundle b;
  b.weights = std::move(lc.params);
  b.config = unet_config_from_json(lc.meta.at("unet_config"));
  ScheduleSpec spec = schedule_spec_from_json(lc.meta.at("schedule"));
  b.schedule = spec.build();
  b.latent_scale = lc.meta.value("latent_scale", 1.0);
  b.meta = std::move(lc.meta);
  return b;
}

void write_sidecar(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write sidecar: " + path);
  f << j.dump(1) << "\n";
}

json read_sidecar(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open sidecar: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IoError("sidecar parse error in " + path + ": " + e.what());
  }
  return j;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const std::string& out, std::optional<uint64_t> seed) {
  CorpusSpec spec = cfg.corpus;
  spec.seed = resolve_seed(seed, spec.seed);
  std::vector<ClipParams> clips = make_corpus_params(spec);
  write_corpus(out, clips, spec.height, spec.width);
  std::printf("wrote %zu clips (%dx%d, %d frames) to %s\n", clips.size(), spec.width, spec.height,
              spec.length, out.c_str());
  return 0;
}

int cmd_train_vae(const RunConfig& cfg, const std::string& corpus_dir, const std::string& out,
                  bool video_mode, const std::string& init_dir) {
  Corpus corpus = open_corpus(corpus_dir);
  std::optional<ParamStore<float>> init;
  if (!init_dir.empty()) init = load_vae(init_dir).weights;
  VaeTrainResult r =
      train_vae(corpus, cfg.train_vae, cfg.vae, video_mode || cfg.train_vae_video_mode,
                init ? &*init : nullptr);
  json meta;
  meta["kind"] = "vae";
  meta["step"] = cfg.train_vae.steps;
  meta["vae_config"] = vae_config_to_json(cfg.vae);
  meta["latent_scale"] = r.latent_scale;
  meta["video_mode"] = video_mode || cfg.train_vae_video_mode;
  save_checkpoint(r.weights, meta, out);
  r.trace.save(out + "/loss.txt");
  std::printf("vae trained: %d steps, loss %.6f -> %.6f, latent scale %.4f\n", cfg.train_vae.steps,
              r.trace.first(), r.trace.last(), r.latent_scale);
  return 0;
}

int cmd_train_keyframe(const RunConfig& cfg, const std::string& corpus_dir, const std::string& vae_dir,
                       const std::string& out, const std::string& mode_str,
                       const std::string& init_dir) {
  Corpus corpus = open_corpus(corpus_dir);
  VaeBundle vae = load_vae(vae_dir);
  CondMode mode = cond_mode_from_string(mode_str);
  NoiseSchedule sched = cfg.schedule.build();
  std::optional<ParamStore<float>> init;
  if (!init_dir.empty()) init = load_denoiser(init_dir, "keyframe").weights;
  DiffusionTrainResult r = train_keyframe(corpus, cfg.train_keyframe, cfg.unet, sched, vae.weights,
                                          vae.config, vae.latent_scale, mode, init ? &*init : nullptr);
  json meta;
  meta["kind"] = "keyframe";
  meta["step"] = cfg.train_keyframe.steps;
  meta["unet_config"] = unet_config_to_json(cfg.unet);
  meta["schedule"] = schedule_spec_to_json(cfg.schedule);
  meta["prediction_target"] = to_string(cfg.unet.prediction_target);
  meta["latent_scale"] = vae.latent_scale;
  meta["cond_mode"] = to_string(mode);
  meta["cond_tokens"] = cfg.train_keyframe.cond_tokens;
  save_checkpoint(r.weights, meta, out);
  if (r.ema_weights) save_checkpoint(*r.ema_weights, meta, out + "/ema");
  r.trace.save(out + "/loss.txt");
  std::printf("keyframe model trained: %d steps, loss %.6f -> %.6f\n", cfg.train_keyframe.steps,
              r.trace.first(), r.trace.last());
  return 0;
}

int cmd_train_interp(const RunConfig& cfg, const std::string& corpus_dir, const std::string& vae_dir,
                     const std::string& key_dir, const std::string& out) {
  Corpus corpus = open_corpus(corpus_dir);
  VaeBundle vae = load_vae(vae_dir);
  DenoiserBundle key = load_denoiser(key_dir, "keyframe");
  NoiseSchedule sched = cfg.schedule.build();
  DiffusionTrainResult r = train_interp(corpus, cfg.train_interp, key.config, sched, vae.weights,
                                        vae.config, vae.latent_scale, key.weights);
  json meta;
  meta["kind"] = "interp";
  meta["step"] = cfg.train_interp.steps;
  meta["unet_config"] = unet_config_to_json(interp_config_from_keyframe(key.config));
  meta["key_config"] = unet_config_to_json(key.config);
  meta["schedule"] = key.meta.at("schedule");
  meta["prediction_target"] = to_string(key.config.prediction_target);
  meta["latent_scale"] = vae.latent_scale;
  meta["cond_tokens"] = cfg.train_interp.cond_tokens;
  meta["mid_frames"] = cfg.interp.mid_frames;
  save_checkpoint(r.weights, meta, out);
  r.trace.save(out + "/loss.txt");
  std::printf("interpolation model trained: %d steps, loss %.6f -> %.6f\n", cfg.train_interp.steps,
              r.trace.first(), r.trace.last());
  return 0;
}

int cmd_sample(const RunConfig& cfg, const std::string& ckpt, const std::string& out,
               std::optional<uint64_t> seed_flag, int steps, const std::string& sampler,
               const std::string& cond_kind, const std::string& cond_velocity,
               const std::string& cond_color, double fps, int frames) {
  DenoiserBundle model = load_denoiser(ckpt, "keyframe");
  const uint64_t seed = resolve_seed(seed_flag, 0);

  ClipParams cond_params;
  cond_params.kind = cond_kind;
  auto vel = parse_pair(cond_velocity, "--cond-velocity");
  cond_params.vx = vel[0];
  cond_params.vy = vel[1];
  cond_params.color = parse_triple(cond_color, "--cond-color");
  const int cond_tokens = model.meta.value("cond_tokens", cfg.sample.cond_tokens);
  ConditionEmbedding<float> cond =
      encode_condition_text(cond_params, model.config.cond_width, cond_tokens);

  const int f = frames > 0 ? frames : cfg.sample.frames;
  const int div = 1 << (model.config.levels() - 1);
  const int hw = cfg.corpus.height / cfg.vae.downsample;
  if (hw % div) throw std::invalid_argument("sample: latent size incompatible with unet levels");
  const double nu = fps > 0 ? fps : cfg.sample.fps;

  TensorF z = sample_latents(model.weights, model.config, model.schedule, cond, nu, f, hw, hw, sampler,
                             steps, seed);
  write_raw_f32(out, z);
  json side;
  side["shape"] = z.shape();
  side["seed"] = seed;
  side["sampler"] = sampler;
  side["steps"] = steps;
  side["nu"] = nu;
  side["latent_scale"] = model.latent_scale;
  side["cond"] = {{"kind", cond_params.kind},
                  {"velocity", {cond_params.vx, cond_params.vy}},
                  {"color", {cond_params.color[0], cond_params.color[1], cond_params.color[2]}}};
  write_sidecar(out + ".json", side);
  std::printf("sampled %d latent frames (%s-%d, seed %llu) to %s\n", f, sampler.c_str(), steps,
              static_cast<unsigned long long>(seed), out.c_str());
  return 0;
}

int cmd_interpolate(const RunConfig& cfg, const std::string& ckpt, const std::string& vae_dir,
                    const std::string& in, const std::string& out, std::optional<uint64_t> seed_flag,
                    int steps, const std::string& sampler) {
  DenoiserBundle model = load_denoiser(ckpt, "interp");
  VaeBundle vae = load_vae(vae_dir);
  const uint64_t seed = resolve_seed(seed_flag, 0);
  json side = read_sidecar(in + ".json");
  std::vector<int> shape = side.at("shape").get<std::vector<int>>();
  TensorF keys = read_raw_f32(in, shape);
  const int mids = model.meta.value("mid_frames", cfg.interp.mid_frames);
  const double nu = side.value("nu", cfg.sample.fps);
  const int cond_tokens = model.meta.value("cond_tokens", cfg.sample.cond_tokens);

  const int k = keys.dim(0);
  TensorF mids_all({k - 1, mids, keys.dim(1), keys.dim(2), keys.dim(3)});
  const int64_t plane = keys.numel() / k;
  for (int i = 0; i + 1 < k; ++i) {
    TensorF prev({keys.dim(1), keys.dim(2), keys.dim(3)});
    TensorF next(prev.shape());
    std::copy(keys.data() + i * plane, keys.data() + (i + 1) * plane, prev.data());
    std::copy(keys.data() + (i + 1) * plane, keys.data() + (i + 2) * plane, next.data());

    // adjacent-frame proxies from the decoded keyframe pair
    TensorF pair({2, keys.dim(1), keys.dim(2), keys.dim(3)});
    std::copy(keys.data() + i * plane, keys.data() + (i + 2) * plane, pair.data());
    TensorF rgb = decode_latents(pair, vae.weights, vae.config, model.latent_scale, false);
    TensorF prev_rgb({1, 3, rgb.dim(2), rgb.dim(3)});
    TensorF next_rgb(prev_rgb.shape());
    const int64_t rplane = rgb.numel() / 2;
    std::copy(rgb.data(), rgb.data() + rplane, prev_rgb.data());
    std::copy(rgb.data() + rplane, rgb.data() + 2 * rplane, next_rgb.data());
    ConditionEmbedding<float> ca =
        encode_condition_unsupervised(prev_rgb, model.config.cond_width, cond_tokens, 0);
    ConditionEmbedding<float> cb =
        encode_condition_unsupervised(next_rgb, model.config.cond_width, cond_tokens, 0);
    ConditionEmbedding<float> cond;
    cond.tokens = TensorF({2 * cond_tokens, model.config.cond_width});
    std::copy(ca.tokens.data(), ca.tokens.data() + ca.tokens.numel(), cond.tokens.data());
    std::copy(cb.tokens.data(), cb.tokens.data() + cb.tokens.numel(),
              cond.tokens.data() + ca.tokens.numel());
    cond.source = CondSource::kFrameProxy;

    // independent problems with deterministic per-pair seeding
    TensorF group = sample_interp_mids(model.weights, model.config, model.schedule, prev, next, cond,
                                       nu, mids, sampler, steps, splitmix64(seed ^ (0x70ULL + i)));
    std::copy(group.data(), group.data() + group.numel(),
              mids_all.data() + static_cast<int64_t>(i) * mids * plane);
  }

  TensorF full = assemble_interpolated_video(
      keys, mids_all.reshaped({k - 1, mids, keys.dim(1), keys.dim(2), keys.dim(3)}));
  write_raw_f32(out, full);
  json oside;
  oside["shape"] = full.shape();
  oside["seed"] = seed;
  oside["nu"] = nu;
  oside["latent_scale"] = model.latent_scale;
  if (side.contains("cond")) oside["cond"] = side["cond"];
  write_sidecar(out + ".json", oside);
  std::printf("interpolated %d keyframes into %d frames -> %s\n", k, full.dim(0), out.c_str());
  return 0;
}

int cmd_decode(const std::string& vae_dir, const std::string& in, const std::string& out,
               bool video_decoder, std::optional<double> scale_flag) {
  VaeBundle vae = load_vae(vae_dir);
  json side = read_sidecar(in + ".json");
  std::vector<int> shape = side.at("shape").get<std::vector<int>>();
  TensorF z = read_raw_f32(in, shape);
  const double scale = scale_flag ? *scale_flag : side.value("latent_scale", vae.latent_scale);
  TensorF rgb = decode_latents(z, vae.weights, vae.config, scale, video_decoder);

  std::error_code ec;
  fs::create_directories(out, ec);
  write_raw_f32(out + "/frames.bin", rgb);
  for (int f = 0; f < rgb.dim(0); ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "/frame_%03d.ppm", f);
    write_ppm_frame(out + name, rgb, f);
  }
  json meta;
  meta["shape"] = rgb.shape();
  meta["decoder"] = video_decoder ? "video" : "independent";
  if (side.contains("cond")) meta["cond"] = side["cond"];
  write_sidecar(out + "/meta.json", meta);
  std::printf("decoded %d frames (%s decoder) to %s\n", rgb.dim(0), video_decoder ? "video" : "independent",
              out.c_str());
  return 0;
}

int cmd_eval(const std::string& corpus_dir, const std::vector<std::string>& generated_dirs) {
  Corpus corpus = open_corpus(corpus_dir);
  std::vector<TensorF> refs;
  for (size_t i = 0; i < corpus.clips.size(); ++i) refs.push_back(corpus.clip(static_cast<int>(i)));

  std::vector<TensorF> gen;
  std::vector<std::array<double, 2>> vels;
  bool have_vels = true;
  for (const auto& dir : generated_dirs) {
    json meta = read_sidecar(dir + "/meta.json");
    std::vector<int> shape = meta.at("shape").get<std::vector<int>>();
    gen.push_back(read_raw_f32(dir + "/frames.bin", shape));
    if (meta.contains("cond") && meta["cond"].contains("velocity")) {
      auto v = meta["cond"]["velocity"].get<std::vector<double>>();
      vels.push_back({v[0], v[1]});
    } else {
      have_vels = false;
    }
  }
  EvalMetrics m = eval_metrics(gen, refs, have_vels ? vels : std::vector<std::array<double, 2>>{});
  json out;
  out["per_frame_mse"] = m.per_frame_mse;
  out["temporal_flicker"] = m.temporal_flicker;
  out["condition_agreement"] = m.condition_agreement;
  std::printf("%s\n", out.dump().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent video diffusion toolkit: synthetic data, training, sampling, decoding"};
  app.name("magicvid");
  app.require_subcommand(1);
  app.fallthrough();  // --threads may follow the subcommand
  app.get_formatter()->column_width(34);

  std::string config_path;
  int threads = 1;
  app.add_option("--threads", threads, "worker threads (1 = fully serial)")->capture_default_str();

  std::string out, corpus_dir, vae_dir, ckpt, key_dir, init_dir, in_path, mode = "text_proxy";
  std::vector<std::string> generated;
  std::optional<uint64_t> seed;
  std::optional<double> scale_flag;
  int steps = 50, frames = 0;
  double fps = 0.0;
  std::string sampler = "ddim", cond_kind = "square", cond_velocity = "1,0", cond_color = "1,1,1";
  bool video_mode = false, video_decoder = false;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration (json)")->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data", "render a synthetic moving-shape corpus");
  add_config(gen);
  gen->add_option("--out", out, "corpus output directory")->required();
  gen->add_option("--seed", seed, "override corpus seed");

  CLI::App* tvae = app.add_subcommand("train-vae", "train the frame codec");
  add_config(tvae);
  tvae->add_option("--corpus", corpus_dir, "corpus directory")->required();
  tvae->add_option("--out", out, "checkpoint output directory")->required();
  tvae->add_flag("--video-mode", video_mode, "finetune with the temporally attentive decoder");
  tvae->add_option("--init", init_dir, "initial vae checkpoint");

  CLI::App* tkey = app.add_subcommand("train-keyframe", "train the keyframe denoiser");
  add_config(tkey);
  tkey->add_option("--corpus", corpus_dir, "corpus directory")->required();
  tkey->add_option("--vae", vae_dir, "vae checkpoint")->required();
  tkey->add_option("--out", out, "checkpoint output directory")->required();
  tkey->add_option("--mode", mode, "conditioning mode: text_proxy or frame_proxy")
      ->capture_default_str();
  tkey->add_option("--init", init_dir, "initial keyframe checkpoint (finetuning)");

  CLI::App* tint = app.add_subcommand("train-interp", "train the frame interpolation denoiser");
  add_config(tint);
  tint->add_option("--corpus", corpus_dir, "corpus directory")->required();
  tint->add_option("--vae", vae_dir, "vae checkpoint")->required();
  tint->add_option("--keyframe", key_dir, "keyframe checkpoint to initialize from")->required();
  tint->add_option("--out", out, "checkpoint output directory")->required();

  CLI::App* smp = app.add_subcommand("sample", "sample keyframe latents from noise");
  add_config(smp);
  smp->add_option("--ckpt", ckpt, "keyframe checkpoint")->required();
  smp->add_option("--out", out, "latent output file")->required();
  smp->add_option("--seed", seed, "sampling seed (falls back to MAGICVID_SEED)");
  smp->add_option("--steps", steps, "denoising steps")->capture_default_str();
  smp->add_option("--sampler", sampler, "ddpm or ddim")
      ->check(CLI::IsMember({"ddpm", "ddim"}))
      ->capture_default_str();
  smp->add_option("--cond-kind", cond_kind, "conditioned shape kind")->capture_default_str();
  smp->add_option("--cond-velocity", cond_velocity, "conditioned velocity \"vx,vy\"")
      ->capture_default_str();
  smp->add_option("--cond-color", cond_color, "conditioned color \"r,g,b\"")->capture_default_str();
  smp->add_option("--fps", fps, "frames-per-second conditioning (default from config)");
  smp->add_option("--frames", frames, "keyframe count (default from config)");

  CLI::App* itp = app.add_subcommand("interpolate", "insert mid-frames between adjacent keyframes");
  add_config(itp);
  itp->add_option("--ckpt", ckpt, "interpolation checkpoint")->required();
  itp->add_option("--vae", vae_dir, "vae checkpoint (for conditioning embeddings)")->required();
  itp->add_option("--in", in_path, "keyframe latent file")->required();
  itp->add_option("--out", out, "interpolated latent output file")->required();
  itp->add_option("--seed", seed, "sampling seed (falls back to MAGICVID_SEED)");
  itp->add_option("--steps", steps, "denoising steps")->capture_default_str();
  itp->add_option("--sampler", sampler, "ddpm or ddim")
      ->check(CLI::IsMember({"ddpm", "ddim"}))
      ->capture_default_str();

  CLI::App* dec = app.add_subcommand("decode", "decode latents to PPM frames");
  add_config(dec);
  dec->add_option("--vae", vae_dir, "vae checkpoint")->required();
  dec->add_option("--in", in_path, "latent file")->required();
  dec->add_option("--out", out, "output directory")->required();
  dec->add_flag("--video-decoder", video_decoder, "use the temporally attentive decoder");
  dec->add_option("--latent-scale", scale_flag, "override the stored latent scale");

  CLI::App* evl = app.add_subcommand("eval", "score decoded clips against a reference corpus");
  add_config(evl);
  evl->add_option("--corpus", corpus_dir, "reference corpus directory")->required();
  evl->add_option("--generated", generated, "decoded clip directories")->required()->expected(-1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    set_num_threads(threads > 1 ? threads : cfg.threads);

    if (gen->parsed()) return cmd_gen_data(cfg, out, seed);
    if (tvae->parsed()) return cmd_train_vae(cfg, corpus_dir, out, video_mode, init_dir);
    if (tkey->parsed()) return cmd_train_keyframe(cfg, corpus_dir, vae_dir, out, mode, init_dir);
    if (tint->parsed()) return cmd_train_interp(cfg, corpus_dir, vae_dir, key_dir, out);
    if (smp->parsed()) {
      return cmd_sample(cfg, ckpt, out, seed, steps, sampler, cond_kind, cond_velocity, cond_color,
                        fps, frames);
    }
    if (itp->parsed()) return cmd_interpolate(cfg, ckpt, vae_dir, in_path, out, seed, steps, sampler);
    if (dec->parsed()) return cmd_decode(vae_dir, in_path, out, video_decoder, scale_flag);
    if (evl->parsed()) return cmd_eval(corpus_dir, generated);
    std::cerr << "error: no command\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
