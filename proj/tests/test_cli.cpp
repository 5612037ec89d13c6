#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

// End-to-end checks of the command-line front end, driven through the real
// binary. CLI_PATH and GOLDEN_DIR come from the build system.

namespace fs = std::filesystem;

namespace {

std::string cli() { return CLI_PATH; }

int run(const std::string& args, const std::string& log = "/dev/null") {
  std::string cmd = cli() + " " + args + " >" + log + " 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

struct Workspace {
  fs::path dir;

  Workspace() {
    dir = fs::temp_directory_path() / ("magicvid_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    std::ofstream cfg(dir / "config.json");
    cfg << R"({
  "threads": 1,
  "corpus": {
    "dir": "corpus", "clips": 6, "height": 32, "width": 32, "length": 16, "fps": 30.0,
    "kinds": ["square"], "colors": [[1,1,1]], "velocities": [[2,0],[-2,0]], "seed": 11
  },
  "vae": {"base_width": 8, "latent_channels": 4, "downsample": 4, "temporal_heads": 2},
  "unet": {"in_channels": 4, "base_width": 8, "channel_multipliers": [1,2], "frames": 16,
           "attn_levels": [1], "heads": 2, "cond_width": 8, "emb_width": 16,
           "prediction_target": "x0"},
  "schedule": {"T": 20, "beta_start": 1e-4, "beta_end": 0.05},
  "train_vae": {"lr": 0.05, "momentum": 0.9, "batch_size": 4, "steps": 40, "seed": 2,
                "log_interval": 10, "beta_kl": 1e-4},
  "train_keyframe": {"lr": 0.005, "momentum": 0.9, "batch_size": 2, "steps": 6, "seed": 3,
                     "log_interval": 2, "prediction_target": "x0"},
  "train_interp": {"lr": 0.005, "momentum": 0.9, "batch_size": 2, "steps": 3, "seed": 4,
                   "log_interval": 1},
  "sample": {"frames": 16, "steps": 5, "sampler": "ddim", "fps": 30.0},
  "interp": {"mid_frames": 3}
})";
  }

  ~Workspace() { fs::remove_all(dir); }

  std::string path(const std::string& rel) const { return (dir / rel).string(); }
  std::string config() const { return path("config.json"); }
};

}  // namespace

TEST_CASE("help output matches the golden files") {
  std::string tmp = fs::temp_directory_path() / ("magicvid_help_" + std::to_string(::getpid()));
  CHECK(run("--help", tmp) == 0);
  CHECK(slurp(tmp) == slurp(std::string(GOLDEN_DIR) + "/help.txt"));
  CHECK(run("sample --help", tmp) == 0);
  CHECK(slurp(tmp) == slurp(std::string(GOLDEN_DIR) + "/help_sample.txt"));
  fs::remove(tmp);
}

TEST_CASE("flag and input errors map to the documented exit codes") {
  Workspace ws;
  // missing required flag
  CHECK(run("gen-data --out " + ws.path("c")) == 2);
  // unknown flag
  CHECK(run("gen-data --config " + ws.config() + " --out x --bogus") == 2);
  // config with an unknown key
  std::ofstream bad(ws.path("bad.json"));
  bad << R"({"threads": 1, "unknown_section": {}})";
  bad.close();
  CHECK(run("gen-data --config " + ws.path("bad.json") + " --out " + ws.path("c")) == 2);
  // missing config file -> io failure
  CHECK(run("gen-data --config " + ws.path("missing.json") + " --out " + ws.path("c")) == 3);
  // missing corpus -> io failure
  CHECK(run("train-vae --config " + ws.config() + " --corpus " + ws.path("nope") + " --out " +
            ws.path("v")) == 3);
}

TEST_CASE("pipeline: gen-data, train, sample, interpolate, decode, eval") {
  Workspace ws;
  const std::string cfg = " --config " + ws.config();

  REQUIRE(run("gen-data" + cfg + " --out " + ws.path("corpus")) == 0);
  CHECK(fs::exists(ws.path("corpus/manifest.json")));
  CHECK(fs::exists(ws.path("corpus/clip_00005.bin")));

  REQUIRE(run("train-vae" + cfg + " --corpus " + ws.path("corpus") + " --out " + ws.path("vae")) == 0);
  CHECK(fs::exists(ws.path("vae/manifest.json")));
  CHECK(fs::exists(ws.path("vae/weights.bin")));
  CHECK(fs::exists(ws.path("vae/loss.txt")));

  REQUIRE(run("train-keyframe" + cfg + " --corpus " + ws.path("corpus") + " --vae " + ws.path("vae") +
              " --out " + ws.path("key") + " --mode text_proxy") == 0);

  // deterministic sampling: two runs, byte-identical latents
  REQUIRE(run("sample" + cfg + " --ckpt " + ws.path("key") + " --out " + ws.path("a.bin") +
              " --seed 7 --steps 5 --sampler ddim --cond-velocity 2,0") == 0);
  REQUIRE(run("sample" + cfg + " --ckpt " + ws.path("key") + " --out " + ws.path("b.bin") +
              " --seed 7 --steps 5 --sampler ddim --cond-velocity 2,0") == 0);
  CHECK(same_bytes(ws.path("a.bin"), ws.path("b.bin")));
  // a different seed changes the output
  REQUIRE(run("sample" + cfg + " --ckpt " + ws.path("key") + " --out " + ws.path("c.bin") +
              " --seed 8 --steps 5 --sampler ddim --cond-velocity 2,0") == 0);
  CHECK(!same_bytes(ws.path("a.bin"), ws.path("c.bin")));

  // MAGICVID_SEED fallback matches an explicit --seed
  ::setenv("MAGICVID_SEED", "7", 1);
  REQUIRE(run("sample" + cfg + " --ckpt " + ws.path("key") + " --out " + ws.path("env.bin") +
              " --steps 5 --sampler ddim --cond-velocity 2,0") == 0);
  ::unsetenv("MAGICVID_SEED");
  CHECK(same_bytes(ws.path("a.bin"), ws.path("env.bin")));

  REQUIRE(run("train-interp" + cfg + " --corpus " + ws.path("corpus") + " --vae " + ws.path("vae") +
              " --keyframe " + ws.path("key") + " --out " + ws.path("interp")) == 0);

  // 16 keyframes -> 61 frames
  REQUIRE(run("interpolate" + cfg + " --ckpt " + ws.path("interp") + " --vae " + ws.path("vae") +
              " --in " + ws.path("a.bin") + " --out " + ws.path("full.bin") +
              " --seed 9 --steps 3") == 0);
  const auto latent_bytes = fs::file_size(ws.path("a.bin"));
  CHECK(fs::file_size(ws.path("full.bin")) == latent_bytes / 16 * 61);

  REQUIRE(run("decode" + cfg + " --vae " + ws.path("vae") + " --in " + ws.path("a.bin") + " --out " +
              ws.path("dec")) == 0);
  int ppm_count = 0;
  for (const auto& e : fs::directory_iterator(ws.path("dec"))) {
    if (e.path().extension() == ".ppm") ++ppm_count;
  }
  CHECK(ppm_count == 16);
  CHECK(fs::exists(ws.path("dec/frames.bin")));
  // P6 header with the configured resolution
  std::string ppm = slurp(ws.path("dec/frame_000.ppm"));
  CHECK(ppm.substr(0, 9) == "P6\n32 32\n");

  // decode is deterministic and re-runnable
  REQUIRE(run("decode" + cfg + " --vae " + ws.path("vae") + " --in " + ws.path("a.bin") + " --out " +
              ws.path("dec2")) == 0);
  CHECK(same_bytes(ws.path("dec/frames.bin"), ws.path("dec2/frames.bin")));
  CHECK(same_bytes(ws.path("dec/frame_007.ppm"), ws.path("dec2/frame_007.ppm")));

  // eval prints the three metrics
  std::string eval_log = ws.path("eval.json");
  REQUIRE(run("eval" + cfg + " --corpus " + ws.path("corpus") + " --generated " + ws.path("dec"),
              eval_log) == 0);
  std::string metrics = slurp(eval_log);
  CHECK(metrics.find("per_frame_mse") != std::string::npos);
  CHECK(metrics.find("temporal_flicker") != std::string::npos);
  CHECK(metrics.find("condition_agreement") != std::string::npos);
}
