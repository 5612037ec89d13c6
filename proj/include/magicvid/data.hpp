#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "magicvid/blocks.hpp"
#include "magicvid/rng.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// One synthetic clip: a colored shape translating with reflection at the
// image bounds. The parameter record reproduces every pixel.
struct ClipParams {
  std::string kind = "square";  // square | circle
  std::array<double, 3> color = {1.0, 1.0, 1.0};
  double vx = 0.0, vy = 0.0;  // pixels per frame
  double x0 = 0.0, y0 = 0.0;  // start of the shape bounding box
  double fps = 30.0;
  int length = 16;  // total frames
  uint64_t seed = 0;
};

// Deterministic render, pixels in [0,1], [length,3,H,W].
TensorF generate_clip(const ClipParams& params, int height, int width);

// Brightness centroid of one frame; the motion oracle used by eval.
std::pair<double, double> frame_centroid(const TensorF& clip, int frame);

struct TrainingWindow {
  TensorF frames;  // [16,3,H,W]
  double nu = 0.0;
  int window_start = 0;
  int window_len = 0;
  ConditionEmbedding<float> cond;
};

// Uniform contiguous window of window_len frames, 16 frames sampled
// uniformly inside it; nu = 16/L_s * FPS.
TrainingWindow sample_training_window(const TensorF& clip, double fps, int window_len, Rng& rng);

// Window lengths the trainer draws from (clamped to the clip length).
std::vector<int> default_window_lengths();

// Frozen text-proxy embedder: the quantized (kind, color, velocity-sign)
// tuple seeds a gaussian token grid.
ConditionEmbedding<float> encode_condition_text(const ClipParams& params, int width_d, int tokens_l);

// Frozen frame-proxy embedder: pooled patch statistics of one seeded frame
// through a fixed random projection with bias.
ConditionEmbedding<float> encode_condition_unsupervised(const TensorF& frames, int width_d,
                                                        int tokens_l, uint64_t seed);

// Corpus generation recipe; clip parameters derive per-clip from the seed.
struct CorpusSpec {
  int clips = 16;
  int height = 32, width = 32;
  int length = 16;
  double fps = 30.0;
  std::vector<std::string> kinds = {"square"};
  std::vector<std::array<double, 3>> colors = {{1.0, 1.0, 1.0}};
  std::vector<std::array<double, 2>> velocities = {{1.0, 0.0}, {-1.0, 0.0}};
  uint64_t seed = 0;
};

std::vector<ClipParams> make_corpus_params(const CorpusSpec& spec);

// Directory layout: manifest.json (array of ClipParams records) plus one raw
// little-endian float32 file per clip in [F,3,H,W] order.
void write_corpus(const std::string& dir, const std::vector<ClipParams>& clips, int height, int width);

struct Corpus {
  std::string dir;
  std::vector<ClipParams> clips;
  int height = 0, width = 0;

  TensorF clip(int index) const;
};

Corpus open_corpus(const std::string& dir);

std::string clip_filename(int index);

}  // namespace magicvid
