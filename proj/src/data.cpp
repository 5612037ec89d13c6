#include "magicvid/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "magicvid/errors.hpp"
#include "magicvid/raw_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace magicvid {

namespace {

constexpr uint64_t kEmbedderSeed = 0x6672616d6570726fULL;  // frozen projection stream

// Triangle-wave fold of v into [lo, hi]; models reflection at the bounds.
double fold(double v, double lo, double hi) {
  if (hi <= lo) return lo;
  const double span = hi - lo;
  double u = std::fmod(v - lo, 2.0 * span);
  if (u < 0) u += 2.0 * span;
  return lo + (u <= span ? u : 2.0 * span - u);
}

void validate_params(const ClipParams& p, int height, int width) {
  if (p.kind != "square" && p.kind != "circle") {
    throw std::invalid_argument("clip params: unknown kind '" + p.kind + "'");
  }
  for (double c : p.color) {
    if (c < 0.0 || c > 1.0) throw std::invalid_argument("clip params: color outside [0,1]");
  }
  if (!(p.fps > 0.0)) throw std::invalid_argument("clip params: fps must be positive");
  if (p.length < 16) throw std::invalid_argument("clip params: length must be >= 16");
  if (height < 8 || width < 8) throw std::invalid_argument("clip params: frame too small");
}

}  // namespace

TensorF generate_clip(const ClipParams& p, int height, int width) {
  validate_params(p, height, width);
  const int side = std::max(2, height / 4);
  TensorF clip({p.length, 3, height, width});
  for (int t = 0; t < p.length; ++t) {
    const double bx = fold(p.x0 + p.vx * t, 0.0, static_cast<double>(width - side));
    const double by = fold(p.y0 + p.vy * t, 0.0, static_cast<double>(height - side));
    const int xs = static_cast<int>(std::floor(bx + 0.5));
    const int ys = static_cast<int>(std::floor(by + 0.5));
    if (p.kind == "square") {
      for (int y = ys; y < ys + side && y < height; ++y) {
        if (y < 0) continue;
        for (int x = xs; x < xs + side && x < width; ++x) {
          if (x < 0) continue;
          for (int c = 0; c < 3; ++c) clip.at(t, c, y, x) = static_cast<float>(p.color[static_cast<size_t>(c)]);
        }
      }
    } else {
      const double r = side / 2.0;
      const double cx = xs + r, cy = ys + r;
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
          if (dx * dx + dy * dy <= r * r) {
            for (int c = 0; c < 3; ++c) clip.at(t, c, y, x) = static_cast<float>(p.color[static_cast<size_t>(c)]);
          }
        }
      }
    }
  }
  return clip;
}

std::pair<double, double> frame_centroid(const TensorF& clip, int frame) {
  const int h = clip.dim(2), w = clip.dim(3);
  double mass = 0, mx = 0, my = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double lum = 0;
      for (int c = 0; c < 3; ++c) lum += clip.at(frame, c, y, x);
      mass += lum;
      mx += lum * x;
      my += lum * y;
    }
  }
  if (mass <= 0) return {w / 2.0, h / 2.0};
  return {mx / mass, my / mass};
}

TrainingWindow sample_training_window(const TensorF& clip, double fps, int window_len, Rng& rng) {
  const int total = clip.dim(0);
  if (window_len < 16 || window_len > total) {
    throw std::invalid_argument("training window: need 16 <= L_s <= clip length (L_s=" +
                                std::to_string(window_len) + ", length=" + std::to_string(total) + ")");
  }
  TrainingWindow w;
  w.window_len = window_len;
  w.window_start = static_cast<int>(rng.uniform_int(total - window_len + 1));
  w.nu = 16.0 / static_cast<double>(window_len) * fps;
  const int c = clip.dim(1), h = clip.dim(2), wd = clip.dim(3);
  w.frames = TensorF({16, c, h, wd});
  const int64_t fsz = static_cast<int64_t>(c) * h * wd;
  for (int k = 0; k < 16; ++k) {
    const int src = w.window_start + (k * window_len) / 16;
    std::copy(clip.data() + src * fsz, clip.data() + (src + 1) * fsz, w.frames.data() + k * fsz);
  }
  return w;
}

std::vector<int> default_window_lengths() { return {16, 24, 32, 48}; }

ConditionEmbedding<float> encode_condition_text(const ClipParams& p, int width_d, int tokens_l) {
  auto sign3 = [](double v) { return v > 1e-9 ? 1 : (v < -1e-9 ? -1 : 0); };
  uint64_t h = 0x746578745f636f6eULL;
  h = hash_combine(h, p.kind == "square" ? 1 : 2);
  for (double c : p.color) h = hash_combine(h, static_cast<uint64_t>(std::lround(c * 255.0)));
  h = hash_combine(h, static_cast<uint64_t>(sign3(p.vx) + 2));
  h = hash_combine(h, static_cast<uint64_t>(sign3(p.vy) + 2));
  Rng rng(h);
  ConditionEmbedding<float> e;
  e.tokens = rng.gaussian_tensor<float>({tokens_l, width_d}, 1.0 / std::sqrt(static_cast<double>(width_d)));
  e.source = CondSource::kTextProxy;
  return e;
}

ConditionEmbedding<float> encode_condition_unsupervised(const TensorF& frames, int width_d,
                                                        int tokens_l, uint64_t seed) {
  if (frames.rank() != 4 || frames.dim(0) < 1) {
    throw std::invalid_argument("frame-proxy embedding: need at least one [3,H,W] frame");
  }
  const int f = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
  Rng pick(splitmix64(seed ^ 0x70726f7879ULL));
  const int idx = static_cast<int>(pick.uniform_int(f));

  // 4x4 grid of per-channel patch means plus per-channel stddev: 51 features
  constexpr int kGrid = 4;
  std::vector<double> phi;
  phi.reserve(3 * kGrid * kGrid + 3);
  for (int c = 0; c < 3; ++c) {
    for (int gy = 0; gy < kGrid; ++gy) {
      for (int gx = 0; gx < kGrid; ++gx) {
        const int y0 = gy * h / kGrid, y1 = (gy + 1) * h / kGrid;
        const int x0 = gx * w / kGrid, x1 = (gx + 1) * w / kGrid;
        double acc = 0;
        int count = 0;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) {
            acc += frames.at(idx, c, y, x);
            ++count;
          }
        }
        phi.push_back(count ? acc / count : 0.0);
      }
    }
  }
  for (int c = 0; c < 3; ++c) {
    double mean = 0, mean2 = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = frames.at(idx, c, y, x);
        mean += v;
        mean2 += v * v;
      }
    }
    mean /= h * w;
    mean2 /= h * w;
    phi.push_back(std::sqrt(std::max(0.0, mean2 - mean * mean)));
  }

  // frozen projection + bias
  const int nfeat = static_cast<int>(phi.size());
  Rng proj(kEmbedderSeed);
  ConditionEmbedding<float> e;
  e.tokens = TensorF({tokens_l, width_d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(nfeat));
  for (int64_t i = 0; i < e.tokens.numel(); ++i) {
    double acc = 0;
    for (int j = 0; j < nfeat; ++j) acc += proj.gaussian() * phi[static_cast<size_t>(j)];
    double bias = proj.gaussian();
    e.tokens[i] = static_cast<float>(acc * scale + bias);
  }
  e.source = CondSource::kFrameProxy;
  return e;
}

std::vector<ClipParams> make_corpus_params(const CorpusSpec& spec) {
  if (spec.clips < 1 || spec.kinds.empty() || spec.colors.empty() || spec.velocities.empty()) {
    throw std::invalid_argument("corpus spec: empty choice lists");
  }
  std::vector<ClipParams> out;
  out.reserve(static_cast<size_t>(spec.clips));
  const int side = std::max(2, spec.height / 4);
  for (int i = 0; i < spec.clips; ++i) {
    Rng rng(splitmix64(spec.seed ^ (0x636c6970ULL + static_cast<uint64_t>(i) * 0x9e37ULL)));
    ClipParams p;
    p.kind = spec.kinds[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(spec.kinds.size())))];
    p.color = spec.colors[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(spec.colors.size())))];
    auto v = spec.velocities[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(spec.velocities.size())))];
    p.vx = v[0];
    p.vy = v[1];
    p.x0 = std::floor(rng.uniform() * (spec.width - side));
    p.y0 = std::floor(rng.uniform() * (spec.height - side));
    p.fps = spec.fps;
    p.length = spec.length;
    p.seed = splitmix64(spec.seed ^ static_cast<uint64_t>(i));
    out.push_back(p);
  }
  return out;
}

std::string clip_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%05d.bin", index);
  return buf;
}

namespace {

json params_to_json(const ClipParams& p) {
  return json{{"kind", p.kind},
              {"color", {p.color[0], p.color[1], p.color[2]}},
              {"velocity", {p.vx, p.vy}},
              {"start", {p.x0, p.y0}},
              {"fps", p.fps},
              {"length", p.length},
              {"seed", p.seed}};
}

ClipParams params_from_json(const json& j) {
  ClipParams p;
  p.kind = j.at("kind").get<std::string>();
  auto col = j.at("color");
  p.color = {col.at(0).get<double>(), col.at(1).get<double>(), col.at(2).get<double>()};
  auto vel = j.at("velocity");
  p.vx = vel.at(0).get<double>();
  p.vy = vel.at(1).get<double>();
  auto st = j.at("start");
  p.x0 = st.at(0).get<double>();
  p.y0 = st.at(1).get<double>();
  p.fps = j.at("fps").get<double>();
  p.length = j.at("length").get<int>();
  p.seed = j.at("seed").get<uint64_t>();
  return p;
}

}  // namespace

void write_corpus(const std::string& dir, const std::vector<ClipParams>& clips, int height, int width) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  json manifest = json::array();
  for (const auto& p : clips) manifest.push_back(params_to_json(p));
  {
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write manifest: " + dir);
    f << manifest.dump(1) << "\n";
  }
  for (size_t i = 0; i < clips.size(); ++i) {
    TensorF clip = generate_clip(clips[i], height, width);
    write_raw_f32(dir + "/" + clip_filename(static_cast<int>(i)), clip);
  }
}

Corpus open_corpus(const std::string& dir) {
  Corpus c;
  c.dir = dir;
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw IoError("cannot open corpus manifest: " + dir + "/manifest.json");
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw IoError("corpus manifest parse error: " + std::string(e.what()));
  }
  if (!manifest.is_array() || manifest.empty()) throw IoError("corpus manifest must be a non-empty array");
  for (const auto& j : manifest) c.clips.push_back(params_from_json(j));

  // infer square resolution from the first clip file
  const int64_t count = raw_f32_count(dir + "/" + clip_filename(0));
  const int64_t per_frame = count / (3 * c.clips[0].length);
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(per_frame))));
  if (static_cast<int64_t>(side) * side * 3 * c.clips[0].length != count) {
    throw IoError("corpus clip size does not factor into square frames");
  }
  c.height = c.width = side;
  return c;
}

TensorF Corpus::clip(int index) const {
  if (index < 0 || index >= static_cast<int>(clips.size())) {
    throw std::out_of_range("corpus: clip index " + std::to_string(index));
  }
  return read_raw_f32(dir + "/" + clip_filename(index),
                      {clips[static_cast<size_t>(index)].length, 3, height, width});
}

}  // namespace magicvid
