#include "magicvid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "magicvid/data.hpp"

namespace magicvid {

double flicker_statistic(const TensorF& clip) {
  const int f = clip.dim(0);
  if (f < 2) return 0.0;
  const int64_t fsz = clip.numel() / f;
  double acc = 0.0;
  for (int i = 0; i + 1 < f; ++i) {
    const float* a = clip.data() + i * fsz;
    const float* b = clip.data() + (i + 1) * fsz;
    double d = 0.0;
    for (int64_t j = 0; j < fsz; ++j) {
      double diff = static_cast<double>(b[j]) - a[j];
      d += diff * diff;
    }
    acc += d / static_cast<double>(fsz);
  }
  return acc / static_cast<double>(f - 1);
}

std::pair<double, double> motion_slope(const TensorF& clip) {
  const int f = clip.dim(0);
  double sx = 0, sy = 0, st = 0, stt = 0, sxt = 0, syt = 0;
  for (int i = 0; i < f; ++i) {
    auto [cx, cy] = frame_centroid(clip, i);
    sx += cx;
    sy += cy;
    st += i;
    stt += static_cast<double>(i) * i;
    sxt += cx * i;
    syt += cy * i;
  }
  const double denom = f * stt - st * st;
  if (std::abs(denom) < 1e-12) return {0.0, 0.0};
  return {(f * sxt - st * sx) / denom, (f * syt - st * sy) / denom};
}

namespace {

// MSE over the leading min(F) frames.
double clip_mse(const TensorF& a, const TensorF& b) {
  const int f = std::min(a.dim(0), b.dim(0));
  const int64_t fsz = a.numel() / a.dim(0);
  if (fsz != b.numel() / b.dim(0)) {
    throw std::invalid_argument("eval: generated/reference frame sizes differ");
  }
  double acc = 0.0;
  for (int64_t i = 0; i < f * fsz; ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(f * fsz);
}

}  // namespace

EvalMetrics eval_metrics(const std::vector<TensorF>& generated, const std::vector<TensorF>& references,
                         const std::vector<std::array<double, 2>>& conditioned_velocities) {
  if (generated.empty() || references.empty()) {
    throw std::invalid_argument("eval_metrics: need at least one generated and one reference clip");
  }
  if (!conditioned_velocities.empty() && conditioned_velocities.size() != generated.size()) {
    throw std::invalid_argument("eval_metrics: conditioning list must align with generated clips");
  }

  EvalMetrics m;
  double mse_acc = 0.0, gen_flicker = 0.0;
  int agree = 0, judged = 0;
  for (size_t i = 0; i < generated.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& ref : references) best = std::min(best, clip_mse(generated[i], ref));
    mse_acc += best;
    gen_flicker += flicker_statistic(generated[i]);

    if (!conditioned_velocities.empty()) {
      const auto [svx, svy] = motion_slope(generated[i]);
      const double vx = conditioned_velocities[i][0], vy = conditioned_velocities[i][1];
      ++judged;
      if (std::abs(vx) >= std::abs(vy) && vx != 0.0) {
        agree += (svx * vx > 0.0) ? 1 : 0;
      } else if (vy != 0.0) {
        agree += (svy * vy > 0.0) ? 1 : 0;
      } else {
        agree += (std::abs(svx) + std::abs(svy) < 0.1) ? 1 : 0;
      }
    }
  }
  double ref_flicker = 0.0;
  for (const auto& ref : references) ref_flicker += flicker_statistic(ref);

  m.per_frame_mse = mse_acc / static_cast<double>(generated.size());
  m.temporal_flicker =
      gen_flicker / static_cast<double>(generated.size()) - ref_flicker / static_cast<double>(references.size());
  if (judged > 0) m.condition_agreement = static_cast<double>(agree) / judged;
  return m;
}

}  // namespace magicvid
