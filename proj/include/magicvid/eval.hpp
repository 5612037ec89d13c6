#pragma once

#include <array>
#include <vector>

#include "magicvid/tensor.hpp"

namespace magicvid {

struct EvalMetrics {
  double per_frame_mse = 0.0;       // vs nearest-neighbor reference
  double temporal_flicker = 0.0;    // generated flicker minus reference flicker
  double condition_agreement = -1.0;  // fraction of motion-sign matches; -1 when unknown
};

// Mean squared inter-frame difference, per element.
double flicker_statistic(const TensorF& clip);

// Least-squares slope of the brightness centroid per frame.
std::pair<double, double> motion_slope(const TensorF& clip);

// conditioned_velocities must align with `generated` when supplied; pass an
// empty vector when the generations carry no conditioning.
EvalMetrics eval_metrics(const std::vector<TensorF>& generated, const std::vector<TensorF>& references,
                         const std::vector<std::array<double, 2>>& conditioned_velocities);

}  // namespace magicvid
